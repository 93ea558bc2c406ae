"""Visual vocabularies, the spatial Voronoi tree, and the grid baseline.

Run: python3 demos/02_partitioning.py
"""

import numpy as np

import roivlad as rv

rng = np.random.default_rng(1)

# Descriptor-space k-means gives the visual vocabulary.
points = np.vstack(
    [rng.normal(center, 0.3, (60, 8)) for center in rng.normal(0, 2, (5, 8))]
)
vocab = rv.kmeans(points, 5, seed=0)
print(f"vocabulary: {vocab.k} words of dimension {vocab.dim}")
print(f"assignment of first point -> word {rv.assign(points[0], vocab)}")

# Spatial hierarchical k-means partitions keypoint locations into a tree of
# Voronoi cells: the root is the whole image, each level splits every cell.
fs = rv.FeatureSet(
    "demo", 640, 480,
    rng.uniform([0, 0], [639, 479], (200, 2)),
    rng.normal(0, 1, (200, 8)),
)
tree = rv.spatial_hkmeans(fs, levels=3, branching=3, seed=0)
print(f"\ntree: {tree.levels} levels, branching 3 -> {tree.shape.node_count} cells")
print(f"closed form 1 + 3 + 9 = {rv.full_node_count(3, 3)}")
for level in range(tree.levels):
    sizes = [len(tree.members[s]) for s in tree.shape.level_slots(level) if tree.shape.present[s]]
    print(f"  level {level}: cells {len(sizes)}, member counts {sizes}")

# Sparse regions stop splitting early instead of producing degenerate cells.
tiny = rv.FeatureSet("tiny", 100, 100, rng.uniform(0, 99, (4, 2)), rng.normal(0, 1, (4, 8)))
tiny_tree = rv.spatial_hkmeans(tiny, 3, 3, seed=0)
print(f"\n4-point image: only {tiny_tree.shape.node_count} of 13 cells are populated")

# The grid baseline tiles the image with (l+1) x (l+1) blocks per level.
grid = rv.grid_partition(fs, 3)
print(f"\ngrid partition: {grid.block_count} blocks over 3 levels "
      f"(closed form {rv.grid_block_count(3)})")
