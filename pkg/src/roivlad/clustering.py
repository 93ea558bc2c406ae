"""K-means vocabularies, hierarchical spatial partitioning, and grid tiling."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

VOCAB_MAGIC = b"VVOC"
VOCAB_VERSION = 1

DEFAULT_KMEANS_ITERS = 25


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True, eq=False)
class Vocabulary:
    """K cluster centroids in descriptor space."""

    centroids: np.ndarray  # (K, dim) float64

    def __post_init__(self):
        c = np.ascontiguousarray(np.asarray(self.centroids, dtype=np.float64))
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError("centroids must be a nonempty (K, dim) matrix")
        if np.any(np.isnan(c)):
            raise ValueError("centroids contain NaN")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, (n, K)."""
    p2 = np.sum(points * points, axis=1, keepdims=True)
    c2 = np.sum(centroids * centroids, axis=1)
    d = p2 + c2 - 2.0 * (points @ centroids.T)
    np.maximum(d, 0.0, out=d)
    return d


def assign_batch(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest-centroid index per row; ties break to the lowest index."""
    return np.argmin(squared_distances(points, centroids), axis=1)


def assign(x: np.ndarray, vocab: Vocabulary) -> int:
    """Nearest-centroid index for one vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (vocab.dim,):
        raise ValueError(f"expected dim {vocab.dim}, got shape {x.shape}")
    return int(assign_batch(x[None, :], vocab.centroids)[0])


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[int(rng.integers(n))]
    d2 = squared_distances(points, centroids[:1])[:, 0]
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:  # all remaining points coincide with chosen seeds
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = points[idx]
        d2 = np.minimum(d2, squared_distances(points, centroids[j : j + 1])[:, 0])
    return centroids


def _repair_empty(
    points: np.ndarray, centroids: np.ndarray, labels: np.ndarray, counts: np.ndarray
) -> None:
    """Reseed each empty centroid to the point farthest from its own centroid."""
    d_own = np.sum((points - centroids[labels]) ** 2, axis=1)
    for j in np.flatnonzero(counts == 0):
        far = int(np.argmax(d_own))
        centroids[j] = points[far]
        d_own[far] = -1.0  # do not hand the same point to two empty clusters
        counts[j] = 1


def kmeans(
    points: np.ndarray,
    k: int,
    max_iters: int = DEFAULT_KMEANS_ITERS,
    seed: int | np.random.Generator = 0,
) -> Vocabulary:
    """Lloyd's algorithm from a seeded k-means++ initialization.

    Deterministic given (points, k, max_iters, seed).  Stops when no
    assignment changes or after max_iters.  Empty clusters are reseeded to
    the point farthest from its current centroid, so every centroid keeps
    at least one member.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be a 2-D matrix")
    if k < 1:
        raise ValueError("k must be >= 1")
    if pts.shape[0] < k:
        raise ValueError(f"need at least {k} rows to train {k} clusters, got {pts.shape[0]}")
    rng = _as_rng(seed)
    centroids = _kmeanspp_init(pts, k, rng)
    labels = assign_batch(pts, centroids)
    prev_obj = np.inf
    for _ in range(max_iters):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, pts)
        nonzero = counts > 0
        centroids[nonzero] = sums[nonzero] / counts[nonzero, None]
        _repair_empty(pts, centroids, labels, counts)
        new_labels = assign_batch(pts, centroids)
        obj = float(np.sum((pts - centroids[new_labels]) ** 2))
        assert obj <= prev_obj + 1e-9 * max(1.0, abs(prev_obj)), "objective increased"
        prev_obj = obj
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return Vocabulary(centroids=centroids)


def save_vocabulary(vocab: Vocabulary, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(VOCAB_MAGIC)
        fh.write(struct.pack("<HIH", VOCAB_VERSION, vocab.k, vocab.dim))
        fh.write(vocab.centroids.astype("<f4").tobytes())


def load_vocabulary(path: str | Path) -> Vocabulary:
    buf = Path(path).read_bytes()
    if buf[:4] != VOCAB_MAGIC:
        raise ValueError(f"{path}: bad vocabulary magic")
    version, k, dim = struct.unpack_from("<HIH", buf, 4)
    if version != VOCAB_VERSION:
        raise ValueError(f"{path}: unsupported vocabulary version {version}")
    need = 12 + k * dim * 4
    if len(buf) < need:
        raise ValueError(f"{path}: truncated vocabulary file")
    cents = np.frombuffer(buf, dtype="<f4", count=k * dim, offset=12).reshape(k, dim)
    return Vocabulary(centroids=cents.astype(np.float64))


# --------------------------------------------------------------------------
# Hierarchical spatial partition tree
# --------------------------------------------------------------------------


@lru_cache(maxsize=None)
def tree_geometry(branching: tuple[int, ...]) -> tuple[tuple[int, ...], tuple[int, ...], int]:
    """(level sizes, level offsets, total slots) for breadth-first storage."""
    sizes = [1]
    for v in branching:
        sizes.append(sizes[-1] * v)
    offsets = [0]
    for s in sizes:
        offsets.append(offsets[-1] + s)
    return tuple(sizes), tuple(offsets[:-1]), offsets[-1]


def full_node_count(levels: int, branching: int) -> int:
    """Cell count of a fully populated tree: 1 + sum of per-level products."""
    return sum(branching**l for l in range(levels))


@dataclass(frozen=True, eq=False)
class TreeShape:
    """Breadth-first slot layout of a partition tree plus its presence bitmap.

    Slot arithmetic assumes constant branching per level: the children of the
    j-th node of level l occupy consecutive slots at level l+1.
    """

    branching: tuple[int, ...]  # V_l for levels 1..L-1
    present: np.ndarray  # bool over all slots

    def __post_init__(self):
        p = np.asarray(self.present, dtype=bool)
        _, _, total = tree_geometry(tuple(self.branching))
        if p.shape != (total,):
            raise ValueError(f"present bitmap must have {total} entries")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "present", p)
        object.__setattr__(self, "branching", tuple(int(v) for v in self.branching))

    @property
    def levels(self) -> int:
        return len(self.branching) + 1

    @property
    def slots(self) -> int:
        return tree_geometry(self.branching)[2]

    @property
    def node_count(self) -> int:
        return int(self.present.sum())

    def level_slots(self, level: int) -> range:
        sizes, offsets, _ = tree_geometry(self.branching)
        return range(offsets[level], offsets[level] + sizes[level])

    def level_of(self, slot: int) -> int:
        sizes, offsets, total = tree_geometry(self.branching)
        for level in range(self.levels - 1, -1, -1):
            if slot >= offsets[level]:
                return level
        raise ValueError(f"slot {slot} out of range")

    def children(self, slot: int) -> range:
        sizes, offsets, _ = tree_geometry(self.branching)
        level = self.level_of(slot)
        if level >= self.levels - 1:
            return range(0)
        v = self.branching[level]
        pos = slot - offsets[level]
        start = offsets[level + 1] + pos * v
        return range(start, start + v)

    def leaf_slots(self) -> list[int]:
        """Present slots with no present children (the pruned tree's leaves)."""
        out = []
        for slot in range(self.slots):
            if not self.present[slot]:
                continue
            if not any(self.present[c] for c in self.children(slot)):
                out.append(slot)
        return out

    def same_layout(self, other: "TreeShape") -> bool:
        return self.branching == other.branching and np.array_equal(
            self.present, other.present
        )


@dataclass(eq=False)
class PartitionTree:
    """Hierarchical Voronoi partitioning of one image's keypoint locations."""

    shape: TreeShape
    centroids: np.ndarray  # (slots, 2) spatial centroids, NaN where absent
    members: list[np.ndarray]  # keypoint index arrays per slot

    @property
    def levels(self) -> int:
        return self.shape.levels

    def member_count(self, slot: int) -> int:
        return len(self.members[slot])


def spatial_hkmeans(
    fs, levels: int, branching: int, seed: int | np.random.Generator = 0
) -> PartitionTree:
    """Recursively split keypoint locations into `branching` Voronoi cells per level.

    Nodes with fewer points than the branching factor are not split; their
    descendant slots stay absent.  Deterministic given the seed.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if branching < 2:
        raise ValueError("branching must be >= 2")
    bvec = (branching,) * (levels - 1)
    sizes, offsets, total = tree_geometry(bvec)
    present = np.zeros(total, dtype=bool)
    members: list[np.ndarray] = [np.empty(0, dtype=np.int64) for _ in range(total)]
    cents = np.full((total, 2), np.nan)

    pts = fs.keypoints.astype(np.float64)
    present[0] = True
    members[0] = np.arange(fs.n, dtype=np.int64)
    cents[0] = pts.mean(axis=0) if fs.n else (fs.image_width / 2, fs.image_height / 2)

    rng = _as_rng(seed)
    for level in range(1, levels):
        v = bvec[level - 1]
        for pos, parent in enumerate(
            range(offsets[level - 1], offsets[level - 1] + sizes[level - 1])
        ):
            if not present[parent]:
                continue
            mem = members[parent]
            if len(mem) < v:
                continue  # early leaf: too few points to split
            vocab = kmeans(pts[mem], v, seed=rng)
            labels = assign_batch(pts[mem], vocab.centroids)
            for c in range(v):
                slot = offsets[level] + pos * v + c
                sub = mem[labels == c]
                present[slot] = True
                members[slot] = sub
                cents[slot] = pts[sub].mean(axis=0)
    return PartitionTree(TreeShape(bvec, present), cents, members)


# --------------------------------------------------------------------------
# Grid partition baseline
# --------------------------------------------------------------------------


def grid_block_count(levels: int) -> int:
    """Total rectangular blocks over levels 0..L-1 with an (l+1)x(l+1) grid each."""
    return levels * (levels + 1) * (2 * levels + 1) // 6


@dataclass(eq=False)
class GridPartition:
    """Multi-scale rectangular tiling of one image, level-then-raster order."""

    levels: int
    blocks: list[np.ndarray]  # keypoint index arrays
    block_level: np.ndarray  # (P,) level of each block

    @property
    def block_count(self) -> int:
        return len(self.blocks)


def grid_partition(fs, levels: int) -> GridPartition:
    """Tile the image into (l+1)x(l+1) blocks per level and bin the keypoints.

    Each keypoint lands in exactly one block per level; coordinates on a block
    boundary go to the higher-index block, and the last row/column absorbs the
    right/bottom edges.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    kp = fs.keypoints.astype(np.float64)
    blocks: list[np.ndarray] = []
    block_level: list[int] = []
    for level in range(levels):
        g = level + 1
        if fs.n:
            bx = np.minimum((kp[:, 0] * g / fs.image_width).astype(np.int64), g - 1)
            by = np.minimum((kp[:, 1] * g / fs.image_height).astype(np.int64), g - 1)
            flat = by * g + bx
        else:
            flat = np.empty(0, dtype=np.int64)
        for b in range(g * g):
            blocks.append(np.flatnonzero(flat == b).astype(np.int64))
            block_level.append(level)
    return GridPartition(levels, blocks, np.asarray(block_level, dtype=np.int64))
