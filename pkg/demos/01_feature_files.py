"""Feature sets, the VFEA binary format, and synthetic planted-object data.

Run: python3 demos/01_feature_files.py
"""

import tempfile
from pathlib import Path

import numpy as np

import roivlad as rv

work = Path(tempfile.mkdtemp(prefix="roivlad-demo-"))
print(f"working in {work}\n")

# A feature set pairs keypoint locations with local descriptors for one image.
rng = np.random.default_rng(0)
fs = rv.FeatureSet(
    image_id="demo",
    image_width=320,
    image_height=240,
    keypoints=rng.uniform([0, 0], [319, 239], (40, 2)),
    descriptors=rng.normal(0, 1, (40, 16)),
)
print(f"feature set: {fs.n} keypoints, {fs.descriptor_dim}-D descriptors")

# Feature files round-trip bit exactly.
path = work / "demo.vfea"
rv.save_features(fs, path)
loaded = rv.load_features(path)
print(f"round trip equal: {loaded == fs} ({path.stat().st_size} bytes on disk)")

# The synthetic generator plants objects as tight spatial clusters whose
# descriptors share a signature vector; everything else is background.
spec = rv.SyntheticDatasetSpec(
    dataset_size=30,
    planted_roi_count=4,
    images_per_object=6,
    roi_points_range=(5, 15),
    background_points_range=(100, 160),
    descriptor_dim=16,
    seed=42,
)
sets, gt = rv.synth_generate(spec)
print(f"\nsynthetic dataset: {len(sets)} images, {len(gt.queries)} planted queries")
for rq in gt.queries:
    occ = gt.occurrences[rq.query_id]
    print(
        f"  {rq.query_id}: source {rq.image_id}, rect {tuple(round(v) for v in rq.rect)}, "
        f"{len(occ)} hosts, {len(gt.good[rq.query_id])} good / {len(gt.junk[rq.query_id])} junk"
    )

# Cropping to the query rectangle keeps only the keypoints inside it.
rq = gt.queries[0]
source = next(s for s in sets if s.image_id == rq.image_id)
roi = rv.crop_features(source, rq.rect)
print(f"\nROI crop of {rq.image_id}: {roi.n} of {source.n} keypoints inside the rectangle")

# Ground truth and manifests are plain text files.
rv.save_ground_truth(gt, work / "groundtruth.tsv")
print("\nground truth head:")
print("\n".join((work / "groundtruth.tsv").read_text().splitlines()[:4]))
