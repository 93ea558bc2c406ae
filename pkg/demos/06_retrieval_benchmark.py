"""End to end: synthetic benchmark, mAP, matching complexity, and a PQ sweep.

Run: python3 demos/06_retrieval_benchmark.py   (roughly 20 seconds)
"""

import numpy as np

import roivlad as rv
from roivlad.evaluation import (
    QueryRecord,
    bench_m_sweep,
    complexity_accounting,
    mean_average_precision,
    write_bench_csv,
)

train_spec = rv.SyntheticDatasetSpec(
    dataset_size=60, planted_roi_count=8, images_per_object=5,
    roi_points_range=(4, 14), background_points_range=(250, 400),
    descriptor_dim=16, seed=501,
)
test_spec = rv.SyntheticDatasetSpec(
    dataset_size=80, planted_roi_count=10, images_per_object=7,
    roi_points_range=(4, 14), background_points_range=(250, 400),
    descriptor_dim=16, seed=502,
)
train_sets, _ = rv.synth_generate(train_spec)
test_sets, gt = rv.synth_generate(test_spec)

vocab = rv.kmeans(np.vstack([fs.descriptors for fs in train_sets])[::4], 16, seed=5)
rows = np.stack([rv.ssr_normalize(rv.vlad_encode(fs, vocab)) for fs in train_sets])
pca = rv.pca_train(rows, 32)

stream = np.random.default_rng(7)
indexes = [
    rv.ve_encode(fs, vocab, rv.spatial_hkmeans(fs, 3, 3, seed=stream), pca)
    for fs in test_sets
]
stream2 = np.random.default_rng(8)
train_cells = np.stack([
    ix.descriptors[s].astype(np.float64)
    for fs in train_sets
    for ix in [rv.ve_encode(fs, vocab, rv.spatial_hkmeans(fs, 3, 3, seed=stream2), pca)]
    for s in np.flatnonzero(ix.scoreable())
])

by_id = {fs.image_id: fs for fs in test_sets}
queries, records = [], []
for rq in gt.queries:
    roi = rv.crop_features(by_id[rq.image_id], rq.rect)
    vec = rv.project(rv.ssr_normalize(rv.vlad_encode(roi, vocab)), pca)
    queries.append((rq.query_id, vec, roi.n))
    records.append(
        QueryRecord(rq.query_id, frozenset(gt.good[rq.query_id]),
                    frozenset(gt.junk[rq.query_id]) | {rq.image_id})
    )

# Unquantized: adaptive tree search vs the whole-image baseline.
fast_rank, root_rank = {}, {}
for qid, vec, count in queries:
    q = rv.QueryDescriptor(point_count=count, vector=vec)
    fast_rank[qid] = rv.rank_dataset(q, indexes, method="fast")
    root_rank[qid] = rv.rank_entries([
        rv.SearchResult(ix.image_id, float(ix.descriptors[0].astype(np.float64) @ vec), 0, 1)
        for ix in indexes
    ])
fast_map, _ = mean_average_precision(fast_rank, records)
root_map, _ = mean_average_precision(root_rank, records)
report = complexity_accounting(list(fast_rank.values()), pca.dim)
print(f"adaptive search: mAP {fast_map:.3f} at {report.normalized:.2f} baseline units/image")
print(f"whole-image baseline: mAP {root_map:.3f} at {pca.dim / 128:.2f} units/image")
print(f"ROI gain: {fast_map / root_map:.2f}x\n")

# Quantized sweep over block counts; the last row is the sign/Hamming limit.
m_values = [4, 8, 16, 32]
rows = bench_m_sweep(pca, train_cells, indexes, queries, records, m_values, zp=64, seed=0)
print(write_bench_csv(rows), end="")
print("\n(the M == dim row stores one sign bit per component and reads no tables)")
