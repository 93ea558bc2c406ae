"""Shared benchmark fixtures: trained pipelines over frozen synthetic data."""

from dataclasses import dataclass

import numpy as np
import pytest

import roivlad as rv
from roivlad.evaluation import QueryRecord


@dataclass
class Benchmark:
    train_sets: list
    test_sets: list
    ground_truth: object
    vocab: object
    pca: object
    indexes: list  # per test image, unquantized tree indexes
    train_indexes: list
    queries: list  # (query_id, projected vector, keypoint count)
    records: list  # QueryRecord with the query's source image folded into junk
    query_sources: dict


def build_benchmark(train_spec, test_spec, vocab_k, pca_dim, vocab_stride=5):
    train_sets, _ = rv.synth_generate(train_spec)
    test_sets, gt = rv.synth_generate(test_spec)
    pool = np.vstack([fs.descriptors for fs in train_sets])
    vocab = rv.kmeans(pool[::vocab_stride], vocab_k, seed=5)
    rows = np.stack([rv.ssr_normalize(rv.vlad_encode(fs, vocab)) for fs in train_sets])
    pca = rv.pca_train(rows, pca_dim)
    rng = np.random.default_rng(7)
    indexes = []
    for fs in test_sets:
        tree = rv.spatial_hkmeans(fs, 3, 3, seed=rng)
        indexes.append(rv.ve_encode(fs, vocab, tree, pca))
    rng2 = np.random.default_rng(8)
    train_indexes = []
    for fs in train_sets:
        tree = rv.spatial_hkmeans(fs, 3, 3, seed=rng2)
        train_indexes.append(rv.ve_encode(fs, vocab, tree, pca))
    by_id = {fs.image_id: fs for fs in test_sets}
    queries, records, sources = [], [], {}
    for rq in gt.queries:
        qfs = rv.crop_features(by_id[rq.image_id], rq.rect)
        vec = rv.project(rv.ssr_normalize(rv.vlad_encode(qfs, vocab)), pca)
        queries.append((rq.query_id, vec, qfs.n))
        sources[rq.query_id] = rq.image_id
        records.append(
            QueryRecord(
                rq.query_id,
                frozenset(gt.good[rq.query_id]),
                frozenset(gt.junk[rq.query_id]) | {rq.image_id},
            )
        )
    return Benchmark(
        train_sets, test_sets, gt, vocab, pca, indexes, train_indexes, queries, records, sources
    )


@pytest.fixture(scope="session")
def large_benchmark():
    """200 test images, 20 small planted-ROI queries in heavy background."""
    train_spec = rv.SyntheticDatasetSpec(
        dataset_size=150, planted_roi_count=15, images_per_object=6,
        roi_points_range=(3, 15), background_points_range=(500, 800),
        descriptor_dim=16, cluster_spread=12.0, signature_noise=0.15, seed=1001,
    )
    test_spec = rv.SyntheticDatasetSpec(
        dataset_size=200, planted_roi_count=20, images_per_object=8,
        roi_points_range=(3, 15), background_points_range=(500, 800),
        descriptor_dim=16, cluster_spread=12.0, signature_noise=0.15, seed=2002,
    )
    return build_benchmark(train_spec, test_spec, vocab_k=16, pca_dim=64)


@pytest.fixture(scope="session")
def compact_benchmark():
    """50 structure-rich images: most images score meaningfully against most
    queries, so rank preservation under quantization is measurable."""
    train_spec = rv.SyntheticDatasetSpec(
        dataset_size=120, planted_roi_count=12, images_per_object=6,
        roi_points_range=(20, 50), background_points_range=(30, 60),
        descriptor_dim=16, cluster_spread=12.0, signature_noise=0.15, seed=3001,
    )
    test_spec = rv.SyntheticDatasetSpec(
        dataset_size=50, planted_roi_count=10, images_per_object=10,
        roi_points_range=(20, 50), background_points_range=(30, 60),
        descriptor_dim=16, cluster_spread=12.0, signature_noise=0.15, seed=3002,
    )
    return build_benchmark(train_spec, test_spec, vocab_k=16, pca_dim=64)
