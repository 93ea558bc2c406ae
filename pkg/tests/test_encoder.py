"""Residual aggregation, normalization, PCA, and per-block whitening."""

import numpy as np
import pytest
from scipy.linalg import subspace_angles

from roivlad.clustering import Vocabulary
from roivlad.encoder import (
    pca_train,
    project,
    project_linear,
    projected_mean,
    ssr_normalize,
    vlad_encode,
    whiten_normalize,
    load_pca,
    save_pca,
)
from roivlad.features import FeatureSet


def int_vocab(k=4, dim=3):
    rng = np.random.default_rng(1)
    return Vocabulary(rng.integers(-4, 5, (k, dim)).astype(np.float64))


def int_fs(n=10, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    kp = rng.uniform([0, 0], [99, 99], (n, 2))
    return FeatureSet("i", 100, 100, kp, rng.integers(-8, 9, (n, dim)).astype(np.float32))


class TestVlad:
    def test_member_equal_to_centroid_gives_zero(self):
        vocab = int_vocab()
        kp = np.array([[5.0, 5.0]])
        fs = FeatureSet("z", 100, 100, kp, vocab.centroids[2:3].astype(np.float32))
        assert np.all(vlad_encode(fs, vocab) == 0.0)

    def test_opposite_residuals_cancel(self):
        vocab = Vocabulary(np.array([[0.0, 0.0], [10.0, 10.0]]))
        desc = np.array([[1.0, -2.0], [-1.0, 2.0]])  # residuals r and -r in cluster 0
        fs = FeatureSet("c", 100, 100, np.array([[1.0, 1.0], [2.0, 2.0]]), desc)
        v = vlad_encode(fs, vocab)
        assert np.all(v[:2] == 0.0)

    def test_matches_double_loop_oracle(self):
        vocab = int_vocab(k=4, dim=3)
        fs = int_fs(n=10, dim=3, seed=7)
        expected = np.zeros((4, 3))
        for n in range(fs.n):
            x = fs.descriptors[n].astype(np.float64)
            k = min(range(4), key=lambda j: float(((x - vocab.centroids[j]) ** 2).sum()))
            expected[k] += x - vocab.centroids[k]
        assert np.allclose(vlad_encode(fs, vocab), expected.ravel(), atol=1e-12)

    def test_additive_over_disjoint_member_sets(self):
        # integer-valued descriptors and centroids make the identity exact
        vocab = int_vocab(k=5, dim=4)
        fs = int_fs(n=24, dim=4, seed=3)
        rng = np.random.default_rng(9)
        for _ in range(20):
            perm = rng.permutation(fs.n)
            cut = int(rng.integers(0, fs.n + 1))
            a, b = perm[:cut], perm[cut:]
            total = vlad_encode(fs, vocab, np.arange(fs.n))
            assert np.array_equal(vlad_encode(fs, vocab, a) + vlad_encode(fs, vocab, b), total)

    def test_empty_member_set_gives_zero_sentinel(self):
        v = vlad_encode(int_fs(), int_vocab(), np.array([], dtype=np.int64))
        assert v.shape == (12,) and np.all(v == 0.0)

    def test_out_of_range_member_rejected(self):
        with pytest.raises(IndexError):
            vlad_encode(int_fs(n=5), int_vocab(), np.array([5]))


class TestSsr:
    def test_hand_value(self):
        # sign-sqrt of [4, -9, 0] is [2, -3, 0], then unit normalization
        out = ssr_normalize(np.array([4.0, -9.0, 0.0]))
        expect = np.array([2.0, -3.0, 0.0]) / np.sqrt(13.0)
        assert np.allclose(out, expect, atol=1e-12)

    def test_zero_vector_passes_through(self):
        assert np.all(ssr_normalize(np.zeros(6)) == 0.0)

    def test_unit_norm_and_sign_preserved(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            v = rng.normal(0, 3, 12)
            out = ssr_normalize(v)
            assert abs(np.linalg.norm(out) - 1.0) < 1e-9
            assert np.all(np.sign(out) == np.sign(v))


class TestPcaTrain:
    def test_planar_data_recovered(self):
        # oracle: eigenvectors of the explicit 3x3 covariance
        rng = np.random.default_rng(0)
        coeffs = rng.normal(0, 1, (40, 2))
        basis = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, -1.0]])
        data = coeffs @ basis + np.array([5.0, -2.0, 0.5])
        model = pca_train(data, 2)
        xc = data - data.mean(axis=0)
        cov = xc.T @ xc / (len(data) - 1)
        w, vecs = np.linalg.eigh(cov)
        oracle = vecs[:, np.argsort(w)[::-1][:2]]
        angles = subspace_angles(model.projection, oracle)
        assert np.max(angles) < 1e-8
        # training points reconstruct exactly from the planar subspace
        z = xc @ model.projection
        assert np.max(np.abs(z @ model.projection.T - xc)) < 1e-6

    def test_gram_and_direct_paths_agree(self):
        rng = np.random.default_rng(4)
        data = rng.normal(0, 1, (30, 10))
        a = pca_train(data, 5, force_path="gram")
        b = pca_train(data, 5, force_path="direct")
        assert np.max(subspace_angles(a.projection, b.projection)) < 1e-5
        assert np.allclose(a.eigenvalues, b.eigenvalues, rtol=1e-8)

    def test_gram_path_is_the_default_for_wide_data(self):
        rng = np.random.default_rng(5)
        data = rng.normal(0, 1, (12, 40))  # more dims than rows
        model = pca_train(data, 6)
        wide = pca_train(data, 6, force_path="gram")
        assert np.allclose(model.projection, wide.projection)
        ortho = model.projection.T @ model.projection
        assert np.max(np.abs(ortho - np.eye(6))) < 1e-5

    def test_rank_boundary(self):
        rng = np.random.default_rng(6)
        coeffs = rng.normal(0, 1, (20, 2))
        basis = rng.normal(0, 1, (2, 5))
        data = coeffs @ basis  # rank 2 after centering
        model = pca_train(data, 2)
        assert model.dim == 2
        with pytest.raises(ValueError, match="rank"):
            pca_train(data, 3)

    def test_dimension_precondition(self):
        rng = np.random.default_rng(7)
        data = rng.normal(0, 1, (5, 8))
        with pytest.raises(ValueError):
            pca_train(data, 5)  # d must stay below the row count

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        model = pca_train(rng.normal(0, 1, (25, 12)), 6)
        save_pca(model, tmp_path / "m.vpca")
        loaded = load_pca(tmp_path / "m.vpca")
        assert loaded.input_dim == 12 and loaded.dim == 6
        assert np.allclose(loaded.projection, model.projection, atol=1e-6)
        assert np.allclose(loaded.eigenvalues, model.eigenvalues, rtol=1e-5)


class TestProject:
    @pytest.fixture()
    def model(self):
        rng = np.random.default_rng(9)
        return pca_train(rng.normal(0, 1, (30, 10)), 4)

    def test_training_mean_maps_to_zero_sentinel(self, model):
        assert np.all(project(model.mean.copy(), model) == 0.0)

    def test_zero_input_maps_to_zero_sentinel(self, model):
        assert np.all(project(np.zeros(10), model) == 0.0)

    def test_unit_norm(self, model):
        rng = np.random.default_rng(10)
        for _ in range(20):
            out = project(rng.normal(0, 1, 10), model)
            assert abs(np.linalg.norm(out) - 1.0) < 1e-9

    def test_matches_matrix_vector_oracle(self, model):
        rng = np.random.default_rng(11)
        raw = rng.normal(0, 1, 10)
        z = np.array(
            [sum((raw[i] - model.mean[i]) * model.projection[i, j] for i in range(10)) for j in range(4)]
        )
        assert np.allclose(project(raw, model), z / np.linalg.norm(z), atol=1e-9)

    def test_linear_projection_is_additive(self, model):
        rng = np.random.default_rng(12)
        a, b = rng.normal(0, 1, 10), rng.normal(0, 1, 10)
        lhs = project_linear(a, model) + project_linear(b, model)
        assert np.allclose(lhs, project_linear(a + b, model), atol=1e-6)
        # centered projection of a sum recovers from linear parts plus one mean term
        centered = (a + b - model.mean) @ model.projection
        assert np.allclose(lhs - projected_mean(model), centered, atol=1e-9)


class TestWhiten:
    def make_model(self, d, eigenvalues):
        return_model = pca_train(np.random.default_rng(0).normal(0, 1, (d + 10, d)), d)
        object.__setattr__(return_model, "eigenvalues", np.asarray(eigenvalues, dtype=np.float64))
        return return_model

    def test_equal_eigenvalues_reduce_to_block_normalization(self):
        rng = np.random.default_rng(13)
        model = self.make_model(8, np.full(8, 0.5))
        v = rng.normal(0, 1, 8)
        out = whiten_normalize(v, model, 2)
        blocks = v.reshape(2, 4)
        expect = (blocks / np.linalg.norm(blocks, axis=1, keepdims=True)).ravel()
        assert np.allclose(out, expect, atol=1e-12)

    def test_single_block_globally_whitened(self):
        rng = np.random.default_rng(14)
        lam = np.sort(rng.uniform(0.1, 2.0, 6))[::-1]
        model = self.make_model(6, lam)
        v = rng.normal(0, 1, 6)
        z = v / np.sqrt(lam)
        assert np.allclose(whiten_normalize(v, model, 1), z / np.linalg.norm(z), atol=1e-12)

    def test_matches_componentwise_oracle(self):
        rng = np.random.default_rng(15)
        lam = np.sort(rng.uniform(0.05, 1.0, 8))[::-1]
        model = self.make_model(8, lam)
        v = rng.normal(0, 1, 8)
        out = whiten_normalize(v, model, 2)
        for b in range(2):
            blk = np.array([v[b * 4 + i] / np.sqrt(lam[b * 4 + i]) for i in range(4)])
            assert np.allclose(out[b * 4 : (b + 1) * 4], blk / np.linalg.norm(blk), atol=1e-12)
            assert abs(np.linalg.norm(out[b * 4 : (b + 1) * 4]) - 1.0) < 1e-6

    def test_zero_input_stays_zero(self):
        model = self.make_model(8, np.full(8, 1.0))
        assert np.all(whiten_normalize(np.zeros(8), model, 4) == 0.0)

    def test_indivisible_block_count_rejected(self):
        model = self.make_model(8, np.full(8, 1.0))
        with pytest.raises(ValueError):
            whiten_normalize(np.ones(8), model, 3)
