"""Two-phase adaptive search, scoring baselines, and ranking."""

import numpy as np
import pytest

from roivlad.clustering import TreeShape, kmeans, spatial_hkmeans
from roivlad.encoder import pca_train, project, ssr_normalize, vlad_encode
from roivlad.features import SyntheticDatasetSpec, synth_generate
from roivlad.pq import PQModel, pq_train, sdc_similarity
from roivlad.search import (
    QueryDescriptor,
    SearchResult,
    combine_level_scores,
    fast_ve_search,
    global_max_score,
    modal_order_of_magnitude,
    quantized_fast_ve_search,
    quantized_level_projection_score,
    rank_dataset,
    rank_entries,
    subquery_search,
    tree_descent,
    whole_image_score,
)
from roivlad.voronoi import (
    MultiIndex,
    QuantizedVoronoiIndex,
    VoronoiIndex,
    ve_encode,
)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def full_shape(levels, v):
    from roivlad.clustering import tree_geometry

    _, _, total = tree_geometry((v,) * (levels - 1))
    return TreeShape((v,) * (levels - 1), np.ones(total, dtype=bool))


def index_from_scores(q_vec, scores, counts, levels=2, v=3, image_id="img"):
    """Build a 2-D index whose cells score exactly `scores` against q_vec."""
    shape = full_shape(levels, v)
    descs = np.zeros((shape.slots, 2), dtype=np.float32)
    for slot, s in enumerate(scores):
        descs[slot] = unit([s, np.sqrt(max(0.0, 1.0 - s * s))])
    return VoronoiIndex(image_id, shape, np.asarray(counts, dtype=np.int64), descs)


class TestWholeImageScore:
    def test_identical_unit_vectors_score_one(self):
        q = QueryDescriptor(point_count=3, vector=unit([1.0, 2.0, 2.0]))
        assert abs(whole_image_score(q, q.vector.copy()) - 1.0) < 1e-9

    def test_orthogonal_vectors_score_zero(self):
        q = QueryDescriptor(point_count=3, vector=np.array([1.0, 0.0]))
        assert whole_image_score(q, np.array([0.0, 1.0])) == 0.0

    def test_matches_dot_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, b = unit(rng.normal(0, 1, 6)), unit(rng.normal(0, 1, 6))
            q = QueryDescriptor(point_count=1, vector=a)
            assert abs(whole_image_score(q, b) - sum(a[i] * b[i] for i in range(6))) < 1e-12

    def test_zero_cell_scores_neg_inf(self):
        q = QueryDescriptor(point_count=1, vector=np.array([1.0, 0.0]))
        assert whole_image_score(q, np.zeros(2)) == float("-inf")


class TestPhase2Weights:
    def test_modal_order_rule(self):
        assert modal_order_of_magnitude([-450, -2]) == 0  # tie, smallest wins
        assert modal_order_of_magnitude([120, 450, 7]) == 2
        assert modal_order_of_magnitude([0, 1, -1]) == 0  # |v| floors at 1

    def test_hand_example(self):
        # per-level bests 0.2 / 0.9, query with 50 points, cells with 500 / 52
        score, w_hat, c = combine_level_scores([0.2, 0.9], [-450, -2])
        assert c == 1.0
        assert np.allclose(w_hat, [1.0 / 226.0, 225.0 / 226.0], atol=1e-15)
        assert abs(score - 202.7 / 226.0) < 1e-12

    def test_weights_sum_to_one_and_are_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(1, 5))
            scores = rng.uniform(-1, 1, n).tolist()
            diffs = rng.integers(-5000, 5000, n).tolist()
            _, w_hat, _ = combine_level_scores(scores, diffs)
            assert np.all(w_hat >= 0)
            assert abs(w_hat.sum() - 1.0) < 1e-9

    def test_scale_invariance(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(1, 5))
            scores = rng.uniform(-1, 1, n).tolist()
            diffs = rng.integers(-5000, 5000, n).tolist()
            base, _, _ = combine_level_scores(scores, diffs)
            for scale in (1e-6, 0.5, 3.7, 1e6):
                scaled, _, _ = combine_level_scores(scores, diffs, c_scale=scale)
                assert abs(base - scaled) < 1e-12


class TestTreeDescent:
    def test_injected_scores_trace(self):
        # (3,3) full tree with scores chosen to descend once then stop
        shape = full_shape(3, 3)
        scores = np.zeros(13)
        scores[0] = 0.5
        scores[1:4] = [0.1, 0.7, 0.3]  # descend into slot 2
        scores[2 * 3 + 4 : 2 * 3 + 7] = [0.6, 0.2, 0.1]  # children of slot 2: 10, 11, 12
        l_ph1, best, accessed = tree_descent(shape, shape.present, lambda s: scores[s])
        assert l_ph1 == 1
        assert [slot for slot, _ in best] == [0, 2]
        assert accessed == 7  # root + 3 children + 3 grandchildren

    def test_stop_at_root_when_parent_wins(self):
        shape = full_shape(3, 3)
        scores = np.full(13, 0.1)
        scores[0] = 0.9
        l_ph1, best, accessed = tree_descent(shape, shape.present, lambda s: scores[s])
        assert l_ph1 == 0 and accessed == 4
        assert best == [(0, 0.9)]

    def test_tie_stops_at_parent(self):
        shape = full_shape(2, 3)
        scores = np.array([0.5, 0.5, 0.5, 0.5])
        l_ph1, best, _ = tree_descent(shape, shape.present, lambda s: scores[s])
        assert l_ph1 == 0 and best == [(0, 0.5)]

    def test_absent_children_are_skipped(self):
        present = np.array([True, True, False, True])
        shape = TreeShape((3,), present)
        scores = {0: 0.2, 1: 0.6, 3: 0.9}
        l_ph1, best, accessed = tree_descent(shape, shape.present, lambda s: scores[s])
        assert accessed == 3  # the absent middle child is never scored
        assert best[-1] == (3, 0.9)

    def test_unscoreable_root_returns_empty_trace(self):
        shape = full_shape(2, 2)
        scoreable = shape.present.copy()
        scoreable[0] = False
        l_ph1, best, accessed = tree_descent(shape, scoreable, lambda s: 1.0)
        assert (l_ph1, best, accessed) == (0, [], 0)


class TestFastVeSearch:
    def test_hand_example_through_real_index(self):
        # root scores 0.2 with 500 points; best child scores 0.9 with 52
        q = QueryDescriptor(point_count=50, vector=np.array([1.0, 0.0]))
        index = index_from_scores(
            q.vector, [0.2, 0.9, 0.1, 0.0], [500, 52, 300, 148], levels=2, v=3
        )
        res = fast_ve_search(q, index)
        assert res.l_ph1 == 1
        assert res.cells_accessed == 4
        # recompute from the float32 values the index actually stores
        s0 = float(index.descriptors[0, 0])
        s1 = float(index.descriptors[1, 0])
        assert abs(res.score - (s0 / 226.0 + 225.0 * s1 / 226.0)) < 1e-12
        assert abs(res.score - 202.7 / 226.0) < 1e-6
        assert [round(v, 6) for _, v, _ in res.per_level_best] == [-450, -2]

    def test_root_exit_score_equals_root_inner_product(self):
        q = QueryDescriptor(point_count=10, vector=np.array([1.0, 0.0]))
        index = index_from_scores(q.vector, [0.9, 0.1, 0.2, 0.3], [40, 10, 10, 20])
        res = fast_ve_search(q, index)
        assert res.l_ph1 == 0
        root = float(index.descriptors[0].astype(np.float64) @ q.vector)
        assert res.score == root  # single weight normalizes to exactly 1

    def test_matches_independent_replay_oracle(self):
        rng = np.random.default_rng(3)
        spec = SyntheticDatasetSpec(
            dataset_size=6, planted_roi_count=1, images_per_object=3,
            roi_points_range=(5, 10), background_points_range=(60, 90),
            descriptor_dim=6, seed=5,
        )
        sets, _ = synth_generate(spec)
        vocab = kmeans(np.vstack([fs.descriptors for fs in sets]), 4, seed=0)
        rows = np.stack([ssr_normalize(vlad_encode(fs, vocab)) for fs in sets])
        pca = pca_train(rows, 5)
        for fs in sets:
            tree = spatial_hkmeans(fs, 3, 3, seed=1)
            index = ve_encode(fs, vocab, tree, pca)
            q = QueryDescriptor(point_count=int(rng.integers(5, 200)), vector=unit(rng.normal(0, 1, 5)))
            res = fast_ve_search(q, index)
            oracle = replay_search(q, index)
            assert res.l_ph1 == oracle.l_ph1
            assert res.cells_accessed == oracle.cells_accessed
            assert abs(res.score - oracle.score) < 1e-12

    def test_probe_budget_bound_on_33_trees(self):
        rng = np.random.default_rng(4)
        shape = full_shape(3, 3)
        for _ in range(100):
            descs = rng.normal(0, 1, (13, 4))
            descs /= np.linalg.norm(descs, axis=1, keepdims=True)
            index = VoronoiIndex("r", shape, rng.integers(1, 500, 13), descs.astype(np.float32))
            q = QueryDescriptor(point_count=int(rng.integers(1, 500)), vector=unit(rng.normal(0, 1, 4)))
            res = fast_ve_search(q, index)
            bound = 1 + sum(3 for _ in range(min(res.l_ph1 + 1, 2)))
            assert res.cells_accessed <= bound <= 7

    def test_score_is_convex_combination_of_level_bests(self):
        rng = np.random.default_rng(5)
        shape = full_shape(3, 3)
        for _ in range(50):
            descs = rng.normal(0, 1, (13, 4))
            descs /= np.linalg.norm(descs, axis=1, keepdims=True)
            index = VoronoiIndex("c", shape, rng.integers(1, 400, 13), descs.astype(np.float32))
            q = QueryDescriptor(point_count=100, vector=unit(rng.normal(0, 1, 4)))
            res = fast_ve_search(q, index)
            bests = [s for s, _, _ in res.per_level_best]
            assert min(bests) - 1e-9 <= res.score <= max(bests) + 1e-9

    def test_l1_tree_equals_global_max(self):
        rng = np.random.default_rng(6)
        shape = full_shape(1, 2)
        descs = unit(rng.normal(0, 1, 4))[None, :].astype(np.float32)
        index = VoronoiIndex("g", shape, np.array([25]), descs)
        q = QueryDescriptor(point_count=7, vector=unit(rng.normal(0, 1, 4)))
        assert fast_ve_search(q, index).score == global_max_score(q, index).score


def replay_search(q, index):
    """Independent re-implementation of the two-phase search, plain loops."""
    shape = index.shape
    scoreable = shape.present & ~index.empty

    def score(slot):
        return float(np.dot(index.descriptors[slot].astype(np.float64), q.vector))

    if not scoreable[0]:
        return SearchResult(index.image_id, float("-inf"), 0, 0)
    path = [(0, score(0))]
    accessed = 1
    node = 0
    while True:
        level = shape.level_of(node)
        if level == shape.levels - 1:
            break
        kid_scores = []
        for c in shape.children(node):
            if scoreable[c]:
                kid_scores.append((c, score(c)))
        if not kid_scores:
            break
        accessed += len(kid_scores)
        best_slot, best_score = kid_scores[0]
        for slot, s in kid_scores[1:]:
            if s > best_score:
                best_slot, best_score = slot, s
        if best_score > path[-1][1]:
            path.append((best_slot, best_score))
            node = best_slot
        else:
            break
    diffs = [q.point_count - int(index.counts[slot]) for slot, _ in path]
    digits = [len(str(max(abs(v), 1))) - 1 for v in diffs]
    counts = {}
    for d in digits:
        counts[d] = counts.get(d, 0) + 1
    mode = min(d for d, c in counts.items() if c == max(counts.values()))
    w = [10.0**mode / max(abs(v), 1) for v in diffs]
    total = sum(w)
    final = sum(wi / total * s for wi, (_, s) in zip(w, path))
    return SearchResult(index.image_id, final, len(path) - 1, accessed)


class TestGlobalMax:
    def test_root_match_scores_one(self):
        q = QueryDescriptor(point_count=5, vector=np.array([1.0, 0.0]))
        index = index_from_scores(q.vector, [1.0, 0.3, 0.1, 0.2], [10, 3, 3, 4])
        res = global_max_score(q, index)
        assert abs(res.score - 1.0) < 1e-6
        assert res.cells_accessed == 4

    def test_grid_index_accesses_all_14_blocks(self):
        rng = np.random.default_rng(7)
        descs = rng.normal(0, 1, (14, 4))
        descs /= np.linalg.norm(descs, axis=1, keepdims=True)
        index = MultiIndex("m", 3, rng.integers(1, 50, 14), descs.astype(np.float32))
        q = QueryDescriptor(point_count=5, vector=unit(rng.normal(0, 1, 4)))
        res = global_max_score(q, index)
        assert res.cells_accessed == 14

    def test_matches_linear_scan_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            descs = rng.normal(0, 1, (13, 4))
            descs /= np.linalg.norm(descs, axis=1, keepdims=True)
            index = VoronoiIndex("o", full_shape(3, 3), rng.integers(1, 50, 13), descs.astype(np.float32))
            q = QueryDescriptor(point_count=5, vector=unit(rng.normal(0, 1, 4)))
            oracle = max(float(descs[i].astype(np.float64) @ q.vector) for i in range(13))
            assert abs(global_max_score(q, index).score - oracle) < 1e-6


class TestQuantizedSearch:
    def make_matched_pair(self, scores, counts):
        """Unquantized index and a quantized twin with identical cell scores."""
        q_vec = np.array([1.0, 0.0])
        index = index_from_scores(q_vec, scores, counts, levels=2, v=3)
        # one-block model whose table row 0 holds the injected scores
        zp = len(scores)
        table = np.zeros((1, zp, zp))
        table[0, 0, :] = scores
        table[0, :, 0] = scores
        books = np.zeros((1, zp, 2))
        books[0, :, 0] = 1.0
        model = PQModel(books, table, np.zeros(1, dtype=np.uint8))
        codes = np.arange(zp, dtype=np.uint8)[:, None]
        qidx = QuantizedVoronoiIndex(
            "img", index.shape, index.counts, codes, np.zeros(index.shape.slots, dtype=bool)
        )
        q_unq = QueryDescriptor(point_count=50, vector=q_vec)
        q_q = QueryDescriptor(point_count=50, codes=np.array([0], dtype=np.uint8))
        return q_unq, index, q_q, qidx, model

    def test_identical_scores_give_identical_control_flow(self):
        scores = [0.2, 0.9, 0.1, 0.0]
        q_unq, index, q_q, qidx, model = self.make_matched_pair(scores, [500, 52, 300, 148])
        a = fast_ve_search(q_unq, index)
        b = quantized_fast_ve_search(q_q, qidx, model)
        assert a.l_ph1 == b.l_ph1
        assert a.cells_accessed == b.cells_accessed
        assert [v for _, v, _ in a.per_level_best] == [v for _, v, _ in b.per_level_best]
        assert abs(a.score - b.score) < 1e-6

    def test_table_reads_equal_m_times_cells(self):
        rng = np.random.default_rng(9)
        rows = rng.normal(0, 1, (300, 8)).reshape(300, 4, 2)
        rows /= np.linalg.norm(rows, axis=2, keepdims=True)
        rows = rows.reshape(300, 8)
        model = pq_train(rows, m=4, zp=8, seed=0)
        shape = full_shape(3, 3)
        codes = rng.integers(0, 8, (13, 4)).astype(np.uint8)
        counts = rng.integers(1, 100, 13)
        qidx = QuantizedVoronoiIndex("q", shape, counts, codes, np.zeros(13, dtype=bool))
        for _ in range(20):
            q = QueryDescriptor(point_count=int(rng.integers(1, 100)), codes=rng.integers(0, 8, 4).astype(np.uint8))
            res = quantized_fast_ve_search(q, qidx, model)
            assert res.table_reads == 4 * res.cells_accessed

    def test_identical_root_codes_exit_at_root_with_score_one(self):
        rng = np.random.default_rng(10)
        rows = rng.normal(0, 1, (300, 8)).reshape(300, 2, 4)
        rows /= np.linalg.norm(rows, axis=2, keepdims=True)
        rows = rows.reshape(300, 8)
        model = pq_train(rows, m=2, zp=8, seed=0)
        shape = full_shape(2, 3)
        root_code = np.array([3, 5], dtype=np.uint8)
        codes = np.vstack([root_code, np.array([[0, 1], [1, 0], [2, 2]], dtype=np.uint8)])
        qidx = QuantizedVoronoiIndex("q", shape, np.array([50, 10, 20, 20]), codes, np.zeros(4, dtype=bool))
        q = QueryDescriptor(point_count=50, codes=root_code)
        res = quantized_fast_ve_search(q, qidx, model)
        if res.l_ph1 == 0:  # children may tie the root only if codes collide
            assert abs(res.score - 1.0) < 1e-6

    def test_level_projection_score_is_leaf_mean(self):
        rng = np.random.default_rng(11)
        rows = rng.normal(0, 1, (300, 8)).reshape(300, 2, 4)
        rows /= np.linalg.norm(rows, axis=2, keepdims=True)
        rows = rows.reshape(300, 8)
        model = pq_train(rows, m=2, zp=8, seed=0)
        q = QueryDescriptor(point_count=5, codes=np.array([1, 2], dtype=np.uint8))
        leaves = rng.integers(0, 8, (3, 2)).astype(np.uint8)
        expect = np.mean([sdc_similarity(q.codes, leaves[i], model) for i in range(3)])
        assert abs(quantized_level_projection_score(q, leaves, model) - expect) < 1e-12

    def test_all_leaves_identical_to_query_score_one(self):
        rng = np.random.default_rng(12)
        rows = rng.normal(0, 1, (300, 8)).reshape(300, 2, 4)
        rows /= np.linalg.norm(rows, axis=2, keepdims=True)
        rows = rows.reshape(300, 8)
        model = pq_train(rows, m=2, zp=8, seed=0)
        q = QueryDescriptor(point_count=5, codes=np.array([4, 6], dtype=np.uint8))
        leaves = np.tile(q.codes, (4, 1))
        assert abs(quantized_level_projection_score(q, leaves, model) - 1.0) < 1e-6

    def test_two_leaves_average(self):
        # similarities 0.6 and 0.2 must average to 0.4
        table = np.zeros((1, 3, 3))
        table[0, 0, 1] = table[0, 1, 0] = 0.6
        table[0, 0, 2] = table[0, 2, 0] = 0.2
        books = np.zeros((1, 3, 2))
        books[0, :, 0] = 1.0
        model = PQModel(books, table, np.zeros(1, dtype=np.uint8))
        q = QueryDescriptor(point_count=1, codes=np.array([0], dtype=np.uint8))
        leaves = np.array([[1], [2]], dtype=np.uint8)
        assert abs(quantized_level_projection_score(q, leaves, model) - 0.4) < 1e-12


class TestRanking:
    def test_singleton(self):
        q = QueryDescriptor(point_count=5, vector=np.array([1.0, 0.0]))
        index = index_from_scores(q.vector, [0.5, 0.1, 0.1, 0.1], [5, 1, 2, 2])
        ranked = rank_dataset(q, [index], method="fast")
        assert ranked.image_ids == ["img"]

    def test_tie_breaks_by_image_id(self):
        entries = [
            SearchResult("b", 0.5, 0, 1),
            SearchResult("a", 0.5, 0, 1),
            SearchResult("c", 0.9, 0, 1),
        ]
        ranked = rank_entries(entries)
        assert ranked.image_ids == ["c", "a", "b"]

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(13)
        entries = [SearchResult(f"i{k:02d}", float(rng.uniform(-1, 1)), 0, 1) for k in range(30)]
        ranked = rank_entries(entries)
        oracle = sorted(entries, key=lambda e: (-e.score, e.image_id))
        assert ranked.image_ids == [e.image_id for e in oracle]

    def test_input_order_of_ties_is_irrelevant(self):
        rng = np.random.default_rng(14)
        entries = [SearchResult(f"i{k:02d}", 0.25 * (k % 3), 0, 1) for k in range(12)]
        baseline = rank_entries(entries).image_ids
        for _ in range(10):
            shuffled = [entries[i] for i in rng.permutation(len(entries))]
            assert rank_entries(shuffled).image_ids == baseline

    def test_fast_search_never_scores_more_cells_than_full_scan(self):
        rng = np.random.default_rng(15)
        for _ in range(50):
            descs = rng.normal(0, 1, (13, 6))
            descs /= np.linalg.norm(descs, axis=1, keepdims=True)
            index = VoronoiIndex(
                "p", full_shape(3, 3), rng.integers(1, 200, 13), descs.astype(np.float32)
            )
            q = QueryDescriptor(point_count=50, vector=unit(rng.normal(0, 1, 6)))
            fast = fast_ve_search(q, index)
            full = global_max_score(q, index)
            assert fast.cells_accessed <= full.cells_accessed

    def test_duplicate_ids_rejected(self):
        entries = [SearchResult("a", 0.5, 0, 1), SearchResult("a", 0.4, 0, 1)]
        with pytest.raises(ValueError):
            rank_entries(entries)


@pytest.fixture(scope="module")
def small_world():
    spec = SyntheticDatasetSpec(
        dataset_size=8, planted_roi_count=1, images_per_object=4,
        roi_points_range=(6, 10), background_points_range=(50, 80),
        descriptor_dim=6, seed=31,
    )
    sets, _ = synth_generate(spec)
    vocab = kmeans(np.vstack([fs.descriptors for fs in sets]), 4, seed=0)
    rows = np.stack([ssr_normalize(vlad_encode(fs, vocab)) for fs in sets])
    pca = pca_train(rows, 6)
    rng = np.random.default_rng(0)
    indexes = []
    for fs in sets:
        tree = spatial_hkmeans(fs, 3, 3, seed=rng)
        indexes.append(ve_encode(fs, vocab, tree, pca))
    return sets, vocab, pca, indexes


class TestSubquery:
    def test_seven_subqueries_for_two_way_three_level_query(self, small_world):
        sets, vocab, pca, indexes = small_world
        query = sets[0]
        tree = spatial_hkmeans(query, 3, 2, seed=0)
        assert tree.shape.node_count == 7  # 1 + 2 + 4
        ranked = subquery_search(query, indexes, vocab, pca, levels=3, branching=2, seed=0)
        assert len(ranked.entries) == len(indexes)

    def test_root_only_query_matches_fast_search(self, small_world):
        sets, vocab, pca, indexes = small_world
        from roivlad.features import crop_features

        query = sets[1]
        # a single keypoint cannot be split: the query tree is root-only
        tiny = crop_features(query, (query.keypoints[0, 0], query.keypoints[0, 1], 0.01, 0.01))
        assert tiny.n == 1
        ranked = subquery_search(tiny, indexes, vocab, pca, levels=3, branching=2, seed=0)
        vec = project(ssr_normalize(vlad_encode(tiny, vocab)), pca)
        q = QueryDescriptor(point_count=tiny.n, vector=vec)
        direct = rank_dataset(q, indexes, method="fast")
        assert ranked.image_ids == direct.image_ids
        assert np.allclose(ranked.scores, direct.scores, atol=1e-9)

    def test_scores_are_subquery_means(self, small_world):
        sets, vocab, pca, indexes = small_world
        query = sets[2]
        ranked = subquery_search(query, indexes, vocab, pca, levels=3, branching=2, seed=3)
        tree = spatial_hkmeans(query, 3, 2, seed=3)
        q_index = ve_encode(query, vocab, tree, pca)
        slots = np.flatnonzero(q_index.scoreable())
        by_id = {e.image_id: e.score for e in ranked.entries}
        for index in indexes:
            subs = [
                fast_ve_search(
                    QueryDescriptor(
                        point_count=int(q_index.counts[s]),
                        vector=q_index.descriptors[s].astype(np.float64),
                    ),
                    index,
                ).score
                for s in slots
            ]
            assert abs(by_id[index.image_id] - np.mean(subs)) < 1e-9
