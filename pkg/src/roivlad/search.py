"""Similarity scoring and ranking over cell indexes.

The adaptive tree search runs in two phases: a greedy top-down descent that
follows the child cell only when it strictly beats its parent (Phase 1),
then a combination of the per-level best scores weighted by how closely each
best cell's interest-point count matches the query's (Phase 2).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .clustering import TreeShape, spatial_hkmeans
from .encoder import PcaModel
from .pq import PQModel, SignCode, hamming_similarity, sdc_similarity
from .voronoi import (
    MultiIndex,
    QuantizedVoronoiIndex,
    SignVoronoiIndex,
    VoronoiIndex,
    ve_encode,
)

NEG_INF = float("-inf")


@dataclass(frozen=True, eq=False)
class QueryDescriptor:
    """One encoded query plus its raw keypoint count.

    Exactly one of vector / codes / sign_bits is set, matching the index
    representation it will be scored against.
    """

    point_count: int
    vector: np.ndarray | None = None
    codes: np.ndarray | None = None
    sign_bits: SignCode | None = None

    def __post_init__(self):
        if self.point_count < 0:
            raise ValueError("point_count must be >= 0")
        if sum(x is not None for x in (self.vector, self.codes, self.sign_bits)) != 1:
            raise ValueError("set exactly one of vector, codes, sign_bits")


@dataclass
class SearchResult:
    """Score and instrumentation for one query against one image."""

    image_id: str
    score: float
    l_ph1: int
    cells_accessed: int
    table_reads: int = 0
    per_level_best: list[tuple[float, int, float]] = field(default_factory=list)
    # (best score, query-minus-cell point difference, normalized weight) per level


@dataclass
class RankedResult:
    """Descending ranking of one query over a dataset."""

    entries: list[SearchResult]

    @property
    def image_ids(self) -> list[str]:
        return [e.image_id for e in self.entries]

    @property
    def scores(self) -> list[float]:
        return [e.score for e in self.entries]

    @property
    def total_cells_accessed(self) -> int:
        return sum(e.cells_accessed for e in self.entries)

    @property
    def total_table_reads(self) -> int:
        return sum(e.table_reads for e in self.entries)


# --------------------------------------------------------------------------
# Phase 1: greedy descent
# --------------------------------------------------------------------------


def tree_descent(
    shape: TreeShape,
    scoreable: np.ndarray,
    score_of: Callable[[int], float],
) -> tuple[int, list[tuple[int, float]], int]:
    """Run the greedy top-down descent over one tree.

    Scores the root, then repeatedly scores the current best cell's children
    and descends into the argmax child only if it strictly exceeds the
    parent's score.  Absent or empty cells are never scored or selected.
    Returns (exit level, [(slot, best score)] for levels 0..exit, cells scored).
    Child probe scores at the exit level are discarded.
    """
    if not scoreable[0]:
        return 0, [], 0
    best: list[tuple[int, float]] = [(0, score_of(0))]
    accessed = 1
    current = 0
    for _ in range(1, shape.levels):
        kids = [c for c in shape.children(current) if scoreable[c]]
        if not kids:
            break
        kid_scores = [score_of(c) for c in kids]
        accessed += len(kids)
        pick = int(np.argmax(kid_scores))  # ties resolve to the lowest slot
        if kid_scores[pick] > best[-1][1]:
            current = kids[pick]
            best.append((current, kid_scores[pick]))
        else:
            break
    return len(best) - 1, best, accessed


# --------------------------------------------------------------------------
# Phase 2: point-count weighting
# --------------------------------------------------------------------------


def modal_order_of_magnitude(point_diffs: Sequence[int]) -> int:
    """Most frequent decimal order of |v| (at least 1); ties to the smallest."""
    orders = [len(str(max(abs(int(v)), 1))) - 1 for v in point_diffs]
    counts = Counter(orders)
    top = max(counts.values())
    return min(o for o, c in counts.items() if c == top)


def combine_level_scores(
    best_scores: Sequence[float],
    point_diffs: Sequence[int],
    c_scale: float = 1.0,
) -> tuple[float, np.ndarray, float]:
    """Weighted sum of per-level best scores.

    Weights are C / max(|v_l|, 1) with C = 10**modal_order (times c_scale,
    a diagnostic knob), L1-normalized.  The normalization cancels C, so the
    returned score is invariant to any positive rescaling.
    """
    if len(best_scores) != len(point_diffs) or not best_scores:
        raise ValueError("need matching, nonempty score and difference lists")
    if c_scale <= 0:
        raise ValueError("c_scale must be positive")
    c = (10.0 ** modal_order_of_magnitude(point_diffs)) * c_scale
    w = np.array([c / max(abs(int(v)), 1) for v in point_diffs])
    w_hat = w / w.sum()
    return float(np.dot(w_hat, np.asarray(best_scores))), w_hat, c


# --------------------------------------------------------------------------
# Cell scoring
# --------------------------------------------------------------------------


def whole_image_score(q: QueryDescriptor, cell: np.ndarray, model: PQModel | None = None) -> float:
    """Similarity of the query to one cell: inner product of unit vectors, or
    the table-based score when both sides are quantized.  A zero cell scores
    -inf so it can never be selected."""
    if q.vector is not None:
        cell = np.asarray(cell, dtype=np.float64)
        if not np.any(cell):
            return NEG_INF
        return float(q.vector @ cell)
    if q.codes is not None:
        if model is None:
            raise ValueError("quantized scoring needs the PQ model")
        return sdc_similarity(q.codes, cell, model)
    raise ValueError("sign-coded queries score via hamming_similarity")


def _result_from_trace(
    image_id: str,
    counts: np.ndarray,
    q: QueryDescriptor,
    trace: tuple[int, list[tuple[int, float]], int],
    reads_per_cell: int,
    c_scale: float,
) -> SearchResult:
    l_ph1, best, accessed = trace
    if not best:
        return SearchResult(image_id, NEG_INF, 0, accessed, reads_per_cell * accessed)
    diffs = [q.point_count - int(counts[slot]) for slot, _ in best]
    scores = [s for _, s in best]
    score, w_hat, _ = combine_level_scores(scores, diffs, c_scale)
    return SearchResult(
        image_id=image_id,
        score=score,
        l_ph1=l_ph1,
        cells_accessed=accessed,
        table_reads=reads_per_cell * accessed,
        per_level_best=list(zip(scores, diffs, w_hat.tolist())),
    )


def fast_ve_search(q: QueryDescriptor, index: VoronoiIndex, c_scale: float = 1.0) -> SearchResult:
    """Two-phase adaptive search of one tree index with an unquantized query."""
    if q.vector is None:
        raise ValueError("fast_ve_search expects an unquantized query vector")
    if q.vector.shape[0] != index.dim:
        raise ValueError("query/index dimension mismatch")
    descs = index.descriptors.astype(np.float64)
    vec = q.vector

    def score_of(slot: int) -> float:
        return float(descs[slot] @ vec)

    trace = tree_descent(index.shape, index.scoreable(), score_of)
    return _result_from_trace(index.image_id, index.counts, q, trace, 0, c_scale)


def quantized_fast_ve_search(
    q: QueryDescriptor,
    index: QuantizedVoronoiIndex | SignVoronoiIndex,
    model: PQModel | None = None,
    c_scale: float = 1.0,
) -> SearchResult:
    """Same control flow as fast_ve_search with table (or Hamming) scoring.

    Each scored cell costs M table reads; the Hamming path reads no tables.
    """
    if isinstance(index, SignVoronoiIndex):
        if q.sign_bits is None:
            raise ValueError("sign index expects a sign-coded query")

        def score_of(slot: int) -> float:
            return hamming_similarity(
                q.sign_bits, SignCode(index.dim, index.bits[slot])
            )

        reads_per_cell = 0
    else:
        if q.codes is None:
            raise ValueError("quantized index expects a code query")
        if model is None:
            raise ValueError("quantized search needs the PQ model")
        tables = model.sdc_tables
        block_ids = np.arange(model.m)
        q_codes = q.codes

        def score_of(slot: int) -> float:
            return float(tables[block_ids, q_codes, index.codes[slot]].sum())

        reads_per_cell = model.m
    trace = tree_descent(index.shape, index.scoreable(), score_of)
    return _result_from_trace(index.image_id, index.counts, q, trace, reads_per_cell, c_scale)


def global_max_score(
    q: QueryDescriptor,
    index: VoronoiIndex | MultiIndex | QuantizedVoronoiIndex | SignVoronoiIndex,
    model: PQModel | None = None,
) -> SearchResult:
    """Exhaustive baseline: the maximum cell/block similarity, scanning all cells."""
    mask = index.scoreable()
    slots = np.flatnonzero(mask)
    reads_per_cell = 0
    if isinstance(index, (VoronoiIndex, MultiIndex)):
        if q.vector is None:
            raise ValueError("unquantized index expects a query vector")
        scores = index.descriptors[slots].astype(np.float64) @ q.vector
    elif isinstance(index, QuantizedVoronoiIndex):
        if q.codes is None or model is None:
            raise ValueError("quantized index expects codes and the PQ model")
        block_ids = np.arange(model.m)
        scores = np.array(
            [float(model.sdc_tables[block_ids, q.codes, index.codes[s]].sum()) for s in slots]
        )
        reads_per_cell = model.m
    else:
        if q.sign_bits is None:
            raise ValueError("sign index expects a sign-coded query")
        scores = np.array(
            [hamming_similarity(q.sign_bits, SignCode(index.dim, index.bits[s])) for s in slots]
        )
    best = float(scores.max()) if slots.size else NEG_INF
    return SearchResult(
        image_id=index.image_id,
        score=best,
        l_ph1=0,
        cells_accessed=int(slots.size),
        table_reads=reads_per_cell * int(slots.size),
    )


def quantized_level_projection_score(
    q: QueryDescriptor, leaf_codes: np.ndarray, model: PQModel
) -> float:
    """Approximate a parent cell's quantized score as the mean of its
    constituent leaf-code similarities."""
    if q.codes is None:
        raise ValueError("expected a code query")
    leaf_codes = np.asarray(leaf_codes, dtype=np.uint8)
    if leaf_codes.ndim != 2 or leaf_codes.shape[0] == 0:
        raise ValueError("leaf_codes must be a nonempty (n, M) array")
    return float(
        np.mean([sdc_similarity(q.codes, leaf_codes[i], model) for i in range(leaf_codes.shape[0])])
    )


# --------------------------------------------------------------------------
# Dataset-level ranking
# --------------------------------------------------------------------------


def rank_entries(entries: list[SearchResult]) -> RankedResult:
    """Stable descending sort by score; ties break by ascending image id."""
    ids = [e.image_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate image ids in ranking")
    return RankedResult(entries=sorted(entries, key=lambda e: (-e.score, e.image_id)))


def rank_dataset(
    q: QueryDescriptor,
    indexes: Sequence,
    method: str = "fast",
    model: PQModel | None = None,
    c_scale: float = 1.0,
) -> RankedResult:
    """Score one query against every image index and rank the results."""
    entries = []
    for index in indexes:
        if method == "global":
            entries.append(global_max_score(q, index, model))
        elif method == "fast":
            if isinstance(index, (QuantizedVoronoiIndex, SignVoronoiIndex)):
                entries.append(quantized_fast_ve_search(q, index, model, c_scale))
            else:
                entries.append(fast_ve_search(q, index, c_scale))
        else:
            raise ValueError(f"unknown method {method!r}")
    return rank_entries(entries)


def subquery_search(
    query_fs,
    indexes: Sequence,
    vocab,
    pca: PcaModel,
    *,
    levels: int = 3,
    branching: int = 2,
    seed: int = 0,
    ssr: bool = True,
    encode_query: Callable[[np.ndarray, int], QueryDescriptor] | None = None,
    model: PQModel | None = None,
    c_scale: float = 1.0,
) -> RankedResult:
    """Partition the query itself and average per-subquery adaptive scores.

    The query feature set is Voronoi-partitioned like a dataset image; every
    populated cell becomes a subquery, each image's score is the mean over
    subqueries, and images are ranked by that mean.  `encode_query` maps a
    (projected descriptor, point count) pair to a QueryDescriptor, so the
    same routine serves quantized and sign-limit searches.
    """
    tree = spatial_hkmeans(query_fs, levels, branching, seed)
    q_index = ve_encode(query_fs, vocab, tree, pca, ssr=ssr)
    slots = np.flatnonzero(q_index.scoreable())
    if slots.size == 0:
        raise ValueError("query has no populated cells")
    if encode_query is None:
        encode_query = lambda vec, count: QueryDescriptor(point_count=count, vector=vec)
    subqueries = [
        encode_query(q_index.descriptors[s].astype(np.float64), int(q_index.counts[s]))
        for s in slots
    ]
    entries = []
    for index in indexes:
        results = []
        for sub in subqueries:
            if isinstance(index, (QuantizedVoronoiIndex, SignVoronoiIndex)):
                results.append(quantized_fast_ve_search(sub, index, model, c_scale))
            else:
                results.append(fast_ve_search(sub, index, c_scale))
        entries.append(
            SearchResult(
                image_id=index.image_id,
                score=float(np.mean([r.score for r in results])),
                l_ph1=0,
                cells_accessed=sum(r.cells_accessed for r in results),
                table_reads=sum(r.table_reads for r in results),
            )
        )
    return rank_entries(entries)
