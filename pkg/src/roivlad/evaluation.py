"""Retrieval quality and matching-complexity measurement.

Average precision follows the unsmoothed hits/rank convention with junk
images removed from the ranking before scoring.  Complexity is normalized
to the cost of matching one 128-dimensional descriptor (one inner product
for unquantized search, M table reads for quantized search).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import PcaModel, whiten_normalize
from .pq import pq_train, quantize, reconstruct, sign_binarize
from .search import QueryDescriptor, RankedResult, quantized_fast_ve_search, rank_entries
from .voronoi import QuantizedVoronoiIndex, SignVoronoiIndex, VoronoiIndex

BASELINE_DIM = 128

BENCH_CSV_HEADER = ("M", "mAP", "distortion", "reads_per_query")


@dataclass(frozen=True)
class QueryRecord:
    """Good and junk image-id sets for one query; the query's own source
    image belongs to neither."""

    query_id: str
    good: frozenset[str]
    junk: frozenset[str]

    def __post_init__(self):
        object.__setattr__(self, "good", frozenset(self.good))
        object.__setattr__(self, "junk", frozenset(self.junk))
        if self.good & self.junk:
            raise ValueError(f"{self.query_id}: good and junk sets overlap")


def average_precision(ranked: RankedResult | Sequence[str], rec: QueryRecord) -> float:
    """Mean of precision at each good hit, after junk removal.

    The denominator counts the good images actually present in the ranking.
    """
    ids = ranked.image_ids if isinstance(ranked, RankedResult) else list(ranked)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids in ranking")
    if not rec.good:
        raise ValueError(f"{rec.query_id}: empty good set")
    kept = [i for i in ids if i not in rec.junk]
    n_good = sum(1 for i in kept if i in rec.good)
    if n_good == 0:
        raise ValueError(f"{rec.query_id}: no good images present in ranking")
    hits = 0
    precision_sum = 0.0
    for rank, image_id in enumerate(kept, start=1):
        if image_id in rec.good:
            hits += 1
            precision_sum += hits / rank
    return precision_sum / n_good


def mean_average_precision(
    rankings: dict[str, RankedResult | Sequence[str]],
    records: Iterable[QueryRecord],
) -> tuple[float, dict[str, float]]:
    """Arithmetic mean of per-query APs (also returned individually)."""
    per_query = {}
    for rec in records:
        per_query[rec.query_id] = average_precision(rankings[rec.query_id], rec)
    if not per_query:
        raise ValueError("no queries")
    return float(np.mean(list(per_query.values()))), per_query


@dataclass(frozen=True)
class ComplexityReport:
    """Mean per-image matching cost, raw and normalized to the 128-D baseline."""

    macs_or_reads: float
    normalized: float


def complexity_accounting(
    rankings: Sequence[RankedResult],
    dim: int,
    quantized: bool = False,
    m: int = 1,
) -> ComplexityReport:
    """Average matching cost per image, averaged per query first.

    Unquantized: cells_accessed * dim multiply-accumulates per image, one
    unit per 128 MACs.  Quantized: table reads per image, one unit per M
    reads (the cost of one quantized baseline descriptor).
    """
    if not rankings:
        raise ValueError("no search results")
    per_query = []
    for ranked in rankings:
        if not ranked.entries:
            raise ValueError("empty ranking")
        if quantized:
            per_query.append(ranked.total_table_reads / len(ranked.entries))
        else:
            per_query.append(ranked.total_cells_accessed * dim / len(ranked.entries))
    raw = float(np.mean(per_query))
    normalized = raw / m if quantized else raw / BASELINE_DIM
    if normalized <= 0:
        raise ValueError("complexity must be positive")
    return ComplexityReport(macs_or_reads=raw, normalized=normalized)


# --------------------------------------------------------------------------
# Block-count sweep benchmark
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchRow:
    m: int
    map_score: float
    distortion: float
    reads_per_query: float


def _whiten_rows(rows: np.ndarray, pca: PcaModel, m: int) -> np.ndarray:
    return np.stack([whiten_normalize(r, pca, m) for r in rows])


def bench_m_sweep(
    pca: PcaModel,
    train_cells: np.ndarray,
    indexes: Sequence[VoronoiIndex],
    queries: Sequence[tuple[str, np.ndarray, int]],
    records: Sequence[QueryRecord],
    m_values: Sequence[int],
    zp: int,
    seed: int = 0,
) -> list[BenchRow]:
    """Quantize the dataset at each block count and measure retrieval quality.

    `train_cells` and the query vectors are projected (unwhitened) descriptors;
    whitening depends on M, so it is redone per sweep point.  M == dim rows
    take the sign/Hamming path, which performs no table reads.
    """
    dim = pca.dim
    rec_by_id = {r.query_id: r for r in records}
    rows = []
    for m in m_values:
        if dim % m != 0:
            raise ValueError(f"dim {dim} not divisible by m={m}")
        sign_limit = m == dim
        model = None
        if not sign_limit:
            model = pq_train(_whiten_rows(train_cells, pca, m), m, zp, seed=seed)
        distortions = []
        q_indexes = []
        for index in indexes:
            mask = index.scoreable()
            if sign_limit:
                bits = np.zeros((index.shape.slots, (dim + 7) // 8), dtype=np.uint8)
                for slot in np.flatnonzero(mask):
                    wd = whiten_normalize(index.descriptors[slot].astype(np.float64), pca, m)
                    code = sign_binarize(wd)
                    bits[slot] = code.packed
                    rec = np.sign(wd) + (wd == 0.0)  # sign reconstruction, zeros -> +1
                    distortions.append(float(np.sum((wd - rec) ** 2)))
                q_indexes.append(
                    SignVoronoiIndex(
                        index.image_id, index.shape, index.counts, bits, dim, index.empty
                    )
                )
            else:
                codes = np.zeros((index.shape.slots, m), dtype=np.uint8)
                for slot in np.flatnonzero(mask):
                    wd = whiten_normalize(index.descriptors[slot].astype(np.float64), pca, m)
                    codes[slot] = quantize(wd, model)
                    rec = reconstruct(codes[slot], model)
                    distortions.append(float(np.sum((wd - rec) ** 2)))
                q_indexes.append(
                    QuantizedVoronoiIndex(
                        index.image_id, index.shape, index.counts, codes, index.empty
                    )
                )
        rankings = {}
        reads = []
        for qid, vec, count in queries:
            wd = whiten_normalize(np.asarray(vec, dtype=np.float64), pca, m)
            if sign_limit:
                q = QueryDescriptor(point_count=count, sign_bits=sign_binarize(wd))
            else:
                q = QueryDescriptor(point_count=count, codes=quantize(wd, model))
            entries = [quantized_fast_ve_search(q, qi, model) for qi in q_indexes]
            ranked = rank_entries(entries)
            rankings[qid] = ranked
            reads.append(ranked.total_table_reads)
        map_score, _ = mean_average_precision(
            rankings, [rec_by_id[qid] for qid, _, _ in queries if qid in rec_by_id]
        )
        rows.append(
            BenchRow(
                m=m,
                map_score=map_score,
                distortion=float(np.mean(distortions)),
                reads_per_query=float(np.mean(reads)),
            )
        )
    return rows


def write_bench_csv(rows: Sequence[BenchRow], path: str | Path | None = None) -> str:
    """Serialize sweep rows as `M,mAP,distortion,reads_per_query` CSV."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(BENCH_CSV_HEADER)
    for row in rows:
        writer.writerow(
            [row.m, f"{row.map_score:.6f}", f"{row.distortion:.6f}", f"{row.reads_per_query:.2f}"]
        )
    text = out.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
