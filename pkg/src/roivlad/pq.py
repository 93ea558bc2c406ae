"""Product quantization with symmetric distance computation.

Subcodewords are L2-normalized after training, so the per-block lookup
tables hold inner products scaled by 1/M and any two codes score inside
[-1, 1].  The M == D limit stores one sign bit per component and scores
with the Hamming distance instead of table reads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clustering import _as_rng, kmeans
from .encoder import PcaModel, ZERO_NORM_EPS, whiten_normalize, whitening_scale

PQ_MAGIC = b"VPQM"
PQ_VERSION = 1

# Keeps every stored table entry strictly inside [-1/M, 1/M] even after a
# float32 file round trip, so code-pair similarities cannot leave [-1, 1].
TABLE_MARGIN = 1e-9


@dataclass(frozen=True, eq=False)
class PQModel:
    """Per-block subcodebooks and their symmetric-distance lookup tables."""

    subcodebooks: np.ndarray  # (M, Zp, D') float64, unit-norm codewords
    sdc_tables: np.ndarray  # (M, Zp, Zp) float64, symmetric, |v| <= 1/M
    zero_codes: np.ndarray  # (M,) uint8: reserved code for all-zero blocks
    normalized: bool = True

    def __post_init__(self):
        for name in ("subcodebooks", "sdc_tables"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.float64))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "zero_codes", np.asarray(self.zero_codes, dtype=np.uint8))
        m, zp, _ = self.subcodebooks.shape
        if self.sdc_tables.shape != (m, zp, zp):
            raise ValueError("table shape must be (M, Zp, Zp)")
        if self.zero_codes.shape != (m,):
            raise ValueError("need one reserved code per block")

    @property
    def m(self) -> int:
        return self.subcodebooks.shape[0]

    @property
    def zp(self) -> int:
        return self.subcodebooks.shape[1]

    @property
    def d_prime(self) -> int:
        return self.subcodebooks.shape[2]

    @property
    def dim(self) -> int:
        return self.m * self.d_prime

    @property
    def code_bits(self) -> int:
        return self.m * int(np.log2(self.zp)) if self.zp > 1 else 0


def _clip_tables(tables: np.ndarray, m: int) -> np.ndarray:
    bound = (1.0 - TABLE_MARGIN) / m
    return np.clip(tables, -bound, bound)


def pq_train(training: np.ndarray, m: int, zp: int, seed: int = 0) -> PQModel:
    """Learn one K-means subcodebook per block and precompute SDC tables.

    Training rows are whitened, block-normalized cell descriptors with all
    tree levels pooled.  Codewords are normalized to unit length; the stored
    table entry for codewords i, j of block b is their inner product divided
    by M (times the pre-normalization norms, which the normalization absorbs).
    """
    x = np.asarray(training, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("training must be a 2-D matrix")
    n, d = x.shape
    if d % m != 0:
        raise ValueError(f"dim {d} not divisible into {m} blocks")
    if not (1 <= zp <= 256) or (zp & (zp - 1)) != 0:
        raise ValueError("zp must be a power of two in [1, 256]")
    if n < zp:
        raise ValueError(f"need at least {zp} training rows, got {n}")
    dp = d // m
    rng = _as_rng(seed)
    books = np.empty((m, zp, dp))
    zero_codes = np.empty(m, dtype=np.uint8)
    for b in range(m):
        block = x[:, b * dp : (b + 1) * dp]
        cents = kmeans(block, zp, seed=rng).centroids.copy()
        norms = np.linalg.norm(cents, axis=1)
        for j in np.flatnonzero(norms <= ZERO_NORM_EPS):
            # same repair rule as empty clusters: jump to the farthest row
            far = int(np.argmax(np.sum((block - cents[j]) ** 2, axis=1)))
            cents[j] = block[far]
            norms[j] = np.linalg.norm(cents[j])
            if norms[j] <= ZERO_NORM_EPS:
                raise ValueError(f"block {b}: degenerate all-zero training data")
        zero_codes[b] = int(np.argmin(norms))
        books[b] = cents / norms[:, None]
    tables = np.einsum("bif,bjf->bij", books, books) / m
    tables = _clip_tables((tables + tables.transpose(0, 2, 1)) / 2.0, m)
    return PQModel(subcodebooks=books, sdc_tables=tables, zero_codes=zero_codes)


def quantize(wd: np.ndarray, model: PQModel) -> np.ndarray:
    """Nearest unit subcodeword per block (max inner product, ties to lowest index).

    All-zero blocks map to the block's reserved code (the codeword of minimal
    pre-normalization norm).
    """
    wd = np.asarray(wd, dtype=np.float64)
    if wd.shape != (model.dim,):
        raise ValueError(f"expected length {model.dim}, got {wd.shape}")
    blocks = wd.reshape(model.m, model.d_prime)
    inner = np.einsum("bf,bjf->bj", blocks, model.subcodebooks)
    codes = np.argmax(inner, axis=1).astype(np.uint8)
    zero = np.linalg.norm(blocks, axis=1) <= ZERO_NORM_EPS
    codes[zero] = model.zero_codes[zero]
    return codes


def quantize_batch(rows: np.ndarray, model: PQModel) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    out = np.empty((rows.shape[0], model.m), dtype=np.uint8)
    for i in range(rows.shape[0]):
        out[i] = quantize(rows[i], model)
    return out


def sdc_similarity(a: np.ndarray, b: np.ndarray, model: PQModel) -> float:
    """Sum of per-block table entries; bounded inside [-1, 1]."""
    return float(model.sdc_tables[np.arange(model.m), a, b].sum())


def reconstruct(codes: np.ndarray, model: PQModel, scaled: bool = False) -> np.ndarray:
    """Concatenate the coded subcodewords; `scaled` divides blocks by sqrt(M),
    which makes plain inner products of reconstructions match sdc_similarity."""
    rec = model.subcodebooks[np.arange(model.m), codes].ravel()
    return rec / np.sqrt(model.m) if scaled else rec


def wnpq_encode(pd: np.ndarray, pca: PcaModel, model: PQModel) -> np.ndarray:
    """Whiten, block-normalize, then quantize a projected descriptor."""
    return quantize(whiten_normalize(pd, pca, model.m), model)


# --------------------------------------------------------------------------
# Sign limit case: one bit per component
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SignCode:
    """Packed per-component sign bits; bit i is 1 iff component i >= 0."""

    dim: int
    packed: np.ndarray  # uint8, big-endian bit order

    def __post_init__(self):
        arr = np.asarray(self.packed, dtype=np.uint8)
        object.__setattr__(self, "packed", arr)


def sign_binarize(wd: np.ndarray) -> SignCode:
    wd = np.asarray(wd, dtype=np.float64)
    bits = (wd >= 0.0).astype(np.uint8)
    return SignCode(dim=wd.shape[0], packed=np.packbits(bits))


def hamming_similarity(a: SignCode, b: SignCode) -> float:
    """1 - 2 * hamming / D: all bits equal -> 1, all different -> -1."""
    if a.dim != b.dim:
        raise ValueError("sign codes of different dimension")
    ham = int(np.unpackbits(np.bitwise_xor(a.packed, b.packed)).sum())
    return 1.0 - 2.0 * ham / a.dim


def sign_pq_model(dim: int) -> PQModel:
    """Explicit {+1, -1} subcodebooks for the M == D limit.

    Code 0 is +1 so a zero component ties to the same choice sign_binarize
    makes; SDC similarity on these books equals the Hamming-path score.
    """
    books = np.tile(np.array([[1.0], [-1.0]]), (dim, 1)).reshape(dim, 2, 1)
    tables = _clip_tables(
        np.tile(np.array([[1.0, -1.0], [-1.0, 1.0]]), (dim, 1)).reshape(dim, 2, 2) / dim, dim
    )
    return PQModel(
        subcodebooks=books,
        sdc_tables=tables,
        zero_codes=np.zeros(dim, dtype=np.uint8),
    )


def sign_codes_to_pq(code: SignCode) -> np.ndarray:
    """Map packed sign bits to sign_pq_model codes (bit 1 -> code 0)."""
    bits = np.unpackbits(code.packed)[: code.dim]
    return (1 - bits).astype(np.uint8)


# --------------------------------------------------------------------------
# Subspace variance measurement
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockVarianceReport:
    """Per-block covariance log-determinants and traces over a training set."""

    log_dets: np.ndarray  # (M,)
    traces: np.ndarray  # (M,)


def subspace_variance_report(
    cells: np.ndarray,
    m: int,
    pipeline: str = "plain",
    model: PcaModel | None = None,
) -> BlockVarianceReport:
    """Measure how balanced the per-block covariances are.

    pipeline "plain" measures the rows as given; "whitened" first applies the
    model's eigenvalue**-0.5 scaling and per-block normalization.
    """
    x = np.asarray(cells, dtype=np.float64)
    n, d = x.shape
    if d % m != 0:
        raise ValueError(f"dim {d} not divisible into {m} blocks")
    if pipeline == "whitened":
        if model is None:
            raise ValueError("whitened pipeline needs the PCA model's eigenvalues")
        x = x * whitening_scale(model)
        blocks = x.reshape(n, m, d // m)
        norms = np.linalg.norm(blocks, axis=2, keepdims=True)
        np.divide(blocks, norms, out=blocks, where=norms > ZERO_NORM_EPS)
        x = blocks.reshape(n, d)
    elif pipeline != "plain":
        raise ValueError(f"unknown pipeline {pipeline!r}")
    dp = d // m
    log_dets = np.empty(m)
    traces = np.empty(m)
    for b in range(m):
        block = x[:, b * dp : (b + 1) * dp]
        cov = np.atleast_2d(np.cov(block, rowvar=False))
        sign, logdet = np.linalg.slogdet(cov)
        log_dets[b] = logdet if sign > 0 else -np.inf
        traces[b] = np.trace(cov)
    return BlockVarianceReport(log_dets=log_dets, traces=traces)


# --------------------------------------------------------------------------
# Model files
# --------------------------------------------------------------------------


def save_pq(model: PQModel, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(PQ_MAGIC)
        fh.write(
            struct.pack(
                "<HHHHB", PQ_VERSION, model.m, model.d_prime, model.zp, int(model.normalized)
            )
        )
        fh.write(model.zero_codes.tobytes())
        fh.write(model.subcodebooks.astype("<f4").tobytes())
        fh.write(model.sdc_tables.astype("<f4").tobytes())


def load_pq(path: str | Path) -> PQModel:
    buf = Path(path).read_bytes()
    if buf[:4] != PQ_MAGIC:
        raise ValueError(f"{path}: bad PQ magic")
    version, m, dp, zp, normalized = struct.unpack_from("<HHHHB", buf, 4)
    if version != PQ_VERSION:
        raise ValueError(f"{path}: unsupported PQ version {version}")
    off = 4 + struct.calcsize("<HHHHB")
    zero_codes = np.frombuffer(buf, dtype=np.uint8, count=m, offset=off)
    off += m
    need = off + (m * zp * dp + m * zp * zp) * 4
    if len(buf) < need:
        raise ValueError(f"{path}: truncated PQ file")
    books = (
        np.frombuffer(buf, dtype="<f4", count=m * zp * dp, offset=off)
        .reshape(m, zp, dp)
        .astype(np.float64)
    )
    off += m * zp * dp * 4
    tables = (
        np.frombuffer(buf, dtype="<f4", count=m * zp * zp, offset=off)
        .reshape(m, zp, zp)
        .astype(np.float64)
    )
    return PQModel(
        subcodebooks=books,
        sdc_tables=_clip_tables(tables, m),
        zero_codes=zero_codes,
        normalized=bool(normalized),
    )
