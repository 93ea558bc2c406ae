"""Residual aggregation, power/L2 normalization, PCA projection, and whitening."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clustering import Vocabulary, assign_batch

PCA_MAGIC = b"VPCA"
PCA_VERSION = 1

# Relative floor applied to eigenvalues before the inverse square root, so a
# near-null component cannot blow up the whitened vector.
EIGENVALUE_FLOOR = 1e-10

# Norms below this are treated as the all-zero sentinel of an empty cell.
ZERO_NORM_EPS = 1e-12


def vlad_encode(fs, vocab: Vocabulary, member_indices: np.ndarray | None = None) -> np.ndarray:
    """Sum of residuals to the assigned centroid, one block per visual word.

    Returns the (K * dim,) concatenated residual vector.  An empty member set
    yields the all-zero vector, which downstream stages treat as the empty
    sentinel.
    """
    if fs.descriptor_dim != vocab.dim:
        raise ValueError(f"descriptor dim {fs.descriptor_dim} != vocabulary dim {vocab.dim}")
    if member_indices is None:
        members = np.arange(fs.n, dtype=np.int64)
    else:
        members = np.asarray(member_indices, dtype=np.int64)
        if members.size and (members.min() < 0 or members.max() >= fs.n):
            raise IndexError("member index out of range")
    v = np.zeros((vocab.k, vocab.dim))
    if members.size:
        sel = fs.descriptors[members].astype(np.float64)
        labels = assign_batch(sel, vocab.centroids)
        np.add.at(v, labels, sel)
        counts = np.bincount(labels, minlength=vocab.k)
        v -= counts[:, None] * vocab.centroids
    return v.ravel()


def vlad_from_labels(
    descriptors: np.ndarray, labels: np.ndarray, vocab: Vocabulary, members: np.ndarray
) -> np.ndarray:
    """vlad_encode with precomputed assignments, for batch index building."""
    v = np.zeros((vocab.k, vocab.dim))
    if members.size:
        lab = labels[members]
        np.add.at(v, lab, descriptors[members].astype(np.float64))
        counts = np.bincount(lab, minlength=vocab.k)
        v -= counts[:, None] * vocab.centroids
    return v.ravel()


def ssr_normalize(raw: np.ndarray) -> np.ndarray:
    """Signed square root per component, then scale to unit L2 norm.

    The zero vector passes through unchanged (empty-cell sentinel).
    """
    raw = np.asarray(raw, dtype=np.float64)
    out = np.sign(raw) * np.sqrt(np.abs(raw))
    norm = np.linalg.norm(out)
    if norm > ZERO_NORM_EPS:
        out /= norm
    return out


@dataclass(frozen=True, eq=False)
class PcaModel:
    """Mean, projection matrix, and retained eigenvalues of a trained PCA.

    `projection` is (U, D) with orthonormal columns (renormalized explicitly
    after the high-dimensional route's rotation back to data space);
    `eigenvalues` holds the D retained sample-covariance eigenvalues in
    descending order.
    """

    mean: np.ndarray  # (U,)
    projection: np.ndarray  # (U, D)
    eigenvalues: np.ndarray  # (D,), descending
    training_rows: int

    def __post_init__(self):
        for name in ("mean", "projection", "eigenvalues"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.float64))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.projection.ndim != 2:
            raise ValueError("projection must be (U, D)")
        if self.mean.shape != (self.projection.shape[0],):
            raise ValueError("mean length must match projection rows")
        if self.eigenvalues.shape != (self.projection.shape[1],):
            raise ValueError("need one eigenvalue per retained component")
        if np.any(self.eigenvalues < 0) or np.any(np.diff(self.eigenvalues) > 1e-12):
            raise ValueError("eigenvalues must be non-negative and non-increasing")

    @property
    def input_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def dim(self) -> int:
        return self.projection.shape[1]


def pca_train(training: np.ndarray, d: int, force_path: str | None = None) -> PcaModel:
    """Train a PCA projection onto the top-d components of the training rows.

    When the input dimension exceeds the number of rows, the eigenproblem is
    solved on the rows' Gram matrix and the eigenvectors are rotated back to
    data space (scaled by eigenvalue**-0.5, then column-renormalized);
    otherwise the covariance matrix is decomposed directly.  `force_path`
    ("gram" or "direct") overrides the automatic choice, for cross-checking.
    """
    x = np.asarray(training, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("training must be a 2-D matrix")
    rows, u = x.shape
    if rows < 2:
        raise ValueError("need at least 2 training rows")
    if not (1 <= d <= min(rows - 1, u)):
        raise ValueError(f"d must be in [1, {min(rows - 1, u)}], got {d}")
    mean = x.mean(axis=0)
    xc = x - mean
    path = force_path or ("gram" if u > rows else "direct")
    if path == "gram":
        gram = xc @ xc.T
        w, vecs = np.linalg.eigh(gram)
        w = np.clip(w[::-1], 0.0, None)
        vecs = vecs[:, ::-1]
        rank = int(np.count_nonzero(w > (w[0] * 1e-10 if w[0] > 0 else 0.0)))
        if d > rank:
            raise ValueError(f"training matrix rank is {rank}, cannot retain {d} components")
        proj = xc.T @ vecs[:, :d]
        proj /= np.sqrt(w[:d])
        eig = w[:d] / (rows - 1)
    elif path == "direct":
        cov = (xc.T @ xc) / (rows - 1)
        w, vecs = np.linalg.eigh(cov)
        w = np.clip(w[::-1], 0.0, None)
        vecs = vecs[:, ::-1]
        rank = int(np.count_nonzero(w > (w[0] * 1e-10 if w[0] > 0 else 0.0)))
        if d > rank:
            raise ValueError(f"training matrix rank is {rank}, cannot retain {d} components")
        proj = vecs[:, :d].copy()
        eig = w[:d]
    else:
        raise ValueError(f"unknown path {force_path!r}")
    proj /= np.linalg.norm(proj, axis=0)
    return PcaModel(mean=mean, projection=proj, eigenvalues=eig, training_rows=rows)


def project(raw: np.ndarray, model: PcaModel) -> np.ndarray:
    """Center, project, and L2-normalize; the zero sentinel stays zero."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (model.input_dim,):
        raise ValueError(f"expected length {model.input_dim}, got {raw.shape}")
    if np.linalg.norm(raw) <= ZERO_NORM_EPS:
        return np.zeros(model.dim)
    z = (raw - model.mean) @ model.projection
    norm = np.linalg.norm(z)
    if norm <= ZERO_NORM_EPS:
        return np.zeros(model.dim)
    return z / norm


def project_linear(raw: np.ndarray, model: PcaModel) -> np.ndarray:
    """Pure linear projection: no centering, no normalization.

    Additive over descriptor sums, which is what level projection stores.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (model.input_dim,):
        raise ValueError(f"expected length {model.input_dim}, got {raw.shape}")
    return raw @ model.projection


def projected_mean(model: PcaModel) -> np.ndarray:
    """The training mean pushed through the projection; level projection
    subtracts it once per reconstructed cell."""
    return model.mean @ model.projection


def whitening_scale(model: PcaModel) -> np.ndarray:
    """Per-component eigenvalue**-0.5 with the relative floor applied."""
    lam = model.eigenvalues
    lam_max = float(lam.max()) if lam.size else 0.0
    floor = EIGENVALUE_FLOOR * lam_max if lam_max > 0 else 1.0
    if np.any(lam < floor):
        warnings.warn(
            "near-zero eigenvalues floored before whitening", RuntimeWarning, stacklevel=2
        )
    return 1.0 / np.sqrt(np.maximum(lam, floor))


def whiten_normalize(pd: np.ndarray, model: PcaModel, m: int) -> np.ndarray:
    """Scale components by eigenvalue**-0.5, then L2-normalize each of m blocks.

    Zero blocks stay zero.  Every nonzero block of the result has unit norm,
    which is what bounds the quantized similarity score.
    """
    pd = np.asarray(pd, dtype=np.float64)
    d = model.dim
    if pd.shape != (d,):
        raise ValueError(f"expected length {d}, got {pd.shape}")
    if d % m != 0:
        raise ValueError(f"dim {d} not divisible into {m} blocks")
    z = pd * whitening_scale(model)
    blocks = z.reshape(m, d // m)
    norms = np.linalg.norm(blocks, axis=1)
    nonzero = norms > ZERO_NORM_EPS
    blocks[nonzero] /= norms[nonzero, None]
    blocks[~nonzero] = 0.0
    return blocks.ravel()


def save_pca(model: PcaModel, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(PCA_MAGIC)
        fh.write(
            struct.pack("<HIII", PCA_VERSION, model.input_dim, model.dim, model.training_rows)
        )
        fh.write(model.mean.astype("<f4").tobytes())
        fh.write(model.eigenvalues.astype("<f4").tobytes())
        fh.write(model.projection.astype("<f4").tobytes())


def load_pca(path: str | Path) -> PcaModel:
    buf = Path(path).read_bytes()
    if buf[:4] != PCA_MAGIC:
        raise ValueError(f"{path}: bad PCA magic")
    version, u, d, rows = struct.unpack_from("<HIII", buf, 4)
    if version != PCA_VERSION:
        raise ValueError(f"{path}: unsupported PCA version {version}")
    off = 4 + 14
    need = off + (u + d + u * d) * 4
    if len(buf) < need:
        raise ValueError(f"{path}: truncated PCA file")
    mean = np.frombuffer(buf, dtype="<f4", count=u, offset=off).astype(np.float64)
    off += u * 4
    eig = np.frombuffer(buf, dtype="<f4", count=d, offset=off).astype(np.float64)
    off += d * 4
    proj = (
        np.frombuffer(buf, dtype="<f4", count=u * d, offset=off)
        .reshape(u, d)
        .astype(np.float64)
    )
    # float32 storage can leave tiny descending-order violations
    eig = np.maximum.accumulate(eig[::-1])[::-1]
    return PcaModel(mean=mean, projection=proj, eigenvalues=eig, training_rows=rows)
