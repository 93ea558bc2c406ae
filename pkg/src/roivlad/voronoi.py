"""Per-image cell indexes: tree and grid encodings, level projection, storage.

A VoronoiIndex stores one projected descriptor and one interest-point count
per partition-tree cell, in breadth-first slot order with absent slots kept
as zero rows.  Quantized variants store PQ code bytes or packed sign bits.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clustering import (
    PartitionTree,
    TreeShape,
    Vocabulary,
    assign_batch,
    grid_partition,
    tree_geometry,
)
from .encoder import (
    PcaModel,
    ZERO_NORM_EPS,
    project,
    project_linear,
    projected_mean,
    ssr_normalize,
    vlad_from_labels,
)

INDEX_MAGIC = b"VIDX"
INDEX_VERSION = 1

KIND_TREE = 0
KIND_GRID = 1

CODES_NONE = 0  # float32 descriptors
CODES_PQ = 1  # one byte per block
CODES_SIGN = 2  # packed sign bits
CODES_LEAF = 3  # float32 leaf projections only


def _empty_mask(descriptors: np.ndarray, present: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(descriptors.astype(np.float64), axis=1)
    return present & (norms <= ZERO_NORM_EPS)


@dataclass(eq=False)
class VoronoiIndex:
    """Projected cell descriptors plus per-cell point counts for one image."""

    image_id: str
    shape: TreeShape
    counts: np.ndarray  # (slots,) int64
    descriptors: np.ndarray  # (slots, D) float32, zero rows when absent/empty
    empty: np.ndarray = field(default=None)  # present cells with no content

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float32)
        if self.empty is None:
            self.empty = _empty_mask(self.descriptors, self.shape.present)
        self.empty = np.asarray(self.empty, dtype=bool)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    @property
    def cell_count(self) -> int:
        return self.shape.node_count

    def scoreable(self) -> np.ndarray:
        return self.shape.present & ~self.empty


@dataclass(eq=False)
class QuantizedVoronoiIndex:
    """VoronoiIndex with one PQ code byte per block instead of floats."""

    image_id: str
    shape: TreeShape
    counts: np.ndarray
    codes: np.ndarray  # (slots, M) uint8
    empty: np.ndarray  # (slots,) bool

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.codes = np.asarray(self.codes, dtype=np.uint8)
        self.empty = np.asarray(self.empty, dtype=bool)

    @property
    def cell_count(self) -> int:
        return self.shape.node_count

    def scoreable(self) -> np.ndarray:
        return self.shape.present & ~self.empty


@dataclass(eq=False)
class SignVoronoiIndex:
    """VoronoiIndex in the one-bit-per-component limit (sign storage)."""

    image_id: str
    shape: TreeShape
    counts: np.ndarray
    bits: np.ndarray  # (slots, ceil(dim/8)) uint8, packed big-endian
    dim: int
    empty: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        self.empty = np.asarray(self.empty, dtype=bool)

    @property
    def cell_count(self) -> int:
        return self.shape.node_count

    def scoreable(self) -> np.ndarray:
        return self.shape.present & ~self.empty


@dataclass(eq=False)
class MultiIndex:
    """Grid-partition encoding: one descriptor per block, level-raster order."""

    image_id: str
    levels: int
    counts: np.ndarray  # (P,)
    descriptors: np.ndarray  # (P, D) float32

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float32)
        self.empty = np.linalg.norm(self.descriptors.astype(np.float64), axis=1) <= ZERO_NORM_EPS

    @property
    def block_count(self) -> int:
        return self.descriptors.shape[0]

    def scoreable(self) -> np.ndarray:
        return ~self.empty


@dataclass(eq=False)
class LeafStore:
    """Leaf-only storage for level projection.

    Vectors are the uncentered linear projections of each leaf cell's raw
    descriptor: adding them up the tree and subtracting the projected
    training mean once reproduces the centered projection of any ancestor.
    """

    image_id: str
    shape: TreeShape
    counts: np.ndarray  # (slots,) leaf slots hold counts, others 0
    vectors: np.ndarray  # (slots, D) float32, populated at leaf slots only


def ve_encode(
    fs, vocab: Vocabulary, tree: PartitionTree, pca: PcaModel, ssr: bool = True
) -> VoronoiIndex:
    """Encode every tree cell: residual aggregation, SSR (optional), projection."""
    if fs.descriptor_dim != vocab.dim:
        raise ValueError("feature/vocabulary dimension mismatch")
    if vocab.k * vocab.dim != pca.input_dim:
        raise ValueError("vocabulary/PCA dimension mismatch")
    shape = tree.shape
    labels = (
        assign_batch(fs.descriptors.astype(np.float64), vocab.centroids)
        if fs.n
        else np.empty(0, dtype=np.int64)
    )
    counts = np.zeros(shape.slots, dtype=np.int64)
    descs = np.zeros((shape.slots, pca.dim), dtype=np.float32)
    for slot in range(shape.slots):
        if not shape.present[slot]:
            continue
        members = tree.members[slot]
        counts[slot] = len(members)
        raw = vlad_from_labels(fs.descriptors, labels, vocab, members)
        cell = ssr_normalize(raw) if ssr else raw
        descs[slot] = project(cell, pca)
    return VoronoiIndex(fs.image_id, shape, counts, descs)


def multi_encode(fs, vocab: Vocabulary, pca: PcaModel, levels: int, ssr: bool = True) -> MultiIndex:
    """Encode every grid block of the multi-scale rectangular tiling."""
    grid = grid_partition(fs, levels)
    labels = (
        assign_batch(fs.descriptors.astype(np.float64), vocab.centroids)
        if fs.n
        else np.empty(0, dtype=np.int64)
    )
    counts = np.zeros(grid.block_count, dtype=np.int64)
    descs = np.zeros((grid.block_count, pca.dim), dtype=np.float32)
    for b, members in enumerate(grid.blocks):
        counts[b] = len(members)
        raw = vlad_from_labels(fs.descriptors, labels, vocab, members)
        cell = ssr_normalize(raw) if ssr else raw
        descs[b] = project(cell, pca)
    return MultiIndex(fs.image_id, levels, counts, descs)


def leaf_projections(
    fs, vocab: Vocabulary, tree: PartitionTree, pca: PcaModel, ssr: bool = True
) -> LeafStore:
    """Store uncentered linear projections of the pruned tree's leaf cells."""
    shape = tree.shape
    labels = (
        assign_batch(fs.descriptors.astype(np.float64), vocab.centroids)
        if fs.n
        else np.empty(0, dtype=np.int64)
    )
    counts = np.zeros(shape.slots, dtype=np.int64)
    vectors = np.zeros((shape.slots, pca.dim), dtype=np.float32)
    for slot in shape.leaf_slots():
        members = tree.members[slot]
        counts[slot] = len(members)
        raw = vlad_from_labels(fs.descriptors, labels, vocab, members)
        cell = ssr_normalize(raw) if ssr else raw
        vectors[slot] = project_linear(cell, pca)
    return LeafStore(fs.image_id, shape, counts, vectors)


def _leaf_descendants(shape: TreeShape, slot: int, leaves: set[int]) -> list[int]:
    found = []
    stack = [slot]
    while stack:
        s = stack.pop()
        if not shape.present[s]:
            continue
        if s in leaves:
            found.append(s)
        else:
            stack.extend(shape.children(s))
    return found


def level_project(leaves: LeafStore, pca: PcaModel) -> VoronoiIndex:
    """Rebuild every cell descriptor from stored leaf vectors.

    Each node's descriptor is the sum of its constituent leaf vectors minus
    the projected training mean, renormalized.  Structurally identical to the
    output of ve_encode; exactly equal to it when SSR is disabled.
    """
    shape = leaves.shape
    leaf_set = set(shape.leaf_slots())
    mean_p = projected_mean(pca)
    counts = np.zeros(shape.slots, dtype=np.int64)
    descs = np.zeros((shape.slots, pca.dim), dtype=np.float32)
    vec64 = leaves.vectors.astype(np.float64)
    for slot in range(shape.slots):
        if not shape.present[slot]:
            continue
        members = _leaf_descendants(shape, slot, leaf_set)
        counts[slot] = int(leaves.counts[list(members)].sum()) if members else 0
        if not members or counts[slot] == 0:
            continue
        total = vec64[members].sum(axis=0)
        if np.linalg.norm(total) <= ZERO_NORM_EPS:
            continue  # fully cancelled: keep the zero sentinel
        z = total - mean_p
        norm = np.linalg.norm(z)
        if norm > ZERO_NORM_EPS:
            descs[slot] = z / norm
    return VoronoiIndex(leaves.image_id, shape, counts, descs)


def whiten_index(index: VoronoiIndex, pca: PcaModel, m: int) -> VoronoiIndex:
    """Whitened, subspace-normalized twin of an index, scaled by 1/sqrt(m).

    Inner products of two such cells equal the mean of their per-block
    cosines, the exact quantity the SDC tables approximate, so this is the
    unquantized reference configuration for quantized search.
    """
    from .encoder import whiten_normalize

    descs = np.zeros(index.descriptors.shape, dtype=np.float64)
    for slot in np.flatnonzero(index.scoreable()):
        descs[slot] = whiten_normalize(
            index.descriptors[slot].astype(np.float64), pca, m
        ) / np.sqrt(m)
    return VoronoiIndex(
        index.image_id, index.shape, index.counts, descs.astype(np.float32), index.empty
    )


# --------------------------------------------------------------------------
# Storage accounting
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StorageReport:
    """Bytes per image for each storage strategy, plus shared table cost."""

    cell_count: int
    leaf_count: int
    full_bytes: int
    leaf_only_bytes: int
    quantized_bytes: int | None
    table_values: int | None

    @property
    def table_bytes(self) -> int | None:
        return None if self.table_values is None else self.table_values * 4


def storage_report(
    levels: int, branching: int, dim: int, pq_m: int | None = None, pq_zp: int | None = None
) -> StorageReport:
    """Pure arithmetic over the index configuration; float32 components."""
    sizes, _, total = tree_geometry((branching,) * (levels - 1))
    quantized = None
    table_values = None
    if pq_m is not None:
        if pq_zp is None:
            raise ValueError("pq_zp required with pq_m")
        bits_per_block = int(math.log2(pq_zp))
        if 2**bits_per_block != pq_zp:
            raise ValueError("pq_zp must be a power of two")
        quantized = total * pq_m * bits_per_block // 8
        table_values = pq_zp * pq_zp * pq_m
    return StorageReport(
        cell_count=total,
        leaf_count=sizes[-1],
        full_bytes=total * dim * 4,
        leaf_only_bytes=sizes[-1] * dim * 4,
        quantized_bytes=quantized,
        table_values=table_values,
    )


# --------------------------------------------------------------------------
# Index files
# --------------------------------------------------------------------------


def _pack_bitmap(mask: np.ndarray) -> bytes:
    return np.packbits(mask.astype(np.uint8)).tobytes()


def _unpack_bitmap(buf: bytes, offset: int, n: int) -> tuple[np.ndarray, int]:
    nbytes = (n + 7) // 8
    raw = np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=offset)
    return np.unpackbits(raw)[:n].astype(bool), offset + nbytes


def save_index(
    indexes: list, path: str | Path, *, pq_m: int = 0, pq_zp: int = 0
) -> None:
    """Write a list of same-shape per-image indexes to one index file."""
    if not indexes:
        raise ValueError("cannot save an empty index list")
    first = indexes[0]
    if isinstance(first, MultiIndex):
        kind, codes, levels, branching = KIND_GRID, CODES_NONE, first.levels, 0
        dim = first.descriptors.shape[1]
    elif isinstance(first, QuantizedVoronoiIndex):
        kind, codes = KIND_TREE, CODES_PQ
        levels = first.shape.levels
        branching = first.shape.branching[0] if first.shape.branching else 0
        dim = first.codes.shape[1]
    elif isinstance(first, SignVoronoiIndex):
        kind, codes = KIND_TREE, CODES_SIGN
        levels = first.shape.levels
        branching = first.shape.branching[0] if first.shape.branching else 0
        dim = first.dim
    elif isinstance(first, LeafStore):
        kind, codes = KIND_TREE, CODES_LEAF
        levels = first.shape.levels
        branching = first.shape.branching[0] if first.shape.branching else 0
        dim = first.vectors.shape[1]
    elif isinstance(first, VoronoiIndex):
        kind, codes = KIND_TREE, CODES_NONE
        levels = first.shape.levels
        branching = first.shape.branching[0] if first.shape.branching else 0
        dim = first.dim
    else:
        raise TypeError(f"cannot save index of type {type(first).__name__}")
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(
            struct.pack(
                "<HBBHHIHHI",
                INDEX_VERSION,
                kind,
                codes,
                levels,
                branching,
                dim,
                pq_m,
                pq_zp,
                len(indexes),
            )
        )
        for idx in indexes:
            ident = idx.image_id.encode("utf-8")
            fh.write(struct.pack("<H", len(ident)))
            fh.write(ident)
            if kind == KIND_TREE:
                fh.write(_pack_bitmap(idx.shape.present))
            fh.write(idx.counts.astype("<u4").tobytes())
            if codes == CODES_NONE:
                fh.write(idx.descriptors.astype("<f4").tobytes())
            elif codes == CODES_LEAF:
                fh.write(idx.vectors.astype("<f4").tobytes())
            elif codes == CODES_PQ:
                fh.write(_pack_bitmap(idx.empty))
                fh.write(idx.codes.astype(np.uint8).tobytes())
            elif codes == CODES_SIGN:
                fh.write(_pack_bitmap(idx.empty))
                fh.write(idx.bits.astype(np.uint8).tobytes())


def load_index(path: str | Path) -> tuple[list, dict]:
    """Read an index file; returns (per-image indexes, header info dict)."""
    buf = Path(path).read_bytes()
    if buf[:4] != INDEX_MAGIC:
        raise ValueError(f"{path}: bad index magic")
    version, kind, codes, levels, branching, dim, pq_m, pq_zp, n_images = struct.unpack_from(
        "<HBBHHIHHI", buf, 4
    )
    if version != INDEX_VERSION:
        raise ValueError(f"{path}: unsupported index version {version}")
    off = 4 + struct.calcsize("<HBBHHIHHI")
    header = {
        "kind": kind,
        "codes": codes,
        "levels": levels,
        "branching": branching,
        "dim": dim,
        "pq_m": pq_m,
        "pq_zp": pq_zp,
    }
    out = []
    for _ in range(n_images):
        (id_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        ident = buf[off : off + id_len].decode("utf-8")
        off += id_len
        if kind == KIND_TREE:
            bvec = (branching,) * (levels - 1)
            _, _, slots = tree_geometry(bvec)
            present, off = _unpack_bitmap(buf, off, slots)
            shape = TreeShape(bvec, present)
        else:
            if codes != CODES_NONE:
                raise ValueError(f"{path}: grid indexes store float descriptors only")
            slots = sum((l + 1) ** 2 for l in range(levels))
        counts = np.frombuffer(buf, dtype="<u4", count=slots, offset=off).astype(np.int64)
        off += slots * 4
        if codes == CODES_NONE:
            descs = np.frombuffer(buf, dtype="<f4", count=slots * dim, offset=off).reshape(
                slots, dim
            )
            off += slots * dim * 4
            if kind == KIND_GRID:
                out.append(MultiIndex(ident, levels, counts, descs))
            else:
                out.append(VoronoiIndex(ident, shape, counts, descs))
        elif codes == CODES_LEAF:
            vectors = np.frombuffer(buf, dtype="<f4", count=slots * dim, offset=off).reshape(
                slots, dim
            )
            off += slots * dim * 4
            out.append(LeafStore(ident, shape, counts, vectors))
        elif codes == CODES_PQ:
            empty, off = _unpack_bitmap(buf, off, slots)
            arr = np.frombuffer(buf, dtype=np.uint8, count=slots * dim, offset=off).reshape(
                slots, dim
            )
            off += slots * dim
            out.append(QuantizedVoronoiIndex(ident, shape, counts, arr, empty))
        elif codes == CODES_SIGN:
            empty, off = _unpack_bitmap(buf, off, slots)
            nbytes = (dim + 7) // 8
            arr = np.frombuffer(buf, dtype=np.uint8, count=slots * nbytes, offset=off).reshape(
                slots, nbytes
            )
            off += slots * nbytes
            out.append(SignVoronoiIndex(ident, shape, counts, arr, dim, empty))
        else:
            raise ValueError(f"{path}: unknown code layout {codes}")
    return out, header
