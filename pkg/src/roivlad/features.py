"""Local-feature data model, binary file I/O, and synthetic dataset generation.

A feature set pairs keypoint pixel locations with fixed-width local
descriptors for one image.  Feature files are one-per-image ("VFEA"
binary format); a dataset is a tab-separated manifest listing image ids
and file paths.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

FEATURE_MAGIC = b"VFEA"
FEATURE_VERSION = 1

# Planted objects with fewer keypoints than this in an image make that
# image "junk" for the object's query rather than a true positive.
JUNK_MAX_POINTS = 3


class FeatureFileError(Exception):
    """Base error for feature file format violations."""


class BadMagicError(FeatureFileError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(FeatureFileError):
    """File ends before the payload declared in its header."""


class KeypointBoundsError(FeatureFileError):
    """A keypoint lies outside the declared image rectangle."""


class DimensionMismatchError(FeatureFileError):
    """Descriptor dimensions are inconsistent or invalid."""


class Keypoint(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Keypoints and descriptors of one image.

    Arrays are normalized to float32 and marked read-only: a FeatureSet is
    immutable after construction and safe to share across threads.
    """

    image_id: str
    image_width: int
    image_height: int
    keypoints: np.ndarray  # (N, 2) float32 columns x, y
    descriptors: np.ndarray  # (N, dim) float32

    def __post_init__(self):
        kp = np.ascontiguousarray(np.asarray(self.keypoints, dtype=np.float32))
        de = np.ascontiguousarray(np.asarray(self.descriptors, dtype=np.float32))
        if kp.ndim != 2 or kp.shape[1] != 2:
            raise ValueError(f"keypoints must be (N, 2), got {kp.shape}")
        if de.ndim != 2:
            raise ValueError(f"descriptors must be 2-D, got {de.shape}")
        if kp.shape[0] != de.shape[0]:
            raise DimensionMismatchError(
                f"{kp.shape[0]} keypoints but {de.shape[0]} descriptor rows"
            )
        if de.shape[1] < 1:
            raise DimensionMismatchError("descriptor_dim must be >= 1")
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError("image dimensions must be positive")
        if kp.shape[0]:
            if (
                np.any(kp[:, 0] < 0)
                or np.any(kp[:, 0] >= self.image_width)
                or np.any(kp[:, 1] < 0)
                or np.any(kp[:, 1] >= self.image_height)
            ):
                raise KeypointBoundsError(
                    f"keypoints of {self.image_id!r} outside "
                    f"{self.image_width}x{self.image_height}"
                )
        kp.setflags(write=False)
        de.setflags(write=False)
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "descriptors", de)

    @property
    def n(self) -> int:
        return self.keypoints.shape[0]

    @property
    def descriptor_dim(self) -> int:
        return self.descriptors.shape[1]

    def keypoint(self, i: int) -> Keypoint:
        return Keypoint(float(self.keypoints[i, 0]), float(self.keypoints[i, 1]))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, FeatureSet)
            and self.image_id == other.image_id
            and self.image_width == other.image_width
            and self.image_height == other.image_height
            and np.array_equal(self.keypoints, other.keypoints)
            and np.array_equal(self.descriptors, other.descriptors)
        )


def save_features(fs: FeatureSet, path: str | Path) -> None:
    """Write a FeatureSet to disk; load_features(save_features(fs)) == fs bit-exactly."""
    path = Path(path)
    ident = fs.image_id.encode("utf-8")
    if len(ident) > 0xFFFF:
        raise ValueError("image_id too long")
    header = FEATURE_MAGIC + struct.pack(
        "<HH", FEATURE_VERSION, len(ident)
    ) + ident + struct.pack(
        "<IIIH",
        fs.image_width,
        fs.image_height,
        fs.n,
        fs.descriptor_dim,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(fs.keypoints.astype("<f4").tobytes())
        fh.write(fs.descriptors.astype("<f4").tobytes())


def _take(buf: bytes, offset: int, count: int) -> tuple[bytes, int]:
    if offset + count > len(buf):
        raise TruncatedFileError(
            f"need {offset + count} bytes, file has {len(buf)}"
        )
    return buf[offset : offset + count], offset + count


def load_features(path: str | Path) -> FeatureSet:
    """Read and validate a feature file written by :func:`save_features`."""
    buf = Path(path).read_bytes()
    magic, off = _take(buf, 0, 4)
    if magic != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    raw, off = _take(buf, off, 4)
    version, id_len = struct.unpack("<HH", raw)
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    ident, off = _take(buf, off, id_len)
    raw, off = _take(buf, off, 14)
    width, height, n, dim = struct.unpack("<IIIH", raw)
    if dim < 1:
        raise DimensionMismatchError(f"{path}: descriptor_dim == 0")
    raw, off = _take(buf, off, n * 8)
    keypoints = np.frombuffer(raw, dtype="<f4").reshape(n, 2)
    raw, off = _take(buf, off, n * dim * 4)
    descriptors = np.frombuffer(raw, dtype="<f4").reshape(n, dim)
    return FeatureSet(
        image_id=ident.decode("utf-8"),
        image_width=width,
        image_height=height,
        keypoints=keypoints,
        descriptors=descriptors,
    )


def crop_features(fs: FeatureSet, rect: tuple[float, float, float, float]) -> FeatureSet:
    """Keep only keypoints inside rect = (x, y, w, h); [x, x+w) by [y, y+h)."""
    x, y, w, h = rect
    kp = fs.keypoints
    keep = (
        (kp[:, 0] >= x)
        & (kp[:, 0] < x + w)
        & (kp[:, 1] >= y)
        & (kp[:, 1] < y + h)
    )
    return FeatureSet(
        image_id=fs.image_id,
        image_width=fs.image_width,
        image_height=fs.image_height,
        keypoints=kp[keep],
        descriptors=fs.descriptors[keep],
    )


# --------------------------------------------------------------------------
# Dataset manifests and ground truth
# --------------------------------------------------------------------------


def save_manifest(entries: list[tuple[str, str]], path: str | Path) -> None:
    """Write `image_id<TAB>path` lines; paths are stored as given."""
    lines = [f"{image_id}\t{p}" for image_id, p in entries]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_manifest(path: str | Path) -> list[tuple[str, Path]]:
    """Read a manifest; relative paths resolve against the manifest directory."""
    path = Path(path)
    base = path.parent
    entries: list[tuple[str, Path]] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FeatureFileError(f"{path}:{lineno}: expected `id<TAB>path`")
        image_id, rel = parts
        p = Path(rel)
        entries.append((image_id, p if p.is_absolute() else base / p))
    return entries


def load_dataset(manifest_path: str | Path) -> list[FeatureSet]:
    """Load every feature file in a manifest, enforcing one descriptor_dim."""
    sets = [load_features(p) for _, p in load_manifest(manifest_path)]
    dims = {fs.descriptor_dim for fs in sets}
    if len(dims) > 1:
        raise DimensionMismatchError(f"mixed descriptor dims in dataset: {sorted(dims)}")
    return sets


@dataclass(frozen=True)
class RoiQuery:
    """A planted-object query: source image and bounding rectangle."""

    query_id: str
    image_id: str
    rect: tuple[float, float, float, float]  # x, y, w, h


@dataclass
class GroundTruth:
    """Which images contain each planted object, split into good and junk sets.

    `occurrences` keeps the raw plant counts (all hosting images, including
    the query source); `good`/`junk` exclude the query's own source image.
    """

    occurrences: dict[str, dict[str, int]] = field(default_factory=dict)
    regions: dict[str, dict[str, tuple[float, float, float, float]]] = field(
        default_factory=dict
    )
    queries: list[RoiQuery] = field(default_factory=list)
    good: dict[str, set[str]] = field(default_factory=dict)
    junk: dict[str, set[str]] = field(default_factory=dict)


def save_ground_truth(gt: GroundTruth, path: str | Path) -> None:
    """Write `query_id<TAB>good|junk<TAB>image_id` lines."""
    lines = []
    for qid in sorted(gt.good):
        for iid in sorted(gt.good[qid]):
            lines.append(f"{qid}\tgood\t{iid}")
        for iid in sorted(gt.junk.get(qid, ())):
            lines.append(f"{qid}\tjunk\t{iid}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_ground_truth(path: str | Path) -> tuple[dict[str, set[str]], dict[str, set[str]]]:
    """Read good/junk image-id sets keyed by query id."""
    good: dict[str, set[str]] = {}
    junk: dict[str, set[str]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[1] not in ("good", "junk"):
            raise FeatureFileError(f"{path}:{lineno}: expected `qid<TAB>good|junk<TAB>id`")
        qid, kind, iid = parts
        target = good if kind == "good" else junk
        target.setdefault(qid, set()).add(iid)
        (junk if kind == "good" else good).setdefault(qid, set())
    return good, junk


def save_queries(queries: list[RoiQuery], path: str | Path) -> None:
    """Write `query_id<TAB>image_id<TAB>x,y,w,h` lines."""
    lines = [
        f"{q.query_id}\t{q.image_id}\t"
        + ",".join(f"{v:.3f}" for v in q.rect)
        for q in queries
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_queries(path: str | Path) -> list[RoiQuery]:
    queries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FeatureFileError(f"{path}:{lineno}: expected `qid<TAB>id<TAB>rect`")
        qid, iid, rect = parts
        vals = tuple(float(v) for v in rect.split(","))
        if len(vals) != 4:
            raise FeatureFileError(f"{path}:{lineno}: rect must be x,y,w,h")
        queries.append(RoiQuery(qid, iid, vals))
    return queries


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """Parameters for a planted-object synthetic dataset.

    Each planted object is a spatial Gaussian cluster whose descriptors are
    one fixed signature vector plus noise; background keypoints are uniform
    in space with broad-distribution descriptors.
    """

    dataset_size: int
    planted_roi_count: int
    images_per_object: int = 8
    roi_points_range: tuple[int, int] = (4, 24)
    background_points_range: tuple[int, int] = (120, 240)
    descriptor_dim: int = 16
    cluster_spread: float = 12.0
    signature_noise: float = 0.15
    # 0 draws background descriptors iid Gaussian; > 0 draws them around a
    # shared pool of that many signatures, giving images realistic common
    # structure instead of a flat noise floor.
    background_vocab_size: int = 0
    image_width: int = 640
    image_height: int = 480
    seed: int = 0

    def __post_init__(self):
        if self.dataset_size < 1:
            raise ValueError("dataset_size must be >= 1")
        if self.planted_roi_count < 0:
            raise ValueError("planted_roi_count must be >= 0")
        if self.planted_roi_count and not (
            1 <= self.images_per_object <= self.dataset_size
        ):
            raise ValueError("images_per_object must be in [1, dataset_size]")
        for lo, hi in (self.roi_points_range, self.background_points_range):
            if lo < 0 or hi < lo:
                raise ValueError("point ranges must satisfy 0 <= lo <= hi")
        if self.planted_roi_count and self.roi_points_range[0] < 1:
            raise ValueError("planted objects need at least one keypoint")
        if self.cluster_spread <= 0 or self.signature_noise <= 0:
            raise ValueError("spreads must be positive")
        if self.background_vocab_size < 0:
            raise ValueError("background_vocab_size must be >= 0")
        if self.descriptor_dim < 1:
            raise ValueError("descriptor_dim must be >= 1")


def synth_generate(spec: SyntheticDatasetSpec) -> tuple[list[FeatureSet], GroundTruth]:
    """Generate a seeded synthetic dataset; a pure function of the spec."""
    rng = np.random.default_rng(spec.seed)
    w, h, dim = spec.image_width, spec.image_height, spec.descriptor_dim
    image_ids = [f"img{i:04d}" for i in range(spec.dataset_size)]

    signatures = rng.normal(0.0, 1.0, (spec.planted_roi_count, dim))
    bg_vocab = (
        rng.normal(0.0, 1.0, (spec.background_vocab_size, dim))
        if spec.background_vocab_size
        else None
    )
    hosts = [
        np.sort(rng.choice(spec.dataset_size, spec.images_per_object, replace=False))
        for _ in range(spec.planted_roi_count)
    ]

    planted_kp: list[list[np.ndarray]] = [[] for _ in image_ids]
    planted_desc: list[list[np.ndarray]] = [[] for _ in image_ids]
    gt = GroundTruth()

    margin = min(4.0 * spec.cluster_spread, w / 4, h / 4)
    for obj in range(spec.planted_roi_count):
        oid = f"obj{obj:03d}"
        gt.occurrences[oid] = {}
        gt.regions[oid] = {}
        for img in hosts[obj]:
            lo, hi = spec.roi_points_range
            count = int(rng.integers(lo, hi + 1))
            center = rng.uniform([margin, margin], [w - margin, h - margin])
            pts = center + rng.normal(0.0, spec.cluster_spread, (count, 2))
            pts[:, 0] = np.clip(pts[:, 0], 0.0, w - 1e-3)
            pts[:, 1] = np.clip(pts[:, 1], 0.0, h - 1e-3)
            desc = signatures[obj] + rng.normal(0.0, spec.signature_noise, (count, dim))
            planted_kp[img].append(pts)
            planted_desc[img].append(desc)
            x0 = max(0.0, float(pts[:, 0].min()) - 1.0)
            y0 = max(0.0, float(pts[:, 1].min()) - 1.0)
            x1 = min(float(w), float(pts[:, 0].max()) + 1.0)
            y1 = min(float(h), float(pts[:, 1].max()) + 1.0)
            gt.occurrences[oid][image_ids[img]] = count
            gt.regions[oid][image_ids[img]] = (x0, y0, x1 - x0, y1 - y0)

    feature_sets = []
    for img, iid in enumerate(image_ids):
        lo, hi = spec.background_points_range
        count = int(rng.integers(lo, hi + 1))
        bg_pts = rng.uniform([0.0, 0.0], [w - 1e-3, h - 1e-3], (count, 2))
        if bg_vocab is None:
            bg_desc = rng.normal(0.0, 1.0, (count, dim))
        else:
            picks = rng.integers(0, spec.background_vocab_size, count)
            bg_desc = bg_vocab[picks] + rng.normal(0.0, spec.signature_noise, (count, dim))
        kp = np.vstack(planted_kp[img] + [bg_pts]) if planted_kp[img] else bg_pts
        desc = np.vstack(planted_desc[img] + [bg_desc]) if planted_desc[img] else bg_desc
        feature_sets.append(
            FeatureSet(
                image_id=iid,
                image_width=w,
                image_height=h,
                keypoints=kp,
                descriptors=desc,
            )
        )

    for oid in sorted(gt.occurrences):
        occ = gt.occurrences[oid]
        # Query source: the hosting image with the most planted points,
        # ties to the lexicographically smallest id.  Excluded from both sets.
        source = min(occ, key=lambda iid: (-occ[iid], iid))
        gt.queries.append(RoiQuery(oid, source, gt.regions[oid][source]))
        gt.good[oid] = {
            iid for iid, c in occ.items() if iid != source and c > JUNK_MAX_POINTS
        }
        gt.junk[oid] = {
            iid for iid, c in occ.items() if iid != source and 0 < c <= JUNK_MAX_POINTS
        }
    return feature_sets, gt
