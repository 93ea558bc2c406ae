"""Flat key = value pipeline configuration with command-line overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


@dataclass
class PipelineConfig:
    """Everything a pipeline run needs; defaults match the reference setup
    of a 64-word vocabulary, 3 levels with branching 3, and 128-D cells."""

    vocab_k: int = 64
    levels: int = 3
    branching: int = 3
    pca_dim: int = 128
    pq_m: int = 32
    pq_zp: int = 256
    seed: int = 0
    ssr: bool = True
    min_keypoints: int = 0

    train_manifest: str = ""
    test_manifest: str = ""
    vocab_path: str = "vocab.vvoc"
    pca_path: str = "pca.vpca"
    pq_path: str = "pq.vpqm"
    index_path: str = "index.vidx"
    ground_truth: str = ""
    queries: str = ""

    quantized: bool = False
    grid: bool = False
    level_projection: bool = False
    sign_limit: bool = False
    subquery: bool = False
    method: str = "fast"
    allow_overlap: bool = False

    synth_out_dir: str = "synth"
    synth_dataset_size: int = 50
    synth_roi_count: int = 5
    synth_images_per_object: int = 8
    synth_roi_points: tuple[int, int] = (4, 24)
    synth_background_points: tuple[int, int] = (120, 240)
    synth_descriptor_dim: int = 16
    synth_cluster_spread: float = 12.0
    synth_signature_noise: float = 0.15
    synth_image_width: int = 640
    synth_image_height: int = 480

    def validate(self) -> None:
        if self.vocab_k < 1 or self.levels < 1 or self.branching < 2:
            raise ValueError("vocab_k >= 1, levels >= 1, branching >= 2 required")
        if self.pca_dim < 1:
            raise ValueError("pca_dim must be >= 1")
        if self.quantized and not self.sign_limit and self.pca_dim % self.pq_m != 0:
            raise ValueError(f"pca_dim {self.pca_dim} must be divisible by pq_m {self.pq_m}")
        if self.method not in ("fast", "global", "subquery"):
            raise ValueError(f"unknown method {self.method!r}")


def _parse_value(key: str, raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is str:
        return raw
    # remaining config type: an inclusive integer range "lo,hi"
    parts = [int(p) for p in raw.split(",")]
    if len(parts) != 2:
        raise ValueError(f"{key}: expected `lo,hi`")
    return (parts[0], parts[1])


def load_config(path: str | Path) -> PipelineConfig:
    """Parse a `key = value` file; `#` starts a comment, blank lines ignored."""
    cfg = PipelineConfig()
    kinds = {
        f.name: tuple if isinstance(getattr(cfg, f.name), tuple) else type(getattr(cfg, f.name))
        for f in fields(PipelineConfig)
    }
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected `key = value`")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in kinds:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        setattr(cfg, key, _parse_value(key, raw, kinds[key]))
    return cfg


def apply_overrides(cfg: PipelineConfig, overrides: dict) -> PipelineConfig:
    """Command-line flags win over file values; None means `not given`."""
    for key, value in overrides.items():
        if value is None:
            continue
        if not hasattr(cfg, key):
            raise ValueError(f"unknown config key {key!r}")
        setattr(cfg, key, value)
    return cfg
