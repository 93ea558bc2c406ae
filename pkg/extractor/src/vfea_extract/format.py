"""Writer for the engine's "VFEA" feature file format.

Implemented against the wire format alone so the extractor stays
independent of the retrieval engine package: magic "VFEA", version u16,
image-id length u16 + UTF-8 bytes, width u32, height u32, N u32, dim u16,
N x (x f32, y f32) keypoints, then N x dim f32 descriptors, row-major,
all little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VFEA"
VERSION = 1


def write_feature_file(
    path: str | Path,
    image_id: str,
    width: int,
    height: int,
    keypoints: np.ndarray,
    descriptors: np.ndarray,
) -> None:
    keypoints = np.asarray(keypoints, dtype="<f4").reshape(-1, 2)
    descriptors = np.asarray(descriptors, dtype="<f4")
    if descriptors.ndim != 2 or descriptors.shape[0] != keypoints.shape[0]:
        raise ValueError("keypoints and descriptors must have matching row counts")
    if descriptors.shape[1] < 1:
        raise ValueError("descriptor dimension must be >= 1")
    if keypoints.size:
        if keypoints[:, 0].min() < 0 or keypoints[:, 0].max() >= width:
            raise ValueError("keypoint x outside image bounds")
        if keypoints[:, 1].min() < 0 or keypoints[:, 1].max() >= height:
            raise ValueError("keypoint y outside image bounds")
    ident = image_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HH", VERSION, len(ident)))
        fh.write(ident)
        fh.write(struct.pack("<IIIH", width, height, keypoints.shape[0], descriptors.shape[1]))
        fh.write(keypoints.tobytes())
        fh.write(descriptors.tobytes())


def write_manifest(entries: list[tuple[str, str]], path: str | Path) -> None:
    """One `image_id<TAB>path` line per feature file."""
    lines = [f"{image_id}\t{p}" for image_id, p in entries]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
