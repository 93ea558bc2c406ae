"""Keypoint detection and patch description on grayscale images.

Two classical detectors: a corner detector built on the structure-tensor
response (fires on checkerboard-style X junctions) and a blob detector on
the Laplacian-of-Gaussian magnitude.  Descriptors are 128-D gradient
orientation histograms over a square patch, SIFT-like: 4x4 spatial cells,
8 orientation bins, clamped and renormalized.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

DESCRIPTOR_DIM = 128
GRID = 4
ORIENTATION_BINS = 8

HARRIS_K = 0.04
RESPONSE_FRACTION = 0.01  # keep maxima above this fraction of the peak
NMS_SIZE = 5


@dataclass(frozen=True)
class ExtractionConfig:
    detector: str = "corner"  # corner | blob
    max_keypoints: int = 400
    patch_size: int = 16
    blob_sigma: float = 3.0

    def __post_init__(self):
        if self.detector not in ("corner", "blob"):
            raise ValueError(f"unknown detector {self.detector!r}")
        if self.max_keypoints < 1:
            raise ValueError("max_keypoints must be >= 1")
        if self.patch_size < 8 or self.patch_size % GRID:
            raise ValueError(f"patch_size must be a multiple of {GRID}, at least 8")
        if self.blob_sigma <= 0:
            raise ValueError("blob_sigma must be positive")


def load_gray(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float64) / 255.0


def harris_response(gray: np.ndarray) -> np.ndarray:
    smooth = ndimage.gaussian_filter(gray, 1.0)
    ix = ndimage.sobel(smooth, axis=1)
    iy = ndimage.sobel(smooth, axis=0)
    ixx = ndimage.gaussian_filter(ix * ix, 1.5)
    iyy = ndimage.gaussian_filter(iy * iy, 1.5)
    ixy = ndimage.gaussian_filter(ix * iy, 1.5)
    det = ixx * iyy - ixy * ixy
    trace = ixx + iyy
    return det - HARRIS_K * trace * trace


def blob_response(gray: np.ndarray, sigma: float) -> np.ndarray:
    # scale-normalized Laplacian magnitude
    return np.abs(ndimage.gaussian_laplace(gray, sigma)) * sigma**2


def _local_maxima(response: np.ndarray, margin: int) -> np.ndarray:
    peak = float(response.max())
    if peak <= 0.0:
        return np.empty((0, 2), dtype=np.int64)
    maxima = (response == ndimage.maximum_filter(response, size=NMS_SIZE)) & (
        response > RESPONSE_FRACTION * peak
    )
    maxima[:margin, :] = maxima[-margin:, :] = False
    maxima[:, :margin] = maxima[:, -margin:] = False
    ys, xs = np.nonzero(maxima)
    return np.stack([ys, xs], axis=1)


def _greedy_suppress(peaks: np.ndarray, radius: int) -> np.ndarray:
    """Collapse each cluster of nearby peaks to its centroid.

    Peaks arrive strongest first; a response plateau around an ideal corner
    yields several equal maxima whose centroid recovers the true center.
    """
    reps: list[np.ndarray] = []
    clusters: list[list[np.ndarray]] = []
    r2 = radius * radius
    for p in peaks:
        for rep, members in zip(reps, clusters):
            if (p[0] - rep[0]) ** 2 + (p[1] - rep[1]) ** 2 <= r2:
                members.append(p)
                break
        else:
            reps.append(p)
            clusters.append([p])
    if not reps:
        return np.empty((0, 2), dtype=np.float64)
    return np.asarray([np.mean(members, axis=0) for members in clusters])


def detect_keypoints(gray: np.ndarray, cfg: ExtractionConfig) -> np.ndarray:
    """(N, 2) keypoints as x, y pixel coordinates, strongest first."""
    if cfg.detector == "corner":
        response = harris_response(gray)
    else:
        response = blob_response(gray, cfg.blob_sigma)
    margin = cfg.patch_size // 2 + 1
    if min(gray.shape) <= 2 * margin:
        return np.empty((0, 2), dtype=np.float64)
    peaks = _local_maxima(response, margin)
    if not len(peaks):
        return np.empty((0, 2), dtype=np.float64)
    strengths = response[peaks[:, 0], peaks[:, 1]]
    # strongest first; ties resolve by raster order for determinism
    order = np.lexsort((peaks[:, 1], peaks[:, 0], -strengths))
    peaks = _greedy_suppress(peaks[order], NMS_SIZE)[: cfg.max_keypoints]
    return peaks[:, ::-1]  # (y, x) -> (x, y)


def describe_keypoints(gray: np.ndarray, keypoints: np.ndarray, cfg: ExtractionConfig) -> np.ndarray:
    """Gradient-orientation histograms, one 128-D row per keypoint."""
    if not len(keypoints):
        return np.empty((0, DESCRIPTOR_DIM), dtype=np.float64)
    smooth = ndimage.gaussian_filter(gray, 1.0)
    gx = ndimage.sobel(smooth, axis=1)
    gy = ndimage.sobel(smooth, axis=0)
    magnitude = np.hypot(gx, gy)
    orientation = np.arctan2(gy, gx)  # [-pi, pi]
    half = cfg.patch_size // 2
    cell = cfg.patch_size // GRID
    ys = np.arange(-half, half)
    window = np.exp(-(ys[:, None] ** 2 + ys[None, :] ** 2) / (2.0 * (half / 1.5) ** 2))
    h, w = gray.shape
    out = np.empty((len(keypoints), DESCRIPTOR_DIM))
    for i, (x, y) in enumerate(keypoints):
        r, c = int(round(y)), int(round(x))
        r0, c0 = r - half, c - half
        mag = magnitude[r0 : r0 + cfg.patch_size, c0 : c0 + cfg.patch_size] * window
        ori = orientation[r0 : r0 + cfg.patch_size, c0 : c0 + cfg.patch_size]
        bins = ((ori + np.pi) / (2 * np.pi) * ORIENTATION_BINS).astype(np.int64)
        bins = np.clip(bins, 0, ORIENTATION_BINS - 1)
        hist = np.zeros((GRID, GRID, ORIENTATION_BINS))
        for gy_ in range(GRID):
            for gx_ in range(GRID):
                sub_m = mag[gy_ * cell : (gy_ + 1) * cell, gx_ * cell : (gx_ + 1) * cell]
                sub_b = bins[gy_ * cell : (gy_ + 1) * cell, gx_ * cell : (gx_ + 1) * cell]
                hist[gy_, gx_] = np.bincount(
                    sub_b.ravel(), weights=sub_m.ravel(), minlength=ORIENTATION_BINS
                )
        vec = hist.ravel()
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec = np.minimum(vec / norm, 0.2)  # clamp dominant gradients
            norm = np.linalg.norm(vec)
            if norm > 0:
                vec = vec / norm
        out[i] = vec
    return out


def extract_image(path: str | Path, cfg: ExtractionConfig) -> tuple[int, int, np.ndarray, np.ndarray]:
    """(width, height, keypoints, descriptors) for one image file."""
    gray = load_gray(path)
    keypoints = detect_keypoints(gray, cfg)
    descriptors = describe_keypoints(gray, keypoints, cfg)
    height, width = gray.shape
    return width, height, keypoints, descriptors
