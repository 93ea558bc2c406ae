"""Deterministic synthetic test patterns for exercising the detectors."""

from __future__ import annotations

import numpy as np
from PIL import Image
from scipy import ndimage


def to_png(gray: np.ndarray, path) -> None:
    arr = np.clip(gray * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def checkerboard(width=200, height=160, square=20, blur=1.0):
    """Checkerboard plus the interior lattice intersections it contains."""
    ys, xs = np.mgrid[0:height, 0:width]
    board = (((xs // square) + (ys // square)) % 2).astype(np.float64)
    board = ndimage.gaussian_filter(board, blur)
    corners = [
        (float(x), float(y))
        for y in range(square, height, square)
        for x in range(square, width, square)
        if square <= x < width - square and square <= y < height - square
    ]
    return board, corners


def uniform_gray(width=200, height=160, level=0.5):
    return np.full((height, width), level)


def gaussian_noise(width=200, height=160, seed=0):
    return np.clip(np.random.default_rng(seed).normal(0.5, 0.15, (height, width)), 0, 1)


def circles(width=200, height=160, seed=1, count=12, radius=9):
    rng = np.random.default_rng(seed)
    img = np.full((height, width), 0.2)
    ys, xs = np.mgrid[0:height, 0:width]
    for _ in range(count):
        cx = rng.uniform(radius + 4, width - radius - 4)
        cy = rng.uniform(radius + 4, height - radius - 4)
        img[(xs - cx) ** 2 + (ys - cy) ** 2 <= radius**2] = 0.9
    return ndimage.gaussian_filter(img, 1.0)


def stripes(width=200, height=160, period=14, angle=0.5):
    ys, xs = np.mgrid[0:height, 0:width]
    phase = xs * np.cos(angle) + ys * np.sin(angle)
    return 0.5 + 0.45 * np.sign(np.sin(2 * np.pi * phase / period))


def rings(width=200, height=160, period=16):
    ys, xs = np.mgrid[0:height, 0:width]
    r = np.hypot(xs - width / 2, ys - height / 2)
    return 0.5 + 0.45 * np.sign(np.sin(2 * np.pi * r / period))


def crosses(width=200, height=160, step=36, arm=10):
    img = np.full((height, width), 0.15)
    for cy in range(step // 2, height - arm, step):
        for cx in range(step // 2, width - arm, step):
            img[cy - 1 : cy + 2, max(0, cx - arm) : cx + arm] = 0.95
            img[max(0, cy - arm) : cy + arm, cx - 1 : cx + 2] = 0.95
    return ndimage.gaussian_filter(img, 0.8)


def random_blocks(width=200, height=160, seed=2, count=14):
    rng = np.random.default_rng(seed)
    img = np.full((height, width), 0.35)
    for _ in range(count):
        w = int(rng.integers(10, 40))
        h = int(rng.integers(10, 40))
        x = int(rng.integers(0, width - w))
        y = int(rng.integers(0, height - h))
        img[y : y + h, x : x + w] = rng.uniform(0.0, 1.0)
    return ndimage.gaussian_filter(img, 0.8)


def gradient_dots(width=200, height=160, seed=3, count=25):
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:height, 0:width]
    img = xs / width * 0.6 + 0.2
    for _ in range(count):
        cx = rng.uniform(6, width - 6)
        cy = rng.uniform(6, height - 6)
        img[(xs - cx) ** 2 + (ys - cy) ** 2 <= 9] = rng.choice([0.02, 0.98])
    return ndimage.gaussian_filter(img, 0.8)


def diamond_grid(width=200, height=160, step=28):
    ys, xs = np.mgrid[0:height, 0:width]
    phase = np.abs(((xs % step) - step / 2)) + np.abs(((ys % step) - step / 2))
    return ndimage.gaussian_filter((phase < step / 3).astype(np.float64), 1.0)
