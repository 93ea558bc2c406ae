"""Regenerate the committed extraction fixtures.

Renders ten deterministic test images, extracts each with the default
corner configuration (blob for the circle image), and writes the feature
files plus corner metadata into the engine's tests/fixtures/extracted/
directory.  Run from this directory:

    python3 build_fixtures.py
"""

import json
from pathlib import Path

from vfea_extract.cli import extract
from vfea_extract.detect import ExtractionConfig
from vfea_extract.format import write_manifest
from vfea_extract.synthimages import (
    checkerboard,
    circles,
    crosses,
    diamond_grid,
    gaussian_noise,
    gradient_dots,
    random_blocks,
    rings,
    stripes,
    to_png,
    uniform_gray,
)

HERE = Path(__file__).parent
IMAGES = HERE / "images"
OUT = HERE.parent.parent / "tests" / "fixtures" / "extracted"


def main() -> None:
    IMAGES.mkdir(parents=True, exist_ok=True)
    OUT.mkdir(parents=True, exist_ok=True)
    board, corners = checkerboard()
    scenes = {
        "checkerboard": board,
        "uniform": uniform_gray(),
        "noise": gaussian_noise(seed=0),
        "circles": circles(seed=1),
        "stripes": stripes(),
        "rings": rings(),
        "crosses": crosses(),
        "blocks": random_blocks(seed=2),
        "dots": gradient_dots(seed=3),
        "diamonds": diamond_grid(),
    }
    corner_cfg = ExtractionConfig(detector="corner", max_keypoints=400)
    blob_cfg = ExtractionConfig(detector="blob", max_keypoints=400, blob_sigma=4.0)
    entries = []
    for name, image in scenes.items():
        png = IMAGES / f"{name}.png"
        to_png(image, png)
        cfg = blob_cfg if name in ("circles", "dots") else corner_cfg
        count = extract(png, OUT / f"{name}.vfea", cfg)
        entries.append((name, f"{name}.vfea"))
        print(f"{name}: {count} keypoints")
    write_manifest(entries, OUT / "manifest.tsv")
    meta = {
        "checkerboard": {
            "file": "checkerboard.vfea",
            "square": 20,
            "corners": [[float(x), float(y)] for x, y in corners],
        }
    }
    (OUT / "meta.json").write_text(json.dumps(meta, indent=1))
    print(f"fixtures written to {OUT}")


if __name__ == "__main__":
    main()
