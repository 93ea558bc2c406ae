"""Command-line feature extraction: single images or manifest batches."""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from .detect import ExtractionConfig, extract_image
from .format import write_feature_file, write_manifest


def load_extraction_config(path: str | Path | None) -> ExtractionConfig:
    """Parse a `key = value` config file into an ExtractionConfig."""
    if path is None:
        return ExtractionConfig()
    values = {}
    kinds = {f.name: f.type for f in fields(ExtractionConfig)}
    casts = {"detector": str, "max_keypoints": int, "patch_size": int, "blob_sigma": float}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected `key = value`")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in kinds:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = casts[key](raw)
    return ExtractionConfig(**values)


def extract(image_path: str | Path, out_path: str | Path, cfg: ExtractionConfig) -> int:
    """Extract one image to one feature file; returns the keypoint count."""
    image_path = Path(image_path)
    width, height, keypoints, descriptors = extract_image(image_path, cfg)
    if not len(keypoints):
        print(f"warning: no keypoints detected in {image_path}", file=sys.stderr)
    write_feature_file(out_path, image_path.stem, width, height, keypoints, descriptors)
    return len(keypoints)


def batch_extract(
    manifest_path: str | Path, out_dir: str | Path, cfg: ExtractionConfig
) -> list[tuple[str, str]]:
    """Extract every `image_id<TAB>image_path` line; returns manifest entries."""
    manifest_path = Path(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for lineno, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{manifest_path}:{lineno}: expected `id<TAB>path`")
        image_id, rel = parts
        src = Path(rel)
        if not src.is_absolute():
            src = manifest_path.parent / src
        out_name = f"{image_id}.vfea"
        extract(src, out_dir / out_name, cfg)
        entries.append((image_id, out_name))
    write_manifest(entries, out_dir / "manifest.tsv")
    return entries


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="vfea-extract", description="Detect keypoints and emit VFEA feature files"
    )
    parser.add_argument("--in", dest="image", help="input image")
    parser.add_argument("--out", dest="out", help="output feature file")
    parser.add_argument("--config", default=None, help="key = value extraction config")
    parser.add_argument("--batch", default=None, help="image manifest to extract")
    parser.add_argument("--out-dir", default=None, help="output directory for --batch")
    args = parser.parse_args(argv)
    try:
        cfg = load_extraction_config(args.config)
        if args.batch:
            if not args.out_dir:
                raise ValueError("--batch requires --out-dir")
            entries = batch_extract(args.batch, args.out_dir, cfg)
            print(f"extracted\t{len(entries)}\t{args.out_dir}")
            return 0
        if not args.image or not args.out:
            raise ValueError("either --in/--out or --batch/--out-dir is required")
        count = extract(args.image, args.out, cfg)
        print(f"extracted\t{count}\t{args.out}")
        return 0
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
