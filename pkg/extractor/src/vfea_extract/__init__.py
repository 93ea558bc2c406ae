"""Classical keypoint detection emitting the engine's VFEA feature files."""

from .cli import batch_extract, extract, load_extraction_config
from .detect import (
    DESCRIPTOR_DIM,
    ExtractionConfig,
    describe_keypoints,
    detect_keypoints,
    extract_image,
    load_gray,
)
from .format import write_feature_file, write_manifest

__version__ = "0.1.0"
