"""Image I/O, dataset manifests and the procedural shape-scene dataset."""
from .manifest import SPLITS, DatasetManifest, ManifestError, epoch_batches, load_batch, manifest_from_class_folders
from .ppm import ImageFormatError, decode_ppm, encode_ppm, load_image, save_image
from .shapescenes import CLASS_NAMES, ShapeSceneSpec, generate_shapescenes, render_day, render_night, render_split

__all__ = [
    "SPLITS", "DatasetManifest", "ManifestError", "epoch_batches", "load_batch", "manifest_from_class_folders",
    "ImageFormatError", "decode_ppm", "encode_ppm", "load_image", "save_image",
    "CLASS_NAMES", "ShapeSceneSpec", "generate_shapescenes", "render_day", "render_night", "render_split",
]
