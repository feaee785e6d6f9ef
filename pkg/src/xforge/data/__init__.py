from .augment import AugmentConfig, ZCATransform, affine_warp, augment, augment_batch, zca_apply, zca_fit
from .cifar import CifarFormatError, load_cifar10, parse_records, serialize_records
from .records import DatasetSplit, ImageRecord, Subset, load_split, make_split, save_split, split_sizes
from .shapes import SHAPE_KINDS, ShapesConfig, generate_shapes

__all__ = [
    "AugmentConfig",
    "CifarFormatError",
    "DatasetSplit",
    "ImageRecord",
    "SHAPE_KINDS",
    "ShapesConfig",
    "Subset",
    "ZCATransform",
    "affine_warp",
    "augment",
    "augment_batch",
    "generate_shapes",
    "load_cifar10",
    "load_split",
    "make_split",
    "parse_records",
    "save_split",
    "serialize_records",
    "split_sizes",
    "zca_apply",
    "zca_fit",
]
