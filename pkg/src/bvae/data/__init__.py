from .idx import MAGIC_IMAGES, MAGIC_LABELS, load_idx, read_idx, write_idx
from .dataset import (
    LabeledDataset,
    batch_iter,
    class_weight_column,
    load_cache,
    load_mnist,
    make_rotated_dataset,
    one_hot,
    rotate_image,
    save_cache,
    verify_checksums,
)
from .targets import TARGET_KINDS, TargetSet, class_centers, make_target_set

__all__ = [
    "MAGIC_IMAGES", "MAGIC_LABELS", "load_idx", "read_idx", "write_idx",
    "LabeledDataset", "batch_iter", "class_weight_column", "load_cache",
    "load_mnist", "make_rotated_dataset", "one_hot", "rotate_image",
    "save_cache", "verify_checksums",
    "TARGET_KINDS", "TargetSet", "class_centers", "make_target_set",
]
