"""Recurrent multi-encoder-decoder segmentation of lesion activity in 4D MRI series."""

__version__ = "0.1.0"

from .data import SyntheticConfig, VolumeSeries, generate_case, random_crop, read_volume, write_volume
from .metrics import aggregate, connected_components_27, dice, lesion_metrics
from .model import ModelConfig, SegModel, build, param_count
from .pipeline import TrainConfig, lr_at, soft_dice_bce_loss, tiled_infer, train
from .tensor import Tensor, backward, finite_diff_check, no_grad, set_precision

__all__ = [
    "SyntheticConfig", "VolumeSeries", "generate_case", "random_crop", "read_volume",
    "write_volume", "aggregate", "connected_components_27", "dice", "lesion_metrics",
    "ModelConfig", "SegModel", "build", "param_count", "TrainConfig", "lr_at",
    "soft_dice_bce_loss", "tiled_infer", "train", "Tensor", "backward", "finite_diff_check",
    "no_grad", "set_precision",
]
