"""Lightweight RGB-D salient object detection on a small numpy autograd engine."""

from .checkpoint import (CheckpointError, CorruptCheckpoint, FingerprintMismatch, load_checkpoint,
                         load_network, save_checkpoint)
from .dataset import DatasetError, Sample, load_image, save_saliency, scan_dataset
from .gradcheck import GradCheckReport, directional_check, grad_check
from .losses import LossConfig, bce_loss, dice_loss, idr_loss, ssim, total_loss
from .metrics import MetricsReport, evaluate, f_beta_max, f_measure_curve, mae
from .network import (MobileSal, MobileSalConfig, NetworkOutputs, build_mobilesal, count_flops, count_params,
                      forward_full)
from .synth import synth_dataset
from .tensor import DimensionError, GraphStateError, NumericError, Tensor, backward, no_grad, precision
from .training import TOY_TRAIN, TrainConfig, poly_lr, predict, train_loop

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "CorruptCheckpoint", "DatasetError", "DimensionError", "FingerprintMismatch",
    "GradCheckReport", "GraphStateError", "LossConfig", "MetricsReport", "MobileSal", "MobileSalConfig",
    "NetworkOutputs", "NumericError", "Sample", "TOY_TRAIN", "Tensor", "TrainConfig", "backward",
    "bce_loss", "build_mobilesal", "count_flops", "count_params", "dice_loss", "evaluate", "f_beta_max",
    "directional_check", "f_measure_curve", "forward_full", "grad_check", "idr_loss", "load_checkpoint", "load_image",
    "load_network", "mae", "no_grad", "poly_lr", "precision", "predict", "save_checkpoint",
    "save_saliency", "scan_dataset", "ssim", "synth_dataset", "total_loss", "train_loop",
]
