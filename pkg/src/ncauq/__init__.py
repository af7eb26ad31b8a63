"""Cellular-automaton segmentation with perturb-and-recover uncertainty."""

from .autodiff import Tensor, backward
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import Dataset, Sample, corrupt, generate_synthetic, load_png_pairs, split
from .metrics import EvalRecord, aurc, auprc, auroc, delta_dice_at, dice, iou, pixel_accuracy
from .nca import NcaParams, NcaState, SegPrediction, init_state, predict, readout, rollout, step
from .training import AdamState, TrainConfig, sample_rollout_length, train, train_step
from .uncertainty import (METHODS, UncertaintyConfig, UncertaintyReport, aggregate_map,
                          boundary_band, entropy_single, flicker, resilience, stability,
                          stoptime, tta)

__all__ = [
    "Tensor", "backward",
    "CheckpointError", "load_checkpoint", "save_checkpoint",
    "Dataset", "Sample", "corrupt", "generate_synthetic", "load_png_pairs", "split",
    "EvalRecord", "aurc", "auprc", "auroc", "delta_dice_at", "dice", "iou", "pixel_accuracy",
    "NcaParams", "NcaState", "SegPrediction", "init_state", "predict", "readout",
    "rollout", "step",
    "AdamState", "TrainConfig", "sample_rollout_length", "train", "train_step",
    "METHODS", "UncertaintyConfig", "UncertaintyReport", "aggregate_map", "boundary_band",
    "entropy_single", "flicker", "resilience", "stability", "stoptime", "tta",
]

__version__ = "0.1.0"
