"""Reference-guided ROI segmentation, tracking verification and pose metrics on feature grids."""

from .attention import AttentionParams, FeatureMap, cross_attention, self_attention, softmax_rows
from .errors import EmptyRoiError, InvalidStateError, NumericError, RegistrationFailed
from .geometry import fibonacci_directions, look_at_rotation, render_views
from .hsfa import HsfaConfig, HsfaModel, ada_norm_zero, hsfa_forward, upsample_head
from .losses import LossWeights, bce_with_logits, composite_roi_loss, focal_loss, tversky_loss
from .metrics import Detection, ModelPoints, Pose, add, add_recall, add_s, average_recall, mean_ap
from .optim import AdamState, LrSchedule, TrainConfig, adam_step, clip_grad_norm, lr_at, train
from .pipeline import ScenarioScript, linear_scenario, run_registration, run_scenario, run_tracking
from .prompts import PromptSet, binarize, extract_prompts
from .tom import CropFeature, MemoryPool, TomModel, TrackDecision, TrackSession, TrackState, cosine_verify, step, verify

__version__ = "0.1.0"

__all__ = [
    "ada_norm_zero",
    "adam_step",
    "AdamState",
    "add",
    "add_recall",
    "add_s",
    "AttentionParams",
    "average_recall",
    "bce_with_logits",
    "binarize",
    "clip_grad_norm",
    "composite_roi_loss",
    "cosine_verify",
    "CropFeature",
    "cross_attention",
    "Detection",
    "EmptyRoiError",
    "extract_prompts",
    "FeatureMap",
    "fibonacci_directions",
    "focal_loss",
    "hsfa_forward",
    "HsfaConfig",
    "HsfaModel",
    "InvalidStateError",
    "linear_scenario",
    "look_at_rotation",
    "LossWeights",
    "lr_at",
    "LrSchedule",
    "mean_ap",
    "MemoryPool",
    "ModelPoints",
    "NumericError",
    "Pose",
    "PromptSet",
    "RegistrationFailed",
    "render_views",
    "run_registration",
    "run_scenario",
    "run_tracking",
    "ScenarioScript",
    "self_attention",
    "softmax_rows",
    "step",
    "TomModel",
    "TrackDecision",
    "TrackSession",
    "TrackState",
    "train",
    "TrainConfig",
    "tversky_loss",
    "upsample_head",
    "verify",
]
