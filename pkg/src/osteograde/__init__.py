"""Attentive multi-scale ordinal grading of knee radiographs.

Library layers, bottom to top: a numpy-backed reverse-mode autodiff core
(`autodiff`), attention gating (`attention`), the multi-resolution
backbone (`backbone`), ordinal objectives (`losses`), evaluation metrics
(`metrics`), class-activation maps (`gradcam`), dataset plumbing and
synthetic phantoms (`data`), the SGD harness with checkpoints
(`training`), and the command-line front end (`cli`).
"""

from .attention import (
    CbamParams,
    ChannelAttentionParams,
    SpatialAttentionParams,
    cbam_forward,
    cbam_param_count,
    channel_attention,
    spatial_attention,
)
from .autodiff import BatchNormState, Tensor
from .backbone import BranchSpec, GradingNetwork, NetworkConfig, build_network, toy_config
from .data import (
    AugmentationPolicy,
    DatasetManifest,
    GradeRecord,
    augment,
    generate_phantom,
    load_image,
    load_manifest,
    save_manifest,
    stratified_split,
    synth_dataset,
)
from .gradcam import Heatmap, gradcam, render_overlay
from .losses import PenaltyMatrix, cross_entropy_loss, default_penalty_matrix, ordinal_loss
from .metrics import (
    ConfusionMatrix,
    MetricsReport,
    accuracy,
    confusion,
    mae,
    per_class_accuracy,
    predict_grade,
    qwk,
    report_from_labels,
)
from .runconfig import RunConfig, canonical_text, parse_run_config, parse_run_config_text
from .training import (
    Checkpoint,
    TrainResult,
    evaluate_checkpoint,
    evaluate_model,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    sgd_step,
    train,
)

__version__ = "0.1.0"
