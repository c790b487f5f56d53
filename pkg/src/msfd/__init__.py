"""Lightweight anchor-free multi-scale fault detector.

A fire-module backbone feeds a matrix feature pyramid whose rectangular
layers map parts of similar scale and aspect ratio; a corner-based head
localizes parts and flags faults. Includes a synthetic parts dataset
generator, training loop, and CDR/FDR/MDR evaluation harness.
"""

from .backbone import (
    BackboneConfig,
    FeatureMapSet,
    build_backbone,
    count_params_depthwise,
    count_params_standard,
    extract_features,
)
from .data import FaultAnnotation, SceneSpec, generate_dataset, load_dataset
from .head import (
    CornerPredictions,
    CornerTargets,
    DetectionBox,
    decode,
    encode_targets,
    focal_loss,
    offset_residual,
    pull_loss,
    push_loss,
    smooth_l1,
    total_loss,
)
from .metrics import (
    ConfusionCounts,
    EvalConfig,
    MetricsReport,
    classify_image,
    compute_metrics,
    multiscale_eval,
)
from .model import Detector, HeadConfig, build_detector, count_model_params, model_size_bytes
from .neck import (
    MatrixFeatureSet,
    MatrixLayerId,
    MfpConfig,
    assign_box_to_layer,
    bottleneck_params,
    build_mfp,
    enumerate_layers,
)
from .train import TrainConfig, learning_rate, load_checkpoint, resume, train

__version__ = "0.1.0"
