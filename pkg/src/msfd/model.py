"""Full detector: backbone -> matrix pyramid -> corner head."""

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .backbone import Backbone, BackboneConfig, extract_features
from .data import NUM_CLASSES
from .head import CornerHead, CornerPredictions, decode
from .layers import conv_weight_params
from .neck import Mfp, MfpConfig


@dataclass(frozen=True)
class HeadConfig:
    num_classes: int = NUM_CLASSES
    top_k: int = 20
    score_thresh: float = 0.3
    embed_thresh: float = 0.5
    nms_iou: float = 0.5
    max_dets: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.score_thresh <= 1:
            raise ValueError("score_thresh must be in [0, 1]")
        if self.embed_thresh <= 0 or self.nms_iou < 0 or self.nms_iou > 1:
            raise ValueError("bad decode thresholds")
        if self.num_classes < 1 or self.top_k < 1 or self.max_dets < 1:
            raise ValueError("counts must be positive")


class Detector(nn.Module):
    def __init__(self, backbone_config: BackboneConfig, mfp_config: MfpConfig,
                 head_config: HeadConfig):
        super().__init__()
        self.backbone_config = backbone_config
        self.mfp_config = mfp_config
        self.head_config = head_config
        self.backbone = Backbone(backbone_config)
        self.neck = Mfp(mfp_config, self.backbone.out_channels)
        self.head = CornerHead(
            mfp_config.channels, head_config.num_classes, seed=head_config.seed
        )

    def forward(self, images) -> CornerPredictions:
        features = extract_features(self.backbone, images)
        return self.head(self.neck(features))

    @torch.no_grad()
    def detect(self, images):
        """Decoded boxes for a batch, using the configured thresholds."""
        hc = self.head_config
        preds = self.forward(images)
        return decode(
            preds,
            max_dets=hc.max_dets,
            score_thresh=hc.score_thresh,
            embed_thresh=hc.embed_thresh,
            top_k=hc.top_k,
            nms_iou=hc.nms_iou,
        )

    def weight_param_count(self):
        return conv_weight_params(self)


def count_model_params(model: nn.Module) -> int:
    """Exact trainable parameter count."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def model_size_bytes(model: nn.Module) -> int:
    """Model size assuming 32-bit storage per parameter."""
    return 4 * count_model_params(model)


def build_detector(backbone_config: Optional[BackboneConfig] = None,
                   mfp_config: Optional[MfpConfig] = None,
                   head_config: Optional[HeadConfig] = None) -> Detector:
    return Detector(
        backbone_config or BackboneConfig(),
        mfp_config or MfpConfig(),
        head_config or HeadConfig(),
    )
