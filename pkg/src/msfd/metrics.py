"""Image-level fault classification metrics and evaluation runners.

An image is "fault" when any detection of a fault class scores above the
threshold. CDR/FDR/MDR partition the test set: the corrected CDR counts only
correct classifications, so CDR + FDR + MDR = 100. The printed-form CDR
(a + c)/(m + n), which is 1 whenever every image is classified, stays
available as the "verbatim" mode for audit.
"""

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .data import Dataset, class_is_fault, resize_with_annotations
from .head import DetectionBox


@dataclass(frozen=True)
class ConfusionCounts:
    a: int  # images identified as fault
    b: int  # incorrect among a
    c: int  # images identified as normal
    d: int  # incorrect among c
    m: int  # true fault images
    n: int  # true normal images

    def __post_init__(self):
        if min(self.a, self.b, self.c, self.d, self.m, self.n) < 0:
            raise ValueError("counts must be non-negative")
        if self.b > self.a or self.d > self.c:
            raise ValueError("errors cannot exceed their classification counts")
        if self.a + self.c != self.m + self.n:
            raise ValueError("every image must be classified exactly once")


@dataclass
class MetricsReport:
    cdr: float
    fdr: float
    mdr: float
    counts: ConfusionCounts
    param_count: Optional[int] = None
    model_size_bytes: Optional[int] = None
    cdr_by_size: Dict[int, float] = field(default_factory=dict)

    @property
    def size_spread(self):
        if len(self.cdr_by_size) < 2:
            return 0.0
        vals = list(self.cdr_by_size.values())
        return max(vals) - min(vals)

    def to_dict(self):
        d = {
            "CDR": self.cdr,
            "FDR": self.fdr,
            "MDR": self.mdr,
            "counts": vars(self.counts),
        }
        if self.param_count is not None:
            d["param_count"] = self.param_count
            d["model_size_bytes"] = self.model_size_bytes
        if self.cdr_by_size:
            d["cdr_by_size"] = {str(k): v for k, v in self.cdr_by_size.items()}
            d["size_spread"] = self.size_spread
        return d

    def to_json(self, indent=1):
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def format_table(self):
        rows = [("CDR(%)", f"{self.cdr:.2f}"), ("FDR(%)", f"{self.fdr:.2f}"),
                ("MDR(%)", f"{self.mdr:.2f}")]
        if self.param_count is not None:
            rows.append(("Params", str(self.param_count)))
            rows.append(("Model size(MB)", f"{self.model_size_bytes / 2**20:.2f}"))
        for size, cdr in sorted(self.cdr_by_size.items()):
            rows.append((f"CDR@{size}(%)", f"{cdr:.2f}"))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:>10}" for k, v in rows)


def compute_metrics(counts: ConfusionCounts, mode="corrected") -> MetricsReport:
    """CDR/FDR/MDR percentages from classification counts."""
    total = counts.m + counts.n
    if total == 0:
        raise ValueError("empty test set")
    fdr = 100.0 * counts.b / total
    mdr = 100.0 * counts.d / total
    if mode == "corrected":
        cdr = 100.0 * ((counts.a - counts.b) + (counts.c - counts.d)) / total
    elif mode == "verbatim":
        cdr = 100.0 * (counts.a + counts.c) / total
    else:
        raise ValueError(f"unknown metrics mode {mode!r}")
    return MetricsReport(cdr, fdr, mdr, counts)


def classify_image(detections: Sequence[DetectionBox], fault_score_thresh=0.5) -> bool:
    """Fault iff any fault-class detection reaches the score threshold."""
    if not 0 <= fault_score_thresh <= 1:
        raise ValueError("fault_score_thresh must be in [0, 1]")
    return any(
        class_is_fault(det.class_id) and det.score >= fault_score_thresh
        for det in detections
    )


@dataclass(frozen=True)
class EvalConfig:
    fault_score_thresh: float = 0.5
    sizes: tuple = (384, 512, 640)
    metrics_mode: str = "corrected"

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(self.sizes))
        if not 0 <= self.fault_score_thresh <= 1:
            raise ValueError("fault_score_thresh must be in [0, 1]")
        if self.metrics_mode not in ("corrected", "verbatim"):
            raise ValueError("metrics_mode must be corrected or verbatim")
        for s in self.sizes:
            if s % 128 != 0:
                raise ValueError("eval sizes must be divisible by 128")


def _to_batch(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]


def confusion_from_decisions(truths, decisions) -> ConfusionCounts:
    a = b = c = d = 0
    for truth, decided in zip(truths, decisions):
        if decided:
            a += 1
            b += not truth
        else:
            c += 1
            d += truth
    m = sum(truths)
    return ConfusionCounts(a, b, c, d, m, len(truths) - m)


def evaluate_dataset(model, dataset: Dataset, eval_config: EvalConfig = EvalConfig(),
                     size: Optional[int] = None) -> MetricsReport:
    """Run the detector over a dataset and compute image-level metrics."""
    model.eval()
    truths, decisions = [], []
    with torch.no_grad():
        for image, annotations in dataset:
            if size is not None and size != image.shape[0]:
                image, annotations = resize_with_annotations(image, annotations, size)
            dets = model.detect(_to_batch(image))[0]
            decisions.append(classify_image(dets, eval_config.fault_score_thresh))
            truths.append(any(a.is_fault for a in annotations))
    counts = confusion_from_decisions(truths, decisions)
    return compute_metrics(counts, eval_config.metrics_mode)


def multiscale_eval(model, dataset: Dataset, sizes: Sequence[int],
                    eval_config: EvalConfig = EvalConfig()) -> MetricsReport:
    """Per-input-size CDR curve; the headline rates come from the native size."""
    for s in sizes:
        if s % 128 != 0:
            raise ValueError("sizes must be divisible by 128")
    curve = {}
    base = None
    for s in sizes:
        report = evaluate_dataset(model, dataset, eval_config, size=s)
        curve[int(s)] = report.cdr
        if base is None:
            base = report
    base.cdr_by_size = curve
    return base
