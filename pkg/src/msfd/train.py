"""Training loop, learning-rate schedule, and checkpointing.

Adaptive-moment descent with a single step drop in the learning rate,
random square crops with annotation clipping, and per-iteration loss records.
Every source of randomness hangs off one seeded generator whose state is
checkpointed, so a split run resumes exactly where a straight run would be.
"""

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch

from .backbone import BackboneConfig
from .data import Dataset, FaultAnnotation, to_box_labels
from .head import encode_batch, total_loss
from .model import Detector, HeadConfig, count_model_params
from .neck import MfpConfig


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the offending batch."""

    def __init__(self, iteration, batch_indices):
        super().__init__(
            f"non-finite loss at iteration {iteration}, batch images {batch_indices}"
        )
        self.iteration = iteration
        self.batch_indices = batch_indices


class CheckpointMismatch(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 5e-5
    lr_drop_factor: float = 0.1
    lr_drop_at: int = 6000
    total_iters: int = 7000
    batch_size: int = 8
    crop_size: int = 512
    lam: float = 0.1
    flip_augment: bool = False
    alpha: float = 0.25
    beta: float = 2.0
    focal_mode: str = "gaussian"
    grad_clip: float = 10.0
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    checkpoint_every: int = 0  # 0 disables intermediate checkpoints
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_iters > 0 and not self.lr_drop_at < self.total_iters:
            raise ValueError("lr_drop_at must be below total_iters")
        if self.crop_size < 1:
            raise ValueError("crop_size must be positive")
        if self.focal_mode not in ("gaussian", "binary"):
            raise ValueError("focal_mode must be gaussian or binary")


def learning_rate(config: TrainConfig, iteration: int) -> float:
    """Step schedule: initial LR, scaled by the drop factor from lr_drop_at on."""
    if iteration < config.lr_drop_at:
        return config.initial_lr
    return config.initial_lr * config.lr_drop_factor


def crop_scene(image: np.ndarray, annotations, crop_size, rng, min_visible=0.5):
    """Random square crop with boxes clipped to the window.

    Boxes are dropped when the clipped extent falls under 2 px a side or under
    ``min_visible`` of the original area: a mostly-cropped part no longer shows
    the evidence its fault label refers to, so keeping it would teach the wrong
    class bit.
    """
    h, w = image.shape[:2]
    if crop_size > h or crop_size > w:
        raise ValueError(f"crop_size {crop_size} exceeds image {h}x{w}")
    x0 = int(rng.integers(0, w - crop_size + 1)) if w > crop_size else 0
    y0 = int(rng.integers(0, h - crop_size + 1)) if h > crop_size else 0
    cropped = image[y0 : y0 + crop_size, x0 : x0 + crop_size]
    kept = []
    for a in annotations:
        x1 = max(a.bbox[0] - x0, 0.0)
        y1 = max(a.bbox[1] - y0, 0.0)
        x2 = min(a.bbox[2] - x0, float(crop_size))
        y2 = min(a.bbox[3] - y0, float(crop_size))
        area = (a.bbox[2] - a.bbox[0]) * (a.bbox[3] - a.bbox[1])
        visible = max(x2 - x1, 0.0) * max(y2 - y1, 0.0) / max(area, 1e-9)
        if x2 - x1 >= 2 and y2 - y1 >= 2 and visible >= min_visible:
            kept.append(FaultAnnotation(a.image_id, (x1, y1, x2, y2), a.class_id, a.is_fault))
    return cropped, kept


def flip_scene(image: np.ndarray, annotations, rng):
    """Mirror the scene horizontally and/or vertically, each with p = 0.5."""
    h, w = image.shape[:2]
    if rng.random() < 0.5:
        image = image[:, ::-1]
        annotations = [
            FaultAnnotation(
                a.image_id, (w - a.bbox[2], a.bbox[1], w - a.bbox[0], a.bbox[3]),
                a.class_id, a.is_fault,
            )
            for a in annotations
        ]
    if rng.random() < 0.5:
        image = image[::-1]
        annotations = [
            FaultAnnotation(
                a.image_id, (a.bbox[0], h - a.bbox[3], a.bbox[2], h - a.bbox[1]),
                a.class_id, a.is_fault,
            )
            for a in annotations
        ]
    return image, annotations


def _sample_batch(dataset: Dataset, config: TrainConfig, rng):
    indices = rng.integers(0, len(dataset), size=config.batch_size)
    images, ann_lists = [], []
    for idx in indices:
        raw = dataset.raw_image(int(idx))
        img, anns = crop_scene(raw, dataset.annotations(int(idx)), config.crop_size, rng)
        if config.flip_augment:
            img, anns = flip_scene(img, anns, rng)
        images.append(img.astype(np.float32) / 255.0)
        ann_lists.append(to_box_labels(anns))
    batch = torch.from_numpy(np.stack(images).transpose(0, 3, 1, 2).copy())
    return batch, ann_lists, [int(i) for i in indices]


# ---------------------------------------------------------------------------
# checkpoint container: <dir>/weights.bin + <dir>/manifest.json
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt_dir, model: Detector, optimizer, config: TrainConfig,
                    iteration, rng, loss_digest):
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng_state": rng.bit_generator.state,
        "iteration": iteration,
        "train_config": asdict(config),
        "backbone_config": asdict(model.backbone_config),
        "mfp_config": asdict(model.mfp_config),
        "head_config": asdict(model.head_config),
        "loss_digest": loss_digest,
    }
    weights_path = ckpt_dir / "weights.bin"
    torch.save(payload, weights_path)
    manifest = {
        "iteration": iteration,
        "param_count": count_model_params(model),
        "content_hash": hashlib.sha256(weights_path.read_bytes()).hexdigest(),
        "train_config": asdict(config),
        "backbone_config": asdict(model.backbone_config),
        "mfp_config": asdict(model.mfp_config),
        "head_config": asdict(model.head_config),
        "loss_digest": loss_digest,
    }
    (ckpt_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return ckpt_dir


def load_checkpoint(ckpt_dir):
    """Load and integrity-check a checkpoint; returns (model, payload)."""
    ckpt_dir = Path(ckpt_dir)
    weights_path = ckpt_dir / "weights.bin"
    manifest_path = ckpt_dir / "manifest.json"
    if not weights_path.exists() or not manifest_path.exists():
        raise CheckpointMismatch(f"{ckpt_dir} is not a checkpoint directory")
    manifest = json.loads(manifest_path.read_text())
    digest = hashlib.sha256(weights_path.read_bytes()).hexdigest()
    if digest != manifest["content_hash"]:
        raise CheckpointMismatch(
            f"weights.bin hash {digest[:12]} does not match manifest "
            f"{manifest['content_hash'][:12]}; checkpoint is corrupt"
        )
    try:
        payload = torch.load(weights_path, weights_only=False)
    except Exception as exc:
        raise CheckpointMismatch(f"cannot deserialize weights.bin: {exc}") from exc

    mfp_cfg = dict(payload["mfp_config"])
    model = Detector(
        BackboneConfig(**payload["backbone_config"]),
        MfpConfig(**mfp_cfg),
        HeadConfig(**payload["head_config"]),
    )
    model.load_state_dict(payload["model"])
    return model, payload


def _config_diff(stored: dict, current: dict):
    keys = sorted(set(stored) | set(current))
    return [
        f"{k}: checkpoint={stored.get(k)!r} requested={current.get(k)!r}"
        for k in keys
        if stored.get(k) != current.get(k)
    ]


class LossLog:
    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path else None
        self.records: List[dict] = []
        self._sha = hashlib.sha256()

    def append(self, record):
        self.records.append(record)
        line = json.dumps(record, sort_keys=True)
        self._sha.update(line.encode() + b"\n")
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")

    def digest(self):
        return self._sha.hexdigest()


def train(model: Detector, dataset: Dataset, config: TrainConfig, out_dir):
    """Train from scratch; returns the final checkpoint directory."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.initial_lr,
        betas=config.adam_betas, eps=config.adam_eps,
    )
    log = LossLog(out_dir / "loss_log.jsonl")

    model.train()
    for it in range(config.total_iters):
        if config.checkpoint_every > 0 and it > 0 and it % config.checkpoint_every == 0:
            save_checkpoint(
                out_dir / f"checkpoint_{it:06d}", model, optimizer, config,
                it, rng, log.digest(),
            )
        _train_step(model, optimizer, dataset, config, rng, it, log)
    ckpt = save_checkpoint(
        out_dir / "checkpoint", model, optimizer, config,
        config.total_iters, rng, log.digest(),
    )
    return ckpt, log


def _train_step(model, optimizer, dataset, config, rng, it, log):
    lr = learning_rate(config, it)
    for group in optimizer.param_groups:
        group["lr"] = lr
    batch, ann_lists, indices = _sample_batch(dataset, config, rng)
    targets = encode_batch(
        ann_lists, model.mfp_config, config.crop_size, model.head_config.num_classes
    )
    preds = model(batch)
    loss, breakdown = total_loss(
        preds, targets, lam=config.lam, alpha=config.alpha, beta=config.beta,
        focal_mode=config.focal_mode,
    )
    if not torch.isfinite(loss):
        raise TrainingDiverged(it, indices)
    optimizer.zero_grad()
    loss.backward()
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    optimizer.step()
    log.append({"iteration": it, "lr": lr, **breakdown})


def resume(ckpt_dir, dataset: Dataset, config: TrainConfig, out_dir):
    """Continue a checkpoint to config.total_iters; no-op if already there."""
    model, payload = load_checkpoint(ckpt_dir)
    diff = _config_diff(payload["train_config"], asdict(config))
    # total_iters may legitimately grow; everything else must match.
    diff = [line for line in diff if not line.startswith(("total_iters:", "checkpoint_every:"))]
    if diff:
        raise CheckpointMismatch("config mismatch:\n  " + "\n  ".join(diff))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    start_iter = payload["iteration"]
    rng = np.random.default_rng(config.seed)
    rng.bit_generator.state = payload["rng_state"]
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.initial_lr,
        betas=config.adam_betas, eps=config.adam_eps,
    )
    if payload["optimizer"] is not None:
        optimizer.load_state_dict(payload["optimizer"])
    log = LossLog(out_dir / "loss_log.jsonl")
    model.train()
    for it in range(start_iter, config.total_iters):
        _train_step(model, optimizer, dataset, config, rng, it, log)
    ckpt = save_checkpoint(
        out_dir / "checkpoint", model, optimizer, config,
        max(start_iter, config.total_iters), rng, log.digest(),
    )
    return ckpt, log
