"""Corner-based anchor-free head: losses, target encoding, box decoding.

Objects are localized by their top-left and bottom-right corners. Each matrix
layer gets per-class corner heatmaps, fractional-pixel offsets, and scalar
embeddings that pair the two corners of the same object. There is no corner
pooling anywhere in the head.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .layers import ConvBNAct, init_conv_weights
from .neck import MatrixFeatureSet, MatrixLayerId, MfpConfig, assign_box_to_layer, layer_strides

HEAT_EPS = 1e-6


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def focal_loss(y, x, alpha=0.25, beta=2.0, mode="binary"):
    """Corner-heatmap focal loss.

    Positive cells (x == 1): -alpha * (1-y)^beta * log y.
    Negative cells:          -(1-alpha) * y^beta * log(1-y), additionally
    weighted by (1-x)^beta in "gaussian" mode so near-corner cells with a
    Gaussian penalty target are down-weighted.

    Summed over cells and divided by the positive count (minimum 1).
    """
    y = torch.as_tensor(y)
    x = torch.as_tensor(x, dtype=y.dtype)
    if torch.any(y <= 0) or torch.any(y >= 1):
        raise ValueError("predictions must lie strictly in (0, 1)")
    pos = x == 1
    pos_loss = -alpha * (1 - y) ** beta * torch.log(y)
    neg_loss = -(1 - alpha) * y**beta * torch.log(1 - y)
    if mode == "gaussian":
        neg_loss = neg_loss * (1 - x) ** beta
    elif mode != "binary":
        raise ValueError(f"unknown focal mode {mode!r}")
    loss = torch.where(pos, pos_loss, neg_loss).sum()
    return loss / pos.sum().clamp(min=1).to(loss.dtype)


def smooth_l1(phi):
    """Smooth L1: 0.5*phi^2 below |phi| = 1, |phi| - 0.5 beyond; summed."""
    phi = torch.as_tensor(phi, dtype=torch.float64 if not torch.is_tensor(phi) else None)
    a = phi.abs()
    return torch.where(a < 1, 0.5 * phi * phi, a - 0.5).sum()


def offset_residual(coord_x, coord_y, delta):
    """Fractional-cell remainder of a corner under downsampling.

    ``delta`` is the downsampling factor, a scalar or a per-axis
    (delta_x, delta_y) pair for rectangular layers. Values lie in [0, 1).
    """
    if isinstance(delta, (tuple, list)):
        dx, dy = delta
    else:
        dx = dy = delta
    if dx <= 0 or dy <= 0:
        raise ValueError("downsampling factor must be positive")
    return coord_x / dx - math.floor(coord_x / dx), coord_y / dy - math.floor(coord_y / dy)


def pull_loss(e_ti, e_bi):
    """Draws the two corner embeddings of one object toward their mean."""
    e_ti = torch.as_tensor(e_ti, dtype=torch.float64 if not torch.is_tensor(e_ti) else None)
    e_bi = torch.as_tensor(e_bi, dtype=e_ti.dtype)
    e_k = (e_ti + e_bi) / 2
    return (e_ti - e_k) ** 2 + (e_bi - e_k) ** 2


def push_loss(e_k, e_j):
    """Hinge that separates two objects' mean embeddings by a unit margin."""
    e_k = torch.as_tensor(e_k, dtype=torch.float64 if not torch.is_tensor(e_k) else None)
    e_j = torch.as_tensor(e_j, dtype=e_k.dtype)
    return torch.clamp(1 - (e_k - e_j).abs(), min=0)


# ---------------------------------------------------------------------------
# prediction / target containers
# ---------------------------------------------------------------------------

class LayerPredictions(NamedTuple):
    tl_heat: torch.Tensor  # [B, K, H, W], values in (0, 1)
    br_heat: torch.Tensor
    tl_offset: torch.Tensor  # [B, 2, H, W], channel 0 = x, 1 = y
    br_offset: torch.Tensor
    tl_embed: torch.Tensor  # [B, 1, H, W]
    br_embed: torch.Tensor
    stride_w: int
    stride_h: int


@dataclass
class CornerPredictions:
    layers: Dict[MatrixLayerId, LayerPredictions]

    @property
    def batch_size(self):
        first = next(iter(self.layers.values()))
        return first.tl_heat.shape[0]


class EncodedObject(NamedTuple):
    layer: MatrixLayerId
    class_id: int
    tl_cell: Tuple[int, int]  # (ix, iy)
    br_cell: Tuple[int, int]
    tl_offset: Tuple[float, float]  # (phi_x, phi_y)
    br_offset: Tuple[float, float]


@dataclass
class CornerTargets:
    """Ground-truth encoding for a single image."""

    tl_heat: Dict[MatrixLayerId, torch.Tensor]  # [K, H, W] in [0, 1]
    br_heat: Dict[MatrixLayerId, torch.Tensor]
    objects: List[EncodedObject]
    skipped: int = 0


@dataclass
class DetectionBox:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float
    class_id: int

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError("degenerate box")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must be in [0, 1]")

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)


# ---------------------------------------------------------------------------
# target encoding
# ---------------------------------------------------------------------------

def layer_spatial_size(image_hw, config: MfpConfig, layer: MatrixLayerId):
    """(H, W) of a matrix cell for a given input size (divisible by 128)."""
    ih, iw = image_hw
    base = min(layer.i, layer.j)
    s = config.base_strides[base - 1]
    h, w = ih // s, iw // s
    for _ in range(layer.i - base):
        w = (w + 1) // 2
    for _ in range(layer.j - base):
        h = (h + 1) // 2
    return h, w


def gaussian_radius(det_size, min_overlap=0.3):
    """Largest corner displacement keeping IoU >= min_overlap (CornerNet rule)."""
    height, width = det_size
    a1 = 1
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 - math.sqrt(max(b1**2 - 4 * a1 * c1, 0))) / (2 * a1)

    a2 = 4
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 - math.sqrt(max(b2**2 - 4 * a2 * c2, 0))) / (2 * a2)

    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(max(b3**2 - 4 * a3 * c3, 0))) / (2 * a3)
    return max(0.0, min(r1, r2, r3))


def _draw_gaussian(heat, center, radius):
    """Max-combine a 2D Gaussian splat of the given radius into ``heat``."""
    ix, iy = center
    h, w = heat.shape
    r = int(radius)
    if r <= 0:
        heat[iy, ix] = 1.0
        return
    sigma = (2 * r + 1) / 6.0
    ys = torch.arange(-r, r + 1, dtype=heat.dtype)
    xs = torch.arange(-r, r + 1, dtype=heat.dtype)
    g = torch.exp(-(ys[:, None] ** 2 + xs[None, :] ** 2) / (2 * sigma * sigma))
    y0, y1 = max(0, iy - r), min(h, iy + r + 1)
    x0, x1 = max(0, ix - r), min(w, ix + r + 1)
    gy0, gx0 = y0 - (iy - r), x0 - (ix - r)
    patch = g[gy0 : gy0 + (y1 - y0), gx0 : gx0 + (x1 - x0)]
    heat[y0:y1, x0:x1] = torch.maximum(heat[y0:y1, x0:x1], patch)
    heat[iy, ix] = 1.0


def encode_targets(annotations, config: MfpConfig, image_hw, num_classes,
                   dtype=torch.float32) -> CornerTargets:
    """Encode one image's boxes into per-layer corner targets.

    Each object lands on exactly one layer (via the aspect/scale assignment)
    with a unit peak at its corner cells, a Gaussian penalty falloff sized so
    a radius-shifted box keeps IoU >= 0.3, and fractional offset targets.
    Degenerate boxes (under 1 px a side) are skipped and counted.
    """
    if isinstance(image_hw, int):
        image_hw = (image_hw, image_hw)
    tl_heat, br_heat = {}, {}
    for lid in config.layer_ids():
        h, w = layer_spatial_size(image_hw, config, lid)
        tl_heat[lid] = torch.zeros(num_classes, h, w, dtype=dtype)
        br_heat[lid] = torch.zeros(num_classes, h, w, dtype=dtype)

    objects: List[EncodedObject] = []
    skipped = 0
    strides = config.base_strides
    for ann in annotations:
        x1, y1, x2, y2 = ann.bbox
        w_box, h_box = x2 - x1, y2 - y1
        if w_box < 1 or h_box < 1:
            skipped += 1
            continue
        lid = assign_box_to_layer(w_box, h_box, config)
        sw, sh = layer_strides(strides, lid)
        lh, lw = tl_heat[lid].shape[1:]
        cls = ann.class_id
        if not 0 <= cls < num_classes:
            raise ValueError(f"class id {cls} out of range")

        cells, offsets = [], []
        for cx, cy in ((x1, y1), (x2, y2)):
            # Corners on the far image edge belong to the last cell.
            ix = min(int(cx // sw), lw - 1)
            iy = min(int(cy // sh), lh - 1)
            ox = cx / sw - ix
            oy = cy / sh - iy
            cells.append((ix, iy))
            offsets.append((ox, oy))

        radius = gaussian_radius((h_box / sh, w_box / sw), min_overlap=0.3)
        _draw_gaussian(tl_heat[lid][cls], cells[0], radius)
        _draw_gaussian(br_heat[lid][cls], cells[1], radius)
        objects.append(
            EncodedObject(lid, cls, cells[0], cells[1], offsets[0], offsets[1])
        )
    return CornerTargets(tl_heat, br_heat, objects, skipped)


def encode_batch(annotations_per_image, config, image_hw, num_classes,
                 dtype=torch.float32) -> List[CornerTargets]:
    return [
        encode_targets(anns, config, image_hw, num_classes, dtype)
        for anns in annotations_per_image
    ]


# ---------------------------------------------------------------------------
# total loss
# ---------------------------------------------------------------------------

def total_loss(predictions: CornerPredictions, targets, lam=0.1, alpha=0.25,
               beta=2.0, focal_mode="gaussian"):
    """Focal + offset + lam * (pull + push), averaged over the batch.

    ``targets`` is one CornerTargets per batch item. Returns the scalar loss
    (with graph) and a per-term breakdown of plain floats for logging.
    """
    if isinstance(targets, CornerTargets):
        targets = [targets]
    b = predictions.batch_size
    if len(targets) != b:
        raise ValueError(f"got {len(targets)} target sets for batch of {b}")
    for lid in targets[0].tl_heat:
        if lid not in predictions.layers:
            raise ValueError(f"predictions are missing layer {lid}")

    zero = None
    totals, fls, sl1s, pulls, pushes = [], [], [], [], []
    for bi, tgt in enumerate(targets):
        pred_heats, tgt_heats = [], []
        for lid, lp in predictions.layers.items():
            pred_heats.append(lp.tl_heat[bi].reshape(-1))
            pred_heats.append(lp.br_heat[bi].reshape(-1))
            tgt_heats.append(tgt.tl_heat[lid].reshape(-1))
            tgt_heats.append(tgt.br_heat[lid].reshape(-1))
        y = torch.cat(pred_heats)
        x = torch.cat(tgt_heats).to(y.dtype)
        if zero is None:
            zero = y.sum() * 0
        fl = focal_loss(y.clamp(HEAT_EPS, 1 - HEAT_EPS), x, alpha, beta, focal_mode)

        n = len(tgt.objects)
        sl1 = zero.clone()
        pull = zero.clone()
        push = zero.clone()
        if n > 0:
            means = []
            for obj in tgt.objects:
                lp = predictions.layers[obj.layer]
                tx, ty = obj.tl_cell
                bx, by = obj.br_cell
                res = torch.stack(
                    [
                        lp.tl_offset[bi, 0, ty, tx] - obj.tl_offset[0],
                        lp.tl_offset[bi, 1, ty, tx] - obj.tl_offset[1],
                        lp.br_offset[bi, 0, by, bx] - obj.br_offset[0],
                        lp.br_offset[bi, 1, by, bx] - obj.br_offset[1],
                    ]
                )
                sl1 = sl1 + smooth_l1(res)
                e_t = lp.tl_embed[bi, 0, ty, tx]
                e_b = lp.br_embed[bi, 0, by, bx]
                pull = pull + pull_loss(e_t, e_b)
                means.append((e_t + e_b) / 2)
            sl1 = sl1 / n
            pull = pull / n
            if n > 1:
                for k in range(n):
                    for j in range(n):
                        if k != j:
                            push = push + push_loss(means[k], means[j])
                push = push / (n * (n - 1))
        total = fl + sl1 + lam * (pull + push)
        totals.append(total)
        fls.append(fl.detach().item())
        sl1s.append(sl1.detach().item())
        pulls.append(pull.detach().item())
        pushes.append(push.detach().item())

    loss = torch.stack(totals).mean()
    breakdown = {
        "fl": sum(fls) / b,
        "sl1": sum(sl1s) / b,
        "pull": sum(pulls) / b,
        "push": sum(pushes) / b,
        "total": loss.detach().item(),
    }
    return loss, breakdown


# ---------------------------------------------------------------------------
# head network
# ---------------------------------------------------------------------------

class CornerHead(nn.Module):
    """Shared-weight corner branches applied identically to every layer.

    Each corner type (top-left / bottom-right) gets a two-conv trunk and
    1x1 output heads for heatmaps, offsets, and embeddings. Heatmap biases
    start at the focal prior so early training is not swamped by negatives.
    """

    def __init__(self, channels, num_classes, seed=0):
        super().__init__()
        self.num_classes = num_classes

        def branch():
            trunk = nn.Sequential(ConvBNAct(channels, channels), ConvBNAct(channels, channels))
            return nn.ModuleDict(
                {
                    "trunk": trunk,
                    "heat": nn.Conv2d(channels, num_classes, 1),
                    "offset": nn.Conv2d(channels, 2, 1),
                    "embed": nn.Conv2d(channels, 1, 1),
                }
            )

        self.tl = branch()
        self.br = branch()
        init_conv_weights(self, seed)
        prior = -math.log((1 - 0.1) / 0.1)
        with torch.no_grad():
            self.tl["heat"].bias.fill_(prior)
            self.br["heat"].bias.fill_(prior)

    def _run(self, branch, x):
        t = branch["trunk"](x)
        heat = torch.sigmoid(branch["heat"](t)).clamp(HEAT_EPS, 1 - HEAT_EPS)
        return heat, branch["offset"](t), branch["embed"](t)

    def forward(self, features: MatrixFeatureSet) -> CornerPredictions:
        out = {}
        for lid, mf in features.layers.items():
            tl_heat, tl_off, tl_emb = self._run(self.tl, mf.feature)
            br_heat, br_off, br_emb = self._run(self.br, mf.feature)
            out[lid] = LayerPredictions(
                tl_heat, br_heat, tl_off, br_off, tl_emb, br_emb,
                mf.stride_w, mf.stride_h,
            )
        return CornerPredictions(out)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def box_iou(a, b):
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix2 - ix1), max(0.0, iy2 - iy1)
    inter = iw * ih
    if inter == 0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _top_corners(heat, offset, embed, stride_w, stride_h, top_k, score_thresh):
    """Local-maximum corners of one image/corner-type on one layer."""
    k, h, w = heat.shape
    pooled = F.max_pool2d(heat[None], 3, stride=1, padding=1)[0]
    keep = (heat == pooled).to(heat.dtype)
    flat = (heat * keep).reshape(-1)
    n = min(top_k, flat.numel())
    scores, idx = flat.topk(n)
    corners = []
    for s, i in zip(scores.tolist(), idx.tolist()):
        if s < score_thresh:
            break
        cls, rem = divmod(i, h * w)
        iy, ix = divmod(rem, w)
        x = (ix + float(offset[0, iy, ix])) * stride_w
        y = (iy + float(offset[1, iy, ix])) * stride_h
        corners.append((s, cls, x, y, float(embed[0, iy, ix])))
    return corners


def _nms(boxes: List[DetectionBox], iou_thresh):
    boxes = sorted(boxes, key=lambda d: d.score, reverse=True)
    kept: List[DetectionBox] = []
    for box in boxes:
        if all(box_iou(box.as_tuple(), k.as_tuple()) <= iou_thresh for k in kept):
            kept.append(box)
    return kept


def decode(predictions: CornerPredictions, max_dets=100, score_thresh=0.3,
           embed_thresh=0.5, top_k=20, nms_iou=0.5) -> List[List[DetectionBox]]:
    """Turn corner predictions into boxes, one list per batch item.

    Per layer: top-K 3x3-local-max corners above threshold, offset-refined and
    scaled to input pixels, then paired (same class, tl up-left of br,
    embedding gap under ``embed_thresh``) with the mean corner score. Layers
    are merged with greedy IoU suppression.
    """
    if not 0 <= score_thresh <= 1:
        raise ValueError("score_thresh must be in [0, 1]")
    if embed_thresh <= 0:
        raise ValueError("embed_thresh must be positive")
    results = []
    for bi in range(predictions.batch_size):
        candidates: List[DetectionBox] = []
        for lp in predictions.layers.values():
            tls = _top_corners(
                lp.tl_heat[bi], lp.tl_offset[bi], lp.tl_embed[bi],
                lp.stride_w, lp.stride_h, top_k, score_thresh,
            )
            brs = _top_corners(
                lp.br_heat[bi], lp.br_offset[bi], lp.br_embed[bi],
                lp.stride_w, lp.stride_h, top_k, score_thresh,
            )
            for st, ct, xt, yt, et in tls:
                for sb, cb, xb, yb, eb in brs:
                    if ct != cb or xt >= xb or yt >= yb:
                        continue
                    if abs(et - eb) >= embed_thresh:
                        continue
                    candidates.append(
                        DetectionBox(xt, yt, xb, yb, (st + sb) / 2, ct)
                    )
        results.append(_nms(candidates, nms_iou)[:max_dets])
    return results
