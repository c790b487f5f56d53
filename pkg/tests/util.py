"""Shared helpers for the test suite."""

import numpy as np
import torch

from msfd.backbone import BackboneConfig
from msfd.data import NUM_CLASSES, BoxLabel
from msfd.head import CornerPredictions, LayerPredictions, layer_spatial_size
from msfd.model import HeadConfig, build_detector
from msfd.neck import MfpConfig, layer_strides

TINY_BACKBONE = BackboneConfig(stem_channels=8, stage_specs=((1, 8), (1, 16), (1, 16), (1, 32)))
SLIM_BACKBONE = BackboneConfig(stem_channels=16, stage_specs=((1, 32), (1, 64), (2, 96), (1, 128)))


def tiny_detector(base_range="P6-P7", channels=64, seed=0):
    return build_detector(
        TINY_BACKBONE,
        MfpConfig(base_range=base_range, channels=channels, seed=seed),
        HeadConfig(seed=seed),
    )


def slim_detector(channels=64, seed=0, diagonal_only=False):
    return build_detector(
        SLIM_BACKBONE,
        MfpConfig(channels=channels, seed=seed, diagonal_only=diagonal_only),
        HeadConfig(seed=seed),
    )


def random_boxes(rng, image_size, max_boxes=3, min_size=12):
    """Non-overlapping random boxes with detection classes."""
    boxes = []
    for _ in range(rng.integers(1, max_boxes + 1)):
        for _ in range(40):
            w = int(rng.integers(min_size, image_size // 2))
            h = int(rng.integers(min_size, image_size // 2))
            x1 = int(rng.integers(0, image_size - w))
            y1 = int(rng.integers(0, image_size - h))
            box = (x1, y1, x1 + w, y1 + h)
            if all(
                box[2] <= b.bbox[0] or b.bbox[2] <= box[0]
                or box[3] <= b.bbox[1] or b.bbox[3] <= box[1]
                for b in boxes
            ):
                boxes.append(BoxLabel(tuple(float(v) for v in box), int(rng.integers(NUM_CLASSES))))
                break
    return boxes


def targets_as_predictions(targets, config: MfpConfig, image_size,
                           num_classes=NUM_CLASSES, embed_gap=2.0) -> CornerPredictions:
    """Build predictions that mirror a target encoding exactly.

    Heatmaps are the target maps, offsets match at the positive cells, and
    each object gets a distinct embedding value spaced by ``embed_gap``.
    """
    layers = {}
    for lid in config.layer_ids():
        h, w = layer_spatial_size((image_size, image_size), config, lid)
        sw, sh = layer_strides(config.base_strides, lid)
        layers[lid] = LayerPredictions(
            targets.tl_heat[lid][None].clamp(1e-6, 1 - 1e-6),
            targets.br_heat[lid][None].clamp(1e-6, 1 - 1e-6),
            torch.zeros(1, 2, h, w),
            torch.zeros(1, 2, h, w),
            torch.zeros(1, 1, h, w),
            torch.zeros(1, 1, h, w),
            sw,
            sh,
        )
    for oi, obj in enumerate(targets.objects):
        lp = layers[obj.layer]
        tx, ty = obj.tl_cell
        bx, by = obj.br_cell
        lp.tl_offset[0, 0, ty, tx] = obj.tl_offset[0]
        lp.tl_offset[0, 1, ty, tx] = obj.tl_offset[1]
        lp.br_offset[0, 0, by, bx] = obj.br_offset[0]
        lp.br_offset[0, 1, by, bx] = obj.br_offset[1]
        lp.tl_embed[0, 0, ty, tx] = oi * embed_gap
        lp.br_embed[0, 0, by, bx] = oi * embed_gap
    return CornerPredictions(layers)


def embedding_margins(model, dataset):
    """Pairwise |mean embedding| gaps between objects of each image.

    Returns a list with one |e_k - e_j| per object pair, read at the
    ground-truth corner cells of the encoded targets.
    """
    from msfd.data import to_box_labels
    from msfd.head import encode_targets

    model.eval()
    margins = []
    with torch.no_grad():
        for image, annotations in dataset:
            boxes = to_box_labels(annotations)
            if len(boxes) < 2:
                continue
            size = image.shape[0]
            targets = encode_targets(boxes, model.mfp_config, size, model.head_config.num_classes)
            if len(targets.objects) < 2:
                continue
            batch = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]
            preds = model(batch)
            means = []
            for obj in targets.objects:
                lp = preds.layers[obj.layer]
                tx, ty = obj.tl_cell
                bx, by = obj.br_cell
                e_t = float(lp.tl_embed[0, 0, ty, tx])
                e_b = float(lp.br_embed[0, 0, by, bx])
                means.append((e_t + e_b) / 2)
            for k in range(len(means)):
                for j in range(k + 1, len(means)):
                    margins.append(abs(means[k] - means[j]))
    return margins


def match_boxes(gt_boxes, detections, tol):
    """Greedy match by coordinates; returns (matched, unmatched_gt, spurious)."""
    remaining = list(detections)
    unmatched = []
    for gt in gt_boxes:
        hit = None
        for det in remaining:
            if all(abs(g - d) < tol for g, d in zip(gt.bbox, det.as_tuple())):
                hit = det
                break
        if hit is None:
            unmatched.append(gt)
        else:
            remaining.remove(hit)
    return unmatched, remaining
