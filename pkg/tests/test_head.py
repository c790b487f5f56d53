"""Target encoding, box decoding, and the corner-head module."""

import numpy as np
import pytest
import torch

from msfd.data import NUM_CLASSES, BoxLabel
from msfd.head import (
    DetectionBox,
    box_iou,
    decode,
    encode_batch,
    encode_targets,
    gaussian_radius,
    layer_spatial_size,
)
from msfd.neck import MfpConfig, layer_strides

from util import TINY_BACKBONE, match_boxes, random_boxes, targets_as_predictions, tiny_detector

CFG = MfpConfig(base_range="P4-P7", channels=64)
FULL_CFG = MfpConfig(base_range="P3-P7", channels=64)


class TestGaussianRadius:
    def test_larger_boxes_get_larger_radius(self):
        assert gaussian_radius((40, 40)) > gaussian_radius((10, 10))

    def test_tiny_box_radius_zero_floor(self):
        assert gaussian_radius((1, 1)) >= 0

    def test_radius_keeps_overlap(self):
        # Shifting one corner by the radius must keep IoU >= 0.3.
        h, w = 30, 50
        r = gaussian_radius((h, w), min_overlap=0.3)
        shifted = (r, r, w + r, h + r)
        assert box_iou((0, 0, w, h), shifted) >= 0.3 - 1e-6


class TestEncodeTargets:
    def test_one_positive_pair_per_object(self):
        boxes = [BoxLabel((32.0, 32.0, 200.0, 180.0), 3)]
        targets = encode_targets(boxes, CFG, 512, NUM_CLASSES)
        assert len(targets.objects) == 1
        total_tl = sum(float((h == 1).sum()) for h in targets.tl_heat.values())
        total_br = sum(float((h == 1).sum()) for h in targets.br_heat.values())
        assert total_tl == 1 and total_br == 1

    def test_offsets_in_unit_interval(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            boxes = random_boxes(rng, 512)
            targets = encode_targets(boxes, CFG, 512, NUM_CLASSES)
            for obj in targets.objects:
                for v in (*obj.tl_offset, *obj.br_offset):
                    assert 0 <= v < 1

    def test_grid_aligned_corner_has_zero_offset(self):
        boxes = [BoxLabel((64.0, 64.0, 256.0, 256.0), 0)]
        targets = encode_targets(boxes, CFG, 512, NUM_CLASSES)
        obj = targets.objects[0]
        sw, sh = layer_strides(CFG.base_strides, obj.layer)
        if 64 % sw == 0 and 64 % sh == 0:
            assert obj.tl_offset == (0.0, 0.0)

    def test_edge_corner_clamps_to_last_cell(self):
        boxes = [BoxLabel((300.0, 300.0, 512.0, 512.0), 0)]
        targets = encode_targets(boxes, CFG, 512, NUM_CLASSES)
        obj = targets.objects[0]
        lh, lw = targets.tl_heat[obj.layer].shape[1:]
        assert obj.br_cell == (lw - 1, lh - 1)

    def test_degenerate_boxes_skipped_and_counted(self):
        boxes = [BoxLabel((10.0, 10.0, 10.5, 40.0), 0),
                 BoxLabel((50.0, 50.0, 150.0, 150.0), 1)]
        targets = encode_targets(boxes, CFG, 512, NUM_CLASSES)
        assert targets.skipped == 1
        assert len(targets.objects) == 1

    def test_heat_values_bounded(self):
        rng = np.random.default_rng(1)
        boxes = random_boxes(rng, 512, max_boxes=3)
        targets = encode_targets(boxes, FULL_CFG, 512, NUM_CLASSES)
        for heat in (*targets.tl_heat.values(), *targets.br_heat.values()):
            assert float(heat.min()) >= 0 and float(heat.max()) <= 1

    def test_rejects_bad_class(self):
        with pytest.raises(ValueError):
            encode_targets([BoxLabel((0.0, 0.0, 50.0, 50.0), NUM_CLASSES)], CFG, 512, NUM_CLASSES)

    def test_encode_batch_matches_single(self):
        boxes = [BoxLabel((20.0, 30.0, 120.0, 110.0), 2)]
        single = encode_targets(boxes, CFG, 512, NUM_CLASSES)
        batch = encode_batch([boxes, []], CFG, 512, NUM_CLASSES)
        assert len(batch) == 2
        assert batch[0].objects == single.objects
        assert len(batch[1].objects) == 0


class TestLayerSpatialSize:
    def test_matches_ceil_halving(self):
        for lid in FULL_CFG.layer_ids():
            h, w = layer_spatial_size((512, 512), FULL_CFG, lid)
            base = min(lid.i, lid.j)
            eh = ew = 512 // FULL_CFG.base_strides[base - 1]
            for _ in range(lid.i - base):
                ew = (ew + 1) // 2
            for _ in range(lid.j - base):
                eh = (eh + 1) // 2
            assert (h, w) == (eh, ew)


class TestDecode:
    def test_roundtrip_recovers_boxes(self):
        rng = np.random.default_rng(7)
        max_stride = max(
            max(layer_strides(CFG.base_strides, lid)) for lid in CFG.layer_ids()
        )
        for _ in range(20):
            boxes = random_boxes(rng, 512)
            targets = encode_targets(boxes, CFG, 512, NUM_CLASSES)
            preds = targets_as_predictions(targets, CFG, 512)
            dets = decode(preds, score_thresh=0.5)[0]
            unmatched, spurious = match_boxes(boxes, dets, tol=max_stride)
            assert not unmatched, f"missed {unmatched}"
            assert not [d for d in spurious if d.score > 0.5], f"spurious {spurious}"

    def test_empty_predictions_decode_empty(self):
        targets = encode_targets([], CFG, 512, NUM_CLASSES)
        preds = targets_as_predictions(targets, CFG, 512)
        assert decode(preds)[0] == []

    def test_embedding_gap_blocks_pairing(self):
        boxes = [BoxLabel((32.0, 32.0, 200.0, 180.0), 0)]
        targets = encode_targets(boxes, CFG, 512, NUM_CLASSES)
        preds = targets_as_predictions(targets, CFG, 512)
        obj = targets.objects[0]
        lp = preds.layers[obj.layer]
        lp.br_embed[0, 0, obj.br_cell[1], obj.br_cell[0]] = 5.0
        assert decode(preds, embed_thresh=0.5)[0] == []

    def test_class_mismatch_blocks_pairing(self):
        boxes = [BoxLabel((32.0, 32.0, 200.0, 180.0), 0)]
        targets = encode_targets(boxes, CFG, 512, NUM_CLASSES)
        preds = targets_as_predictions(targets, CFG, 512)
        obj = targets.objects[0]
        lp = preds.layers[obj.layer]
        # Move the br peak to another class channel.
        heat = lp.br_heat.clone()
        heat[0, 1] = heat[0, 0]
        heat[0, 0] = 1e-6
        preds.layers[obj.layer] = lp._replace(br_heat=heat)
        assert decode(preds, score_thresh=0.5)[0] == []

    def test_validation(self):
        targets = encode_targets([], CFG, 512, NUM_CLASSES)
        preds = targets_as_predictions(targets, CFG, 512)
        with pytest.raises(ValueError):
            decode(preds, score_thresh=1.5)
        with pytest.raises(ValueError):
            decode(preds, embed_thresh=0.0)


class TestDetectionBox:
    def test_rejects_degenerate(self):
        with pytest.raises(ValueError):
            DetectionBox(10, 10, 10, 20, 0.5, 0)
        with pytest.raises(ValueError):
            DetectionBox(0, 0, 10, 10, 1.5, 0)

    def test_iou_examples(self):
        assert box_iou((0, 0, 10, 10), (0, 0, 10, 10)) == pytest.approx(1.0)
        assert box_iou((0, 0, 10, 10), (20, 20, 30, 30)) == 0.0
        assert box_iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(1 / 3)


class TestCornerHeadModule:
    def test_forward_layer_count_and_shapes(self):
        model = tiny_detector().eval()
        preds = model(torch.zeros(1, 3, 128, 128))
        assert set(preds.layers) == set(model.mfp_config.layer_ids())
        for lid, lp in preds.layers.items():
            h, w = layer_spatial_size((128, 128), model.mfp_config, lid)
            assert lp.tl_heat.shape == (1, NUM_CLASSES, h, w)
            assert lp.tl_offset.shape == (1, 2, h, w)
            assert lp.tl_embed.shape == (1, 1, h, w)
            assert lp.br_heat.shape == lp.tl_heat.shape

    def test_heat_strictly_inside_unit_interval(self):
        model = tiny_detector().eval()
        x = torch.rand(1, 3, 128, 128, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            preds = model(x)
        for lp in preds.layers.values():
            for heat in (lp.tl_heat, lp.br_heat):
                assert float(heat.min()) > 0 and float(heat.max()) < 1

    def test_branches_share_weights_across_layers(self):
        # The same head weights serve every matrix layer, so an identical
        # feature map yields identical predictions regardless of layer.
        model = tiny_detector().eval()
        feat = torch.rand(1, 64, 4, 4, generator=torch.Generator().manual_seed(1))
        heat1, off1, emb1 = model.head._run(model.head.tl, feat)
        heat2, off2, emb2 = model.head._run(model.head.tl, feat)
        assert torch.equal(heat1, heat2) and torch.equal(off1, off2)

    def test_heat_bias_starts_at_prior(self):
        model = tiny_detector()
        expected = -float(np.log(9.0))
        assert torch.allclose(
            model.head.tl["heat"].bias, torch.full((NUM_CLASSES,), expected), atol=1e-6
        )

    def test_deterministic_construction(self):
        a = tiny_detector(seed=3)
        b = tiny_detector(seed=3)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_detect_returns_per_image_lists(self):
        model = tiny_detector().eval()
        out = model.detect(torch.rand(2, 3, 128, 128))
        assert len(out) == 2
        for dets in out:
            assert all(isinstance(d, DetectionBox) for d in dets)
