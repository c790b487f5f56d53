"""Loss functions against independent scalar reference implementations."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from msfd.data import NUM_CLASSES, BoxLabel
from msfd.head import (
    encode_targets,
    focal_loss,
    offset_residual,
    pull_loss,
    push_loss,
    smooth_l1,
    total_loss,
)
from msfd.neck import MfpConfig

from util import targets_as_predictions

# ---------------------------------------------------------------------------
# pure-python references (no torch)
# ---------------------------------------------------------------------------

def ref_focal(ys, xs, alpha=0.25, beta=2.0, mode="binary"):
    total = 0.0
    n_pos = 0
    for y, x in zip(ys, xs):
        if x == 1:
            n_pos += 1
            total += -alpha * (1 - y) ** beta * math.log(y)
        else:
            term = -(1 - alpha) * y**beta * math.log(1 - y)
            if mode == "gaussian":
                term *= (1 - x) ** beta
            total += term
    return total / max(n_pos, 1)


def ref_smooth_l1(phis):
    return sum(0.5 * p * p if abs(p) < 1 else abs(p) - 0.5 for p in phis)


def ref_pull(et, eb):
    ek = (et + eb) / 2
    return (et - ek) ** 2 + (eb - ek) ** 2


def ref_push(ek, ej):
    return max(0.0, 1 - abs(ek - ej))


class TestFocalLoss:
    def test_single_positive_example(self):
        # One positive at y=0.9, one negative at y=0.2, binary, n_pos=1.
        expected = -0.25 * 0.1**2 * math.log(0.9) - 0.75 * 0.2**2 * math.log(0.8)
        got = focal_loss(
            torch.tensor([0.9, 0.2], dtype=torch.float64),
            torch.tensor([1.0, 0.0], dtype=torch.float64),
        )
        assert float(got) == pytest.approx(expected, abs=1e-12)

    def test_random_oracle_binary_and_gaussian(self):
        rng = np.random.default_rng(0)
        for _ in range(120):
            n = int(rng.integers(1, 40))
            ys = rng.uniform(1e-4, 1 - 1e-4, n)
            xs = np.where(rng.random(n) < 0.3, 1.0, rng.uniform(0, 0.999, n))
            for mode in ("binary", "gaussian"):
                got = focal_loss(
                    torch.tensor(ys, dtype=torch.float64),
                    torch.tensor(xs, dtype=torch.float64),
                    mode=mode,
                )
                assert abs(float(got) - ref_focal(ys, xs, mode=mode)) <= 1e-9

    def test_gaussian_mode_downweights_near_positives(self):
        ys = torch.tensor([0.5], dtype=torch.float64)
        near = torch.tensor([0.9], dtype=torch.float64)
        far = torch.tensor([0.0], dtype=torch.float64)
        assert float(focal_loss(ys, near, mode="gaussian")) < float(
            focal_loss(ys, far, mode="gaussian")
        )

    def test_no_positives_normalizes_by_one(self):
        ys = torch.tensor([0.3, 0.4], dtype=torch.float64)
        xs = torch.zeros(2, dtype=torch.float64)
        expected = ref_focal(ys.tolist(), xs.tolist())
        assert float(focal_loss(ys, xs)) == pytest.approx(expected, abs=1e-12)

    def test_rejects_out_of_range_predictions(self):
        with pytest.raises(ValueError):
            focal_loss(torch.tensor([1.0]), torch.tensor([1.0]))
        with pytest.raises(ValueError):
            focal_loss(torch.tensor([0.0]), torch.tensor([0.0]))

    def test_rejects_unknown_mode(self):
        with pytest.raises(ValueError):
            focal_loss(torch.tensor([0.5]), torch.tensor([0.0]), mode="huber")


class TestSmoothL1:
    def test_knee_values(self):
        assert float(smooth_l1(0.4)) == pytest.approx(0.08, abs=1e-12)
        assert float(smooth_l1(1.0)) == pytest.approx(0.5, abs=1e-12)
        assert float(smooth_l1(2.5)) == pytest.approx(2.0, abs=1e-12)

    def test_continuous_and_smooth_at_knee(self):
        eps = 1e-7
        below = float(smooth_l1(1.0 - eps))
        above = float(smooth_l1(1.0 + eps))
        assert abs(above - below) < 1e-6
        # C1: derivative approaches 1 from both sides.
        x = torch.tensor([1.0 - 1e-4, 1.0 + 1e-4], dtype=torch.float64, requires_grad=True)
        smooth_l1(x).backward()
        assert torch.allclose(x.grad, torch.ones(2, dtype=torch.float64), atol=1e-3)

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=16))
    @settings(max_examples=200, deadline=None)
    def test_random_oracle(self, phis):
        got = float(smooth_l1(torch.tensor(phis, dtype=torch.float64)))
        assert abs(got - ref_smooth_l1(phis)) <= 1e-9

    def test_plain_float_input_keeps_precision(self):
        assert abs(float(smooth_l1(0.1)) - 0.005) <= 1e-12


class TestOffsetResidual:
    def test_examples(self):
        assert offset_residual(100.0, 96.0, 8) == pytest.approx((0.5, 0.0))
        assert offset_residual(7.0, 3.0, 8) == pytest.approx((0.875, 0.375))

    def test_per_axis_delta(self):
        ox, oy = offset_residual(100.0, 100.0, (8, 16))
        assert (ox, oy) == pytest.approx((0.5, 0.25))

    @given(
        x=st.floats(0, 4096), y=st.floats(0, 4096),
        d=st.sampled_from([1, 2, 4, 8, 16, 32, 64, 128]),
    )
    @settings(max_examples=200, deadline=None)
    def test_range_and_reconstruction(self, x, y, d):
        ox, oy = offset_residual(x, y, d)
        assert 0 <= ox < 1 and 0 <= oy < 1
        assert math.floor(x / d) * d + ox * d == pytest.approx(x, abs=1e-6)

    def test_rejects_bad_delta(self):
        with pytest.raises(ValueError):
            offset_residual(1.0, 1.0, 0)


class TestPullPush:
    def test_examples(self):
        assert float(pull_loss(1.0, 0.0)) == pytest.approx(0.5, abs=1e-12)
        assert float(pull_loss(2.0, 2.0)) == 0.0
        assert float(push_loss(0.0, 0.4)) == pytest.approx(0.6, abs=1e-12)
        assert float(push_loss(0.0, 1.5)) == 0.0

    @given(a=st.floats(-100, 100), b=st.floats(-100, 100))
    @settings(max_examples=200, deadline=None)
    def test_random_oracle(self, a, b):
        assert abs(float(pull_loss(a, b)) - ref_pull(a, b)) <= 1e-9
        assert abs(float(push_loss(a, b)) - ref_push(a, b)) <= 1e-9

    @given(a=st.floats(-50, 50), b=st.floats(-50, 50))
    @settings(max_examples=100, deadline=None)
    def test_symmetry_and_nonnegativity(self, a, b):
        assert float(pull_loss(a, b)) == pytest.approx(float(pull_loss(b, a)), abs=1e-12)
        assert float(push_loss(a, b)) == pytest.approx(float(push_loss(b, a)), abs=1e-12)
        assert float(pull_loss(a, b)) >= 0
        assert 0 <= float(push_loss(a, b)) <= 1


# ---------------------------------------------------------------------------
# total loss
# ---------------------------------------------------------------------------

CFG = MfpConfig(base_range="P6-P7", channels=64)


def _scene(seed, n_boxes=2, size=256):
    rng = np.random.default_rng(seed)
    boxes = []
    for k in range(n_boxes):
        x1 = 10 + 100 * k
        y1 = 20 + 60 * k
        boxes.append(BoxLabel((float(x1), float(y1), x1 + 80.0, y1 + 70.0), k % NUM_CLASSES))
    return boxes


class TestTotalLoss:
    def test_perfect_predictions_near_zero(self):
        boxes = _scene(0)
        targets = encode_targets(boxes, CFG, 256, NUM_CLASSES)
        preds = targets_as_predictions(targets, CFG, 256)
        loss, breakdown = total_loss(preds, targets, lam=0.1)
        # Only the clamp at 1 - 1e-6 keeps the focal term off exact zero.
        assert float(loss) < 1e-3
        assert breakdown["sl1"] == 0.0
        assert breakdown["pull"] == 0.0
        assert breakdown["push"] == 0.0

    def test_reference_decomposition(self):
        # Perturb offsets/embeddings and check total = fl + sl1 + lam*(pull+push)
        # against scalar references.
        boxes = _scene(1)
        targets = encode_targets(boxes, CFG, 256, NUM_CLASSES)
        preds = targets_as_predictions(targets, CFG, 256, embed_gap=0.3)
        for lp in preds.layers.values():
            lp.tl_offset.add_(0.25)
        loss, breakdown = total_loss(preds, targets, lam=0.7)
        n = len(targets.objects)
        exp_sl1 = sum(
            ref_smooth_l1([0.25, 0.25]) for _ in targets.objects
        ) / n
        means = [0.3 * k for k in range(n)]
        exp_push = sum(
            ref_push(means[k], means[j])
            for k in range(n) for j in range(n) if k != j
        ) / (n * (n - 1))
        assert breakdown["sl1"] == pytest.approx(exp_sl1, abs=1e-6)
        assert breakdown["pull"] == pytest.approx(0.0, abs=1e-9)
        assert breakdown["push"] == pytest.approx(exp_push, abs=1e-6)
        assert float(loss) == pytest.approx(
            breakdown["fl"] + breakdown["sl1"] + 0.7 * (breakdown["pull"] + breakdown["push"]),
            rel=1e-5,
        )

    def test_lambda_scaling(self):
        boxes = _scene(2)
        targets = encode_targets(boxes, CFG, 256, NUM_CLASSES)
        preds = targets_as_predictions(targets, CFG, 256, embed_gap=0.4)
        _, b0 = total_loss(preds, targets, lam=0.0)
        _, b1 = total_loss(preds, targets, lam=1.0)
        _, b5 = total_loss(preds, targets, lam=0.5)
        embed_term = b1["total"] - b0["total"]
        assert b5["total"] - b0["total"] == pytest.approx(0.5 * embed_term, rel=1e-5)

    def test_single_object_has_no_push(self):
        boxes = _scene(3, n_boxes=1)
        targets = encode_targets(boxes, CFG, 256, NUM_CLASSES)
        preds = targets_as_predictions(targets, CFG, 256)
        _, breakdown = total_loss(preds, targets, lam=1.0)
        assert breakdown["push"] == 0.0

    def test_rejects_batch_mismatch(self):
        boxes = _scene(4)
        targets = encode_targets(boxes, CFG, 256, NUM_CLASSES)
        preds = targets_as_predictions(targets, CFG, 256)
        with pytest.raises(ValueError):
            total_loss(preds, [targets, targets])


# ---------------------------------------------------------------------------
# gradient checks (central finite differences, double precision)
# ---------------------------------------------------------------------------

def _fd_check(fn, x, rel_tol=1e-4, eps=1e-6):
    x = x.detach().clone().double().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.clone()
    flat = x.detach().reshape(-1)
    fd = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(fn(x.detach()))
        flat[i] = orig - eps
        lo = float(fn(x.detach()))
        flat[i] = orig
        fd[i] = (hi - lo) / (2 * eps)
    fd = fd.reshape(grad.shape)
    denom = max(float(grad.abs().max()), float(fd.abs().max()), 1e-8)
    assert float((grad - fd).abs().max()) / denom <= rel_tol


class TestGradientChecks:
    def test_focal_gradient(self):
        gen = torch.Generator().manual_seed(0)
        y = torch.rand(12, 12, generator=gen, dtype=torch.float64) * 0.98 + 0.01
        x = (torch.rand(12, 12, generator=gen, dtype=torch.float64) < 0.2).double()
        _fd_check(lambda t: focal_loss(t, x, mode="binary"), y)
        xg = x.clone()
        xg[x == 0] = torch.rand(int((x == 0).sum()), generator=gen, dtype=torch.float64) * 0.9
        _fd_check(lambda t: focal_loss(t, xg, mode="gaussian"), y)

    def test_smooth_l1_gradient(self):
        gen = torch.Generator().manual_seed(1)
        phi = torch.randn(16, generator=gen, dtype=torch.float64) * 2
        phi = phi[(phi.abs() - 1).abs() > 1e-3]  # keep clear of the knee
        _fd_check(smooth_l1, phi)

    def test_pull_gradient(self):
        gen = torch.Generator().manual_seed(2)
        e = torch.randn(2, generator=gen, dtype=torch.float64)
        _fd_check(lambda t: pull_loss(t[0], t[1]), e)

    def test_push_gradient(self):
        e = torch.tensor([0.1, 0.6], dtype=torch.float64)  # inside the hinge
        _fd_check(lambda t: push_loss(t[0], t[1]), e)

    def test_total_loss_gradient_through_offsets_and_embeds(self):
        from msfd.head import CornerPredictions, LayerPredictions

        boxes = _scene(5)
        targets = encode_targets(boxes, CFG, 256, NUM_CLASSES)
        base = targets_as_predictions(targets, CFG, 256, embed_gap=0.3)
        lid = targets.objects[0].layer

        def rebuild(vec):
            layers = {}
            for l, p in base.layers.items():
                tl_off = p.tl_offset.double()
                tl_emb = p.tl_embed.double()
                if l == lid:
                    tl_off = tl_off + vec[0]
                    tl_emb = tl_emb + vec[1]
                layers[l] = LayerPredictions(
                    p.tl_heat.double(), p.br_heat.double(),
                    tl_off, p.br_offset.double(),
                    tl_emb, p.br_embed.double(),
                    p.stride_w, p.stride_h,
                )
            return total_loss(CornerPredictions(layers), targets, lam=0.5)[0]

        _fd_check(rebuild, torch.tensor([0.13, 0.07], dtype=torch.float64))
