import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pixtrip import tensor as T
from pixtrip.gradcheck import grad_check
from pixtrip.losses import (
    LossConfig,
    combined_loss,
    cross_entropy_loss,
    dice_loss,
    focal_loss,
    is_triplet_loss,
    segmentation_loss,
    triplet_loss_single,
)
from pixtrip.nn import softmax_channel
from pixtrip.sampler import SampleSets
from pixtrip.tensor import ShapeError, Tensor

from oracles import make_sets, oracle_is_triplet


def probs_from_fg(fg):
    fg = np.asarray(fg, dtype=float)
    return Tensor(np.stack([1.0 - fg, fg]))


class TestCrossEntropy:
    def test_perfect(self):
        mask = np.array([[1, 0], [0, 1]])
        logits = np.stack([np.where(mask, -50.0, 50.0), np.where(mask, 50.0, -50.0)])
        assert cross_entropy_loss(Tensor(logits), mask).item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_logits(self):
        mask = np.array([[1, 0, 1]])
        assert cross_entropy_loss(Tensor(np.zeros((2, 1, 3))), mask).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_single_pixel_quarter(self):
        logits = Tensor(np.array([math.log(3.0), 0.0]).reshape(2, 1, 1))
        assert cross_entropy_loss(logits, np.ones((1, 1))).item() == pytest.approx(-math.log(0.25), abs=1e-12)
        assert cross_entropy_loss(logits, np.ones((1, 1))).item() == pytest.approx(1.386294, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cross_entropy_loss(Tensor(np.zeros((2, 2, 2))), np.zeros((3, 3)))

    def test_saturated_finite(self):
        logits = Tensor(np.array([1000.0, -1000.0]).reshape(2, 1, 1), requires_grad=True)
        loss = cross_entropy_loss(logits, np.ones((1, 1)))
        loss.backward()
        assert loss.item() == pytest.approx(-math.log(1e-12))
        assert np.all(np.isfinite(logits.grad))

    def test_batch_is_mean_of_images(self, rng):
        z = rng.normal(size=(3, 2, 4, 4))
        m = (rng.random((3, 4, 4)) < 0.5).astype(float)
        each = [cross_entropy_loss(Tensor(z[i]), m[i]).item() for i in range(3)]
        assert cross_entropy_loss(Tensor(z), m).item() == pytest.approx(np.mean(each), abs=1e-14)


class TestDice:
    def test_perfect_small_smooth(self):
        mask = np.array([[1, 1, 0], [0, 0, 0]])
        assert dice_loss(probs_from_fg(mask), mask, smooth=1e-9).item() == pytest.approx(0.0, abs=1e-9)

    def test_disjoint(self):
        mask = np.zeros((4, 4))
        mask[0] = 1
        pred = np.zeros((4, 4))
        pred[3] = 1
        assert dice_loss(probs_from_fg(pred), mask, smooth=1.0).item() == pytest.approx(1 - 1 / 9, abs=1e-12)

    def test_half_overlap(self):
        mask = np.zeros((4, 4))
        mask[0] = 1
        pred = np.zeros((4, 4))
        pred[0, :2] = 1
        pred[1, :2] = 1
        assert dice_loss(probs_from_fg(pred), mask, smooth=1e-12).item() == pytest.approx(0.5, abs=1e-9)

    def test_empty_mask_and_prediction(self):
        z = np.zeros((3, 3))
        assert dice_loss(probs_from_fg(z), z).item() == 0.0


class TestFocal:
    def test_perfect(self):
        mask = np.array([[1, 0]])
        assert focal_loss(probs_from_fg(mask), mask).item() == 0.0

    def test_half_gamma_two(self):
        assert focal_loss(probs_from_fg([[0.5]]), np.ones((1, 1)), 2.0).item() == pytest.approx(0.25 * math.log(2), abs=1e-12)
        assert focal_loss(probs_from_fg([[0.5]]), np.ones((1, 1)), 2.0).item() == pytest.approx(0.173287, abs=1e-6)

    def test_gamma_zero_is_ce(self, rng):
        for _ in range(50):
            z = rng.normal(scale=3.0, size=(2, 5, 6))
            m = (rng.random((5, 6)) < 0.3).astype(float)
            ce = cross_entropy_loss(Tensor(z), m).item()
            fo = focal_loss(softmax_channel(Tensor(z)), m, 0.0).item()
            assert abs(ce - fo) <= 1e-12

    def test_negative_gamma(self):
        with pytest.raises(ValueError):
            focal_loss(probs_from_fg([[0.5]]), np.ones((1, 1)), -1.0)

    def test_downweights_easy_pixels(self):
        m = np.ones((1, 1))
        easy = focal_loss(probs_from_fg([[0.9]]), m, 2.0).item() / cross_entropy_loss(Tensor(np.array([0, math.log(9)]).reshape(2, 1, 1)), m).item()
        hard = focal_loss(probs_from_fg([[0.1]]), m, 2.0).item() / -math.log(0.1)
        assert easy < hard


class TestTriplet:
    def test_all_equal(self):
        v = [1.0, 2.0]
        assert triplet_loss_single(v, v, v, 0.7).item() == pytest.approx(0.7)

    def test_hand_cases(self):
        assert triplet_loss_single([0.0], [1.0], [2.0], 1.0).item() == 0.0
        assert triplet_loss_single([0.0], [2.0], [1.0], 0.5).item() == pytest.approx(3.5)


class TestISTriplet:
    def test_hand_case(self):
        sets = make_sets([[0.0]], [[1.0]], [[2.0]], [[2.5]])
        assert is_triplet_loss(sets, 3.0).item() == pytest.approx(1.125, abs=1e-15)
        assert oracle_is_triplet([[0.0]], [[1.0]], [[2.0]], [[2.5]], 3.0) == 1.125

    def test_all_identical_gives_margin(self, rng):
        x = rng.normal(size=(4, 3))
        assert is_triplet_loss(make_sets(x, x, x, x), 2.5).item() == pytest.approx(2.5)

    def test_matches_oracle_100_sets(self, rng):
        worst = 0.0
        for _ in range(100):
            k, d = int(rng.integers(1, 17)), int(rng.integers(1, 9))
            mats = [rng.normal(scale=1.5, size=(k, d)) for _ in range(4)]
            m = float(rng.uniform(0, 5))
            got = is_triplet_loss(make_sets(*mats), m).item()
            worst = max(worst, abs(got - oracle_is_triplet(*[x.tolist() for x in mats], m)))
        assert worst <= 1e-9

    def test_empty_sets_error(self):
        with pytest.raises(ValueError):
            is_triplet_loss(None, 1.0)
        with pytest.raises(ValueError):
            is_triplet_loss(make_sets(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2))), 1.0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_row_permutation_invariant(self, k, d, seed):
        rng = np.random.default_rng(seed)
        mats = [rng.normal(size=(k, d)) for _ in range(4)]
        perm = rng.permutation(k)
        a = is_triplet_loss(make_sets(*mats), 3.0).item()
        b = is_triplet_loss(make_sets(*[x[perm] for x in mats]), 3.0).item()
        assert abs(a - b) <= 1e-12

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 12), st.integers(2, 6), st.integers(0, 2**32 - 1))
    def test_rotation_invariant(self, k, d, seed):
        rng = np.random.default_rng(seed)
        mats = [rng.normal(size=(k, d)) for _ in range(4)]
        rot, _ = np.linalg.qr(rng.normal(size=(d, d)))
        shift = rng.normal(size=d)
        a = is_triplet_loss(make_sets(*mats), 3.0).item()
        b = is_triplet_loss(make_sets(*[x @ rot.T + shift for x in mats]), 3.0).item()
        assert abs(a - b) <= 1e-9

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 10), st.integers(1, 5), st.floats(0.0, 5.0), st.integers(0, 2**32 - 1))
    def test_separated_embeddings_zero_loss_and_gradient(self, k, d, m, seed):
        rng = np.random.default_rng(seed)
        # tight clusters far apart: inter-class distance exceeds intra-class by more than m
        centre = np.zeros(d)
        centre[0] = 10.0 + 2 * np.sqrt(m)
        f = [rng.uniform(-0.1, 0.1, size=(k, d)) for _ in range(2)]
        b = [centre + rng.uniform(-0.1, 0.1, size=(k, d)) for _ in range(2)]
        sets = make_sets(f[0], f[1], b[0], b[1], grad=True)
        loss = is_triplet_loss(sets, m)
        loss.backward()
        assert loss.item() == 0.0
        for t in (sets.F1, sets.F2, sets.B1, sets.B2):
            assert np.all(t.grad == 0.0)


class TestCombined:
    def test_lambda_zero(self):
        assert combined_loss(Tensor(0.3), Tensor(9.0), 0.0).item() == 0.3

    def test_sum(self):
        assert combined_loss(Tensor(0.5), Tensor(0.5), 1.0).item() == 1.0

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            combined_loss(Tensor(0.5), Tensor(0.5), -0.1)

    def test_lambda_schedule(self):
        cfg = LossConfig()
        assert cfg.lambda_at(0) == 1.0
        assert cfg.lambda_at(2) == pytest.approx(0.7225, abs=1e-15)
        assert cfg.lambda_at(2) == 1.0 * 0.85**2

    def test_config_validation(self):
        for bad in ({"margin_m": -1}, {"K": 0}, {"lambda_decay": 0}, {"dice_smooth": 0}, {"seg_loss_kind": "bce"}):
            with pytest.raises(ValueError):
                LossConfig(**bad)


class TestGradients:
    @pytest.mark.parametrize("kind", ["ce", "dice", "focal"])
    def test_segmentation_losses(self, rng, kind):
        cfg = LossConfig(seg_loss_kind=kind)
        for _ in range(20):
            h, w = rng.integers(2, 6, size=2)
            m = (rng.random((h, w)) < 0.4).astype(float)
            err = grad_check(lambda z: segmentation_loss(z, m, cfg), rng.normal(size=(2, h, w)))
            assert err < 1e-4

    def test_is_triplet_interior(self, rng):
        k, d = 5, 3
        done = 0
        while done < 20:
            x = rng.normal(size=(4 * k, d))
            f1, f2, b1, b2 = np.split(x, 4)
            dd = lambda a, b: ((a - b) ** 2).sum(1)
            args = np.concatenate([dd(f1, f2) - dd(f1, b1) + 1.0, dd(b1, b2) - dd(b1, f2) + 1.0])
            if np.min(np.abs(args)) < 1e-2:
                continue
            split = lambda t: SampleSets(t[0:k], t[k : 2 * k], t[2 * k : 3 * k], t[3 * k :])
            assert grad_check(lambda t: is_triplet_loss(split(t), 1.0), x) < 1e-4
            done += 1


class TestHomotopy:
    @pytest.mark.parametrize("kind", ["dice", "ce"])
    def test_monotone_towards_mask(self, rng, kind):
        mask = (rng.random((6, 6)) < 0.4).astype(float)
        mask[0, 0], mask[-1, -1] = 1, 0
        values = []
        for t in np.linspace(0, 1, 10):
            fg = np.clip((1 - t) * 0.5 + t * mask, 1e-12, 1 - 1e-12)
            p = probs_from_fg(fg)
            if kind == "dice":
                values.append(dice_loss(p, mask).item())
            else:
                values.append(focal_loss(p, mask, 0.0).item())
        assert all(b < a for a, b in zip(values, values[1:]))
        # endpoint: CE reaches its infimum (0 up to the clamp); Dice with s=1 is 0 at the exact mask
        assert values[-1] == pytest.approx(0.0, abs=1e-9)


def test_batched_losses_are_per_image_means(rng):
    z = Tensor(rng.normal(size=(2, 2, 3, 3)))
    m = (rng.random((2, 3, 3)) < 0.5).astype(float)
    p = softmax_channel(z)
    per = [dice_loss(T.getitem(p, i), m[i]).item() for i in range(2)]
    assert dice_loss(p, m).item() == pytest.approx(np.mean(per), abs=1e-15)
