import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pixtrip import tensor as T
from pixtrip.losses import is_triplet_loss
from pixtrip.sampler import pixel_seed, rowwise_sq_dist, sample_pixel_sets
from pixtrip.tensor import ShapeError, Tensor

from oracles import coord_embedding


class TestRowwiseSqDist:
    def test_equal_is_zero(self, rng):
        a = rng.normal(size=(4, 3))
        assert np.array_equal(rowwise_sq_dist(a, a).data, np.zeros(4))

    def test_hand_cases(self):
        assert rowwise_sq_dist([[0.0, 0.0]], [[3.0, 4.0]]).data.tolist() == [25.0]
        assert rowwise_sq_dist([[1.0], [2.0]], [[4.0], [0.0]]).data.tolist() == [9.0, 4.0]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            rowwise_sq_dist(np.zeros((2, 3)), np.zeros((3, 2)))


class TestSampler:
    def test_cap_by_smaller_class(self):
        mask = np.zeros((1, 103))
        mask[0, :3] = 1
        sets = sample_pixel_sets(Tensor(np.zeros((2, 1, 103))), mask, 5, 0)
        assert sets.k_eff == 3
        assert all(getattr(sets, n).shape == (3, 2) for n in ("F1", "F2", "B1", "B2"))

    def test_skip_on_single_class(self):
        emb = Tensor(np.zeros((2, 4, 4)))
        assert sample_pixel_sets(emb, np.ones((4, 4)), 5, 0) is None
        assert sample_pixel_sets(emb, np.zeros((4, 4)), 5, 0) is None

    def test_exhaustive_when_k_equals_class_size(self):
        mask = np.zeros((4, 4))
        mask[:2] = 1
        sets = sample_pixel_sets(coord_embedding(4, 4), mask, 8, 7)
        fg = sorted(np.flatnonzero(mask).tolist())
        assert sorted(sets.F1.data[:, 0].tolist()) == fg
        assert sorted(sets.F2.data[:, 0].tolist()) == fg

    def test_bad_inputs(self):
        with pytest.raises(ShapeError):
            sample_pixel_sets(Tensor(np.zeros((2, 4, 4))), np.zeros((3, 3)), 2, 0)
        with pytest.raises(ValueError):
            sample_pixel_sets(Tensor(np.zeros((2, 4, 4))), np.zeros((4, 4)), 0, 0)

    def test_contracts_on_1000_masks(self, rng):
        for _ in range(1000):
            h, w = rng.integers(1, 9, size=2)
            mask = (rng.random((h, w)) < rng.random()).astype(float)
            K = int(rng.integers(1, 40))
            sets = sample_pixel_sets(coord_embedding(h, w), mask, K, int(rng.integers(2**31)))
            n_fg = int(mask.sum())
            n_bg = mask.size - n_fg
            if n_fg == 0 or n_bg == 0:
                assert sets is None
                continue
            assert sets.k_eff == min(K, n_fg, n_bg)
            flat = mask.reshape(-1)
            for name, want in (("F1", 1), ("F2", 1), ("B1", 0), ("B2", 0)):
                idx = getattr(sets, name).data[:, 0].astype(int)
                assert np.all(flat[idx] == want)
                assert len(set(idx.tolist())) == len(idx)
                assert np.array_equal(idx, sets.pixels[name])
                rc = sets.coords(name, w)
                assert np.all(mask[rc[:, 0], rc[:, 1]] == want)

    def test_uniform_selection(self):
        mask = np.zeros((2, 10))
        mask[0] = 1
        emb = coord_embedding(2, 10)
        n = 10_000
        counts = np.zeros(10)
        for seed in range(n):
            sets = sample_pixel_sets(emb, mask, 1, seed)
            counts[int(sets.F1.data[0, 0])] += 1
        p = 0.1
        sd = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) < 5 * sd)
        chi2 = ((counts - n * p) ** 2 / (n * p)).sum()
        # 9 degrees of freedom; 0.999 quantile is about 27.9
        assert chi2 < 27.9

    def test_deterministic(self, rng):
        emb = Tensor(rng.normal(size=(3, 6, 6)))
        mask = (rng.random((6, 6)) < 0.5).astype(float)
        a = sample_pixel_sets(emb, mask, 4, pixel_seed(1, 2, 3))
        b = sample_pixel_sets(emb, mask, 4, pixel_seed(1, 2, 3))
        for name in ("F1", "F2", "B1", "B2"):
            assert np.array_equal(getattr(a, name).data, getattr(b, name).data)

    def test_substreams_differ(self):
        draws = {tuple(np.random.default_rng(pixel_seed(0, e, i)).integers(0, 2**31, 4)) for e in range(3) for i in range(3)}
        assert len(draws) == 9

    def test_gradient_reaches_embedding(self, rng):
        emb = Tensor(rng.normal(size=(3, 5, 5)), requires_grad=True)
        mask = np.zeros((5, 5))
        mask[1:3, 1:4] = 1
        sets = sample_pixel_sets(emb, mask, 4, 0)
        is_triplet_loss(sets, 10.0).backward()
        touched = set()
        for name in ("F1", "F2", "B1", "B2"):
            touched |= set(sets.pixels[name].tolist())
        g = np.abs(emb.grad).sum(axis=0).reshape(-1)
        assert g.sum() > 0
        assert all(g[i] == 0 for i in range(25) if i not in touched)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 30), st.integers(0, 2**31 - 1))
    def test_same_height_for_all_sets(self, K, seed):
        rng = np.random.default_rng(seed)
        mask = (rng.random((5, 5)) < 0.5).astype(float)
        mask[0, 0], mask[4, 4] = 1, 0
        sets = sample_pixel_sets(Tensor(rng.normal(size=(2, 5, 5))), mask, K, seed)
        assert sets.F1.shape == sets.F2.shape == sets.B1.shape == sets.B2.shape


def test_getitem_of_rows_keeps_graph():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    T.reduce("sum", rowwise_sq_dist(x, Tensor(np.zeros((2, 3))))).backward()
    assert np.array_equal(x.grad, 2 * x.data)
