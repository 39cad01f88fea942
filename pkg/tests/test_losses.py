import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_grads
from mkpn.losses import LossSchedule, basic_loss, grad_image, psnr, ssim, total_loss
from mkpn.tensor import ShapeError, Tensor


def grad_oracle(img):
    h, w = img.shape
    out = np.zeros((h, w, 2))
    for y in range(h):
        for x in range(w):
            if x + 1 < w:
                out[y, x, 0] = img[y, x + 1] - img[y, x]
            if y + 1 < h:
                out[y, x, 1] = img[y + 1, x] - img[y, x]
    return out


def basic_oracle(pred, truth, sched):
    mse = float(np.mean((pred - truth) ** 2))
    l1 = float(np.mean(np.abs(grad_oracle(pred) - grad_oracle(truth))))
    return sched.lambda1 * mse + sched.lambda2 * l1


def ssim_oracle(p, t):
    """Direct windowed evaluation, one window position at a time."""
    win, sigma = 11, 1.5
    r = np.arange(win) - 5.0
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    k = np.outer(g, g)
    k /= k.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    h, w = p.shape
    vals = []
    for y in range(h - win + 1):
        for x in range(w - win + 1):
            wp = p[y:y + win, x:x + win]
            wt = t[y:y + win, x:x + win]
            mp, mt = (k * wp).sum(), (k * wt).sum()
            vp = (k * wp * wp).sum() - mp ** 2
            vt = (k * wt * wt).sum() - mt ** 2
            cov = (k * wp * wt).sum() - mp * mt
            vals.append(((2 * mp * mt + c1) * (2 * cov + c2))
                        / ((mp ** 2 + mt ** 2 + c1) * (vp + vt + c2)))
    return float(np.mean(vals))


class TestLossSchedule:
    def test_weight_sum_enforced(self):
        with pytest.raises(ValueError):
            LossSchedule(lambda1=0.7, lambda2=0.5)

    def test_alpha_range(self):
        with pytest.raises(ValueError):
            LossSchedule(alpha=1.0)
        with pytest.raises(ValueError):
            LossSchedule(alpha=0.0)

    def test_anneal_weight_values(self):
        assert LossSchedule().anneal_weight() == 100.0
        w = LossSchedule().at(10_000).anneal_weight()
        assert w == pytest.approx(13.53, abs=0.01)
        assert w == pytest.approx(100.0 * math.exp(10_000 * math.log(0.9998)), rel=1e-9)

    def test_anneal_weight_decreasing(self):
        s = LossSchedule()
        ws = [s.at(t).anneal_weight() for t in range(0, 5000, 500)]
        assert all(a > b for a, b in zip(ws, ws[1:]))


class TestGradImage:
    def test_constant(self):
        out = grad_image(Tensor(np.full((4, 5), 0.3)))
        np.testing.assert_array_equal(out.data, np.zeros((4, 5, 2)))

    def test_ramp(self):
        img = np.tile(np.arange(5.0), (4, 1))  # value = column index
        out = grad_image(Tensor(img)).data
        np.testing.assert_array_equal(out[:, :-1, 0], np.ones((4, 4)))
        np.testing.assert_array_equal(out[:, -1, 0], np.zeros(4))
        np.testing.assert_array_equal(out[:, :, 1], np.zeros((4, 5)))

    def test_against_index_oracle(self):
        rng = np.random.default_rng(0)
        img = rng.standard_normal((5, 5))
        np.testing.assert_array_equal(grad_image(Tensor(img)).data, grad_oracle(img))

    def test_degenerate_image_rejected(self):
        with pytest.raises(ShapeError):
            grad_image(Tensor(np.zeros((1, 5))))

    def test_gradcheck(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        check_grads(lambda: (grad_image(x) * grad_image(x)).sum(), [x], rng=rng)


class TestBasicLoss:
    def test_identical_is_zero(self):
        rng = np.random.default_rng(2)
        img = rng.random((6, 6))
        assert basic_loss(Tensor(img), img, LossSchedule()).item() == 0.0

    def test_pure_mse(self):
        sched = LossSchedule(lambda1=1.0, lambda2=0.0)
        truth = np.zeros((4, 4))
        pred = Tensor(np.full((4, 4), 0.1))
        assert basic_loss(pred, truth, sched).item() == pytest.approx(0.01, abs=1e-15)

    def test_against_scalar_oracle(self):
        rng = np.random.default_rng(3)
        pred = rng.standard_normal((6, 7))
        truth = rng.standard_normal((6, 7))
        sched = LossSchedule(lambda1=0.3, lambda2=0.7)
        got = basic_loss(Tensor(pred), truth, sched).item()
        assert got == pytest.approx(basic_oracle(pred, truth, sched), abs=1e-12)

    def test_gradcheck(self):
        rng = np.random.default_rng(4)
        pred = Tensor(rng.standard_normal((5, 5)), requires_grad=True)
        truth = rng.standard_normal((5, 5))
        check_grads(lambda: basic_loss(pred, truth, LossSchedule()), [pred], rng=rng)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_basic_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    pred, truth = rng.standard_normal((2, 4, 4))
    val = basic_loss(Tensor(pred), truth, LossSchedule()).item()
    assert val >= 0.0
    assert (val == 0.0) == bool(np.array_equal(pred, truth))


class TestTotalLoss:
    def _setup(self, seed=5):
        rng = np.random.default_rng(seed)
        final = Tensor(rng.random((5, 5)))
        ests = {(i, s): Tensor(rng.random((5, 5))) for i in range(2) for s in (1, 3)}
        truth = rng.random((5, 5))
        return final, ests, truth

    def test_anneal_vanishes_at_large_t(self):
        final, ests, truth = self._setup()
        sched = LossSchedule().at(10 ** 9)
        got = total_loss(final, ests, truth, sched).item()
        assert got == basic_loss(final, truth, sched).item()

    def test_weight_at_zero_is_beta(self):
        final, ests, truth = self._setup()
        sched = LossSchedule()
        base = basic_loss(final, truth, sched).item()
        aux = sum(basic_loss(e, truth, sched).item() for e in ests.values())
        got = total_loss(final, ests, truth, sched).item()
        assert got == pytest.approx(base + 100.0 * aux, rel=1e-12)

    def test_perfect_estimates_zero_at_any_t(self):
        truth = np.random.default_rng(6).random((5, 5))
        ests = {(0, s): Tensor(truth.copy()) for s in (1, 3, 5)}
        for t in (0, 100, 50_000):
            assert total_loss(Tensor(truth.copy()), ests, truth,
                              LossSchedule().at(t)).item() == 0.0

    def test_monotone_in_t(self):
        final, ests, truth = self._setup()
        vals = [total_loss(final, ests, truth, LossSchedule().at(t)).item()
                for t in (0, 10, 1000, 100_000)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_missing_estimates(self):
        final, ests, truth = self._setup()
        with pytest.raises(ValueError):
            total_loss(final, {}, truth, LossSchedule())
        with pytest.raises(ValueError):
            total_loss(final, ests, truth, LossSchedule(), expected=8)

    def test_gradcheck(self):
        rng = np.random.default_rng(7)
        final = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        ests = [Tensor(rng.standard_normal((4, 4)), requires_grad=True) for _ in range(2)]
        truth = rng.standard_normal((4, 4))
        sched = LossSchedule().at(3)

        def build():
            return total_loss(final, ests, truth, sched)

        check_grads(build, [final] + ests, rng=rng)


class TestPsnr:
    def test_identical_capped(self):
        img = np.random.default_rng(8).random((8, 8))
        assert psnr(img, img) == 99.0

    def test_known_mse_values(self):
        truth = np.zeros((10, 10))
        assert psnr(np.full((10, 10), 0.1), truth) == pytest.approx(20.0, abs=1e-12)
        assert psnr(np.full((10, 10), 0.05), truth) == pytest.approx(10 * math.log10(400), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_psnr_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    pred, truth = rng.random((2, 5, 5))
    perm = rng.permutation(25)
    a = psnr(pred, truth)
    b = psnr(pred.ravel()[perm].reshape(5, 5), truth.ravel()[perm].reshape(5, 5))
    assert a == pytest.approx(b, abs=1e-12)


class TestSsim:
    def test_self_similarity(self):
        img = np.random.default_rng(9).random((16, 16))
        assert ssim(img, img) == 1.0

    def test_constant_images_closed_form(self):
        t = np.full((12, 12), 0.5)
        p = np.full((12, 12), 0.6)
        c1, c2 = 0.01 ** 2, 0.03 ** 2
        expect = ((2 * 0.6 * 0.5 + c1) * c2) / ((0.36 + 0.25 + c1) * c2)
        assert ssim(p, t) == pytest.approx(expect, abs=1e-12)

    def test_against_scalar_windows(self):
        rng = np.random.default_rng(10)
        p, t = rng.random((2, 15, 14))
        assert ssim(p, t) == pytest.approx(ssim_oracle(p, t), abs=1e-9)

    def test_too_small_rejected(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((10, 10)), np.zeros((10, 10)))
