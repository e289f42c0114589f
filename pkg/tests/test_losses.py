import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridhaze import graph as G
from gridhaze import losses as L
from gridhaze.graph import ShapeError, Tensor


def uniform(value, shape=(1, 3, 8, 8)):
    return np.full(shape, value, dtype=np.float64)


@pytest.mark.parametrize("err,expected", [(0.0, 0.0), (0.5, 0.375), (2.0, 4.5), (-2.0, 4.5)])
def test_smooth_l1_closed_forms(err, expected):
    assert L.smooth_l1(uniform(err), uniform(0.0)).item() == pytest.approx(expected, abs=1e-6)


def test_smooth_l1_averages_over_batch():
    pred = np.concatenate([uniform(0.5), uniform(2.0)])
    assert L.smooth_l1(pred, np.zeros_like(pred)).item() == pytest.approx((0.375 + 4.5) / 2)


def test_smooth_l1_shape_mismatch():
    with pytest.raises(ShapeError):
        L.smooth_l1(uniform(0.0), uniform(0.0, (1, 3, 8, 4)))


def test_huber_branch_is_c1_at_one():
    def value(e):
        return G.smooth_l1_elementwise(Tensor(np.array([e]).reshape(1, 1, 1, 1))).item()

    def slope(e):
        x = Tensor(np.array([e]).reshape(1, 1, 1, 1), requires_grad=True)
        G.backward(G.mean_all(G.smooth_l1_elementwise(x)))
        return x.grad.item()

    h = 1e-7
    assert value(1 - h) == pytest.approx(value(1 + h), abs=1e-6)
    assert slope(1 - h) == pytest.approx(slope(1 + h), abs=1e-6)
    assert slope(-1 - h) == pytest.approx(slope(-1 + h), abs=1e-6)


@pytest.fixture(scope="module")
def featnet():
    return L.FeatureNet.create(seed=11)


def test_perceptual_zero_on_identical(featnet):
    x = np.random.default_rng(0).random((1, 3, 16, 16)).astype(np.float32)
    assert L.perceptual(x, x, featnet).item() == 0.0


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000))
def test_perceptual_non_negative(featnet, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((1, 3, 8, 8)).astype(np.float32), rng.random((1, 3, 8, 8)).astype(np.float32)
    assert L.perceptual(a, b, featnet).item() >= 0


def test_perceptual_gradient_double(featnet):
    rng = np.random.default_rng(1)
    pred = Tensor(rng.random((1, 3, 8, 8)), requires_grad=True)
    gt = Tensor(rng.random((1, 3, 8, 8)))
    rep = G.probe_gradients(lambda: L.perceptual(pred, gt, featnet.astype(np.float64)), [pred])
    assert rep.max_rel_error <= 1e-4
    assert rep.checked >= 0.9 * pred.data.size


def test_perceptual_rejects_tiny_inputs(featnet):
    with pytest.raises(ShapeError):
        L.perceptual(uniform(0.1, (1, 3, 2, 2)), uniform(0.2, (1, 3, 2, 2)), featnet)


def test_feature_taps_resolutions(featnet):
    feats = featnet(Tensor(np.zeros((1, 3, 16, 16), np.float32)))
    assert [f.shape for f in feats] == [(1, 16, 16, 16), (1, 32, 8, 8), (1, 64, 4, 4)]


def test_total_loss_lambda_zero_is_smooth_l1_bitwise(featnet):
    rng = np.random.default_rng(2)
    a, b = rng.random((2, 3, 8, 8)).astype(np.float32), rng.random((2, 3, 8, 8)).astype(np.float32)
    assert L.total_loss(a, b, 0.0, featnet).data.tobytes() == L.smooth_l1(a, b).data.tobytes()


def test_total_loss_combines_terms(featnet):
    rng = np.random.default_rng(3)
    a, b = rng.random((1, 3, 8, 8)), rng.random((1, 3, 8, 8))
    loss, ls, lp = L.total_loss(a, b, 0.04, featnet.astype(np.float64), parts=True)
    assert loss.item() == pytest.approx(ls + 0.04 * lp, rel=1e-12)
    assert L.total_loss(a, a, 0.04, featnet.astype(np.float64)).item() == 0.0


def test_total_loss_requires_featnet_for_positive_lambda():
    with pytest.raises(ValueError):
        L.total_loss(uniform(0.0), uniform(0.0), 0.04, None)
    with pytest.raises(ValueError):
        L.total_loss(uniform(0.0), uniform(0.0), -1.0, None)


# --- metrics ------------------------------------------------------------------------------------

def test_psnr_cases():
    rng = np.random.default_rng(4)
    a = rng.random((1, 3, 8, 8))
    assert L.psnr(a, a) == 100.0
    assert L.psnr(uniform(0.0), uniform(1.0)) == pytest.approx(0.0, abs=1e-12)
    assert L.psnr(uniform(0.2), uniform(0.3)) == pytest.approx(20.0, abs=1e-6)


def test_ssim_identity_and_constant_closed_form():
    a = np.random.default_rng(5).random((1, 3, 16, 16))
    assert L.ssim(a, a) == 1.0
    c1 = 0.01**2
    assert L.ssim(uniform(0.0, (1, 3, 16, 16)), uniform(1.0, (1, 3, 16, 16))) == pytest.approx(c1 / (1 + c1), rel=1e-9)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_ssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((1, 3, 14, 14)), rng.random((1, 3, 14, 14))
    s = L.ssim(a, b)
    assert s == pytest.approx(L.ssim(b, a), abs=1e-12)
    assert -1 <= s <= 1


def test_ssim_rejects_small_images():
    with pytest.raises(ShapeError, match="window"):
        L.ssim(uniform(0.0, (1, 3, 8, 8)), uniform(0.0, (1, 3, 8, 8)))


def test_ssim_drops_with_noise():
    rng = np.random.default_rng(6)
    a = rng.random((1, 3, 24, 24))
    noisy = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
    assert L.ssim(a, noisy) < L.ssim(a, np.clip(a + rng.normal(0, 0.02, a.shape), 0, 1)) < 1
