import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from karma import ndtensor as nt
from karma.model import ModelConfig, forward, init_params, make_mask, patchify
from karma.ndtensor import DimensionError, Tensor
from karma.objective import LossWeights, huber_loss, phys_loss, sam_loss, total_loss


def row(*v):
    return Tensor(np.array([v], dtype=np.float64))


# -- Huber -------------------------------------------------------------------------

def test_huber_quadratic_branch():
    assert huber_loss(row(0.5, 0.0), row(0.0, 0.0), 1.0).item() == 0.125


def test_huber_linear_branch():
    assert huber_loss(row(3.0, 0.0), row(0.0, 0.0), 1.0).item() == 2.5


def test_huber_uses_row_norm():
    # residual (3, 4) has norm 5 -> 5 - 0.5
    assert huber_loss(row(3.0, 4.0), row(0.0, 0.0), 1.0).item() == pytest.approx(4.5, abs=1e-12)


@pytest.mark.parametrize("delta", [0.3, 1.0, 2.5])
def test_huber_continuous_at_delta(delta):
    def at(r):
        return huber_loss(row(r), row(0.0), delta).item()
    assert abs(at(delta) - 0.5 * delta ** 2) <= 1e-12
    assert abs(at(delta * (1 + 1e-9)) - at(delta * (1 - 1e-9))) <= 3 * delta ** 2 * 1e-9


def test_huber_elementwise_variant():
    v = huber_loss(row(0.5, 3.0), row(0.0, 0.0), 1.0, elementwise=True).item()
    assert v == pytest.approx((0.125 + 2.5) / 2, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-10, 10)), arrays(np.float64, (3, 4), elements=st.floats(-10, 10)))
def test_huber_nonnegative_and_zero_iff_equal(a, b):
    v = huber_loss(Tensor(a), Tensor(b)).item()
    assert v >= 0
    if v == 0:  # only an exact match or an underflowing residual gives zero
        assert np.max(np.abs(a - b)) < 1e-150
    assert huber_loss(Tensor(a), Tensor(a)).item() == 0


def test_huber_shape_mismatch():
    with pytest.raises(DimensionError):
        huber_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_huber_gradcheck():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(5, 4)))
    assert nt.gradcheck(lambda: huber_loss(a, b, 1.0), [a]) < 1e-6


# -- SAM ------------------------------------------------------------------------------

def test_sam_orthogonal():
    assert abs(sam_loss(row(1.0, 0.0), row(0.0, 1.0)).item() - math.pi / 2) <= 1e-9


def test_sam_scale_invariant():
    a, b = row(0.2, 0.5, 0.9), row(0.7, 0.1, 0.4)
    assert abs(sam_loss(a, b).item() - sam_loss(3.0 * a, b).item()) <= 1e-9


def test_sam_identical_is_clamp_limited():
    v = sam_loss(row(0.3, 0.4), row(0.3, 0.4)).item()
    assert 0 <= v <= math.acos(1 - nt.ARCCOS_CLAMP) + 1e-12


def test_sam_zero_vector_is_finite():
    v = sam_loss(row(0.0, 0.0), row(1.0, 0.0))
    assert abs(v.item() - math.pi / 2) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(0.01, 10)), arrays(np.float64, (2, 5), elements=st.floats(0.01, 10)),
       st.floats(0.1, 100))
def test_sam_range_and_scale_property(a, b, k):
    v = sam_loss(Tensor(a), Tensor(b)).item()
    assert 0 <= v <= math.pi
    assert abs(v - sam_loss(Tensor(k * a), Tensor(b)).item()) <= 1e-6


# -- physics term ------------------------------------------------------------------

def test_phys_zero_on_exact_mixture():
    A = Tensor(np.random.default_rng(0).uniform(0.05, 0.95, size=(6, 3)))
    x = Tensor(np.eye(3))
    r = Tensor(np.eye(3) @ A.data.T)
    assert phys_loss(r, x, A).item() == 0.0


def test_phys_known_value():
    A = Tensor(np.eye(2))
    x = Tensor([[0.5, 0.5]])
    r = Tensor([[1.0, 0.0]])
    assert phys_loss(r, x, A).item() == pytest.approx(0.5, abs=1e-15)


def test_phys_shape_errors():
    with pytest.raises(DimensionError):
        phys_loss(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 3))), Tensor(np.ones((5, 3))))


# -- weighted total -----------------------------------------------------------------

def _setup(scope="masked", phys_scope="all"):
    cfg = ModelConfig(image_size=8, patch_size=2, bands=3, embed_dim=16, heads=2, encoder_depth=1,
                      decoder_depth=1, endmember_count=3)
    p = init_params(cfg)
    cubes = np.random.default_rng(1).uniform(size=(2, 8, 8, 3))
    tok = patchify(cubes, 2)
    plans = [make_mask(cfg.num_tokens, cfg.mask_ratio, 0, i) for i in range(2)]
    return cfg, p, tok, plans


def test_total_is_weighted_sum():
    cfg, p, tok, plans = _setup()
    w = LossWeights(0.7, 0.2, 0.3)
    rep = total_loss(forward(tok, plans, p, cfg), tok, cfg.bands, w)
    assert rep.total.item() == pytest.approx(0.7 * rep.huber + 0.2 * rep.sam + 0.3 * rep.phys, rel=1e-12)
    assert sum(rep.weighted.values()) == pytest.approx(rep.total.item(), rel=1e-12)


def test_masked_huber_matches_manual():
    cfg, p, tok, plans = _setup()
    fwd = forward(tok, plans, p, cfg)
    rep = total_loss(fwd, tok, cfg.bands, LossWeights())
    rows = np.arange(2)[:, None]
    idx = np.stack([pl.masked for pl in plans])
    pred = fwd.pixel.data[rows, idx].reshape(-1, 3)
    tgt = tok[rows, idx].reshape(-1, 3)
    rho = np.linalg.norm(pred - tgt, axis=1)
    expect = np.mean(np.where(rho <= 1, 0.5 * rho ** 2, rho - 0.5))
    assert rep.huber == pytest.approx(expect, rel=1e-12)


def test_phys_scope_variants_differ():
    cfg, p, tok, plans = _setup()
    fwd = forward(tok, plans, p, cfg)
    vals = {s: total_loss(fwd, tok, 3, LossWeights(phys_scope=s)).phys for s in ("all", "masked", "visible")}
    n_mask, n_vis = len(plans[0].masked), len(plans[0].visible)
    blended = (n_mask * vals["masked"] + n_vis * vals["visible"]) / (n_mask + n_vis)
    assert vals["all"] == pytest.approx(blended, rel=1e-10)


def test_zero_weights_give_zero_gradients():
    cfg, p, tok, plans = _setup()
    rep = total_loss(forward(tok, plans, p, cfg), tok, cfg.bands, LossWeights(0.0, 0.0, 0.0))
    assert rep.total.item() == 0.0
    rep.total.backward()
    for name, t in p.trainable():
        assert t.grad is None or not np.any(t.grad), name


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda1=-1.0)
    with pytest.raises(ValueError):
        LossWeights(delta=0.0)
    with pytest.raises(ValueError):
        LossWeights(phys_scope="some")
