import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moctefuse import tensor as T
from moctefuse.errors import DimensionError, VerificationError
from moctefuse.losses import (LossWeights, competitive_loss, competitive_loss_scalar, gradient_loss,
                              intensity_loss, ssim, ssim_loss, total_loss,
                              verify_competitive_gradient)
from oracles import competitive as competitive_oracle
from oracles import gradient as gradient_oracle
from oracles import intensity as intensity_oracle
from oracles import ssim_direct


def val(t):
    return float(np.asarray(T.as_tensor(t).data).reshape(-1)[0])


def test_loss_weights_defaults():
    w = LossWeights()
    assert (w.alpha, w.beta, w.gamma, w.w1, w.w2, w.n_experts) == (1.0, 5.0, 10.0, 0.5, 0.5, 2)
    with pytest.raises(ValueError):
        LossWeights(w1=0.6, w2=0.6)
    with pytest.raises(ValueError):
        LossWeights(beta=-1)


def test_intensity_examples(rng):
    x = rng.uniform(0, 1, (8, 8))
    assert val(intensity_loss(x, x, x)) == 0.0
    assert val(intensity_loss(np.full((8, 8), 0.5), np.zeros((8, 8)), np.ones((8, 8)))) == 1.0
    f, ir, vi = rng.uniform(0, 1, (3, 8, 8))
    assert abs(val(intensity_loss(f, ir, vi)) - intensity_oracle(f, ir, vi)) <= 1e-12


def test_intensity_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        intensity_loss(np.zeros((8, 8)), np.zeros((8, 7)), np.zeros((8, 8)))


def test_gradient_examples(rng):
    c = np.full((8, 8), 0.3)
    assert val(gradient_loss(c, c * 2, c * 3)) == 0.0
    x = rng.uniform(0, 1, (8, 8))
    assert val(gradient_loss(x, x, c)) == 0.0
    f, ir, vi = rng.uniform(0, 1, (3, 8, 8))
    assert abs(val(gradient_loss(f, ir, vi)) - gradient_oracle(f, ir, vi)) <= 1e-12
    with pytest.raises(DimensionError):
        gradient_loss(np.zeros((2, 5)), np.zeros((2, 5)), np.zeros((2, 5)))


def test_ssim_examples(rng):
    x = rng.uniform(0, 1, (16, 16))
    assert abs(val(ssim_loss(x, x, x))) <= 1e-12
    assert val(ssim(T.Tensor(x[None]), T.Tensor(1 - x[None]))) < 1.0
    assert val(ssim_loss(x, 1 - x, 1 - x)) > 0.0
    a, b = rng.uniform(0, 1, (2, 16, 16))
    assert abs(val(ssim(T.Tensor(a[None]), T.Tensor(b[None]))) - ssim_direct(a, b)) <= 1e-9
    with pytest.raises(DimensionError):
        ssim_loss(np.zeros((10, 10)), np.zeros((10, 10)), np.zeros((10, 10)))


def test_total_loss_examples(rng):
    c = np.full((16, 16), 0.4)
    assert val(total_loss(c, c, c)) == 0.0
    f, ir, vi = rng.uniform(0, 1, (3, 16, 16))
    only_int = LossWeights(alpha=1, beta=0, gamma=0)
    assert val(total_loss(f, ir, vi, only_int)) == val(intensity_loss(f, ir, vi))
    tot, (li, lg, ls) = total_loss(f, ir, vi, return_terms=True)
    assert val(tot) == pytest.approx(val(li) + 5 * val(lg) + 10 * val(ls), rel=1e-14)


def test_batched_losses_are_per_sample(rng):
    f, ir, vi = rng.uniform(0, 1, (3, 2, 16, 16))
    batch = total_loss(f, ir, vi).data
    single = [val(total_loss(f[i], ir[i], vi[i])) for i in range(2)]
    np.testing.assert_allclose(batch, single, rtol=1e-14)


def test_loss_gradcheck(rng):
    ir, vi = rng.uniform(0, 1, (2, 1, 12, 12))
    f = T.Tensor(rng.uniform(0, 1, (1, 12, 12)), requires_grad=True)
    err = T.gradcheck(lambda x: total_loss(x, ir, vi), [f], samples=30, rng=np.random.default_rng(0))
    assert err < 1e-5


@pytest.mark.parametrize("losses,probs,expected", [
    ((0.7, 123.0), (1.0, 0.0), 0.7),
    ((1.3, 1.3), (0.5, 0.5), 1.3),
])
def test_competitive_trivial(losses, probs, expected):
    v, _ = competitive_loss_scalar(losses, probs)
    assert v == pytest.approx(expected, abs=1e-15)


def test_competitive_against_high_precision():
    v, omega = competitive_loss_scalar([1.0, 2.0], [0.6, 0.4])
    ref_v, ref_w = competitive_oracle([1.0, 2.0], [0.6, 0.4])
    assert abs(v - 1.2915) < 1e-4  # published 4-digit value
    assert abs(v - ref_v) < 1e-14
    np.testing.assert_allclose(omega, ref_w, rtol=0, atol=1e-15)
    np.testing.assert_allclose(omega, [0.8030, 0.1970], atol=5e-5)


def test_competitive_large_losses_stable():
    v, omega = competitive_loss_scalar([5000.0, 5001.0], [0.5, 0.5])
    ref_v, ref_w = competitive_oracle([5000.0, 5001.0], [0.5, 0.5])
    assert v == pytest.approx(ref_v, rel=1e-14)
    np.testing.assert_allclose(omega, ref_w, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 50.0), st.floats(0.0, 50.0), st.floats(0.001, 0.999))
def test_competitive_soft_min_bounds(l1, l2, p1):
    v, omega = competitive_loss_scalar([l1, l2], [p1, 1 - p1])
    lo, hi = min(l1, l2), max(l1, l2) - np.log(min(p1, 1 - p1))
    assert lo - 1e-12 <= v <= hi + 1e-12
    assert abs(omega.sum() - 1.0) < 1e-12
    assert np.all((omega >= 0) & (omega <= 1))


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 20.0), st.floats(0.1, 20.0), st.floats(0.05, 0.95), st.floats(0.01, 1.0))
def test_omega_monotone_in_own_loss(l1, l2, p1, delta):
    _, w = competitive_loss_scalar([l1, l2], [p1, 1 - p1])
    _, w_better = competitive_loss_scalar([l1 - delta, l2], [p1, 1 - p1])
    assert w_better[0] > w[0]


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 20.0), st.floats(0.0, 20.0), st.floats(0.0, 1.0))
def test_competitive_expert_permutation(l1, l2, p1):
    a, wa = competitive_loss_scalar([l1, l2], [p1, 1 - p1])
    b, wb = competitive_loss_scalar([l2, l1], [1 - p1, p1])
    assert a == pytest.approx(b, rel=1e-14, abs=1e-15)
    np.testing.assert_allclose(wa, wb[::-1], atol=1e-15)


def test_competitive_gradient_equals_omega(rng):
    for _ in range(20):
        probs = rng.dirichlet([1.0, 1.0])
        L = T.Tensor(rng.uniform(0, 5, 2), requires_grad=True)
        v, omega = competitive_loss(L, probs)
        v.backward()
        _, ref_w = competitive_oracle(L.data, probs)
        np.testing.assert_allclose(L.grad, ref_w, rtol=1e-12)


def test_verify_competitive_gradient_scalar_experts(rng):
    outs = [T.Tensor(rng.uniform(-2, 2), requires_grad=True) for _ in range(2)]
    rep = verify_competitive_gradient(outs, lambda o: o * o, [0.3, 0.7], tol=1e-10)
    assert rep["max_deviation"] <= 1e-10
    # explicit analytic oracle
    _, w = competitive_oracle([float(o.data) ** 2 for o in outs], [0.3, 0.7])
    outs2 = [T.Tensor(o.data, requires_grad=True) for o in outs]
    loss, _ = competitive_loss([o * o for o in outs2], [0.3, 0.7])
    loss.backward()
    for o, wi in zip(outs2, w):
        assert float(o.grad) == pytest.approx(wi * 2 * float(o.data), rel=1e-10)


def test_verify_zero_gate_and_symmetry():
    outs = [T.Tensor(0.8, requires_grad=True), T.Tensor(-1.1, requires_grad=True)]
    loss, _ = competitive_loss([o * o for o in outs], [1.0, 0.0])
    loss.backward()
    assert float(outs[1].grad) == 0.0
    _, w = competitive_loss_scalar([2.0, 2.0], [0.5, 0.5])
    np.testing.assert_array_equal(w, [0.5, 0.5])


def test_verify_reports_offender(rng):
    outs = [T.Tensor(1.0, requires_grad=True), T.Tensor(2.0, requires_grad=True)]

    calls = {"n": 0}

    def unstable(o):
        # differs between the mixture pass and the per-expert reference pass
        calls["n"] += 1
        return o * o * (1.0 if calls["n"] <= 2 else 1.5)

    with pytest.raises(VerificationError) as err:
        verify_competitive_gradient(outs, unstable, [0.5, 0.5])
    assert err.value.index in (0, 1)


def test_all_losses_zero_when_sources_agree(rng):
    x = rng.uniform(0, 1, (1, 16, 16))
    f = T.Tensor(x)
    tot_hi, (li, lg, ls) = total_loss(f, x, x, return_terms=True)
    for t in (li, lg, ls, tot_hi):
        assert abs(t.data).max() <= 1e-12
    lf, _ = competitive_loss(T.stack([T.reshape(tot_hi, (-1,)), T.reshape(tot_hi, (-1,))], -1), [[0.6, 0.4]])
    assert abs(lf.data).max() <= 1e-12
