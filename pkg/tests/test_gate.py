import numpy as np
import pytest

from moctefuse import tensor as T
from moctefuse.data import synthetic_brightness_images
from moctefuse.errors import ContractError
from moctefuse.gate import (EPS, GateConfig, IllumGate, bce_loss, bce_with_logits, gate_forward,
                            prepare_input)
from moctefuse.trainer import TrainConfig, train_gate

TINY = GateConfig(widths=(8, 16, 32, 64))
STAGE_SHAPES_480x640 = [("conv1", (240, 320)), ("conv2", (120, 160)), ("conv3", (60, 80)),
          ("conv4", (30, 40)), ("conv5", (15, 20)), ("output", (1, 1))]


def test_stage_shapes_480x640():
    gate = IllumGate(GateConfig(), seed=0)
    x = T.Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 480, 640)))
    with T.no_grad():
        logit = gate(x)
    assert logit.shape == (1,)
    assert [(n, tuple(s)) for n, s in gate.stage_shapes] == STAGE_SHAPES_480x640


def test_stage_widths():
    gate = IllumGate(GateConfig(), seed=0)
    assert gate.conv1.weight.shape == (64, 3, 7, 7)
    assert [b.conv2.weight.shape[0] for b in gate.stages] == [64, 64, 128, 128, 256, 256, 512, 512]
    assert gate.fc.weight.shape == (512, 1)


@pytest.mark.parametrize("shape", [(64, 64), (70, 90, 3), (32, 48, 3)])
def test_probs_sum_to_one(rng, shape):
    gate = IllumGate(TINY)
    probs = gate_forward(rng.uniform(0, 1, shape), gate)
    np.testing.assert_allclose(probs.p_h + probs.p_l, 1.0, rtol=0, atol=1e-12)
    assert np.all((probs.p_h >= 0) & (probs.p_h <= 1))


def test_input_too_small(rng):
    with pytest.raises(ContractError):
        gate_forward(rng.uniform(0, 1, (16, 40, 3)), IllumGate(TINY))


def test_grayscale_replicated(rng):
    g = rng.uniform(0, 1, (40, 40))
    np.testing.assert_array_equal(prepare_input(g), prepare_input(np.repeat(g[..., None], 3, -1)))


def test_batch_order_invariant(rng):
    gate = IllumGate(TINY)
    imgs = rng.uniform(0, 1, (4, 40, 40, 3))
    perm = np.array([2, 0, 3, 1])
    a = gate_forward(imgs, gate).p_h
    b = gate_forward(imgs[perm], gate).p_h
    np.testing.assert_allclose(a[perm], b, rtol=0, atol=1e-14)
    assert gate_forward(imgs, gate).p_h.tobytes() == a.tobytes()


@pytest.mark.parametrize("y,p,expected", [
    (1, 1 - EPS, 0.0), (1, 0.5, np.log(2.0)), (0, 0.9, -np.log(0.1)),
])
def test_bce_examples(y, p, expected):
    assert float(bce_loss(np.array([p]), np.array([y])).data) == pytest.approx(expected, abs=2e-7)


def test_bce_logit_gradient_identity(rng):
    z = T.Tensor(rng.uniform(-4, 4, 6), requires_grad=True)
    y = rng.integers(0, 2, 6)
    T.tsum(bce_with_logits(z, y) * 6.0).backward()
    p = 1.0 / (1.0 + np.exp(-z.data))
    np.testing.assert_allclose(z.grad, p - y, rtol=0, atol=1e-10)


def test_residual_branches_start_as_identity():
    gate = IllumGate(TINY)
    assert all(np.all(b.norm2.gain.data == 0) for b in gate.stages)


def test_gate_gradcheck(rng):
    gate = IllumGate(GateConfig(widths=(2, 2, 2, 2), blocks=(1, 1, 1, 1)))
    for b in gate.stages:
        b.norm2.gain.data[:] = 0.5
    x = T.Tensor(rng.uniform(0, 1, (1, 3, 32, 32)))
    err = T.gradcheck(lambda *_: gate(x), gate.parameters(), samples=4, rng=np.random.default_rng(0))
    assert err < 1e-5


@pytest.fixture(scope="module")
def trained_tiny_gate():
    imgs, labels = synthetic_brightness_images(200, 200, 48, seed=1)
    cfg = TrainConfig(epochs=3, batch_size=8, lr=1e-3, warmup_epochs=0.5, seed=0)
    gate, _, hist = train_gate(imgs, labels, TINY, cfg, log=None)
    return gate, hist


def test_trained_gate_separates_brightness(trained_tiny_gate):
    gate, hist = trained_tiny_gate
    imgs, labels = synthetic_brightness_images(20, 20, 48, seed=99)
    p = gate_forward(imgs, gate).p_h
    assert p[labels == 1].mean() - p[labels == 0].mean() >= 0.5
    assert hist[-1]["loss"] < hist[0]["loss"]


def test_trained_gate_white_image(trained_tiny_gate):
    gate, _ = trained_tiny_gate
    assert gate_forward(np.ones((48, 48, 3)), gate).p_h[0] > 0.95
