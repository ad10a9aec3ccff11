import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vesseldiff import losses as L


def _t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def test_weights_defaults_and_validation():
    w = L.LossWeights()
    assert (w.alpha, w.beta) == (0.2, 5.0)
    with pytest.raises(ValueError):
        L.LossWeights(alpha=-0.1)


def test_diffusion_loss_examples():
    x = torch.randn(2, 1, 8, 8)
    assert float(L.diffusion_loss(x, x)) == 0.0
    assert float(L.diffusion_loss(x + 0.7, x)) == pytest.approx(0.49, rel=1e-6)
    g = torch.Generator().manual_seed(0)
    z = torch.randn(10**6, generator=g, dtype=torch.float64)
    assert abs(float(L.diffusion_loss(torch.zeros_like(z), z)) - 1.0) < 0.01
    with pytest.raises(ValueError):
        L.diffusion_loss(torch.zeros(3), torch.zeros(4))


def test_adv_generator_examples():
    ones, zeros = torch.ones(2, 1, 6, 6), torch.zeros(2, 1, 6, 6)
    assert float(L.adv_loss_generator(ones, ones)) == 0.0
    assert float(L.adv_loss_generator(zeros, zeros)) == 2.0
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 1, 5, 5)), rng.normal(size=(2, 1, 3, 3))
    oracle = sum((v - 1) ** 2 for v in a.ravel()) / a.size + sum((v - 1) ** 2 for v in b.ravel()) / b.size
    assert float(L.adv_loss_generator(_t(a), _t(b))) == pytest.approx(oracle, rel=1e-12)
    # one discriminator dropped
    assert float(L.adv_loss_generator(None, zeros)) == 1.0
    with pytest.raises(ValueError):
        L.adv_loss_generator(None, None)


@pytest.mark.parametrize("fn", [L.adv_loss_disc_s, L.adv_loss_disc_a])
def test_disc_examples(fn):
    ones, zeros = torch.ones(1, 1, 4, 4), torch.zeros(1, 1, 4, 4)
    assert float(fn(ones, zeros)) == 0.0
    assert float(fn(zeros + 0.5, zeros + 0.5)) == 0.25
    rng = np.random.default_rng(2)
    r, f = rng.normal(size=(3, 1, 4, 4)), rng.normal(size=(3, 1, 4, 4))
    oracle = 0.5 * np.mean([(v - 1) ** 2 for v in r.ravel()]) + 0.5 * np.mean([v * v for v in f.ravel()])
    assert float(fn(_t(r), _t(f))) == pytest.approx(oracle, rel=1e-12)


def test_cyclic_examples():
    x = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    assert float(L.cyclic_loss(x, x)) == 0.0
    assert float(L.cyclic_loss(x + 0.3, x)) == pytest.approx(0.3, rel=1e-12)
    rng = np.random.default_rng(3)
    soft, hard = rng.uniform(size=(2, 1, 8, 8)), (rng.uniform(size=(2, 1, 8, 8)) > 0.5).astype(float)
    oracle = np.mean([abs(a - b) for a, b in zip(soft.ravel(), hard.ravel())])
    assert float(L.cyclic_loss(_t(soft), _t(hard))) == pytest.approx(oracle, rel=1e-12)
    with pytest.raises(ValueError):
        L.cyclic_loss(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 3))


def test_ce_examples():
    y = (torch.rand(1, 1, 8, 8) > 0.5).double()
    assert float(L.cyclic_loss_ce(torch.full_like(y, 0.5), y)) == pytest.approx(math.log(2), rel=1e-12)
    eps = L.CE_EPS
    near = torch.where(y > 0, 1 - eps, eps)
    assert float(L.cyclic_loss_ce(near, y)) < 10 * eps
    # exact 0/1 predictions are clamped, never infinite
    assert math.isfinite(float(L.cyclic_loss_ce(1 - y, y)))
    rng = np.random.default_rng(4)
    p, t = rng.uniform(0.01, 0.99, size=(2, 1, 4, 4)), (rng.uniform(size=(2, 1, 4, 4)) > 0.5).astype(float)
    oracle = np.mean([-(b * math.log(a) + (1 - b) * math.log(1 - a)) for a, b in zip(p.ravel(), t.ravel())])
    assert float(L.cyclic_loss_ce(_t(p), _t(t))) == pytest.approx(oracle, rel=1e-12)
    with pytest.raises(ValueError):
        L.cyclic_loss_ce(torch.full((2,), 0.5), torch.tensor([0.0, 2.0]))


def test_total_generator_examples():
    one = torch.tensor(1.0)
    assert float(L.total_generator_loss(one, one, one, L.LossWeights(0.2, 5))) == pytest.approx(6.2)
    d = torch.tensor(0.37)
    assert float(L.total_generator_loss(d, torch.tensor(3.0), torch.tensor(2.0), L.LossWeights(0, 0))) == pytest.approx(0.37)
    rng = np.random.default_rng(5)
    for _ in range(10):
        a, b, c = rng.uniform(0, 3, size=3)
        got = float(L.total_generator_loss(torch.tensor(a), torch.tensor(b), torch.tensor(c)))
        assert got == pytest.approx(a + 0.2 * b + 5.0 * c, rel=1e-12)


def test_total_generator_skips_absent_terms():
    assert float(L.total_generator_loss(None, torch.tensor(1.0), None)) == pytest.approx(0.2)


@pytest.mark.parametrize("bad", [float("nan"), float("inf")])
def test_non_finite_components_abort(bad):
    with pytest.raises(L.NonFiniteLossError, match="cyc"):
        L.total_generator_loss(torch.tensor(1.0), torch.tensor(1.0), torch.tensor(bad))
    with pytest.raises(L.NonFiniteLossError):
        L.total_discriminator_loss(torch.tensor(bad), None)


def test_total_discriminator():
    assert float(L.total_discriminator_loss(torch.tensor(0.5), torch.tensor(0.25))) == 0.75
    assert float(L.total_discriminator_loss(None, torch.tensor(0.25))) == 0.25


def test_report_fields():
    r = L.LossReport(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0)
    assert tuple(r.as_dict()) == L.LossReport.FIELDS


maps = arrays(np.float64, (1, 1, 3, 3), elements=st.floats(-4, 4))


@settings(max_examples=50, deadline=None)
@given(maps, maps)
def test_losses_non_negative(a, b):
    a, b = _t(a), _t(b)
    for v in (L.diffusion_loss(a, b), L.adv_loss_generator(a, b), L.adv_loss_disc_s(a, b),
              L.adv_loss_disc_a(a, b), L.cyclic_loss(a, b)):
        assert float(v) >= 0
    p = (a.tanh() + 1) / 2
    y = (b > 0).double()
    assert float(L.cyclic_loss_ce(p, y)) >= 0


CASES = {
    "diff": lambda a, b: L.diffusion_loss(a, b),
    "adv_g": lambda a, b: L.adv_loss_generator(a, b),
    "disc_s": lambda a, b: L.adv_loss_disc_s(a, b),
    "disc_a": lambda a, b: L.adv_loss_disc_a(a, b),
    # offset keeps the kink of |x| away from the finite-difference stencil
    "cyc": lambda a, b: L.cyclic_loss(a, b + 0.5 * torch.sign(a - b)),
    "ce": lambda a, b: L.cyclic_loss_ce(torch.sigmoid(a), (b > 0).double()),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_input_gradients_match_finite_differences(name):
    g = torch.Generator().manual_seed(7)
    a = torch.randn((2, 1, 3, 3), generator=g, dtype=torch.float64, requires_grad=True)
    b = torch.randn((2, 1, 3, 3), generator=g, dtype=torch.float64)
    fn = CASES[name]
    fn(a, b).backward()
    h = 1e-6
    flat = a.detach().clone().reshape(-1)
    for i in range(flat.numel()):
        up, dn = flat.clone(), flat.clone()
        up[i] += h
        dn[i] -= h
        num = (float(fn(up.reshape(a.shape), b)) - float(fn(dn.reshape(a.shape), b))) / (2 * h)
        ana = float(a.grad.reshape(-1)[i])
        assert abs(ana - num) <= 1e-4 * max(abs(ana), abs(num), 1e-8)
