import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vesseldiff.schedule import build_linear_schedule, perturb, sample_timesteps


@pytest.fixture(scope="module")
def full():
    return build_linear_schedule(2000, 1e-6, 1e-2, 200)


def test_endpoints(full):
    assert full.betas[0] == 1e-6
    assert full.betas[1999] == pytest.approx(1e-2, rel=1e-15)
    assert full.T == 2000 and full.T_a == 200
    assert len(full.alpha_bars) == 2001


def test_single_step():
    s = build_linear_schedule(1, 0.5, 0.5)
    np.testing.assert_array_equal(s.betas, [0.5])
    np.testing.assert_array_equal(s.alpha_bars, [1.0, 0.5])


def test_interpolation_oracle(full):
    expected = 1e-6 + (1e-2 - 1e-6) * 1000 / 1999
    assert full.betas[1000] == pytest.approx(expected, rel=1e-14)


def test_alpha_bar_invariants(full):
    ab = full.alpha_bars
    assert ab[0] == 1.0
    assert np.all(ab > 0) and np.all(ab <= 1)
    assert np.all(np.diff(ab[1:]) < 0)
    rec = ab[:-1] * (1.0 - full.betas)
    np.testing.assert_allclose(ab[1:], rec, rtol=1e-12, atol=0)
    # independent log-space product
    t = 1500
    assert ab[t] == pytest.approx(np.exp(np.sum(np.log1p(-full.betas[:t]))), rel=1e-10)


@pytest.mark.parametrize("args", [
    (0, 1e-6, 1e-2, None),
    (-3, 1e-6, 1e-2, None),
    (10, 0.0, 1e-2, 2),
    (10, 1e-2, 1e-3, 2),
    (10, 1e-6, 1.0, 2),
    (10, 1e-6, 1e-2, 10),
    (10, 1e-6, 1e-2, 0),
])
def test_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        build_linear_schedule(*args)


def test_t_zero_is_identity(full):
    x0 = torch.randn(3, 1, 8, 8)
    noise = torch.randn(3, 1, 8, 8) * 1e3
    out = perturb(full, x0, torch.zeros(3, dtype=torch.long), noise)
    assert torch.equal(out, x0)


@pytest.mark.parametrize("t", [1, 50, 200, 2000])
def test_zero_image_gives_scaled_noise(full, t):
    noise = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    out = perturb(full, torch.zeros_like(noise), t, noise)
    torch.testing.assert_close(out, np.sqrt(1 - full.alpha_bars[t]) * noise, rtol=1e-12, atol=0)


def test_monte_carlo_statistics(full):
    g = torch.Generator().manual_seed(0)
    n, t = 10_000, 200
    x0 = torch.linspace(-1, 1, 16, dtype=torch.float64).reshape(1, 1, 4, 4)
    noise = torch.randn((n, 1, 4, 4), generator=g, dtype=torch.float64)
    xt = perturb(full, x0.expand(n, -1, -1, -1), t, noise)
    ab = full.alpha_bars[t]
    var = 1 - ab
    se = np.sqrt(var / n)
    mean = xt.mean(0).numpy()
    assert np.all(np.abs(mean - np.sqrt(ab) * x0[0].numpy()) < 4 * se)
    assert np.all(np.abs(xt.var(0).numpy() / var - 1) < 0.05)


def test_per_element_timesteps(full):
    x0 = torch.ones(3, 1, 2, 2, dtype=torch.float64)
    noise = torch.zeros_like(x0)
    out = perturb(full, x0, torch.tensor([0, 10, 2000]), noise)
    for i, t in enumerate([0, 10, 2000]):
        assert torch.all(out[i] == np.sqrt(full.alpha_bars[t]))


def test_perturb_errors(full):
    x0 = torch.zeros(2, 1, 4, 4)
    with pytest.raises(ValueError):
        perturb(full, x0, 0, torch.zeros(2, 1, 4, 5))
    with pytest.raises(ValueError):
        perturb(full, x0, 2001, torch.zeros_like(x0))
    with pytest.raises(ValueError):
        perturb(full, x0, torch.tensor([0, -1]), torch.zeros_like(x0))
    with pytest.raises(ValueError):
        perturb(full, x0, torch.tensor([0, 1, 2]), torch.zeros_like(x0))


def test_noise_scale_monotone(full):
    assert np.all(np.diff(full.noise_scale(np.arange(2001))) > 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2000), st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_perturb_is_linear(t, seed, a, b):
    sch = build_linear_schedule(2000, 1e-6, 1e-2, 200)
    g = torch.Generator().manual_seed(seed)
    x, y, e, f = (torch.randn((1, 1, 4, 4), generator=g, dtype=torch.float64) for _ in range(4))
    lhs = perturb(sch, a * x + b * y, t, e)
    rhs = a * perturb(sch, x, t, e) + b * perturb(sch, y, t, e) - (a + b - 1) * perturb(sch, torch.zeros_like(x), t, e)
    torch.testing.assert_close(lhs, rhs, rtol=1e-6, atol=1e-9)
    lhs = perturb(sch, x, t, a * e + b * f)
    rhs = a * perturb(sch, x, t, e) + b * perturb(sch, x, t, f) - (a + b - 1) * perturb(sch, x, t, torch.zeros_like(e))
    torch.testing.assert_close(lhs, rhs, rtol=1e-6, atol=1e-9)


def test_sample_degenerate_range():
    assert sample_timesteps(4, 0, torch.Generator().manual_seed(3)).tolist() == [0, 0, 0, 0]


def test_sample_mean():
    s = sample_timesteps(10_000, 200, torch.Generator().manual_seed(11)).numpy()
    assert s.min() >= 0 and s.max() <= 200
    se = np.sqrt(((201 ** 2 - 1) / 12) / 10_000)
    assert abs(s.mean() - 100) < 4 * se


def test_sample_closed_range_reaches_upper():
    s = sample_timesteps(5000, 3, torch.Generator().manual_seed(0))
    assert set(s.tolist()) == {0, 1, 2, 3}


def test_sample_deterministic():
    a = sample_timesteps(32, 2000, torch.Generator().manual_seed(5))
    b = sample_timesteps(32, 2000, torch.Generator().manual_seed(5))
    assert torch.equal(a, b)
