import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsmpc.errors import DomainError
from rsmpc.noise import NoiseModel, cgf, cgf_grad, laplace_rate_closed_form, rate, rate_grad, sample

MODELS = {
    "gaussian": NoiseModel.gaussian(mean=[0.3, -1.0], var=[1.0, 4.0]),
    "laplace": NoiseModel.laplace(loc=[0.5, 0.0], scale=[0.5, 2.0]),
    "uniform": NoiseModel.uniform(low=[-1.0, 0.0], high=[1.0, 3.0]),
    "poisson": NoiseModel.poisson(rate=[3.0, 0.5], shift=[0.0, 0.5]),
}


def interior_points(model, rng, count):
    """Random points strictly inside the rate function's domain."""
    mean = model.mean
    if model.family == "gaussian":
        return mean + 3.0 * np.sqrt(model.params["var"]) * rng.uniform(-1, 1, (count, model.dim))
    if model.family == "laplace":
        return mean + 4.0 * model.params["scale"] * rng.uniform(-1, 1, (count, model.dim))
    if model.family == "uniform":
        lo, hi = model.params["low"], model.params["high"]
        return lo + (hi - lo) * rng.uniform(0.01, 0.99, (count, model.dim))
    lo = -model.params["shift"]
    return lo + model.params["rate"] * rng.uniform(0.05, 4.0, (count, model.dim))


# --- cgf ---------------------------------------------------------------------


def test_gaussian_cgf_at_one():
    assert cgf(NoiseModel.gaussian(0.0, 1.0), [1.0]) == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("family", sorted(MODELS))
def test_cgf_zero_at_origin(family):
    assert cgf(MODELS[family], np.zeros(2)) == pytest.approx(0.0, abs=1e-15)


def test_poisson_cgf_closed_form_and_monte_carlo():
    model = NoiseModel.poisson(3.0)
    expected = 3.0 * (math.e - 1.0)
    assert cgf(model, [1.0]) == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(5.15485, abs=1e-5)
    draws = sample(model, 10**6, seed=7)[:, 0]
    e = np.exp(draws)
    estimate = math.log(e.mean())
    # delta-method standard error of log-mean-exp
    se = e.std() / (e.mean() * math.sqrt(e.size))
    assert abs(estimate - expected) < 4.0 * se


def test_laplace_cgf_outside_domain_is_infinite():
    model = NoiseModel.laplace(0.0, 0.5)
    assert cgf(model, [2.0]) == math.inf
    assert cgf(model, [-3.0]) == math.inf
    assert math.isfinite(cgf(model, [1.99]))


def test_cgf_dimension_mismatch():
    with pytest.raises(ValueError):
        cgf(MODELS["gaussian"], [1.0, 2.0, 3.0])


def test_uniform_cgf_taylor_branch_is_continuous():
    model = NoiseModel.uniform(-1.0, 1.0)
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 40
    for y in [1e-6, 1e-4, 0.0999, 0.1, 0.1001, 0.5, 3.0, 19.9, 20.1, 50.0]:
        exact = float(mpmath.log(mpmath.sinh(y) / y))
        assert cgf(model, [y]) == pytest.approx(exact, rel=1e-13)
        grad = float(mpmath.coth(y) - 1 / mpmath.mpf(y))
        assert cgf_grad(model, [y])[0] == pytest.approx(grad, rel=1e-13)
        hess = float(1 / mpmath.mpf(y) ** 2 - 1 / mpmath.sinh(y) ** 2)
        assert model.cgf_hess([y])[0] == pytest.approx(hess, rel=1e-12)


# --- cgf_grad ------------------------------------------------------------------


def test_gaussian_cgf_grad():
    assert cgf_grad(NoiseModel.gaussian(0.0, 1.0), [0.7])[0] == pytest.approx(0.7, abs=1e-15)


@pytest.mark.parametrize("family", sorted(MODELS))
def test_cgf_grad_at_zero_is_mean(family):
    m = MODELS[family]
    np.testing.assert_allclose(cgf_grad(m, np.zeros(2)), m.mean, atol=1e-15)


def test_uniform_cgf_grad_value_and_finite_difference():
    model = NoiseModel.uniform(-1.0, 1.0)
    g = cgf_grad(model, [2.0])[0]
    assert g == pytest.approx(1.0 / math.tanh(2.0) - 0.5, abs=1e-14)
    assert g == pytest.approx(0.53731, abs=1e-5)
    step = 1e-6
    fd = (cgf(model, [2.0 + step]) - cgf(model, [2.0 - step])) / (2 * step)
    assert g == pytest.approx(fd, abs=1e-8)


def test_cgf_grad_domain_error_names_coordinate():
    model = NoiseModel.laplace(loc=[0.0, 0.0], scale=[1.0, 0.5])
    with pytest.raises(DomainError) as info:
        cgf_grad(model, [0.5, 2.0])
    assert info.value.index == 1
    with pytest.raises(DomainError):
        cgf_grad(model, [1.0, 0.0])  # on the boundary


@pytest.mark.parametrize("family", sorted(MODELS))
def test_cgf_grad_matches_finite_difference(family):
    m = MODELS[family]
    y = np.array([0.3, -0.2])
    step = 1e-6
    for i in range(2):
        e = np.zeros(2)
        e[i] = step
        fd = (cgf(m, y + e) - cgf(m, y - e)) / (2 * step)
        assert cgf_grad(m, y)[i] == pytest.approx(fd, abs=1e-7)


# --- rate ------------------------------------------------------------------------


@pytest.mark.parametrize("family", sorted(MODELS))
def test_rate_zero_at_mean(family):
    m = MODELS[family]
    assert rate(m, m.mean) == pytest.approx(0.0, abs=1e-12)


def test_gaussian_rate_value():
    assert rate(NoiseModel.gaussian(0.0, 4.0), [2.0]) == pytest.approx(0.5, abs=1e-15)


def test_poisson_rate_value_and_grid_sup():
    model = NoiseModel.poisson(3.0)
    expected = 6.0 * math.log(2.0) - 3.0
    assert rate(model, [6.0]) == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(1.15888, abs=1e-5)
    ys = np.linspace(-5.0, 5.0, 200_001)
    grid = np.max(6.0 * ys - 3.0 * np.expm1(ys))
    assert rate(model, [6.0]) == pytest.approx(grid, abs=1e-8)


def test_poisson_rate_boundary_and_outside():
    model = NoiseModel.poisson(3.0)
    assert rate(model, [0.0]) == pytest.approx(3.0)
    assert rate(model, [-0.1]) == math.inf
    shifted = NoiseModel.poisson(3.0, centered=True)
    assert rate(shifted, [3.0]) == pytest.approx(rate(model, [6.0]), rel=1e-14)
    assert shifted.mean[0] == 0.0


def test_uniform_rate_infinite_outside_support():
    model = NoiseModel.uniform(-1.0, 1.0)
    assert rate(model, [1.5]) == math.inf
    assert rate(model, [-1.0]) == math.inf
    assert math.isfinite(rate(model, [0.999]))


def test_degenerate_gaussian_rate():
    model = NoiseModel.gaussian([0.0, 1.0], [0.0, 1.0])
    assert rate(model, [0.0, 1.0]) == 0.0
    assert rate(model, [1e-9, 1.0]) == math.inf
    np.testing.assert_array_equal(model.degenerate, [True, False])


# --- rate_grad -------------------------------------------------------------------


def test_gaussian_rate_grad():
    assert rate_grad(NoiseModel.gaussian(0.0, 1.0), [0.3])[0] == pytest.approx(0.3, abs=1e-15)


@pytest.mark.parametrize("family", sorted(MODELS))
def test_rate_grad_zero_at_mean(family):
    m = MODELS[family]
    np.testing.assert_allclose(rate_grad(m, m.mean), 0.0, atol=1e-10)


def test_poisson_rate_grad_value_and_finite_difference():
    model = NoiseModel.poisson(3.0)
    g = rate_grad(model, [6.0])[0]
    assert g == pytest.approx(math.log(2.0), rel=1e-14)
    step = 1e-5
    fd = (rate(model, [6.0 + step]) - rate(model, [6.0 - step])) / (2 * step)
    assert g == pytest.approx(fd, abs=1e-8)


@pytest.mark.parametrize("family", ["uniform", "poisson"])
def test_rate_grad_outside_domain(family):
    m = MODELS[family]
    lo, _ = m.rate_domain()
    with pytest.raises(DomainError):
        rate_grad(m, lo - 0.5)


# --- sampling ----------------------------------------------------------------------


def test_gaussian_sample_mean():
    draws = sample(NoiseModel.gaussian(0.0, 1.0), 10**6, seed=123)
    assert abs(draws.mean()) < 4e-3


def test_uniform_samples_in_support():
    draws = sample(NoiseModel.uniform(-1.0, 1.0), 10_000, seed=1)
    assert draws.min() >= -1.0 and draws.max() <= 1.0


def test_sample_determinism():
    m = MODELS["laplace"]
    np.testing.assert_array_equal(sample(m, 50, seed=9), sample(m, 50, seed=9))
    assert not np.array_equal(sample(m, 50, seed=9), sample(m, 50, seed=10))


@pytest.mark.parametrize("family", sorted(MODELS))
def test_sample_mean_converges(family):
    m = MODELS[family]
    draws = sample(m, 200_000, seed=3)
    se = draws.std(axis=0) / math.sqrt(draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - m.mean) < 5 * se)


def test_sample_count_must_be_positive():
    with pytest.raises(ValueError):
        sample(MODELS["gaussian"], 0, seed=0)


# --- parameter validation --------------------------------------------------------------


@pytest.mark.parametrize(
    "build",
    [
        lambda: NoiseModel.gaussian(0.0, -1.0),
        lambda: NoiseModel.laplace(0.0, 0.0),
        lambda: NoiseModel.uniform(1.0, 1.0),
        lambda: NoiseModel.poisson(0.0),
        lambda: NoiseModel("cauchy", {"loc": 0.0}),
        lambda: NoiseModel.gaussian([0.0, 1.0], [1.0, 1.0, 1.0]),
    ],
)
def test_invalid_parameters(build):
    with pytest.raises(ValueError):
        build()


def test_dict_round_trip():
    for m in MODELS.values():
        back = NoiseModel.from_dict(m.to_dict())
        assert back.family == m.family
        for k in m.params:
            np.testing.assert_array_equal(back.params[k], m.params[k])


# --- properties ------------------------------------------------------------------------


@pytest.mark.parametrize("family", sorted(MODELS))
def test_conjugacy_round_trip(family):
    m = MODELS[family]
    rng = np.random.default_rng(11)
    for x in interior_points(m, rng, 100):
        np.testing.assert_allclose(cgf_grad(m, rate_grad(m, x)), x, rtol=0, atol=1e-8)


@pytest.mark.parametrize("family", sorted(MODELS))
def test_rate_closed_form_matches_numeric(family):
    m = MODELS[family]
    rng = np.random.default_rng(12)
    for x in interior_points(m, rng, 100):
        closed = laplace_rate_closed_form(m, x) if family == "laplace" else m.rate(x)
        assert abs(closed - m.rate_numeric(x)) <= 1e-8


@pytest.mark.parametrize("family", sorted(MODELS))
def test_midpoint_convexity(family):
    m = MODELS[family]
    rng = np.random.default_rng(13)
    pts = interior_points(m, rng, 100)
    for a, b in zip(pts[:50], pts[50:]):
        assert m.rate((a + b) / 2) <= (m.rate(a) + m.rate(b)) / 2 + 1e-10
    ys = rng.uniform(-0.4, 0.4, (100, 2))  # inside every CGF domain used here
    for a, b in zip(ys[:50], ys[50:]):
        assert m.cgf((a + b) / 2) <= (m.cgf(a) + m.cgf(b)) / 2 + 1e-10


@pytest.mark.parametrize("family", sorted(MODELS))
def test_mean_is_unique_minimizer(family):
    m = MODELS[family]
    rng = np.random.default_rng(14)
    for x in interior_points(m, rng, 100):
        if np.max(np.abs(x - m.mean)) > 1e-6:
            assert m.rate(x) > 0.0


@pytest.mark.parametrize("family", sorted(MODELS))
def test_fenchel_identity_at_dual_point(family):
    m = MODELS[family]
    y = np.array([0.2, -0.3])
    x, rho = m.rate_at_dual(y)
    assert rho == pytest.approx(m.rate(x), abs=1e-9)
    assert rho == pytest.approx(float(x @ y) - m.cgf(y), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    y=st.floats(-0.9, 0.9),
    scale=st.floats(0.2, 1.0),
    loc=st.floats(-2, 2),
)
def test_laplace_fenchel_young_inequality(y, scale, loc):
    m = NoiseModel.laplace(loc, scale)
    x = np.array([loc + 0.37])
    # Fenchel-Young: c(y) + rho(x) >= x y with equality at x = c'(y)
    assert m.cgf([y]) + m.rate(x) >= x[0] * y - 1e-10
    xs = m.cgf_grad([y])
    assert m.cgf([y]) + m.rate(xs) == pytest.approx(xs[0] * y, abs=1e-8)


@settings(max_examples=60, deadline=None)
@given(s=st.floats(0.05, 5.0), y=st.floats(-20.0, 20.0))
def test_uniform_cgf_grad_inside_support(s, y):
    m = NoiseModel.uniform(-s, 2 * s)
    g = m.cgf_grad([y])[0]
    assert -s <= g <= 2 * s
