import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pocal import (
    ComputerDataset,
    DomainBounds,
    GpHyperParams,
    InsufficientDataError,
    PhysicalDataset,
    SurrogateFitError,
    ValidationError,
    estimate_gp_params,
    estimate_hyperparams,
    fit_gp,
    fit_parametric,
    fit_slope_model,
    gaussian_kernel_matrix,
    maximin_lhs,
)
from pocal.benchmark import THETA_BOX, X_BOUNDS, computer_model
from pocal.surrogate import NUGGET_FLOOR, fit_per_output


def _linear_data(rng, n=30):
    x = rng.uniform(0, 2, (n, 1))
    th = rng.uniform(-1, 3, (n, 1))
    return ComputerDataset(x, th, 2.0 + th[:, 0] * x[:, 0], DomainBounds([0.0], [2.0]),
                           DomainBounds([-1.0], [3.0]))


def _random_data(seed, d=2, m=2, n=40, q=None):
    r = np.random.default_rng(seed)
    x = r.random((n, d))
    th = r.uniform(-1, 1, (n, m))
    y = np.sin(3 * x[:, 0]) + np.sum(th * (1 + x[:, :1] * np.arange(1, m + 1)), axis=1) + 0.1 * r.normal(size=n)
    if q:
        y = np.column_stack([y * (j + 1) for j in range(q)])
    return ComputerDataset(x, th, y, DomainBounds.unit(d), DomainBounds(-np.ones(m), np.ones(m)))


# --- datasets --------------------------------------------------------------

def test_computer_dataset_validation(rng):
    x, th = rng.random((5, 1)), rng.random((5, 3))
    with pytest.raises(ValidationError):   # N < d + m + 1
        ComputerDataset(x[:4], th[:4], np.zeros(4))
    dup = np.vstack([np.hstack([x, th])[:5], np.hstack([x, th])[:1]])
    with pytest.raises(ValidationError):
        ComputerDataset(dup[:, :1], dup[:, 1:], np.zeros(6))
    with pytest.raises(ValidationError):
        ComputerDataset(x, th, np.zeros(5), theta_bounds=DomainBounds(np.zeros(3), np.full(3, 0.5)))
    with pytest.raises(ValidationError):
        ComputerDataset(x, th, np.r_[np.zeros(4), np.nan])


def test_physical_dataset_validation(rng):
    with pytest.raises(ValidationError):
        PhysicalDataset(rng.random((4, 2)), np.zeros(3))
    with pytest.raises(ValidationError):
        PhysicalDataset(np.array([[2.0]]), [1.0], DomainBounds.unit(1))
    p = PhysicalDataset(rng.random((6, 2)), rng.random((6, 3)))
    assert (p.n, p.d, p.q) == (6, 2, 3)
    assert p.output(1).q == 1


# --- parametric ------------------------------------------------------------

def test_exact_linear_recovery(rng):
    s = fit_parametric(_linear_data(rng), degree=2, g_degree=1)
    xt = np.linspace(0, 2, 11)[:, None]
    np.testing.assert_allclose(s.f_hat(xt), 2.0, atol=1e-10)
    np.testing.assert_allclose(s.g_hat(xt)[:, 0], xt[:, 0], atol=1e-10)
    assert s.kind == "parametric-least-squares"
    assert s.residual_rms < 1e-10


def test_slope_model_vanishes_at_zero(rng):
    x = np.tile(np.array([0, 100, 200, 300.0]), 10)[:, None]
    th = np.repeat(rng.uniform(0, 1, (10, 2)), 4, axis=0)
    y = x[:, 0] * (0.5 + th @ [0.2, -0.1]) + rng.normal(scale=1e-3, size=40)
    s = fit_slope_model(ComputerDataset(x, th, y, theta_bounds=DomainBounds([0, 0], [1, 1])))
    thetas = rng.uniform(-5, 5, (7, 2))
    np.testing.assert_array_equal(s.predict(np.zeros((7, 1)), thetas), 0.0)
    assert s.kind == "slope-model"
    np.testing.assert_allclose(s.g_hat([[100.0]])[0], [20.0, -10.0], rtol=1e-3)


@pytest.mark.xfail(strict=True, reason="quadratic-f / linear-g cannot represent the model's "
                   "theta-x interactions; held-out RMS is ~26% of the output sd (see decisions ledger)")
def test_benchmark_surrogate_accuracy_80_runs():
    joint = DomainBounds(np.r_[X_BOUNDS.lower, THETA_BOX.lower], np.r_[X_BOUNDS.upper, THETA_BOX.upper])
    z = maximin_lhs(80, joint, seed=0)
    data = ComputerDataset(z[:, :4], z[:, 4:], computer_model(z[:, :4], z[:, 4:]), X_BOUNDS, THETA_BOX)
    s = fit_parametric(data, degree=2)
    zt = joint.from_unit(np.random.default_rng(99).random((1000, 14)))
    yt = computer_model(zt[:, :4], zt[:, 4:])
    rms = np.sqrt(np.mean((yt - s.predict(zt[:, :4], zt[:, 4:])) ** 2))
    assert rms < 0.05 * yt.std()


def test_rank_deficiency_lists_columns(rng):
    x = rng.random((20, 1))
    th = np.column_stack([rng.random(20), np.zeros(20)])   # theta_2 never varies
    data = ComputerDataset(x, th, rng.random(20), theta_bounds=DomainBounds([0, -1], [1, 1]))
    with pytest.raises(SurrogateFitError) as info:
        fit_parametric(data, degree=1, g_degree=1)
    assert any("theta_2" in c for c in info.value.columns)


def test_multi_output_requires_index():
    data = _random_data(0, q=3)
    with pytest.raises(ValidationError):
        fit_parametric(data)
    fits = fit_per_output(data, degree=2, g_degree=1)
    assert len(fits) == 3


# --- GP --------------------------------------------------------------------

def test_gp_zero_data_gives_zero_surrogate(rng):
    d = _random_data(1)
    zero = ComputerDataset(d.x, d.theta, np.zeros(d.N), d.bounds, d.theta_bounds)
    s = fit_gp(zero, GpHyperParams(1.0, [0.5, 0.5], 1e-3, [2.0, 2.0]))
    xt = rng.random((9, 2))
    np.testing.assert_array_equal(s.f_hat(xt), 0.0)
    np.testing.assert_array_equal(s.g_hat(xt), 0.0)


def test_gp_interpolation_limit():
    # theta fixed at the box centre so the gradient processes carry no weight
    x = np.array([[0.05], [0.35], [0.65], [0.95]])
    data = ComputerDataset(x, np.zeros((4, 1)), [1.0, -2.0, 0.5, 3.0], DomainBounds.unit(1),
                           DomainBounds([-1.0], [1.0]))
    s = fit_gp(data, GpHyperParams(1.0, [1.0], 1e-10, [20.0]))
    np.testing.assert_allclose(s.f_hat(x), data.y, atol=1e-6)


def test_gp_ill_conditioned_factorization():
    d = _random_data(3)
    with pytest.raises((SurrogateFitError, ValidationError)):
        fit_gp(d, GpHyperParams(1.0, [1.0, 1.0], 0.0, [1.0, 1.0]))


def test_gp_param_invariants():
    with pytest.raises(ValidationError):
        GpHyperParams(1.0, [1.0, -1.0], 1e-3, [1.0])


def _affine_residual(s, x, ta, tb):
    """y(x, ta) + y(x, tb) - y(x, ta + tb) - f(x): zero for affine surrogates."""
    return s.predict(x, ta) + s.predict(x, tb) - s.predict(x, ta + tb) - s.f_hat(x)


@pytest.fixture(scope="module")
def surrogates():
    d = _random_data(4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        gp = fit_gp(d, estimate_gp_params(d))
    return {"ls": fit_parametric(d, 2, 1), "gp": gp, "data": d}


@pytest.mark.parametrize("kind", ["ls", "gp"])
def test_affinity_100_points(surrogates, kind):
    s = surrogates[kind]
    r = np.random.default_rng(7)
    x = r.random((100, 2))
    ta, tb = r.uniform(-1, 1, (100, 2)), r.uniform(-1, 1, (100, 2))
    scale = np.max(np.abs(s.predict(x, ta))) + 1.0
    assert np.max(np.abs(_affine_residual(s, x, ta, tb))) <= 1e-10 * scale


@settings(max_examples=30)
@given(kind=st.sampled_from(["ls", "gp"]), seed=st.integers(0, 10_000))
def test_gradient_matches_finite_difference(surrogates, kind, seed):
    s = surrogates[kind]
    r = np.random.default_rng(seed)
    x = r.random((1, 2))
    th = r.uniform(-1, 1, 2)
    h = 1e-4 * 2.0                        # 1e-4 of the theta range
    g = s.g_hat(x)[0]
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd = (s.predict(x, th + e)[0] - s.predict(x, th - e)[0]) / (2 * h)
        assert fd == pytest.approx(g[k], rel=1e-6, abs=1e-9 * (1 + abs(g[k])))


def test_gp_fit_is_reasonable(surrogates):
    d = surrogates["data"]
    assert surrogates["gp"].residual_rms < 0.5 * d.y.std()


# --- hyperparameters -------------------------------------------------------

def test_constant_response_hits_floor_and_flags():
    x = np.linspace(0, 1, 20)[:, None]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        est = estimate_hyperparams(PhysicalDataset(x, np.full(20, 3.0), DomainBounds.unit(1)))
    assert est.eta2 == NUGGET_FLOOR
    assert est.flat


def _gp_sample(seed, phi=5.0, eta2=0.01, n=200):
    r = np.random.default_rng(seed)
    x = r.random((n, 1))
    K = gaussian_kernel_matrix(x, x, phi) + eta2 * np.eye(n)
    return x, np.linalg.cholesky(K) @ r.standard_normal(n)


def test_phi_recovery_within_factor_two():
    # a single n = 200 draw can put the ML maximum far away; require it for most draws
    hits = 0
    for seed in range(10):
        x, y = _gp_sample(seed)
        phi = estimate_hyperparams(PhysicalDataset(x, y, DomainBounds.unit(1))).phi
        hits += 2.5 <= phi <= 10.0
    assert hits >= 8


def test_phi_invariant_to_doubling_outputs():
    x, y = _gp_sample(11)
    a = estimate_hyperparams(PhysicalDataset(x, y, DomainBounds.unit(1)))
    b = estimate_hyperparams(PhysicalDataset(x, 2 * y, DomainBounds.unit(1)))
    assert a.phi == b.phi
    assert a.eta2 == b.eta2


def test_hyperparams_need_three_points():
    with pytest.raises(InsufficientDataError):
        estimate_hyperparams(PhysicalDataset([[0.1], [0.5]], [1.0, 2.0]))


def test_hyperparam_estimate_unpacks():
    x, y = _gp_sample(1, n=40)
    phi, eta2 = estimate_hyperparams(PhysicalDataset(x, y, DomainBounds.unit(1)))
    assert phi > 0 and eta2 >= NUGGET_FLOOR


# --- design ----------------------------------------------------------------

def test_maximin_lhs_is_latin_and_in_bounds():
    b = DomainBounds([0.0, -1.0, 10.0], [1.0, 1.0, 20.0])
    z = maximin_lhs(25, b, seed=3)
    assert b.contains(z)
    u = b.to_unit(z)
    for k in range(3):
        assert sorted(np.floor(u[:, k] * 25).astype(int)) == list(range(25))


def test_maximin_lhs_improves_spacing():
    from scipy.spatial.distance import pdist
    from scipy.stats import qmc

    b = DomainBounds.unit(4)
    best = pdist(maximin_lhs(40, b, seed=0)).min()
    single = pdist(qmc.LatinHypercube(4, seed=np.random.default_rng(0)).random(40)).min()
    assert best >= single
