"""Surrogates that are affine in the calibration parameters.

Every fitted surrogate has the form ``y(x, theta) = f(x) + theta @ g(x)``.
Internally theta is mapped to [-1, 1]^m before fitting; the returned ``f`` and
``g`` act on theta in its original units.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg, optimize
from scipy.spatial.distance import cdist, pdist
from scipy.stats import qmc

from .data import ComputerDataset, PhysicalDataset
from .errors import InsufficientDataError, SurrogateFitError, ValidationError
from .kernels import DomainBounds, gaussian_kernel_matrix

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LinearSurrogate:
    """Affine-in-theta surrogate ``f(x) + theta @ g(x)``.

    ``f`` maps (k, d) -> (k,), ``g`` maps (k, d) -> (k, m); both are vectorized
    over rows and take x in original units.
    """

    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    m: int
    kind: str
    residual_rms: float = float("nan")
    max_abs_residual: float = float("nan")
    info: dict = field(default_factory=dict)

    def f_hat(self, x) -> np.ndarray:
        return np.asarray(self.f(np.atleast_2d(x)), dtype=float)

    def g_hat(self, x) -> np.ndarray:
        return np.asarray(self.g(np.atleast_2d(x)), dtype=float).reshape(-1, self.m)

    def predict(self, x, theta) -> np.ndarray:
        """Evaluate at rows of ``x``; ``theta`` is one m-vector or one per row."""
        x = np.atleast_2d(x)
        theta = np.asarray(theta, dtype=float)
        g = self.g_hat(x)
        if theta.ndim == 1:
            return self.f_hat(x) + g @ theta
        return self.f_hat(x) + np.einsum("ij,ij->i", g, theta)

    __call__ = predict


@dataclass(frozen=True)
class GpHyperParams:
    """Variances and correlation scales of the Gaussian-process surrogate.

    ``phi`` holds one inverse squared length-scale per control variable
    (standardized units), shared by the correlation functions of f and of
    every gradient component.
    """

    kappa2: float
    kappa2_g: np.ndarray
    tau2: float
    phi: np.ndarray

    def __post_init__(self):
        k2g = np.atleast_1d(np.asarray(self.kappa2_g, dtype=float))
        phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        if not (self.kappa2 > 0 and self.tau2 > 0 and np.all(k2g > 0) and np.all(phi > 0)):
            raise ValidationError("GP variances and scales must all be positive")
        object.__setattr__(self, "kappa2_g", k2g)
        object.__setattr__(self, "phi", phi)


@dataclass(frozen=True)
class HyperParamEstimate:
    """Result of the kernel hyperparameter search on physical data."""

    phi: float
    eta2: float
    log_likelihood: float
    flat: bool = False

    def __iter__(self):
        yield self.phi
        yield self.eta2


# ---------------------------------------------------------------------------
# design helpers


def maximin_lhs(n: int, bounds: DomainBounds, seed=None, candidates: int = 30) -> np.ndarray:
    """Latin hypercube with the largest minimum pairwise distance among
    ``candidates`` random LHS draws, scaled to ``bounds``."""
    rng = np.random.default_rng(seed)
    best, best_score = None, -np.inf
    for _ in range(candidates):
        u = qmc.LatinHypercube(bounds.dim, seed=rng).random(n)
        score = pdist(u).min() if n > 1 else 0.0
        if score > best_score:
            best, best_score = u, score
    return bounds.from_unit(best)


def _theta_map(tb: DomainBounds):
    # u = a * theta + b maps the theta box onto [-1, 1]^m
    a = 2.0 / tb.width
    b = -(tb.lower + tb.upper) / tb.width
    return a, b


def _monomials(d: int, degree: int):
    exps = [()]
    for k in range(1, degree + 1):
        exps.extend(itertools.combinations_with_replacement(range(d), k))
    return exps


def _poly(z, exps):
    cols = [np.ones(z.shape[0])]
    for e in exps[1:]:
        cols.append(np.prod(z[:, list(e)], axis=1))
    return np.column_stack(cols)


def _monomial_name(e):
    return "1" if not e else "*".join(f"x_{i + 1}" for i in e)


def _lstsq_checked(D, y, names):
    scale = np.linalg.norm(D, axis=0)
    scale[scale == 0] = 1.0
    Dn = D / scale
    _, r, piv = linalg.qr(Dn, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(Dn.shape) * np.finfo(float).eps * 1e3 * diag[0]
    rank = int(np.sum(diag > tol))
    if rank < D.shape[1]:
        dep = [names[i] for i in piv[rank:]]
        raise SurrogateFitError(
            f"regression matrix is rank deficient ({rank} < {D.shape[1]}); "
            f"dependent columns: {dep}",
            dep,
        )
    coef, *_ = linalg.lstsq(Dn, y)
    return coef / scale


def _require_single_output(data: ComputerDataset, output):
    if output is not None:
        return data.output(output)
    if data.q != 1:
        raise ValidationError("multi-output data: pass output=j or use fit_per_output")
    return data


def _diagnostics(sur_f, sur_g, data):
    pred = sur_f(data.x) + np.einsum("ij,ij->i", sur_g(data.x), data.theta)
    res = data.y - pred
    return float(np.sqrt(np.mean(res**2))), float(np.max(np.abs(res)))


def _wrap(f_int, g_int, tb, kind, data, info):
    a, b = _theta_map(tb)

    def f(x):
        return f_int(x) + g_int(x) @ b

    def g(x):
        return g_int(x) * a

    rms, mx = _diagnostics(f, g, data)
    return LinearSurrogate(f=f, g=g, m=data.m, kind=kind, residual_rms=rms,
                           max_abs_residual=mx, info=info)


# ---------------------------------------------------------------------------
# parametric fits


def fit_parametric(
    data: ComputerDataset, degree: int = 2, g_degree: int = 1, output: Optional[int] = None
) -> LinearSurrogate:
    """Least-squares fit with polynomial f (``degree``) and g (``g_degree``) in x.

    Raises SurrogateFitError naming the dependent regression columns when the
    design cannot identify all coefficients.
    """
    data = _require_single_output(data, output)
    xb, tb = data.bounds, data.theta_bounds
    ef, eg = _monomials(data.d, degree), _monomials(data.d, g_degree)
    a, b = _theta_map(tb)
    z = 2.0 * xb.to_unit(data.x) - 1.0
    u = data.theta * a + b
    pf, pg = _poly(z, ef), _poly(z, eg)
    D = np.hstack([pf] + [pg * u[:, [k]] for k in range(data.m)])
    names = [_monomial_name(e) for e in ef] + [
        f"theta_{k + 1}*{_monomial_name(e)}" for k in range(data.m) for e in eg
    ]
    coef = _lstsq_checked(D, data.y, names)
    cf = coef[: len(ef)]
    cg = coef[len(ef):].reshape(data.m, len(eg)).T

    def f_int(x):
        return _poly(2.0 * xb.to_unit(x) - 1.0, ef) @ cf

    def g_int(x):
        return _poly(2.0 * xb.to_unit(x) - 1.0, eg) @ cg

    info = {"degree": degree, "g_degree": g_degree, "coef_f": cf, "coef_g": cg}
    return _wrap(f_int, g_int, tb, "parametric-least-squares", data, info)


def fit_slope_model(data: ComputerDataset, output: Optional[int] = None) -> LinearSurrogate:
    """Through-the-origin slope model y = (b0 + sum_i b_i theta_i) . x.

    Each gradient component is itself linear in x with no intercept, so the
    surrogate vanishes at x = 0 for every theta.
    """
    data = _require_single_output(data, output)
    tb = data.theta_bounds
    a, b = _theta_map(tb)
    scale = np.max(np.abs(data.x), axis=0)
    scale[scale == 0] = 1.0
    xs = data.x / scale
    u = data.theta * a + b
    D = np.hstack([xs] + [xs * u[:, [k]] for k in range(data.m)])
    names = [f"x_{i + 1}" for i in range(data.d)] + [
        f"theta_{k + 1}*x_{i + 1}" for k in range(data.m) for i in range(data.d)
    ]
    coef = _lstsq_checked(D, data.y, names)
    b0 = coef[: data.d] / scale
    B = coef[data.d:].reshape(data.m, data.d).T / scale[:, None]

    def f_int(x):
        return np.asarray(x, dtype=float) @ b0

    def g_int(x):
        return np.asarray(x, dtype=float) @ B

    a_, b_ = a, b
    info = {"beta0": b0 + B @ b_, "beta": B * a_}
    return _wrap(f_int, g_int, tb, "slope-model", data, info)


def fit_per_output(data: ComputerDataset, fitter=fit_parametric, **kwargs) -> list:
    """Independent surrogate for every output column."""
    return [fitter(data, output=j, **kwargs) for j in range(data.q)]


# ---------------------------------------------------------------------------
# Gaussian-process surrogate


def _corr(za, zb, phi):
    return gaussian_kernel_matrix(za * np.sqrt(phi), zb * np.sqrt(phi), 1.0)


def _gp_cov(z, u, params):
    kx = _corr(z, z, params.phi)
    w = params.kappa2 + (u * params.kappa2_g) @ u.T
    return kx * w


def fit_gp(data: ComputerDataset, params: GpHyperParams, output: Optional[int] = None) -> LinearSurrogate:
    """Conditional-mean surrogate from independent GP priors on f and g.

    With alpha = (C + tau2 I)^{-1} y, the fitted f at x is
    kappa2 * sum_i K(x_i, x) alpha_i and the l-th gradient is
    kappa2_l * sum_i u_li K(x_i, x) alpha_i, where u_li is the (rescaled)
    l-th parameter of run i.
    """
    data = _require_single_output(data, output)
    xb, tb = data.bounds, data.theta_bounds
    if params.kappa2_g.size != data.m:
        raise ValidationError(f"kappa2_g has {params.kappa2_g.size} entries, m = {data.m}")
    if params.phi.size not in (1, data.d):
        raise ValidationError("phi must be a scalar or one value per control variable")
    a, b = _theta_map(tb)
    z = xb.to_unit(data.x)
    u = data.theta * a + b
    C = _gp_cov(z, u, params)
    try:
        factor = linalg.cho_factor(C + params.tau2 * np.eye(data.N), lower=True)
    except linalg.LinAlgError as exc:
        raise SurrogateFitError(
            f"C + tau2*I is ill-conditioned (tau2={params.tau2:g}); try a larger tau2"
        ) from exc
    alpha = linalg.cho_solve(factor, data.y)
    ua = u * alpha[:, None]
    phi = params.phi

    def f_int(x):
        return params.kappa2 * (_corr(xb.to_unit(x), z, phi) @ alpha)

    def g_int(x):
        return (_corr(xb.to_unit(x), z, phi) @ ua) * params.kappa2_g

    return _wrap(f_int, g_int, tb, "gp-conditional-mean", data, {"params": params})


def _gp_nll(logp, z, u, y, m, d):
    k2, k2g, t2, phi = np.exp(logp[0]), np.exp(logp[1:1 + m]), np.exp(logp[1 + m]), np.exp(logp[2 + m:])
    C = _gp_cov(z, u, GpHyperParams(k2, k2g, t2, phi)) + t2 * np.eye(len(y))
    try:
        c, low = linalg.cho_factor(C, lower=True)
    except linalg.LinAlgError:
        return 1e300
    alpha = linalg.cho_solve((c, low), y)
    return 0.5 * y @ alpha + np.sum(np.log(np.diag(c)))


def estimate_gp_params(data: ComputerDataset, output: Optional[int] = None) -> GpHyperParams:
    """Maximum-likelihood GP surrogate hyperparameters (L-BFGS-B in log space)."""
    data = _require_single_output(data, output)
    a, b = _theta_map(data.theta_bounds)
    z = data.bounds.to_unit(data.x)
    u = data.theta * a + b
    y = data.y
    v = max(float(np.var(y)), 1e-12)
    m, d = data.m, data.d
    x0 = np.concatenate([[np.log(v)], np.full(m, np.log(v / max(m, 1))), [np.log(1e-4 * v)], np.zeros(d)])
    lo = np.concatenate([[np.log(v) - 12], np.full(m, np.log(v) - 20), [np.log(v) - 25], np.full(d, -7)])
    hi = np.concatenate([[np.log(v) + 6], np.full(m, np.log(v) + 6), [np.log(v) + 2], np.full(d, 7)])
    res = optimize.minimize(_gp_nll, x0, args=(z, u, y, m, d), method="L-BFGS-B",
                            bounds=list(zip(lo, hi)))
    p = res.x
    return GpHyperParams(np.exp(p[0]), np.exp(p[1:1 + m]), np.exp(p[1 + m]), np.exp(p[2 + m:]))


# ---------------------------------------------------------------------------
# kernel hyperparameters for the calibration loss

PHI_GRID = np.logspace(-2, 3, 31)
NUGGET_GRID_DECADES = (-8.0, 1.0)
NUGGET_FLOOR = 1e-8


def _profile_loglik(y, sqd, phi, g):
    # correlation R = K_phi + g I with the process variance profiled out
    n = y.shape[0]
    R = np.exp(-phi * sqd)
    R[np.diag_indices(n)] += g
    try:
        c, low = linalg.cho_factor(R, lower=True)
    except linalg.LinAlgError:
        return -np.inf
    quad = y @ linalg.cho_solve((c, low), y)
    if quad <= 0:
        return -np.inf
    return -0.5 * n * np.log(quad / n) - np.sum(np.log(np.diag(c)))


def estimate_hyperparams(physical: PhysicalDataset, output: Optional[int] = None) -> HyperParamEstimate:
    """ML estimate of the kernel scale and nugget ratio from physical data.

    Fits a zero-mean GP with Gaussian correlation plus nugget to ``y`` with
    the process variance profiled out, so the result is invariant to output
    scaling. ``eta2`` is the nugget relative to the process variance, floored
    at 1e-8. A log-spaced grid is searched first, then each coordinate is
    refined by bounded scalar search between the neighbouring grid nodes.
    ``flat`` flags a likelihood that peaks on the phi grid boundary or barely
    varies in phi.
    """
    if output is not None:
        physical = physical.output(output)
    if physical.y.ndim != 1:
        raise ValidationError("multi-output data: pass output=j")
    if physical.n < 3:
        raise InsufficientDataError(f"need at least 3 observations, got {physical.n}")
    # rescaling y leaves the argmax unchanged; a power-of-two factor leaves it bitwise unchanged
    ys = float(np.sqrt(np.mean(physical.y**2)))
    ys = ys if ys > 0 else 1.0
    y = physical.y / ys
    shift = -physical.n * np.log(ys)
    z = physical.bounds.to_unit(physical.x)
    sqd = cdist(z, z, "sqeuclidean")

    lphi = np.log(PHI_GRID)
    lg = np.log(np.logspace(*NUGGET_GRID_DECADES, 19))
    ll = np.array([[_profile_loglik(y, sqd, np.exp(p), np.exp(g)) for g in lg] for p in lphi])
    if not np.any(np.isfinite(ll)):
        log.warning("kernel likelihood is not finite anywhere on the grid")
        return HyperParamEstimate(float(PHI_GRID[0]), NUGGET_FLOOR, -np.inf, True)
    i, j = np.unravel_index(np.nanargmax(np.where(np.isfinite(ll), ll, -np.inf)), ll.shape)
    cur_p, cur_g = lphi[i], lg[j]
    best = ll[i, j]

    def nbr(grid, k):
        return grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]

    pb, gb = nbr(lphi, i), nbr(lg, j)
    for _ in range(3):
        r = optimize.minimize_scalar(lambda t: -_profile_loglik(y, sqd, np.exp(t), np.exp(cur_g)),
                                     bounds=pb, method="bounded", options={"xatol": 1e-6})
        if -r.fun > best:
            cur_p, best = r.x, -r.fun
        r = optimize.minimize_scalar(lambda t: -_profile_loglik(y, sqd, np.exp(cur_p), np.exp(t)),
                                     bounds=gb, method="bounded", options={"xatol": 1e-6})
        if -r.fun > best:
            cur_g, best = r.x, -r.fun

    profile = ll[:, j][np.isfinite(ll[:, j])]
    flat = bool(i in (0, len(lphi) - 1) or np.ptp(profile) < 1e-3)
    if flat:
        log.warning("kernel scale likelihood is flat or peaks at the grid boundary (phi=%g)",
                    np.exp(cur_p))
    eta2 = max(float(np.exp(cur_g)), NUGGET_FLOOR)
    return HyperParamEstimate(float(np.exp(cur_p)), eta2, float(best + shift), flat)
