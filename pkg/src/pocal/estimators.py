"""OLS, projected-kernel and penalized orthogonal (PO) calibration.

With an affine surrogate, the empirical model loss is a quadratic in the shift
u = theta - theta0,

    L(u) = sum_j w_j (r_j - G_j u)^T M_j^{-1} (r_j - G_j u) = u^T A u - 2 b^T u + c,

where r_j = Y_j - F_j - G_j theta0 and M_j = Phi_g + eta2 I. The PO problem
adds lambda * sum_i w_i |u_i| and is solved as a box-constrained weighted
lasso by cyclic coordinate descent with an exact active-set polish.
"""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence, Union

import numpy as np
from scipy import linalg

from .data import PhysicalDataset
from .errors import ConvergenceError, NumericalError, ValidationError
from .kernels import DomainBounds, KernelConfig, ProjectedKernelMatrix, project_kernel, quadratic_form
from .surrogate import LinearSurrogate, estimate_hyperparams

log = logging.getLogger(__name__)

ZERO_TOL = 1e-8
KKT_TOL = 1e-6
MAX_SWEEPS = 100_000


def output_weights(q: int, a: float = 0.2) -> np.ndarray:
    """w_j = exp(-a (q - j)^2), j = 1..q; the last output gets weight 1."""
    j = np.arange(1, q + 1)
    return np.exp(-a * (q - j) ** 2.0)


@dataclass(frozen=True)
class CalibrationResult:
    theta_hat: np.ndarray
    empirical_loss: float
    support: tuple
    estimator_kind: str
    lam: Optional[float] = None
    objective: float = float("nan")
    solver_iterations: int = 0
    converged: bool = True
    at_bound: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    kkt_violation: float = 0.0


def _listify(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


@dataclass(frozen=True, eq=False)
class CalibrationProblem:
    """Everything needed to evaluate the empirical loss and solve for theta.

    ``surrogate`` and ``pk`` are single objects for scalar output or
    equal-length sequences (one per output column). ``penalty_weights`` of
    None means adaptive weights; ``+inf`` entries pin a coordinate at theta0.
    ``pinned`` pins coordinates independently of the weights.
    """

    physical: PhysicalDataset
    surrogate: Union[LinearSurrogate, Sequence[LinearSurrogate]]
    pk: Union[ProjectedKernelMatrix, Sequence[ProjectedKernelMatrix]]
    theta0: np.ndarray
    theta_bounds: DomainBounds
    penalty_weights: Optional[np.ndarray] = None
    output_weights: Optional[np.ndarray] = None
    pinned: Optional[np.ndarray] = None

    def __post_init__(self):
        sur, pks = _listify(self.surrogate), _listify(self.pk)
        q = self.physical.q
        if len(sur) != q or len(pks) != q:
            raise ValidationError(f"need {q} surrogates and projected kernels, got {len(sur)} and {len(pks)}")
        theta0 = np.array(self.theta0, dtype=float).ravel()
        m = theta0.size
        if self.theta_bounds.dim != m or any(s.m != m for s in sur):
            raise ValidationError("theta0, theta_bounds and surrogate disagree on m")
        if not self.theta_bounds.contains(theta0):
            raise ValidationError("theta0 lies outside theta_bounds")
        if any(p.n != self.physical.n for p in pks):
            raise ValidationError("projected kernel size differs from the physical sample size")
        ow = np.ones(q) if self.output_weights is None else np.array(self.output_weights, dtype=float).ravel()
        if ow.size != q or np.any(ow <= 0):
            raise ValidationError(f"output_weights must be {q} positive numbers")
        pw = self.penalty_weights
        if pw is not None:
            pw = np.array(pw, dtype=float).ravel()
            if pw.size != m or np.any(pw < 0) or np.any(np.isnan(pw)):
                raise ValidationError(f"penalty_weights must be {m} nonnegative values")
        pinned = np.zeros(m, bool) if self.pinned is None else np.array(self.pinned, bool).ravel()
        if pinned.size != m:
            raise ValidationError("pinned mask has the wrong length")
        object.__setattr__(self, "surrogate", sur)
        object.__setattr__(self, "pk", pks)
        object.__setattr__(self, "theta0", theta0)
        object.__setattr__(self, "output_weights", ow)
        object.__setattr__(self, "penalty_weights", pw)
        object.__setattr__(self, "pinned", pinned)

    @property
    def m(self) -> int:
        return self.theta0.size

    @property
    def n(self) -> int:
        return self.physical.n

    @property
    def q(self) -> int:
        return self.physical.q

    @property
    def theta_range(self) -> np.ndarray:
        return self.theta_bounds.width

    @property
    def free(self) -> np.ndarray:
        """Coordinates not pinned by the mask or by an infinite user weight."""
        free = ~self.pinned
        if self.penalty_weights is not None:
            free &= np.isfinite(self.penalty_weights)
        return free

    def _y(self, j):
        return self.physical.y if self.q == 1 else self.physical.y[:, j]

    @cached_property
    def _pieces(self):
        # per output: design-point intercepts F_j and gradients G_j
        x = self.physical.x
        return [(s.f_hat(x), s.g_hat(x)) for s in self.surrogate]

    @cached_property
    def _whitened(self):
        """Stacked L^{-1} G and L^{-1} r0 (scaled by sqrt(w_j)) plus Euclidean ones."""
        gw, rw, ge, re = [], [], [], []
        for j, (F, G) in enumerate(self._pieces):
            r0 = self._y(j) - F - G @ self.theta0
            c, low = self.pk[j].regularized_factorization
            L = np.tril(c) if low else np.triu(c).T
            sw = np.sqrt(self.output_weights[j])
            gw.append(sw * linalg.solve_triangular(L, G, lower=True))
            rw.append(sw * linalg.solve_triangular(L, r0, lower=True))
            ge.append(sw * G)
            re.append(sw * r0)
        return np.vstack(gw), np.concatenate(rw), np.vstack(ge), np.concatenate(re)

    @cached_property
    def quadratic(self):
        """(A, b, c) with L(theta0 + u) = u^T A u - 2 b^T u + c."""
        gw, rw, _, _ = self._whitened
        A = gw.T @ gw
        return 0.5 * (A + A.T), gw.T @ rw, float(rw @ rw)

    def predict(self, theta) -> np.ndarray:
        """Surrogate predictions at the physical design, shape (n,) or (n, q)."""
        theta = np.asarray(theta, dtype=float)
        cols = [F + G @ theta for F, G in self._pieces]
        return cols[0] if self.q == 1 else np.column_stack(cols)


def empirical_model_loss(problem: CalibrationProblem, theta) -> float:
    """Weighted sum over outputs of r^T (Phi_g + eta2 I)^{-1} r at ``theta``."""
    theta = np.asarray(theta, dtype=float)
    total = 0.0
    for j, (F, G) in enumerate(problem._pieces):
        r = problem._y(j) - F - G @ theta
        total += problem.output_weights[j] * quadratic_form(problem.pk[j], r)
    return total


def _support(problem, theta):
    d = np.abs(theta - problem.theta0)
    return tuple(int(i) for i in np.flatnonzero(d > ZERO_TOL * problem.theta_range))


def _lstsq_free(G, r, free, label):
    u = np.zeros(G.shape[1])
    idx = np.flatnonzero(free)
    if idx.size == 0:
        return u
    Gf = G[:, idx]
    sol, _, rank, sv = linalg.lstsq(Gf, r)
    if rank < idx.size:
        _, _, vt = linalg.svd(Gf, full_matrices=False)
        null = vt[rank:]
        comps = sorted({int(idx[k]) for row in null for k in np.flatnonzero(np.abs(row) > 0.1)})
        warnings.warn(f"{label}: non-identifiable parameter directions involve components {comps}; "
                      "returning the minimum-norm solution", RuntimeWarning, stacklevel=3)
    u[idx] = sol
    return u


def _finish(problem, u, kind, **extra):
    lo = problem.theta_bounds.lower - problem.theta0
    hi = problem.theta_bounds.upper - problem.theta0
    clipped = np.clip(u, lo, hi)
    at_bound = (clipped != u) | (clipped == lo) | (clipped == hi)
    at_bound &= problem.free | (clipped != 0)
    theta = problem.theta0 + clipped
    return CalibrationResult(
        theta_hat=theta,
        empirical_loss=empirical_model_loss(problem, theta),
        support=_support(problem, theta),
        estimator_kind=kind,
        at_bound=at_bound,
        **extra,
    )


def solve_ols(problem: CalibrationProblem) -> CalibrationResult:
    """Unweighted least squares of the residual on the surrogate gradients."""
    _, _, ge, re = problem._whitened
    u = _lstsq_free(ge, re, problem.free, "OLS")
    return _finish(problem, u, "OLS")


def solve_pk(problem: CalibrationProblem) -> CalibrationResult:
    """Projected-kernel estimator: GLS with weight (Phi_g + eta2 I)^{-1}."""
    gw, rw, _, _ = problem._whitened
    u = _lstsq_free(gw, rw, problem.free, "PK")
    return _finish(problem, u, "PK")


def compute_adaptive_weights(problem: CalibrationProblem) -> np.ndarray:
    """w_i = 1 / |theta_or_i - theta0_i| from the unpenalized PK solution.

    Differences below 1e-8 of the parameter range (and pinned coordinates)
    give +inf, which fixes the coordinate at theta0.
    """
    th = solve_pk(problem).theta_hat
    diff = np.abs(th - problem.theta0)
    with np.errstate(divide="ignore"):
        w = np.where(diff > ZERO_TOL * problem.theta_range, 1.0 / diff, np.inf)
    w[~problem.free] = np.inf
    return w


def penalty_weights(problem: CalibrationProblem) -> np.ndarray:
    """User weights if given, adaptive ones otherwise; pins map to +inf."""
    if problem.penalty_weights is not None:
        w = problem.penalty_weights.copy()
        w[~problem.free] = np.inf
        return w
    if "_adaptive_weights" not in problem.__dict__:
        problem.__dict__["_adaptive_weights"] = compute_adaptive_weights(problem)
    return problem.__dict__["_adaptive_weights"].copy()


# ---------------------------------------------------------------------------
# weighted lasso machinery


def po_objective(A, b, c, u, lam, w) -> float:
    pen = np.where(u != 0, w * np.abs(u), 0.0).sum() if lam > 0 else 0.0
    return float(u @ A @ u - 2 * b @ u + c + lam * pen)


def kkt_violation(A, b, u, lam, w, lo, hi, free) -> np.ndarray:
    """Per-coordinate violation of the box-constrained lasso optimality conditions."""
    grad = 2.0 * (A @ u - b)
    lw = np.where(np.isfinite(w), lam * w, np.inf)
    lw = np.where(lam == 0, 0.0, lw)
    dplus = grad + np.where(u >= 0, lw, -lw)
    dminus = -grad + np.where(u <= 0, lw, -lw)
    viol = np.zeros_like(u)
    up = free & (u < hi)
    down = free & (u > lo)
    viol[up] = np.maximum(viol[up], -dplus[up])
    viol[down] = np.maximum(viol[down], -dminus[down])
    return np.nan_to_num(viol, nan=0.0, posinf=0.0)


def duality_gap(A, b, c, u, lam, w) -> float:
    """Lasso duality gap ignoring the box (diagnostic only)."""
    try:
        R = linalg.cholesky(A)
    except linalg.LinAlgError:
        return float("nan")
    z = linalg.solve_triangular(R, b, trans="T")
    res = z - R @ u
    lim = lam * w / 2
    corr = np.abs(R.T @ res)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(corr > 0, lim / corr, np.inf)
    s = min(1.0, float(np.min(ratio))) if ratio.size else 1.0
    nu = s * res
    dual = z @ z - (z - nu) @ (z - nu)
    primal = po_objective(A, b, c, u, lam, w) - (c - z @ z)
    return float(primal - dual)


def _polish(gw, rw, u, lam, w, lo, hi, free):
    """Exact solve on the current active set; returns None if inconsistent."""
    act = free & (u != 0) & (u > lo) & (u < hi)
    fixed = free & ~act
    out = u.copy()
    out[~free] = 0.0
    idx = np.flatnonzero(act)
    if idx.size == 0:
        return out
    r = rw - gw[:, fixed] @ out[fixed]
    Ga = gw[:, idx]
    q, rr = linalg.qr(Ga, mode="economic")
    if np.min(np.abs(np.diag(rr))) < 1e-12 * np.max(np.abs(np.diag(rr))):
        return None
    rhs = q.T @ r
    if lam > 0:
        rhs = rhs - linalg.solve_triangular(rr, lam * w[idx] * np.sign(u[idx]) / 2, trans="T")
    ua = linalg.solve_triangular(rr, rhs)
    if np.any(np.sign(ua) != np.sign(u[idx])) or np.any(ua <= lo[idx]) or np.any(ua >= hi[idx]):
        return None
    out[idx] = ua
    return out


def _coordinate_descent(problem, lam, w, u0):
    A, b, c = problem.quadratic
    gw, rw, _, _ = problem._whitened
    m = problem.m
    lo = problem.theta_bounds.lower - problem.theta0
    hi = problem.theta_bounds.upper - problem.theta0
    free = np.isfinite(w) & problem.free
    tol = 1e-10 * problem.theta_range
    wl = np.where(free, w, 0.0)
    thr = lam * wl / 2
    gscale = max(1.0, float(np.max(np.abs(2 * b))) if m else 1.0)

    u = np.where(free, np.clip(u0, lo, hi), 0.0)
    obj = po_objective(A, b, c, u, lam, wl)
    idx = np.flatnonzero(free)
    for sweep in range(1, MAX_SWEEPS + 1):
        maxchg = np.zeros(m)
        for i in idx:
            rho = b[i] - A[i] @ u + A[i, i] * u[i]
            aii = A[i, i]
            if aii > 0:
                new = np.sign(rho) * max(abs(rho) - thr[i], 0.0) / aii
            else:
                new = 0.0 if abs(rho) <= thr[i] else (hi[i] if rho > 0 else lo[i])
            new = min(max(new, lo[i]), hi[i])
            maxchg[i] = abs(new - u[i])
            u[i] = new
        new_obj = po_objective(A, b, c, u, lam, wl)
        if new_obj > obj + 1e-12 * max(1.0, abs(obj)):
            raise NumericalError(f"coordinate descent increased the objective ({obj!r} -> {new_obj!r})")
        obj = new_obj
        done = np.all(maxchg <= tol)
        if done or sweep % 10 == 0:
            pol = _polish(gw, rw, u, lam, wl, lo, hi, free)
            if pol is not None:
                pobj = po_objective(A, b, c, pol, lam, wl)
                viol = kkt_violation(A, b, pol, lam, wl, lo, hi, free).max(initial=0.0)
                if pobj <= obj + 1e-12 * max(1.0, abs(obj)) and viol <= KKT_TOL * gscale:
                    return pol, sweep, viol
            if done:
                viol = kkt_violation(A, b, u, lam, wl, lo, hi, free).max(initial=0.0)
                return u, sweep, viol
    viol = kkt_violation(A, b, u, lam, wl, lo, hi, free).max(initial=0.0)
    gap = duality_gap(A, b, c, u, lam, wl)
    raise ConvergenceError(
        f"coordinate descent did not converge in {MAX_SWEEPS} sweeps "
        f"(duality gap {gap:.3g}, max KKT violation {viol:.3g})",
        duality_gap=gap,
        kkt_violation=viol,
    )


def solve_po(
    problem: CalibrationProblem,
    lam: float,
    weights: Optional[np.ndarray] = None,
    warm_start: Optional[np.ndarray] = None,
) -> CalibrationResult:
    """Penalized orthogonal calibration at penalty ``lam``.

    Minimizes the empirical model loss plus lam * sum_i w_i |theta_i - theta0_i|
    over the theta box. Coordinates with infinite weight stay at theta0
    exactly. ``warm_start`` is a theta vector to start from.
    """
    if not lam >= 0:
        raise ValidationError(f"lambda must be nonnegative, got {lam}")
    w = penalty_weights(problem) if weights is None else np.array(weights, dtype=float)
    if w.size != problem.m or np.any(w < 0):
        raise ValidationError("weights must be m nonnegative values")
    u0 = np.zeros(problem.m) if warm_start is None else np.asarray(warm_start, float) - problem.theta0
    u, sweeps, viol = _coordinate_descent(problem, float(lam), w, u0)
    A, b, c = problem.quadratic
    wl = np.where(np.isfinite(w) & problem.free, w, 0.0)
    theta = problem.theta0 + u
    # pinned coordinates copy theta0 bit for bit
    theta[~(np.isfinite(w) & problem.free)] = problem.theta0[~(np.isfinite(w) & problem.free)]
    lo, hi = problem.theta_bounds.lower, problem.theta_bounds.upper
    return CalibrationResult(
        theta_hat=theta,
        empirical_loss=empirical_model_loss(problem, theta),
        support=_support(problem, theta),
        estimator_kind="PO",
        lam=float(lam),
        objective=po_objective(A, b, c, u, lam, wl),
        solver_iterations=sweeps,
        converged=True,
        at_bound=(theta <= lo) | (theta >= hi),
        kkt_violation=float(viol),
    )


def build_problem(
    physical: PhysicalDataset,
    surrogate,
    theta0,
    theta_bounds: DomainBounds,
    kernel: Optional[Union[KernelConfig, Sequence[KernelConfig]]] = None,
    mc_samples: int = 4096,
    seed: int = 0,
    penalty_weights=None,
    output_weights=None,
    pinned=None,
    reduce: bool = False,
    workers: int = 1,
) -> CalibrationProblem:
    """Assemble a CalibrationProblem, building one projected kernel per output.

    When ``kernel`` is None, phi and eta2 are estimated per output by maximum
    likelihood. Pinned coordinates (mask or infinite weight) are left out of
    the projection because they are not estimated. ``reduce`` is forwarded to
    :func:`project_kernel`; ``workers > 1`` builds the per-output kernels on a
    thread pool.
    """
    sur = _listify(surrogate)
    q = physical.q
    m = sur[0].m
    free = np.ones(m, bool)
    if pinned is not None:
        free &= ~np.asarray(pinned, bool)
    if penalty_weights is not None:
        free &= np.isfinite(np.asarray(penalty_weights, float))
    idx = np.flatnonzero(free)
    configs = _listify(kernel) if kernel is not None else [None] * q
    if len(configs) == 1 and q > 1:
        configs = configs * q

    def build(j):
        cfg = configs[j]
        if cfg is None:
            est = estimate_hyperparams(physical, output=j if q > 1 else None)
            cfg = KernelConfig(phi=est.phi, eta2=est.eta2, mc_samples=mc_samples, seed=seed)
        s = sur[j]
        grad = (lambda x, s=s: s.g_hat(x)[:, idx]) if idx.size else None
        return project_kernel(grad, physical.x, physical.bounds, cfg, reduce=reduce)

    if workers > 1 and q > 1:
        with ThreadPoolExecutor(min(workers, q)) as ex:
            pks = list(ex.map(build, range(q)))
    else:
        pks = [build(j) for j in range(q)]
    return CalibrationProblem(
        physical=physical,
        surrogate=sur if q > 1 else sur[0],
        pk=pks if q > 1 else pks[0],
        theta0=theta0,
        theta_bounds=theta_bounds,
        penalty_weights=penalty_weights,
        output_weights=output_weights,
        pinned=pinned,
    )
