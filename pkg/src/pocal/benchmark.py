"""Synthetic four-input, ten-parameter calibration benchmark.

The true process and the computer model share most structure; parameters 7-9
never enter the computer model. Integrated error (IE) is the squared L2
distance between the two over [0, 1]^4, estimated on scrambled Sobol' nodes.
"""
from __future__ import annotations

import csv
import io
import logging
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize
from scipy.stats import qmc

from .data import ComputerDataset, PhysicalDataset
from .errors import CalibrationError, StudyError, ValidationError
from .estimators import build_problem, empirical_model_loss, solve_ols, solve_pk, solve_po
from .kernels import DomainBounds
from .selection import compute_path, sobol_total_indices
from .surrogate import estimate_gp_params, fit_gp, fit_parametric, maximin_lhs

log = logging.getLogger(__name__)

D = 4
M = 10
THETA0 = np.array([0.0, 0.0, 1.0, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 7.0])
ACTIVE = np.array([0, 1, 2, 3, 4, 5, 9])
INACTIVE = np.array([6, 7, 8])
X_BOUNDS = DomainBounds.unit(D)
# must cover THETA0 and the L2-optimal parameters of this model
THETA_BOX = DomainBounds(np.r_[np.full(9, -1.0), -1.0], np.r_[np.full(9, 3.0), 8.0])


def _split(x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != D:
        raise ValidationError(f"benchmark inputs have {D} columns, got {x.shape[1]}")
    return x.T


def _radical(x1, x2, x3, x4):
    # x1 * sqrt(1 + (x2 + x3^2) x4 / x1^2) == sqrt(x1^2 + (x2 + x3^2) x4), finite at x1 = 0
    return np.sqrt(x1**2 + (x2 + x3**2) * x4)


def true_process(x) -> np.ndarray:
    """Physical response over [0, 1]^4, vectorized over rows.

    The first term is evaluated as a / (2 (sqrt(x1^2 + a) + x1)) with
    a = (x2 + x3^2) x4, algebraically equal to the original expression for
    x1 > 0, free of cancellation, and equal to sqrt(a) / 2 at x1 = 0.
    """
    x1, x2, x3, x4 = _split(x)
    a = (x2 + x3**2) * x4
    s = _radical(x1, x2, x3, x4)
    with np.errstate(invalid="ignore", divide="ignore"):
        first = np.where(s + x1 > 0, a / (2 * (s + x1)), 0.0)
    return first + (x1 + 3 * x4) * np.exp(1 + np.sin(x3))


def computer_model_basis(x):
    """Return (base, grad) with computer_model(x, theta) = base + grad @ theta."""
    x1, x2, x3, x4 = _split(x)
    s = _radical(x1, x2, x3, x4)
    es = np.exp(np.sin(x3))
    base = s / 2 + x1 * es
    grad = np.zeros((x1.size, M))
    grad[:, 0] = np.sin(x1) * s / 2
    grad[:, 1] = x2**2 * es
    grad[:, 2] = 3 * x4 * es
    grad[:, 3] = x1
    grad[:, 4] = x2**2
    grad[:, 5] = x3**2
    grad[:, 9] = 1.0
    return base, grad


def computer_model(x, theta) -> np.ndarray:
    """Simulator output; ``theta`` is one 10-vector or one row per point."""
    theta = np.asarray(theta, dtype=float)
    base, grad = computer_model_basis(x)
    if theta.ndim == 1:
        if theta.size != M:
            raise ValidationError(f"theta must have {M} entries")
        return base + grad @ theta
    return base + np.einsum("ij,ij->i", grad, theta)


class IntegratedError:
    """IE(theta) = int (zeta - y_s(., theta))^2 dx on fixed quadrature nodes.

    The computer model is affine in theta, so IE is an exact quadratic on the
    node set: IE(theta) = theta' Q theta - 2 p' theta + c.
    """

    def __init__(self, nodes: int = 2**16, seed: int = 0):
        if nodes < 2**14:
            raise ValidationError("integrated error needs at least 2^14 nodes")
        k = int(np.ceil(np.log2(nodes)))
        self.nodes = qmc.Sobol(D, scramble=True, seed=seed).random_base2(k)
        base, grad = computer_model_basis(self.nodes)
        resid = true_process(self.nodes) - base
        N = self.nodes.shape[0]
        self._grad = grad
        self._resid = resid
        self.Q = grad.T @ grad / N
        self.p = grad.T @ resid / N
        self.c = float(resid @ resid / N)

    def __call__(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        r = self._resid - self._grad @ theta
        return float(np.mean(r * r))


_IE_CACHE: dict = {}


def ie_evaluator(nodes: int = 2**16, seed: int = 0) -> IntegratedError:
    key = (int(nodes), seed)
    if key not in _IE_CACHE:
        _IE_CACHE[key] = IntegratedError(nodes, seed)
    return _IE_CACHE[key]


def integrated_error(theta, nodes: int = 2**16, seed: int = 0) -> float:
    """Integrated squared discrepancy between the true process and the simulator."""
    return ie_evaluator(nodes, seed)(theta)


@dataclass(frozen=True)
class OracleResult:
    theta: np.ndarray          # 10-vector; undefined coordinates hold THETA0 values
    defined: np.ndarray        # False for the parameters that do not enter the model
    ie: float
    minima: tuple              # (theta, ie) for every start


def optimal_theta_oracle(nodes: int = 2**16, seed: int = 0, starts: int = 5,
                         box: Optional[DomainBounds] = None) -> OracleResult:
    """L2-optimal parameters by BFGS on IE from THETA0 plus random starts."""
    obj = ie_evaluator(nodes, seed)
    box = box or THETA_BOX
    rng = np.random.default_rng(seed)

    def full(t7):
        th = THETA0.copy()
        th[ACTIVE] = t7
        return th

    def f(t7):
        return obj(full(t7))

    def grad(t7):
        th = full(t7)
        return 2 * (obj.Q @ th - obj.p)[ACTIVE]

    starts_ = [THETA0[ACTIVE]] + [box.from_unit(rng.random(M))[ACTIVE] for _ in range(starts)]
    minima = []
    for s in starts_:
        r = optimize.minimize(f, s, jac=grad, method="BFGS", options={"gtol": 1e-12, "maxiter": 10_000})
        minima.append((full(r.x), float(r.fun)))
    ies = np.array([v for _, v in minima])
    best = int(np.argmin(ies))
    if np.ptp(ies) > 1e-3:
        warnings.warn(f"multistart minima disagree in IE: {ies}", RuntimeWarning, stacklevel=2)
    defined = np.ones(M, bool)
    defined[INACTIVE] = False
    return OracleResult(minima[best][0], defined, minima[best][1], tuple(minima))


def sobol_screening(samples: int = 8192, seed=0, theta_box: DomainBounds = THETA_BOX):
    """Total Sobol indices of the ten parameters of the computer model."""
    return sobol_total_indices(computer_model, X_BOUNDS, theta_box, samples=samples, seed=seed)


# ---------------------------------------------------------------------------
# Monte-Carlo study

SENSIBLE_TARGET = (2, 3, 9)     # zero-based indices of theta_3, theta_4, theta_10
RE_COORDS = (2, 3, 9)
ESTIMATORS = ("theta0", "OLS", "PK", "PO")


@dataclass(frozen=True)
class BenchmarkConfig:
    n: int = 50
    noise_sd: float = 0.1
    replicates: int = 100
    theta0: tuple = tuple(THETA0)
    seed: int = 0
    ie_nodes: int = 2**16
    ie_seed: int = 0
    computer_runs: int = 400
    degree: int = 2
    g_degree: int = 2
    surrogate: str = "parametric"
    mc_samples: int = 4096
    theta_lower: tuple = tuple(THETA_BOX.lower)
    theta_upper: tuple = tuple(THETA_BOX.upper)
    report_lambdas: tuple = (0.1,)
    workers: int = 1
    max_failure_rate: float = 0.05

    def __post_init__(self):
        if self.n < 10:
            raise ValidationError("n must be at least 10")
        if not self.noise_sd > 0:
            raise ValidationError("noise_sd must be positive")
        if self.replicates < 1:
            raise ValidationError("replicates must be at least 1")
        if self.surrogate not in ("parametric", "gp"):
            raise ValidationError("surrogate must be 'parametric' or 'gp'")
        if len(self.theta0) != M:
            raise ValidationError(f"theta0 must have {M} entries")

    @property
    def theta_box(self) -> DomainBounds:
        return DomainBounds(np.array(self.theta_lower), np.array(self.theta_upper))


@dataclass
class ReplicateResult:
    index: int
    theta: dict                 # estimator -> 10-vector
    ie: dict                    # estimator -> IE
    phi: float
    eta2: float
    weights: np.ndarray
    selected_lambda: float
    support: tuple
    lambdas: np.ndarray
    deltas: np.ndarray          # (len(lambdas), 10)
    delta_at: dict              # report lambda -> 10-vector of |theta - theta0|
    loss_lambda0: float
    loss_selected: float
    loss_theta0: float
    max_kkt: float              # relative to max |gradient at theta0|


def _replicate_problem(cfg: BenchmarkConfig, rng: np.random.Generator):
    theta0 = np.array(cfg.theta0, dtype=float)
    box = cfg.theta_box
    X = rng.random((cfg.n, D))
    Y = true_process(X) + cfg.noise_sd * rng.standard_normal(cfg.n)
    physical = PhysicalDataset(X, Y, X_BOUNDS, noise_variance_hint=cfg.noise_sd**2)

    joint = DomainBounds(np.r_[X_BOUNDS.lower, box.lower], np.r_[X_BOUNDS.upper, box.upper])
    Z = maximin_lhs(cfg.computer_runs, joint, seed=rng)
    comp = ComputerDataset(Z[:, :D], Z[:, D:], computer_model(Z[:, :D], Z[:, D:]), X_BOUNDS, box)
    if cfg.surrogate == "gp":
        sur = fit_gp(comp, estimate_gp_params(comp))
    else:
        sur = fit_parametric(comp, cfg.degree, cfg.g_degree)
    return build_problem(physical, sur, theta0, box, mc_samples=cfg.mc_samples,
                         seed=int(rng.integers(2**31)))


def replicate_problem(cfg: BenchmarkConfig, seed_seq):
    """The calibration problem of one replicate (data, surrogate, projected kernel)."""
    return _replicate_problem(cfg, np.random.default_rng(seed_seq))


def simulate_replicate(cfg: BenchmarkConfig, seed_seq, index: int = 0) -> ReplicateResult:
    """One replicate: data, surrogate, kernel, OLS / PK / BIC-selected PO."""
    rng = np.random.default_rng(seed_seq)
    theta0 = np.array(cfg.theta0, dtype=float)
    problem = _replicate_problem(cfg, rng)
    ols, pk = solve_ols(problem), solve_pk(problem)
    path = compute_path(problem)
    delta_at = {}
    for lam in cfg.report_lambdas:
        r = solve_po(problem, lam)
        delta_at[float(lam)] = np.abs(r.theta_hat - theta0)
    gscale = max(1.0, float(np.max(np.abs(2 * problem.quadratic[1]))))
    kkt = max(solve_po(problem, e.lam).kkt_violation
              for e in path.entries[:: max(1, len(path.entries) // 6)]) / gscale
    ie = ie_evaluator(cfg.ie_nodes, cfg.ie_seed)
    thetas = {"theta0": theta0, "OLS": ols.theta_hat, "PK": pk.theta_hat, "PO": path.selected.theta_hat}
    return ReplicateResult(
        index=index,
        theta=thetas,
        ie={k: ie(v) for k, v in thetas.items()},
        phi=problem.pk[0].phi,
        eta2=problem.pk[0].eta2,
        weights=path.weights,
        selected_lambda=path.selected.lam,
        support=path.selected.support,
        lambdas=path.lambdas,
        deltas=path.deltas,
        delta_at=delta_at,
        loss_lambda0=path.entries[0].empirical_loss,
        loss_selected=path.selected.empirical_loss,
        loss_theta0=empirical_model_loss(problem, theta0),
        max_kkt=kkt,
    )


def _run_one(args):
    cfg, ss, i = args
    try:
        return simulate_replicate(cfg, ss, i)
    except (CalibrationError, np.linalg.LinAlgError) as exc:
        return (i, f"{type(exc).__name__}: {exc}")


@dataclass
class BenchmarkReport:
    config: BenchmarkConfig
    theta_star: np.ndarray
    ie_star: float
    mean_ie: dict
    mean_theta: dict
    mean_re: dict               # estimator -> {coordinate index: mean RE}
    selection_frequency: np.ndarray
    exact_sensible_fraction: float
    zero_at_lambda_fraction: dict
    curve_ratio: np.ndarray
    curve_mean_lambda: np.ndarray
    curve_mean_delta: np.ndarray
    replicates: list
    failures: list = field(default_factory=list)
    runtime_s: float = 0.0


def relative_errors(theta, theta_star, coords=RE_COORDS) -> dict:
    """|theta_i - theta*_i| / |theta*_i|; coordinates with |theta*_i| < 1e-6 are skipped."""
    out = {}
    for i in coords:
        if abs(theta_star[i]) >= 1e-6:
            out[i] = abs(theta[i] - theta_star[i]) / abs(theta_star[i])
    return out


def run_study(cfg: BenchmarkConfig = BenchmarkConfig()) -> BenchmarkReport:
    """Run ``cfg.replicates`` independent replicates and aggregate them."""
    t0 = time.perf_counter()
    oracle = optimal_theta_oracle(cfg.ie_nodes, cfg.ie_seed)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.replicates)
    jobs = [(cfg, s, i) for i, s in enumerate(seeds)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            outs = list(ex.map(_run_one, jobs))
    else:
        outs = [_run_one(j) for j in jobs]
    reps = [o for o in outs if isinstance(o, ReplicateResult)]
    fails = [o for o in outs if not isinstance(o, ReplicateResult)]
    if len(fails) > cfg.max_failure_rate * cfg.replicates:
        raise StudyError(f"{len(fails)} of {cfg.replicates} replicates failed; first: {fails[0][1]}")
    if fails:
        log.warning("%d replicates failed and were excluded", len(fails))

    ts = oracle.theta
    mean_ie = {k: float(np.mean([r.ie[k] for r in reps])) for k in ESTIMATORS}
    mean_ie["theta*"] = oracle.ie
    mean_theta = {k: np.mean([r.theta[k] for r in reps], axis=0) for k in ESTIMATORS}
    mean_re = {}
    for k in ("OLS", "PK", "PO"):
        res = [relative_errors(r.theta[k], ts) for r in reps]
        mean_re[k] = {i: float(np.mean([x[i] for x in res])) for i in res[0]}
    adjusted = np.array([[i in r.support for i in range(M)] for r in reps])
    target = set(SENSIBLE_TARGET)
    exact = float(np.mean([set(r.support) == target for r in reps]))
    zero_frac = {}
    insens = [i for i in range(M) if i not in target]
    for lam in cfg.report_lambdas:
        zero_frac[float(lam)] = float(np.mean([np.all(r.delta_at[float(lam)][insens] == 0) for r in reps]))
    lmax = np.array([r.lambdas[-1] for r in reps])
    ratio = np.mean([r.lambdas / lm if lm > 0 else r.lambdas for r, lm in zip(reps, lmax)], axis=0)
    return BenchmarkReport(
        config=cfg,
        theta_star=ts,
        ie_star=oracle.ie,
        mean_ie=mean_ie,
        mean_theta=mean_theta,
        mean_re=mean_re,
        selection_frequency=adjusted.mean(axis=0),
        exact_sensible_fraction=exact,
        zero_at_lambda_fraction=zero_frac,
        curve_ratio=ratio,
        curve_mean_lambda=np.mean([r.lambdas for r in reps], axis=0),
        curve_mean_delta=np.mean([r.deltas for r in reps], axis=0),
        replicates=reps,
        failures=fails,
        runtime_s=time.perf_counter() - t0,
    )


def _atomic_write(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _fmt(v):
    return repr(float(v))


def write_report(report: BenchmarkReport, outdir: str) -> dict:
    """Write report.txt, estimates.csv and lambda_curve.csv into ``outdir``."""
    os.makedirs(outdir, exist_ok=True)
    cfg = report.config
    lines = [f"{k} = {v}" for k, v in asdict(cfg).items()]
    lines += [
        f"replicates_ok = {len(report.replicates)}",
        f"replicates_failed = {len(report.failures)}",
        "theta_star = " + " ".join(_fmt(v) for v in report.theta_star),
        f"ie_theta_star = {_fmt(report.ie_star)}",
    ]
    for k, v in report.mean_ie.items():
        lines.append(f"mean_ie.{k} = {_fmt(v)}")
    for k, v in report.mean_theta.items():
        lines.append(f"mean_theta.{k} = " + " ".join(_fmt(x) for x in v))
    for k, d in report.mean_re.items():
        for i, v in d.items():
            lines.append(f"mean_re.{k}.theta_{i + 1} = {_fmt(v)}")
    lines.append("selection_frequency = " + " ".join(_fmt(v) for v in report.selection_frequency))
    lines.append(f"exact_sensible_fraction = {_fmt(report.exact_sensible_fraction)}")
    for lam, v in report.zero_at_lambda_fraction.items():
        lines.append(f"insensible_zero_fraction.lambda_{lam:g} = {_fmt(v)}")
    lines.append("loss_used_for_bic = empirical")
    for i, msg in report.failures:
        lines.append(f"failure.{i} = {msg}")
    paths = {"report": os.path.join(outdir, "report.txt"),
             "estimates": os.path.join(outdir, "estimates.csv"),
             "curve": os.path.join(outdir, "lambda_curve.csv")}
    _atomic_write(paths["report"], "\n".join(lines) + "\n")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["replicate", "estimator", "ie"] + [f"theta_{i + 1}" for i in range(M)])
    for r in report.replicates:
        for k in ESTIMATORS:
            w.writerow([r.index, k, _fmt(r.ie[k])] + [_fmt(v) for v in r.theta[k]])
    _atomic_write(paths["estimates"], buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "lambda_over_lambda_max", "mean_lambda"] + [f"mean_delta_{i + 1}" for i in range(M)])
    for k in range(report.curve_ratio.size):
        w.writerow([k, _fmt(report.curve_ratio[k]), _fmt(report.curve_mean_lambda[k])]
                   + [_fmt(v) for v in report.curve_mean_delta[k]])
    _atomic_write(paths["curve"], buf.getvalue())
    return paths
