"""Lambda paths, BIC selection, Sobol screening and variable classification."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import DegenerateModelError, ValidationError
from .estimators import CalibrationProblem, penalty_weights, solve_po
from .kernels import DomainBounds
from .surrogate import LinearSurrogate

log = logging.getLogger(__name__)

INSENSITIVE = "insensitive"
SENSITIVE_INSENSIBLE = "sensitive-insensible"
SENSIBLE = "sensible"


@dataclass(frozen=True)
class PathPoint:
    lam: float
    theta_hat: np.ndarray
    support: tuple
    empirical_loss: float
    bic: float
    delta: np.ndarray

    @property
    def support_size(self) -> int:
        return len(self.support)


@dataclass(frozen=True)
class LambdaPath:
    entries: tuple
    selected_index: int
    weights: np.ndarray
    theta0: np.ndarray
    n: int

    @property
    def selected(self) -> PathPoint:
        return self.entries[self.selected_index]

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([e.lam for e in self.entries])

    @property
    def deltas(self) -> np.ndarray:
        return np.array([e.delta for e in self.entries])

    def at(self, lam: float) -> PathPoint:
        """Entry whose lambda equals ``lam`` (closest on the grid)."""
        return self.entries[int(np.argmin(np.abs(self.lambdas - lam)))]


def bic(loss: float, support_size: int, n: int) -> float:
    """log(loss / n) + |S| log(n) / n; NaN when the loss is not positive."""
    if not loss > 0:
        return float("nan")
    return math.log(loss / n) + support_size * math.log(n) / n


def lambda_max(problem: CalibrationProblem, weights=None) -> float:
    """Smallest lambda at which u = 0 satisfies the optimality conditions."""
    w = penalty_weights(problem) if weights is None else np.asarray(weights, float)
    _, b, _ = problem.quadratic
    free = np.isfinite(w) & problem.free
    if not np.any(free):
        return 0.0
    with np.errstate(divide="ignore"):
        vals = np.where(w[free] > 0, 2 * np.abs(b[free]) / w[free], np.inf)
    return float(np.max(vals))


def default_lambda_grid(problem: CalibrationProblem, n_points: int = 60, ratio: float = 1e-4,
                        weights=None) -> np.ndarray:
    """0 followed by ``n_points`` log-spaced values in [ratio * lmax, lmax]."""
    lmax = lambda_max(problem, weights)
    if not np.isfinite(lmax) or lmax <= 0:
        return np.array([0.0])
    return np.concatenate([[0.0], np.logspace(np.log10(lmax * ratio), np.log10(lmax), n_points)])


def compute_path(
    problem: CalibrationProblem,
    grid: Optional[Sequence[float]] = None,
    weights=None,
    warm_start: bool = True,
) -> LambdaPath:
    """Solve PO along ``grid`` (0 is always included) and select lambda by BIC.

    Entries with zero empirical loss have an undefined BIC; they are kept in
    the path but excluded from the argmin. Ties go to the larger lambda.
    """
    w = penalty_weights(problem) if weights is None else np.asarray(weights, float)
    if grid is None:
        lams = default_lambda_grid(problem, weights=w)
    else:
        lams = np.asarray(list(grid), dtype=float).ravel()
        if lams.size == 0 or np.any(lams < 0) or np.any(~np.isfinite(lams)):
            raise ValidationError("lambda grid must be a nonempty list of finite values >= 0")
        lams = np.unique(np.concatenate([[0.0], lams]))
    n = problem.n
    entries = []
    prev = None
    for lam in lams:
        res = solve_po(problem, lam, weights=w, warm_start=prev if warm_start else None)
        prev = res.theta_hat
        delta = np.abs(res.theta_hat - problem.theta0)
        entries.append(PathPoint(float(lam), res.theta_hat, res.support, res.empirical_loss,
                                 bic(res.empirical_loss, len(res.support), n), delta))
    b = np.array([e.bic for e in entries])
    ok = np.isfinite(b)
    if not np.all(ok):
        log.warning("BIC undefined (zero loss) at %d path entries; excluded from selection",
                    int(np.sum(~ok)))
    if np.any(ok):
        best = np.nanmin(b[ok])
        sel = int(np.flatnonzero(ok & (b == best))[-1])
    else:
        sel = len(entries) - 1
    return LambdaPath(tuple(entries), sel, w, problem.theta0.copy(), n)


# ---------------------------------------------------------------------------
# Sobol total-effect indices


@dataclass(frozen=True)
class SobolIndices:
    total: np.ndarray
    stderr: np.ndarray
    clipped: np.ndarray  # magnitude of negative raw estimates set to 0


def _model_fn(model):
    if isinstance(model, LinearSurrogate):
        return model.predict
    return model


def sobol_total_indices(
    model: Union[Callable, LinearSurrogate],
    x_bounds: DomainBounds,
    theta_bounds: DomainBounds,
    samples: int = 4096,
    seed=None,
) -> SobolIndices:
    """Total-effect indices of the calibration parameters.

    Pick-and-freeze with Jansen's estimator on independent uniform samples of
    (x, theta); x enters as extra random inputs. ``model(x, theta)`` must be
    vectorized over rows.
    """
    if samples < 1024:
        raise ValidationError("samples must be at least 1024")
    f = _model_fn(model)
    d, m = x_bounds.dim, theta_bounds.dim
    rng = np.random.default_rng(seed)
    A = rng.random((samples, d + m))
    B = rng.random((samples, d + m))

    def ev(u):
        return np.asarray(f(x_bounds.from_unit(u[:, :d]), theta_bounds.from_unit(u[:, d:])), float)

    fa, fb = ev(A), ev(B)
    var = np.var(np.concatenate([fa, fb]))
    if not var > 1e-14 * max(1.0, float(np.mean(np.concatenate([fa, fb]) ** 2))):
        raise DegenerateModelError("model output has zero variance over the sampling box")
    total = np.empty(m)
    se = np.empty(m)
    for i in range(m):
        ab = A.copy()
        ab[:, d + i] = B[:, d + i]
        diff2 = (fa - ev(ab)) ** 2
        total[i] = diff2.mean() / (2 * var)
        se[i] = diff2.std(ddof=1) / np.sqrt(samples) / (2 * var)
    clipped = np.where(total < 0, -total, 0.0)
    return SobolIndices(np.clip(total, 0.0, 1.0), se, clipped)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VariableClassification:
    labels: tuple
    sobol_total: np.ndarray
    adjusted_at_selected_lambda: np.ndarray

    def indices(self, label: str) -> list:
        return [i for i, lab in enumerate(self.labels) if lab == label]


def classify_variables(path: LambdaPath, sobol, sobol_floor: float = 0.01) -> VariableClassification:
    """Label each parameter insensitive, sensitive-insensible or sensible.

    Insensitive: Sobol total index below ``sobol_floor``. Otherwise sensible if
    the BIC-selected PO estimate moved it off theta0, else sensitive-insensible.
    """
    s = np.asarray(getattr(sobol, "total", sobol), dtype=float)
    if s.size != path.theta0.size:
        raise ValidationError("sobol vector length differs from the number of parameters")
    adjusted = np.zeros(s.size, bool)
    adjusted[list(path.selected.support)] = True
    labels = []
    for i in range(s.size):
        if s[i] < sobol_floor:
            labels.append(INSENSITIVE)
        elif adjusted[i]:
            labels.append(SENSIBLE)
        else:
            labels.append(SENSITIVE_INSENSIBLE)
    return VariableClassification(tuple(labels), s, adjusted)
