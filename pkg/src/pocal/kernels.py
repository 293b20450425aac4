"""Gaussian kernels and the projected kernel matrix.

The projected kernel removes from a Gaussian kernel the directions spanned by
the simulator's parameter gradients, so that a residual weighted by its inverse
is blind to anything the calibration parameters can explain:

    Phi_g(x, x') = Phi(x, x') - h(x)^T H^{-1} h(x')
    h(x) = int g(u) Phi(u, x) du,   H = int int g(u) g(v)^T Phi(u, v) du dv

The integrals are computed on scrambled low-discrepancy nodes. All kernel
evaluations happen on inputs rescaled to the unit cube, so ``phi`` is in
standardized units.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist
from scipy.stats import qmc

from .errors import RegularizationError, SingularProjectionError, ValidationError

COND_LIMIT = 1e12
_BLOCK = 1024


@dataclass(frozen=True)
class DomainBounds:
    """Axis-aligned box of control-variable ranges in original units."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.ndim != 1 or lower.shape != upper.shape or lower.size < 1:
            raise ValidationError("bounds must be two vectors of equal length >= 1")
        if not np.all(lower < upper):
            bad = np.flatnonzero(~(lower < upper)).tolist()
            raise ValidationError(f"lower must be < upper in every coordinate (violated at {bad})")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def unit(cls, d: int) -> "DomainBounds":
        return cls(np.zeros(d), np.ones(d))

    @classmethod
    def from_data(cls, x, pad: float = 0.0) -> "DomainBounds":
        """Tightest box around the rows of ``x``; degenerate columns get width 1."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo, hi = x.min(axis=0), x.max(axis=0)
        width = hi - lo
        flat = width <= 0
        lo = np.where(flat, lo - 0.5, lo - pad * width)
        hi = np.where(flat, hi + 0.5, hi + pad * width)
        return cls(lo, hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def to_unit(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.lower) / self.width

    def from_unit(self, u) -> np.ndarray:
        return self.lower + np.asarray(u, dtype=float) * self.width

    def contains(self, x, rtol: float = 1e-12) -> bool:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tol = rtol * self.width
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))


@dataclass(frozen=True)
class KernelConfig:
    """Kernel scale, nugget and quadrature settings."""

    phi: float = 1.0
    eta2: float = 1e-2
    mc_samples: int = 4096
    seed: int = 0

    def __post_init__(self):
        if not self.phi > 0:
            raise ValidationError(f"phi must be positive, got {self.phi}")
        if not self.eta2 >= 0:
            raise ValidationError(f"eta2 must be nonnegative, got {self.eta2}")
        if int(self.mc_samples) < 1:
            raise ValidationError(f"mc_samples must be >= 1, got {self.mc_samples}")


def gaussian_kernel(xi, xj, phi: float) -> float:
    """exp(-phi * ||xi - xj||^2) for two points."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    xj = np.atleast_1d(np.asarray(xj, dtype=float))
    if xi.shape != xj.shape:
        raise ValidationError(f"dimension mismatch: {xi.shape} vs {xj.shape}")
    if not phi > 0:
        raise ValidationError("phi must be positive")
    return float(np.exp(-phi * np.sum((xi - xj) ** 2)))


def gaussian_kernel_matrix(a, b, phi: float) -> np.ndarray:
    """Matrix of gaussian_kernel over the rows of ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return np.exp(-phi * cdist(a, b, "sqeuclidean"))


def _kernel_matmul(a, b, w, phi):
    # Phi(a, b) @ w without holding the full kernel block in memory
    out = np.empty((a.shape[0], w.shape[1]))
    for start in range(0, a.shape[0], _BLOCK):
        stop = start + _BLOCK
        out[start:stop] = gaussian_kernel_matrix(a[start:stop], b, phi) @ w
    return out


def quadrature_nodes(d: int, n: int, seed: int = 0) -> np.ndarray:
    """Scrambled low-discrepancy nodes in [0, 1]^d.

    Sobol' points when ``n`` is a power of two (keeps the balance property),
    scrambled Halton otherwise.
    """
    n = int(n)
    if n & (n - 1) == 0:
        return qmc.Sobol(d, scramble=True, seed=seed).random_base2(int(np.log2(n)))
    return qmc.Halton(d, scramble=True, seed=seed).random(n)


def _as_gradient_values(gradient, x, n):
    if gradient is None:
        return np.zeros((n, 0))
    g = np.asarray(gradient(x), dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    if g.shape[0] != n:
        raise ValidationError(f"gradient returned {g.shape[0]} rows for {n} points")
    return g


@dataclass(frozen=True, eq=False)
class ProjectedKernelMatrix:
    """Projected kernel on a fixed design plus the cached (Phi_g + eta2 I) factor.

    Instances are read-only; arrays are flagged non-writeable.
    """

    matrix: np.ndarray
    h_at_design: np.ndarray
    H: np.ndarray
    eta2: float
    phi: float
    bounds: DomainBounds
    design: np.ndarray
    regularized_factorization: tuple = field(repr=False)
    _nodes: np.ndarray = field(repr=False)
    _g_nodes: np.ndarray = field(repr=False)
    _h_scale: np.ndarray = field(repr=False)
    _h_factor: Optional[tuple] = field(repr=False)

    @classmethod
    def from_matrix(cls, matrix, eta2: float) -> "ProjectedKernelMatrix":
        """Wrap a precomputed n x n matrix (no projection data attached)."""
        mat = np.array(matrix, dtype=float)
        n = mat.shape[0]
        if mat.shape != (n, n) or not np.allclose(mat, mat.T):
            raise ValidationError("matrix must be square and symmetric")
        try:
            factor = linalg.cho_factor(mat + eta2 * np.eye(n), lower=True)
        except linalg.LinAlgError as exc:
            raise RegularizationError("matrix + eta2*I is not positive definite") from exc
        return cls(
            matrix=mat,
            h_at_design=np.zeros((n, 0)),
            H=np.zeros((0, 0)),
            eta2=float(eta2),
            phi=1.0,
            bounds=DomainBounds.unit(1),
            design=np.full((n, 1), np.nan),
            regularized_factorization=factor,
            _nodes=np.zeros((0, 1)),
            _g_nodes=np.zeros((0, 0)),
            _h_scale=np.zeros(0),
            _h_factor=None,
        )

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def m(self) -> int:
        return self.H.shape[0]

    def solve(self, b) -> np.ndarray:
        """(Phi_g + eta2 I)^{-1} b."""
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValidationError(f"expected {self.n} rows, got {b.shape[0]}")
        return linalg.cho_solve(self.regularized_factorization, b)

    def _hinv(self, v):
        if self.m == 0:
            return v
        s = self._h_scale[:, None] if v.ndim == 2 else self._h_scale
        return linalg.cho_solve(self._h_factor, v / s) / s

    def h(self, x) -> np.ndarray:
        """Quadrature estimate of h(x) at points ``x`` in original units, shape (k, m)."""
        u = self.bounds.to_unit(np.atleast_2d(x))
        if self.m == 0:
            return np.zeros((u.shape[0], 0))
        return _kernel_matmul(u, self._nodes, self._g_nodes, self.phi) / self._nodes.shape[0]

    def evaluate(self, xa, xb) -> np.ndarray:
        """Projected kernel Phi_g(xa_i, xb_j) at arbitrary points."""
        ua = self.bounds.to_unit(np.atleast_2d(xa))
        ub = self.bounds.to_unit(np.atleast_2d(xb))
        k = gaussian_kernel_matrix(ua, ub, self.phi)
        if self.m == 0:
            return k
        ha, hb = self.h(xa), self.h(xb)
        return k - ha @ self._hinv(hb.T)


def _factor_gram(H):
    """Cholesky of the scale-normalized Gram matrix, with a condition check."""
    m = H.shape[0]
    diag = np.diag(H).copy()
    zero = np.flatnonzero(diag <= 0)
    if zero.size:
        raise SingularProjectionError(
            f"gradient components {zero.tolist()} integrate to zero; "
            "they are redundant (insensitive parameters) and must be dropped or pinned",
            zero.tolist(),
        )
    scale = np.sqrt(diag)
    Hn = H / np.outer(scale, scale)
    evals, evecs = np.linalg.eigh(Hn)
    cond = np.inf if evals[0] <= 0 else evals[-1] / evals[0]
    if cond > COND_LIMIT:
        v = np.abs(evecs[:, 0])
        comps = np.flatnonzero(v >= 0.1 * v.max()).tolist()
        raise SingularProjectionError(
            f"gradient Gram matrix is near-singular (condition {cond:.3g}); "
            f"near-dependent gradient components: {comps}",
            comps,
        )
    try:
        factor = linalg.cho_factor(Hn, lower=True)
    except linalg.LinAlgError:
        jitter = 1e-10 * np.trace(Hn) / m
        factor = linalg.cho_factor(Hn + jitter * np.eye(m), lower=True)
    return scale, factor


def _clip_rounding(mat, ref):
    """Remove negative eigenvalues produced by cancellation in K - h'H^{-1}h.

    The exact matrix is a Schur complement of a Gram matrix and hence PSD;
    only eigenvalues that are negative at rounding level (|ev| <= 1e-8 * ref)
    are set to zero, anything larger is left visible.
    """
    ev, vec = np.linalg.eigh(mat)
    if ev[0] >= 0 or ev[0] < -1e-8 * ref:
        return mat
    out = (vec * np.maximum(ev, 0.0)) @ vec.T
    return 0.5 * (out + out.T)


def _span_basis(g_nodes, nodes, phi):
    """Gradient values re-expressed in a kernel-orthonormal basis of their span."""
    M = nodes.shape[0]
    H = g_nodes.T @ _kernel_matmul(nodes, nodes, g_nodes, phi) / M**2
    diag = np.diag(H)
    live = np.flatnonzero(diag > 0)
    if live.size == 0:
        raise SingularProjectionError("every gradient component integrates to zero", list(range(H.shape[0])))
    s = np.sqrt(diag[live])
    evals, evecs = np.linalg.eigh(H[np.ix_(live, live)] / np.outer(s, s))
    keep = evals > evals[-1] / COND_LIMIT
    T = evecs[:, keep] / np.sqrt(evals[keep])
    return (g_nodes[:, live] / s) @ T


def project_kernel(
    gradient: Optional[Callable[[np.ndarray], np.ndarray]],
    design,
    bounds: DomainBounds,
    config: KernelConfig,
    reduce: bool = False,
) -> ProjectedKernelMatrix:
    """Build the projected kernel matrix on ``design``.

    Parameters
    ----------
    gradient : callable or None
        Maps a (k, d) array of points in original units to the (k, m) matrix of
        surrogate parameter gradients. ``None`` means m = 0 (no projection).
    design : array, shape (n, d)
        Physical design points in original units.
    bounds : DomainBounds
        Integration domain.
    config : KernelConfig
        Kernel scale ``phi`` (standardized units), nugget ``eta2`` and
        quadrature settings.
    reduce : bool
        Project onto the span of the gradient components instead of the
        components themselves. Collinear components (e.g. every gradient a
        multiple of x) are then allowed; ``h_at_design`` and ``H`` refer to an
        orthonormal basis of that span.

    Raises
    ------
    SingularProjectionError
        If the gradient Gram matrix has condition number above 1e12 and
        ``reduce`` is false, or if every gradient component vanishes.
    RegularizationError
        If ``eta2 == 0`` and the projected matrix is singular.
    """
    design = np.array(np.atleast_2d(design), dtype=float)
    if design.shape[1] != bounds.dim:
        raise ValidationError(f"design has {design.shape[1]} columns, bounds have {bounds.dim}")
    if design.shape[0] < 1:
        raise ValidationError("design must contain at least one point")
    n = design.shape[0]
    phi, eta2 = float(config.phi), float(config.eta2)

    xu = bounds.to_unit(design)
    nodes = quadrature_nodes(bounds.dim, config.mc_samples, config.seed)
    g_nodes = _as_gradient_values(gradient, bounds.from_unit(nodes), nodes.shape[0])
    m = g_nodes.shape[1]
    M = nodes.shape[0]

    k_xx = gaussian_kernel_matrix(xu, xu, phi)
    if m and reduce:
        g_nodes = _span_basis(g_nodes, nodes, phi)
        m = g_nodes.shape[1]
    if m:
        h_x = _kernel_matmul(xu, nodes, g_nodes, phi) / M
        H = g_nodes.T @ _kernel_matmul(nodes, nodes, g_nodes, phi) / M**2
        H = 0.5 * (H + H.T)
        scale, h_factor = _factor_gram(H)
        proj = h_x / scale
        proj = proj @ linalg.cho_solve(h_factor, proj.T)
        mat = _clip_rounding(0.5 * (k_xx - proj + (k_xx - proj).T), float(np.max(np.abs(k_xx))))
    else:
        h_x, H = np.zeros((n, 0)), np.zeros((0, 0))
        scale, h_factor = np.zeros(0), None
        mat = k_xx
    mat = 0.5 * (mat + mat.T)

    if eta2 == 0:
        ev = np.linalg.eigvalsh(mat)
        if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
            raise RegularizationError(
                "projected kernel matrix is singular; set a positive nugget eta2"
            )
    try:
        factor = linalg.cho_factor(mat + eta2 * np.eye(n), lower=True)
    except linalg.LinAlgError as exc:
        raise RegularizationError(
            f"Phi_g + eta2*I is not positive definite (eta2={eta2:g}); increase the nugget"
        ) from exc

    for arr in (mat, h_x, H, nodes, g_nodes, design):
        arr.flags.writeable = False
    return ProjectedKernelMatrix(
        matrix=mat,
        h_at_design=h_x,
        H=H,
        eta2=eta2,
        phi=phi,
        bounds=bounds,
        design=design,
        regularized_factorization=factor,
        _nodes=nodes,
        _g_nodes=g_nodes,
        _h_scale=scale,
        _h_factor=h_factor,
    )


def quadratic_form(pk: ProjectedKernelMatrix, residual) -> float:
    """r^T (Phi_g + eta2 I)^{-1} r using the cached factorization."""
    r = np.asarray(residual, dtype=float).ravel()
    if r.size != pk.n:
        raise ValidationError(f"residual has length {r.size}, expected {pk.n}")
    return max(float(r @ pk.solve(r)), 0.0)
