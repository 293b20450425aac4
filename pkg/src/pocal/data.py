"""Physical and computer-experiment datasets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ValidationError
from .kernels import DomainBounds


def _as_matrix(a, name):
    a = np.array(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValidationError(f"{name} must be a 1-D or 2-D array")
    return a


def _as_response(y, n, name):
    y = np.array(y, dtype=float)
    if y.ndim not in (1, 2) or y.shape[0] != n:
        raise ValidationError(f"{name} must have {n} rows, got shape {y.shape}")
    if y.ndim == 2 and y.shape[1] == 1:
        y = y[:, 0]
    return y


@dataclass(frozen=True, eq=False)
class PhysicalDataset:
    """Physical design ``x`` (n x d) and observations ``y`` (n or n x q)."""

    x: np.ndarray
    y: np.ndarray
    bounds: Optional[DomainBounds] = None
    noise_variance_hint: Optional[float] = None

    def __post_init__(self):
        x = _as_matrix(self.x, "x")
        y = _as_response(self.y, x.shape[0], "y")
        if x.shape[0] < 1:
            raise ValidationError("physical dataset needs at least one observation")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValidationError("physical data contain NaN or infinite values")
        bounds = self.bounds if self.bounds is not None else DomainBounds.from_data(x)
        if bounds.dim != x.shape[1]:
            raise ValidationError(f"bounds have dimension {bounds.dim}, x has {x.shape[1]} columns")
        if not bounds.contains(x):
            raise ValidationError("physical design points fall outside the domain bounds")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "bounds", bounds)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def q(self) -> int:
        return 1 if self.y.ndim == 1 else self.y.shape[1]

    def output(self, j: int) -> "PhysicalDataset":
        """Single-output view of output column ``j``."""
        if self.y.ndim == 1:
            if j != 0:
                raise ValidationError("single-output dataset has only output 0")
            return self
        return PhysicalDataset(self.x, self.y[:, j], self.bounds, self.noise_variance_hint)


@dataclass(frozen=True, eq=False)
class ComputerDataset:
    """Simulator runs at joint design points (x_i, theta_i) with outputs y_i."""

    x: np.ndarray
    theta: np.ndarray
    y: np.ndarray
    bounds: Optional[DomainBounds] = None
    theta_bounds: Optional[DomainBounds] = None

    def __post_init__(self):
        x = _as_matrix(self.x, "x")
        theta = _as_matrix(self.theta, "theta")
        n = x.shape[0]
        if theta.shape[0] != n:
            raise ValidationError(f"theta has {theta.shape[0]} rows, x has {n}")
        y = _as_response(self.y, n, "y")
        if not all(np.all(np.isfinite(a)) for a in (x, theta, y)):
            raise ValidationError("computer data contain NaN or infinite values")
        d, m = x.shape[1], theta.shape[1]
        if n < d + m + 1:
            raise ValidationError(f"need at least d + m + 1 = {d + m + 1} runs, got {n}")
        joint = np.hstack([x, theta])
        if np.unique(joint, axis=0).shape[0] != n:
            raise ValidationError("computer design contains duplicate (x, theta) rows")
        bounds = self.bounds if self.bounds is not None else DomainBounds.from_data(x)
        tb = self.theta_bounds if self.theta_bounds is not None else DomainBounds.from_data(theta)
        if bounds.dim != d or tb.dim != m:
            raise ValidationError("bounds do not match the x / theta column counts")
        if not tb.contains(theta):
            raise ValidationError("theta design rows fall outside theta_bounds")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "theta_bounds", tb)

    @property
    def N(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> int:
        return self.theta.shape[1]

    @property
    def q(self) -> int:
        return 1 if self.y.ndim == 1 else self.y.shape[1]

    def output(self, j: int) -> "ComputerDataset":
        if self.y.ndim == 1:
            if j != 0:
                raise ValidationError("single-output dataset has only output 0")
            return self
        return ComputerDataset(self.x, self.theta, self.y[:, j], self.bounds, self.theta_bounds)
