"""Grids, density fields, pairings, norms and the Mittag-Leffler function E_{1/2}.

Everything here is built for 1-d uniform grids with trapezoid quadrature,
so that pairings, masses and norms all commute with field arithmetic.
Types carry a ``dim`` tag; the shipped solvers run dim = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence, Union

import numpy as np

# Values in [-NEGATIVITY_TOL, 0) are treated as discretization noise and
# clamped to zero; anything below is a genuine solver failure.
NEGATIVITY_TOL = 1.0e-12

# Mollified point masses use a Gaussian of this many grid spacings as std.
MOLLIFIER_WIDTH_FACTOR = 2.0

# E_{1/2}(z) ~ 2 exp(z^2) overflows float64 slightly above this point.
_ML_SATURATION_Z = 26.5


class GridMismatchError(ValueError):
    """Two grid quantities that must share a grid do not."""


class ConfigurationError(ValueError):
    """A configuration file or preset request is invalid."""


class NumericsError(RuntimeError):
    """A numerical routine produced an unusable state (non-finite, negative...)."""


class ConvergenceError(NumericsError):
    """An iteration hit its cap; carries the residual history."""

    def __init__(self, message: str, residuals: Sequence[float]):
        super().__init__(message)
        self.residuals = list(residuals)


class DomainExitError(NumericsError):
    """A characteristic flow left the truncated domain; carries the exit time."""

    def __init__(self, message: str, exit_time: float):
        super().__init__(message)
        self.exit_time = exit_time


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid on [x_min, x_max] with n nodes."""

    x_min: float
    x_max: float
    n: int
    dim: int = 1

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"grid needs at least 2 nodes, got {self.n}")
        if not self.x_min < self.x_max:
            raise ValueError(f"empty domain [{self.x_min}, {self.x_max}]")
        if self.dim != 1:
            raise ValueError("only dim = 1 grids are supported")

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / (self.n - 1)

    @cached_property
    def nodes(self) -> np.ndarray:
        x = np.linspace(self.x_min, self.x_max, self.n)
        x.flags.writeable = False
        return x

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoid quadrature weights (h inside, h/2 at the ends)."""
        w = np.full(self.n, self.h)
        w[0] *= 0.5
        w[-1] *= 0.5
        w.flags.writeable = False
        return w

    def integrate(self, values: np.ndarray) -> float:
        return float(self.weights @ values)


@dataclass(frozen=True)
class TimeGrid:
    """[0, horizon] split into ``steps`` equal steps."""

    horizon: float
    steps: int

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.steps < 1:
            raise ValueError(f"need at least one step, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @cached_property
    def nodes(self) -> np.ndarray:
        t = np.linspace(0.0, self.horizon, self.steps + 1)
        t.flags.writeable = False
        return t

    @cached_property
    def midpoints(self) -> np.ndarray:
        t = self.nodes[:-1] + 0.5 * self.dt
        t.flags.writeable = False
        return t


def _prepare_values(grid: Grid1D, values: np.ndarray, what: str) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.n,):
        raise GridMismatchError(
            f"{what} has shape {values.shape}, grid has {grid.n} nodes"
        )
    if not np.all(np.isfinite(values)):
        raise NumericsError(f"{what} contains non-finite values")
    return values


@dataclass(frozen=True)
class SignedField:
    """A signed grid function with a time tag; finite everywhere."""

    grid: Grid1D
    values: np.ndarray
    time_tag: float = 0.0

    def __post_init__(self):
        values = _prepare_values(self.grid, self.values, "field")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def mass(self) -> float:
        return self.grid.integrate(self.values)

    def with_values(self, values: np.ndarray, time_tag: float | None = None):
        tag = self.time_tag if time_tag is None else time_tag
        return type(self)(self.grid, values, tag)


@dataclass(frozen=True)
class DensityField(SignedField):
    """Nonnegative mass density per unit length on a grid.

    Small negative values (above -NEGATIVITY_TOL) are clamped to zero;
    larger negativity raises, since it signals a genuine solver failure.
    """

    def __post_init__(self):
        values = _prepare_values(self.grid, self.values, "density")
        low = values.min()
        if low < -NEGATIVITY_TOL:
            raise NumericsError(
                f"density undershoots the projection tolerance: min {low:.3e}"
            )
        if low < 0.0:
            values = np.where(values < 0.0, 0.0, values)
        else:
            values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)


GridFunction = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


def pair(f: GridFunction, mu: SignedField) -> float:
    """Pairing (f, mu) = integral of f against the field, trapezoid rule."""
    if callable(f):
        fv = np.asarray(f(mu.grid.nodes), dtype=float)
    else:
        fv = np.asarray(f, dtype=float)
    if fv.shape != (mu.grid.n,):
        raise GridMismatchError(
            f"test function has shape {fv.shape}, grid has {mu.grid.n} nodes"
        )
    return float(mu.grid.weights @ (fv * mu.values))


def l1_norm(f: SignedField) -> float:
    """Trapezoid L1 norm of a field."""
    return f.grid.integrate(np.abs(f.values))


def l1_distance(a: SignedField, b: SignedField) -> float:
    if a.grid != b.grid:
        raise GridMismatchError("fields live on different grids")
    return a.grid.integrate(np.abs(a.values - b.values))


def mittag_leffler_half(z: float) -> float:
    """E_{1/2}(z) = sum_k z^k / Gamma(k/2 + 1), term-recursive evaluation.

    The even and odd sub-series are geometric-like in z^2, so terms are
    generated by two interleaved recursions and summed until the current
    term drops below 1e-15 of the partial sum (past the term peak k ~ 2z^2).
    For z beyond the float64 range of exp(z^2) the result saturates to inf.
    """
    z = float(z)
    if z != z:
        return math.nan
    if z >= _ML_SATURATION_Z:
        return math.inf
    even = 1.0  # z^(2j) / j!            at j = 0
    odd = 2.0 * z / math.sqrt(math.pi)  # z^(2j+1) / Gamma(j + 3/2) at j = 0
    total = 0.0
    z2 = z * z
    j = 0
    while True:
        total += even + odd
        if not math.isfinite(total):
            return math.inf if total > 0 else -math.inf
        k = 2 * j + 1  # index of the odd term just added
        if k > 2.0 * z2 and abs(even) + abs(odd) < 1e-15 * abs(total):
            return total
        even *= z2 / (j + 1.0)
        odd *= z2 / (j + 1.5)
        j += 1
        if j > 100_000:  # unreachable for saturating-range inputs
            raise NumericsError(f"Mittag-Leffler series did not terminate at z={z}")


def mittag_leffler_half_inverse(y: float) -> float:
    """Inverse of E_{1/2} on [0, inf); returns 0 for y <= 1."""
    if y <= 1.0:
        return 0.0
    lo, hi = 0.0, _ML_SATURATION_Z
    if mittag_leffler_half(hi) < y:
        return hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mittag_leffler_half(mid) < y:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def gaussian_values(x: np.ndarray, mean: float, std: float) -> np.ndarray:
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    u = (x - mean) / std
    return np.exp(-0.5 * u * u) / (std * math.sqrt(2.0 * math.pi))


def gaussian_density(grid: Grid1D, mean: float, std: float, time_tag: float = 0.0) -> DensityField:
    return DensityField(grid, gaussian_values(grid.nodes, mean, std), time_tag)


def mollified_delta(
    grid: Grid1D, center: float, mass: float = 1.0, width: float | None = None
) -> DensityField:
    """Point mass at ``center`` mollified to a Gaussian of std ``width``.

    Default width is MOLLIFIER_WIDTH_FACTOR grid spacings; the same
    representation is used for measure initial data and sensitivity probes.
    """
    if width is None:
        width = MOLLIFIER_WIDTH_FACTOR * grid.h
    return DensityField(grid, mass * gaussian_values(grid.nodes, center, width))


def boundary_mass(f: SignedField, edge_nodes: int = 3) -> float:
    """Mass carried by the outermost nodes; a truncation-leak diagnostic."""
    w = f.grid.weights
    v = np.abs(f.values)
    k = edge_nodes
    return float(w[:k] @ v[:k] + w[-k:] @ v[-k:])


def d1(values: np.ndarray, h: float) -> np.ndarray:
    """Central first derivative, one-sided at the ends."""
    out = np.empty_like(values)
    out[1:-1] = (values[2:] - values[:-2]) / (2.0 * h)
    out[0] = (values[1] - values[0]) / h
    out[-1] = (values[-1] - values[-2]) / h
    return out


def d2(values: np.ndarray, h: float) -> np.ndarray:
    """Central second derivative, zero at the ends."""
    out = np.zeros_like(values)
    out[1:-1] = (values[2:] - 2.0 * values[1:-1] + values[:-2]) / (h * h)
    return out


def d1_4th(values: np.ndarray, h: float) -> np.ndarray:
    """Fourth-order central first derivative, second-order near the ends."""
    out = np.empty_like(values)
    out[2:-2] = (
        values[:-4] - 8.0 * values[1:-3] + 8.0 * values[3:-1] - values[4:]
    ) / (12.0 * h)
    out[1] = (values[2] - values[0]) / (2.0 * h)
    out[-2] = (values[-1] - values[-3]) / (2.0 * h)
    out[0] = (values[1] - values[0]) / h
    out[-1] = (values[-1] - values[-2]) / h
    return out


def d2_4th(values: np.ndarray, h: float) -> np.ndarray:
    """Fourth-order central second derivative, second-order near the ends."""
    out = np.zeros_like(values)
    out[2:-2] = (
        -values[:-4]
        + 16.0 * values[1:-3]
        - 30.0 * values[2:-2]
        + 16.0 * values[3:-1]
        - values[4:]
    ) / (12.0 * h * h)
    out[1] = (values[2] - 2.0 * values[1] + values[0]) / (h * h)
    out[-2] = (values[-1] - 2.0 * values[-2] + values[-3]) / (h * h)
    return out


def project_nonnegative(values: np.ndarray, where: str = "") -> np.ndarray:
    """Clamp discretization-noise negativity; raise beyond the tolerance."""
    low = values.min()
    if low < -NEGATIVITY_TOL:
        suffix = f" at {where}" if where else ""
        raise NumericsError(
            f"negativity {low:.3e} exceeds the projection tolerance{suffix}"
        )
    if low < 0.0:
        return np.where(values < 0.0, 0.0, values)
    return values
