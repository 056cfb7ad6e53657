"""Fixed-point solution of the nonlinear mild equation and its diagnostics.

One application of the fixed-point map is evaluated by an exact recursion:
because the constant-coefficient kernels compose under the semigroup, the
midpoint-in-s discretization of

    Phi(phi)(t) = G_t Y + int_0^t G_{t-s}[V phi] ds - int_0^t grad G_{t-s}[b phi] ds

satisfies Phi(phi)(t_{k+1}) = G_dt Phi(phi)(t_k) + dt (G_{dt/2}[V phi]_mid
- grad G_{dt/2}[b phi]_mid), which costs O(n_t) kernel applications instead
of O(n_t^2).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .coefficients import CoefficientSet
from .core import (
    ConvergenceError,
    DensityField,
    Grid1D,
    NumericsError,
    SignedField,
    TimeGrid,
    boundary_mass,
    d1,
    d2,
    mittag_leffler_half,
    mittag_leffler_half_inverse,
    mollified_delta,
    project_nonnegative,
)
from .kernels import HeatKernel

Array = np.ndarray

MAX_PICARD_ITERATIONS = 200
_KERNEL_BUILD_STEP = 5.0e-4
_BOUNDARY_MASS_TOL = 1.0e-8


@dataclass(frozen=True)
class SolutionPath:
    """Density path on a time grid with convergence metadata."""

    grid: Grid1D
    times: Array
    values: Array  # (n_t + 1, n)
    iterations: int = 0
    residual: float = math.nan
    residual_history: tuple = ()
    mollification_width: float | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        times = np.asarray(self.times, dtype=float)
        values.flags.writeable = False
        times.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "times", times)

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def field(self, k: int) -> DensityField:
        return DensityField(self.grid, self.values[k], time_tag=float(self.times[k]))

    @property
    def final(self) -> DensityField:
        return self.field(self.n_steps)

    def mass_series(self) -> Array:
        return self.values @ self.grid.weights

    def min_value(self) -> float:
        return float(self.values.min())


def build_kernel(coeffs: CoefficientSet, grid: Grid1D, tgrid: TimeGrid) -> HeatKernel:
    """Kernel matched to the diffusion entry and the solver's step sizes."""
    if coeffs.diffusion.is_constant:
        return HeatKernel(grid, coeffs.diffusion, mode="constant")
    half = 0.5 * tgrid.dt
    substeps = max(1, int(math.ceil(half / _KERNEL_BUILD_STEP)))
    return HeatKernel(grid, coeffs.diffusion, mode="variable", build_step=half / substeps)


def _resolve_initial(initial, grid: Grid1D):
    if isinstance(initial, DensityField):
        return initial, None
    width = 2.0 * grid.h
    acc = np.zeros(grid.n)
    for position, mass in initial:
        acc += mollified_delta(grid, position, mass, width=width).values
    return DensityField(grid, acc), width


def _picard_sweep(
    initial_values: Array,
    path_values: Array,
    coeffs: CoefficientSet,
    kernel: HeatKernel,
    tgrid: TimeGrid,
) -> Array:
    grid = kernel.grid
    dt = tgrid.dt
    half = 0.5 * dt
    drift, potential = coeffs.drift, coeffs.potential
    out = np.empty_like(path_values)
    out[0] = initial_values
    for k in range(tgrid.steps):
        s = (k + 0.5) * dt
        nxt = kernel.apply_values(dt, out[k])
        if drift is not None or potential is not None:
            mid = 0.5 * (path_values[k] + path_values[k + 1])
            if potential is not None:
                v_vals = potential.values_at(
                    s, grid.nodes, potential.moments_of_values(grid, mid)
                )
                nxt += dt * kernel.apply_values(half, v_vals * mid)
            if drift is not None:
                b_vals = drift.values_at(
                    s, grid.nodes, drift.moments_of_values(grid, mid)
                )
                nxt -= dt * kernel.gradient_values(half, b_vals * mid)
        if not np.all(np.isfinite(nxt)):
            raise NumericsError(f"non-finite density at time index {k + 1}")
        # candidates are signed mid-iteration; positivity is enforced on the
        # converged path, where the projection tolerance applies per step
        out[k + 1] = nxt
    return out


def picard_map(
    initial,
    phi: SolutionPath,
    coeffs: CoefficientSet,
    kernel: HeatKernel | None = None,
) -> SolutionPath:
    """One application of the fixed-point map to the candidate path."""
    init_field, width = _resolve_initial(initial, phi.grid)
    tgrid = TimeGrid(float(phi.times[-1]), phi.n_steps)
    if kernel is None:
        kernel = build_kernel(coeffs, phi.grid, tgrid)
    out = _picard_sweep(init_field.values, phi.values, coeffs, kernel, tgrid)
    return SolutionPath(phi.grid, phi.times, out, mollification_width=width)


def heat_flow_path(initial_values: Array, kernel: HeatKernel, tgrid: TimeGrid) -> Array:
    out = np.empty((tgrid.steps + 1, len(initial_values)))
    out[0] = initial_values
    for k in range(tgrid.steps):
        out[k + 1] = project_nonnegative(kernel.apply_values(tgrid.dt, out[k]))
    return out


def solve_mild(
    initial,
    coeffs: CoefficientSet,
    grid: Grid1D,
    tgrid: TimeGrid,
    tol: float = 1e-8,
    max_iterations: int = MAX_PICARD_ITERATIONS,
    kernel: HeatKernel | None = None,
) -> SolutionPath:
    """Iterate the fixed-point map from the pure heat flow until the sup-in-t
    L1 distance between successive iterates drops below tol."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    init_field, width = _resolve_initial(initial, grid)
    if kernel is None:
        kernel = build_kernel(coeffs, grid, tgrid)

    current = heat_flow_path(init_field.values, kernel, tgrid)
    if coeffs.drift is None and coeffs.potential is None:
        return _finish_path(grid, tgrid, current, 1, 0.0, (0.0,), width)

    w = grid.weights
    history = []
    for iteration in range(1, max_iterations + 1):
        updated = _picard_sweep(init_field.values, current, coeffs, kernel, tgrid)
        residual = float(np.max(np.abs(updated - current) @ w))
        history.append(residual)
        current = updated
        if residual < tol:
            return _finish_path(
                grid, tgrid, current, iteration, residual, tuple(history), width
            )
    raise ConvergenceError(
        f"no fixed point after {max_iterations} iterations (residual {history[-1]:.3e})",
        history,
    )


def _finish_path(grid, tgrid, values, iterations, residual, history, width) -> SolutionPath:
    values = np.stack(
        [project_nonnegative(row, where=f"time index {k}") for k, row in enumerate(values)]
    )
    leak = boundary_mass(SignedField(grid, values[-1]))
    if leak > _BOUNDARY_MASS_TOL:
        warnings.warn(
            f"mass {leak:.2e} at the domain edge exceeds {_BOUNDARY_MASS_TOL:.0e}; "
            "enlarge the domain",
            stacklevel=3,
        )
    return SolutionPath(
        grid,
        tgrid.nodes,
        values,
        iterations=iterations,
        residual=residual,
        residual_history=history,
        mollification_width=width,
    )


def weak_residual(
    phi: SolutionPath, coeffs: CoefficientSet, tests: Sequence[Array]
) -> float:
    """Max over test functions and interior time nodes of
    |d/dt (f, phi_t) - ((1/2) A f'' + (b, grad f) + V f, phi_t)|."""
    grid = phi.grid
    w = grid.weights
    h = grid.h
    dt = phi.dt
    a_vals = coeffs.diffusion.values(grid.nodes)
    worst = 0.0
    for f in tests:
        f = np.asarray(f, dtype=float)
        fp = d1(f, h)
        fpp = d2(f, h)
        pairings = phi.values @ (w * f)
        lhs = (pairings[2:] - pairings[:-2]) / (2.0 * dt)
        for k in range(1, phi.n_steps):
            t = float(phi.times[k])
            vals = phi.values[k]
            gen = 0.5 * a_vals * fpp
            if coeffs.drift is not None:
                b_vals = coeffs.drift.values_at(
                    t, grid.nodes, coeffs.drift.moments_of_values(grid, vals)
                )
                gen = gen + b_vals * fp
            if coeffs.potential is not None:
                v_vals = coeffs.potential.values_at(
                    t, grid.nodes, coeffs.potential.moments_of_values(grid, vals)
                )
                gen = gen + v_vals * f
            rhs = float(w @ (gen * vals))
            worst = max(worst, abs(float(lhs[k - 1]) - rhs))
    return worst


def singularity_resolution(tgrid: TimeGrid) -> float:
    """Midpoint-rule quality for int_0^T (T-s)^(-1/2) ds against 2 sqrt(T)."""
    s = tgrid.midpoints
    approx = float(np.sum(tgrid.dt / np.sqrt(tgrid.horizon - s)))
    return abs(approx - 2.0 * math.sqrt(tgrid.horizon)) / (2.0 * math.sqrt(tgrid.horizon))


# -- stability envelope (measured-constant checks) ---------------------------


def stability_ratios(path1: SolutionPath, path2: SolutionPath, initial_gap: float) -> Array:
    """|phi1_t - phi2_t|_L1 / |Y1 - Y2| per time node."""
    if initial_gap <= 0:
        raise ValueError("initial gap must be positive")
    w = path1.grid.weights
    gaps = np.abs(path1.values - path2.values) @ w
    return gaps / initial_gap


def fit_envelope_scale(times: Array, ratios: Array, kappa_raw: float) -> float:
    """Smallest scale c with ratio(t) <= E_{1/2}(c * kappa_raw * sqrt(t))."""
    if kappa_raw <= 0:
        raise ValueError("kappa_raw must be positive")
    best = 0.0
    for t, r in zip(times, ratios):
        if t <= 0 or r <= 1.0:
            continue
        best = max(best, mittag_leffler_half_inverse(float(r)) / (kappa_raw * math.sqrt(t)))
    return best


def envelope_gain(times: Array, ratios: Array, kappa: float) -> float:
    """K = max_t ratio(t) / E_{1/2}(kappa sqrt(t))."""
    worst = 0.0
    for t, r in zip(times, ratios):
        worst = max(worst, float(r) / mittag_leffler_half(kappa * math.sqrt(max(t, 0.0))))
    return worst
