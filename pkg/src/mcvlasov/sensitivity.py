"""First and second variations of the solution map with respect to initial data.

The first variation solves the linearized mild equation around a frozen
converged background by the same midpoint recursion as the nonlinear
solver, which makes it the exact derivative of the discrete solution map.
The backward propagator discretizes the dual linearized generator with
Crank-Nicolson in time and fourth-order stencils in space; its adjoint
(transpose against the quadrature weights) pushes the second-variation
source through the Duhamel formula by the midpoint rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .coefficients import CoefficientSet
from .core import (
    ConvergenceError,
    Grid1D,
    MOLLIFIER_WIDTH_FACTOR,
    SignedField,
    TimeGrid,
    mittag_leffler_half,
    mollified_delta,
)
from .kernels import HeatKernel
from .mild_solver import SolutionPath, build_kernel

Array = np.ndarray


@dataclass(frozen=True)
class SensitivityKernel:
    """xi_t(x; .) for each probe point x: the response of the solution at
    time t to an extra unit of initial mass at x (mollified to width 2h)."""

    grid: Grid1D
    times: Array
    probes: tuple
    values: Array  # (n_probes, n_t + 1, n)
    mollification_width: float

    def field(self, probe_idx: int, time_idx: int) -> SignedField:
        return SignedField(
            self.grid,
            self.values[probe_idx, time_idx],
            time_tag=float(self.times[time_idx]),
        )

    def final(self, probe_idx: int) -> SignedField:
        return self.field(probe_idx, len(self.times) - 1)

    def mass_series(self, probe_idx: int) -> Array:
        return self.values[probe_idx] @ self.grid.weights


@dataclass(frozen=True)
class SecondVariation:
    """eta_t(x, z; .) on requested probe pairs, zero initial condition."""

    grid: Grid1D
    times: Array
    pairs: tuple
    values: Array  # (n_pairs, n_t + 1, n)

    def field(self, pair_idx: int, time_idx: int) -> SignedField:
        return SignedField(
            self.grid,
            self.values[pair_idx, time_idx],
            time_tag=float(self.times[time_idx]),
        )

    def final(self, pair_idx: int) -> SignedField:
        return self.field(pair_idx, len(self.times) - 1)


def snap_to_grid(grid: Grid1D, x: float) -> float:
    return float(grid.nodes[int(np.argmin(np.abs(grid.nodes - x)))])


@dataclass
class _StepData:
    """Frozen-background coefficient data at one midpoint."""

    time: float
    background: Array
    b_vals: Array | None
    b_coeffs: Array | None  # (m, n)
    b_kernels: Array | None  # (m, n)
    v_vals: Array | None
    v_coeffs: Array | None
    v_kernels: Array | None


def _midpoint_data(phi: SolutionPath, coeffs: CoefficientSet) -> list:
    grid = phi.grid
    data = []
    for k in range(phi.n_steps):
        s = 0.5 * float(phi.times[k] + phi.times[k + 1])
        mid = 0.5 * (phi.values[k] + phi.values[k + 1])
        entry = _StepData(s, mid, None, None, None, None, None, None)
        if coeffs.drift is not None:
            drift = coeffs.drift
            moments = drift.moments_of_values(grid, mid)
            entry.b_vals = drift.values_at(s, grid.nodes, moments)
            entry.b_coeffs = drift.outer.d_s(s, grid.nodes, moments)
            entry.b_kernels = drift.kernel_values(grid)
        if coeffs.potential is not None:
            pot = coeffs.potential
            moments = pot.moments_of_values(grid, mid)
            entry.v_vals = pot.values_at(s, grid.nodes, moments)
            entry.v_coeffs = pot.outer.d_s(s, grid.nodes, moments)
            entry.v_kernels = pot.kernel_values(grid)
        data.append(entry)
    return data


def _linearized_sources(step: _StepData, xi_mid: Array, weights: Array):
    """(potential source, drift flux) of the linearized equation."""
    pot_source = None
    if step.v_vals is not None:
        pot_source = step.v_vals * xi_mid
        if step.v_kernels.shape[0]:
            dm = step.v_kernels @ (weights * xi_mid)
            pot_source = pot_source + (dm @ step.v_coeffs) * step.background
    drift_flux = None
    if step.b_vals is not None:
        drift_flux = step.b_vals * xi_mid
        if step.b_kernels.shape[0]:
            dm = step.b_kernels @ (weights * xi_mid)
            drift_flux = drift_flux + (dm @ step.b_coeffs) * step.background
    return pot_source, drift_flux


def solve_first_variation(
    phi: SolutionPath,
    coeffs: CoefficientSet,
    probes,
    kernel: HeatKernel | None = None,
    tol: float = 1e-10,
    max_iterations: int = 200,
) -> SensitivityKernel:
    """Fixed-point iteration on the linearized mild equation around phi."""
    grid = phi.grid
    tgrid = TimeGrid(float(phi.times[-1]), phi.n_steps)
    if kernel is None:
        kernel = build_kernel(coeffs, grid, tgrid)
    steps = _midpoint_data(phi, coeffs)
    width = MOLLIFIER_WIDTH_FACTOR * grid.h
    w = grid.weights
    dt, half = tgrid.dt, 0.5 * tgrid.dt

    probes = tuple(snap_to_grid(grid, float(p)) for p in np.atleast_1d(probes))
    out = np.empty((len(probes), tgrid.steps + 1, grid.n))
    for p_idx, x0 in enumerate(probes):
        delta = mollified_delta(grid, x0, width=width).values
        current = np.empty((tgrid.steps + 1, grid.n))
        current[0] = delta
        if coeffs.drift is None and coeffs.potential is None:
            for k in range(tgrid.steps):
                current[k + 1] = kernel.apply_values(dt, current[k])
            out[p_idx] = current
            continue
        # forward-substitution warm start: a per-step inner correction puts
        # the candidate within a few global sweeps of the fixed point
        for k in range(tgrid.steps):
            base = kernel.apply_values(dt, current[k])
            nxt = base
            for _ in range(4):
                xi_mid = 0.5 * (current[k] + nxt)
                pot_source, drift_flux = _linearized_sources(steps[k], xi_mid, w)
                nxt = base
                if pot_source is not None:
                    nxt = nxt + dt * kernel.apply_values(half, pot_source)
                if drift_flux is not None:
                    nxt = nxt - dt * kernel.gradient_values(half, drift_flux)
            current[k + 1] = nxt
        history = []
        for _ in range(max_iterations):
            updated = np.empty_like(current)
            updated[0] = delta
            for k in range(tgrid.steps):
                xi_mid = 0.5 * (current[k] + current[k + 1])
                pot_source, drift_flux = _linearized_sources(steps[k], xi_mid, w)
                nxt = kernel.apply_values(dt, updated[k])
                if pot_source is not None:
                    nxt += dt * kernel.apply_values(half, pot_source)
                if drift_flux is not None:
                    nxt -= dt * kernel.gradient_values(half, drift_flux)
                updated[k + 1] = nxt
            residual = float(np.max(np.abs(updated - current) @ w))
            history.append(residual)
            current = updated
            if residual < tol:
                break
        else:
            raise ConvergenceError(
                f"first variation did not converge (residual {history[-1]:.3e})",
                history,
            )
        out[p_idx] = current
    return SensitivityKernel(grid, phi.times, probes, out, width)


def first_variation_bound_scale(
    xi: SensitivityKernel, coeffs_bounds, y_norm: float
) -> float:
    """Smallest C with |xi_t| <= E_{1/2}[C (2t+1)(2 lam R + V + b)] for all t."""
    lam = y_norm
    rate = 2.0 * lam * coeffs_bounds.r1 + coeffs_bounds.v_sup + coeffs_bounds.b_sup
    if rate <= 0:
        return 0.0
    from .core import mittag_leffler_half_inverse

    worst = 0.0
    w = xi.grid.weights
    for p in range(len(xi.probes)):
        norms = np.abs(xi.values[p]) @ w
        for t, nrm in zip(xi.times, norms):
            if nrm <= 1.0:
                continue
            worst = max(
                worst, mittag_leffler_half_inverse(float(nrm)) / ((2.0 * t + 1.0) * rate)
            )
    return worst


def _derivative_matrices(grid: Grid1D):
    """Dense fourth-order d/dx and d2/dx2 with frozen edge rows."""
    n, h = grid.n, grid.h
    d1m = np.zeros((n, n))
    d2m = np.zeros((n, n))
    for i in range(2, n - 2):
        d1m[i, i - 2 : i + 3] = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / (12.0 * h)
        d2m[i, i - 2 : i + 3] = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / (
            12.0 * h * h
        )
    return d1m, d2m


class LinearizedPropagator:
    """Backward propagator of the dual linearized evolution and its adjoint.

    apply() composes per-step Crank-Nicolson solves acting on functions, so
    the two-parameter family satisfies the composition rule by construction;
    apply_adjoint() runs the weight-transposed steps forward on densities.
    """

    def __init__(self, phi: SolutionPath, coeffs: CoefficientSet, lu_cache: int = 8):
        self.phi = phi
        self.coeffs = coeffs
        self.grid = phi.grid
        self.times = phi.times
        self.weights = phi.grid.weights
        self.dt = phi.dt
        self._d1m, self._d2m = _derivative_matrices(phi.grid)
        self._a_vals = coeffs.diffusion.values(phi.grid.nodes)
        self._lambda_cache: dict = {}
        self._lu_cache: dict = {}
        self._lu_limit = lu_cache

    # time_key: integer node index, or half-integer float for midpoints
    def _background(self, time_key) -> tuple:
        if isinstance(time_key, int):
            return float(self.times[time_key]), self.phi.values[time_key]
        k = int(math.floor(time_key))
        t = 0.5 * float(self.times[k] + self.times[k + 1])
        return t, 0.5 * (self.phi.values[k] + self.phi.values[k + 1])

    def generator_matrix(self, time_key) -> Array:
        cached = self._lambda_cache.get(time_key)
        if cached is not None:
            return cached
        t, background = self._background(time_key)
        grid = self.grid
        lam = 0.5 * self._a_vals[:, None] * self._d2m
        w = self.weights
        for term, is_drift in ((self.coeffs.drift, True), (self.coeffs.potential, False)):
            if term is None:
                continue
            moments = term.moments_of_values(grid, background)
            vals = term.values_at(t, grid.nodes, moments)
            if is_drift:
                lam += vals[:, None] * self._d1m
            else:
                lam[np.arange(grid.n), np.arange(grid.n)] += vals
            m = term.n_moments
            if m:
                kv = term.kernel_values(grid)  # (m, n) over z
                coeffs_x = term.outer.d_s(t, grid.nodes, moments)  # (m, n) over y
                rows = coeffs_x * (w * background)  # functional weights in y
                if is_drift:
                    rows = rows @ self._d1m
                lam += kv.T @ rows
        lam[:2, :] = 0.0
        lam[-2:, :] = 0.0
        self._lambda_cache[time_key] = lam
        if len(self._lambda_cache) > 4 * self._lu_limit:
            self._lambda_cache.pop(next(iter(self._lambda_cache)))
        return lam

    def _lu_shifted(self, time_key, tau: float):
        key = (time_key, tau)
        hit = self._lu_cache.get(key)
        if hit is not None:
            return hit
        lam = self.generator_matrix(time_key)
        lu = lu_factor(np.eye(self.grid.n) - tau * lam)
        self._lu_cache[key] = lu
        if len(self._lu_cache) > self._lu_limit:
            self._lu_cache.pop(next(iter(self._lu_cache)))
        return lu

    def apply(self, f_values: Array, t_idx: int, s_idx: int) -> Array:
        """Phi^{t,s} f: march the function backward from node s to node t."""
        if not 0 <= t_idx <= s_idx <= self.phi.n_steps:
            raise ValueError("need 0 <= t_idx <= s_idx within the path")
        u = np.asarray(f_values, dtype=float).copy()
        c = 0.5 * self.dt
        for k in range(s_idx - 1, t_idx - 1, -1):
            rhs = u + c * (self.generator_matrix(k + 1) @ u)
            u = lu_solve(self._lu_shifted(k, c), rhs)
        return u

    def apply_adjoint(self, rho_values: Array, s_idx: int, t_idx: int) -> Array:
        """(Phi^{s,t})* rho: march the density forward from node s to node t."""
        if not 0 <= s_idx <= t_idx <= self.phi.n_steps:
            raise ValueError("need 0 <= s_idx <= t_idx within the path")
        w = self.weights
        rho = np.asarray(rho_values, dtype=float).copy()
        c = 0.5 * self.dt
        for k in range(s_idx, t_idx):
            y = lu_solve(self._lu_shifted(k, c), w * rho, trans=1)
            rho = (y + c * (self.generator_matrix(k + 1).T @ y)) / w
        return rho

    def adjoint_step(self, rho_stack: Array, k: int) -> Array:
        """One forward adjoint step (vectorized over stacked densities)."""
        w = self.weights
        c = 0.5 * self.dt
        y = lu_solve(self._lu_shifted(k, c), (w * rho_stack).T, trans=1).T
        return (y @ self.generator_matrix(k + 1) * c + y) / w

    def adjoint_half_step_from_mid(self, rho_stack: Array, k: int) -> Array:
        """Adjoint transport from the step midpoint to node k+1."""
        w = self.weights
        c = 0.25 * self.dt
        y = lu_solve(self._lu_shifted(k + 0.5, c), (w * rho_stack).T, trans=1).T
        return (y @ self.generator_matrix(k + 1) * c + y) / w


def build_propagator(phi: SolutionPath, coeffs: CoefficientSet) -> LinearizedPropagator:
    return LinearizedPropagator(phi, coeffs)


def _pair_source(
    step: _StepData, xi_x: Array, xi_z: Array, coeffs: CoefficientSet, grid: Grid1D, d1m: Array
) -> Array:
    """Inhomogeneity of the second-variation equation at one midpoint,
    symmetrized in the probe pair."""
    w = grid.weights
    q = np.zeros(grid.n)
    flux = np.zeros(grid.n)
    for term, is_drift in ((coeffs.drift, True), (coeffs.potential, False)):
        if term is None or term.n_moments == 0:
            continue
        kv = step.b_kernels if is_drift else step.v_kernels
        c1 = step.b_coeffs if is_drift else step.v_coeffs
        dm_x = kv @ (w * xi_x)
        dm_z = kv @ (w * xi_z)
        first = (dm_x @ c1) * xi_z + (dm_z @ c1) * xi_x
        t_mid, background = step.time, step.background
        c2 = term.outer.d2_s(t_mid, grid.nodes, term.moments_of_values(grid, background))
        second = 0.5 * (
            np.einsum("jkn,j,k->n", c2, dm_x, dm_z)
            + np.einsum("jkn,j,k->n", c2, dm_z, dm_x)
        ) * background
        if is_drift:
            flux += first + second
        else:
            q += first + second
    return q - d1m @ flux


def solve_second_variation(
    phi: SolutionPath,
    xi: SensitivityKernel,
    propagator: LinearizedPropagator,
    pairs,
    coeffs: CoefficientSet,
) -> SecondVariation:
    """Duhamel integral of the pair source through the adjoint propagator,
    midpoint rule in the source time."""
    grid = phi.grid
    for term in (coeffs.drift, coeffs.potential):
        if term is not None and term.n_moments:
            try:
                term.outer.d2_s(0.0, grid.nodes[:1], np.zeros(term.n_moments))
            except NotImplementedError:
                raise ValueError(
                    f"{term.scalar_name} lacks second variational derivatives"
                ) from None
    pairs = tuple(
        (snap_to_grid(grid, float(a)), snap_to_grid(grid, float(b))) for a, b in pairs
    )
    index_of = {p: i for i, p in enumerate(xi.probes)}
    try:
        pair_idx = [(index_of[a], index_of[b]) for a, b in pairs]
    except KeyError as missing:
        raise ValueError(f"probe {missing} has no first variation available")

    steps = _midpoint_data(phi, coeffs)
    d1m = propagator._d1m
    eta = np.zeros((len(pairs), phi.n_steps + 1, grid.n))
    current = np.zeros((len(pairs), grid.n))
    interacting = any(
        term is not None and term.n_moments
        for term in (coeffs.drift, coeffs.potential)
    )
    for k in range(phi.n_steps):
        if interacting:
            sources = np.stack(
                [
                    _pair_source(
                        steps[k],
                        0.5 * (xi.values[ia, k] + xi.values[ia, k + 1]),
                        0.5 * (xi.values[ib, k] + xi.values[ib, k + 1]),
                        coeffs,
                        grid,
                        d1m,
                    )
                    for ia, ib in pair_idx
                ]
            )
            current = propagator.adjoint_step(current, k) + phi.dt * (
                propagator.adjoint_half_step_from_mid(sources, k)
            )
        eta[:, k + 1] = current
    return SecondVariation(grid, phi.times, pairs, eta)


def dual_norm_dictionary(grid: Grid1D, count: int = 20) -> list:
    """Polynomials times Gaussian tapers, normalized in the C2 surrogate
    norm; the fixed dictionary standing in for dual-space norms."""
    from .core import d1 as d1_arr, d2 as d2_arr

    x = grid.nodes
    h = grid.h
    fns = []
    for power in range(5):
        for scale in (2.0, 3.0, 4.0, 5.0):
            f = (x / scale) ** power * np.exp(-((x / scale) ** 2))
            norm = (
                np.abs(f).max()
                + np.abs(d1_arr(f, h)).max()
                + np.abs(d2_arr(f, h)).max()
            )
            fns.append(f / norm)
            if len(fns) == count:
                return fns
    return fns


def c1_surrogate_norm(values: Array, h: float) -> float:
    from .core import d1 as d1_arr

    return float(np.abs(values).max() + np.abs(d1_arr(values, h)).max())


def fit_growth_envelope(lags: Array, values: Array):
    """Fit (C, c) so that values(tau) <= exp(C tau) E_{1/2}(c sqrt(tau)),
    least squares in log space over a coarse c-grid."""
    lags = np.asarray(lags, dtype=float)
    values = np.asarray(values, dtype=float)
    mask = lags > 0
    lags, values = lags[mask], values[mask]
    logs = np.log(np.maximum(values, 1e-300))
    best = (0.0, 0.0, math.inf)
    for c in np.concatenate([[0.0], np.geomspace(1e-2, 20.0, 40)]):
        ml = np.array([math.log(mittag_leffler_half(c * math.sqrt(t))) for t in lags])
        resid = logs - ml
        big_c = max(0.0, float(lags @ resid / (lags @ lags)))
        err = float(np.sum((resid - big_c * lags) ** 2))
        if err < best[2]:
            best = (big_c, float(c), err)
    return best[0], best[1]
