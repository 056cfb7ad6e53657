"""Characteristic flow of the common-noise field, gain factor and dressing.

The flow solves dZ/dt = -sigma_com(Z), Z(0,x) = x together with its first
and second variational equations and the log-gain integral, by classical
fourth-order Runge-Kutta with a bounded step. Conjugation by the flow
(v -> gain * v(Z)) transports densities; dressing conjugates the generator,
producing the transformed diffusion entry and drift.

For 1-d state the gain equals the flow Jacobian, and the Jacobian/Hessian
of the inverse flow at transported points follow from the chain rule, so a
single running integration per base-point set serves a whole noise path.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .coefficients import InteractionDrift, SmoothField1D
from .core import DomainExitError, Grid1D, NumericsError, SignedField

Array = np.ndarray

_DEFAULT_MAX_STEP = 1.0e-3
_CACHE_LIMIT = 128


@dataclass
class _FlowState:
    """Joint state (position, jacobian, hessian, log-gain) per base point."""

    z: Array
    jac: Array
    hess: Array
    log_gain: Array

    def copy(self) -> "_FlowState":
        return _FlowState(
            self.z.copy(), self.jac.copy(), self.hess.copy(), self.log_gain.copy()
        )


class FlowMap:
    """Flow of dZ/dt = -sigma(Z) with derivatives up to second order."""

    def __init__(self, sigma: SmoothField1D, max_step: float = _DEFAULT_MAX_STEP):
        if max_step <= 0 or max_step > 1e-3 + 1e-15:
            raise ValueError("flow integration step must lie in (0, 1e-3]")
        self.sigma = sigma
        self.max_step = max_step
        self._cache: OrderedDict = OrderedDict()

    # right-hand side of the joint variational system
    def _rhs(self, state: _FlowState):
        z = state.z
        s = self.sigma(z)
        s1 = self.sigma.derivative(z)
        s2 = self.sigma.second_derivative(z)
        return (
            -s,
            -s1 * state.jac,
            -s2 * state.jac**2 - s1 * state.hess,
            -s1,
        )

    def _rk4_span(self, state: _FlowState, span: float) -> _FlowState:
        if span == 0.0:
            return state
        steps = max(1, int(math.ceil(abs(span) / self.max_step)))
        dt = span / steps
        z, j, h, g = state.z, state.jac, state.hess, state.log_gain
        for _ in range(steps):
            st1 = _FlowState(z, j, h, g)
            k1 = self._rhs(st1)
            st2 = _FlowState(z + 0.5 * dt * k1[0], j + 0.5 * dt * k1[1],
                             h + 0.5 * dt * k1[2], g)
            k2 = self._rhs(st2)
            st3 = _FlowState(z + 0.5 * dt * k2[0], j + 0.5 * dt * k2[1],
                             h + 0.5 * dt * k2[2], g)
            k3 = self._rhs(st3)
            st4 = _FlowState(z + dt * k3[0], j + dt * k3[1], h + dt * k3[2], g)
            k4 = self._rhs(st4)
            z = z + (dt / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            j = j + (dt / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            h = h + (dt / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
            g = g + (dt / 6.0) * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
        out = _FlowState(z, j, h, g)
        self._check_domain(out.z, span)
        return out

    def _check_domain(self, z: Array, at_time: float):
        domain = getattr(self.sigma, "domain", None)
        if domain is None:
            return
        lo, hi = domain
        if z.min() < lo or z.max() > hi:
            raise DomainExitError(
                f"characteristic flow left [{lo}, {hi}]", exit_time=at_time
            )

    def _solve_state(self, t: float, x: Array) -> _FlowState:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        key = (float(t), x.tobytes())
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        state = _FlowState(
            x.copy(), np.ones_like(x), np.zeros_like(x), np.zeros_like(x)
        )
        state = self._rk4_span(state, t)
        self._cache[key] = state
        if len(self._cache) > _CACHE_LIMIT:
            self._cache.popitem(last=False)
        return state

    def solve(self, t: float, x):
        """(Z(t,x), dZ/dx, d2Z/dx2) for signed t."""
        st = self._solve_state(float(t), x)
        return st.z.copy(), st.jac.copy(), st.hess.copy()

    def gain(self, t: float, x) -> Array:
        """G(t,x) = exp of the integrated divergence defect along the flow."""
        st = self._solve_state(float(t), x)
        return np.exp(st.log_gain)

    def solve_with_gain(self, t: float, x):
        st = self._solve_state(float(t), x)
        return st.z.copy(), st.jac.copy(), st.hess.copy(), np.exp(st.log_gain)

    def track(self, x0: Array) -> "FlowTrack":
        return FlowTrack(self, np.asarray(x0, dtype=float))


class FlowTrack:
    """Running flow state for a fixed base-point set, advanced incrementally.

    Moving from w to w' integrates only the increment, so sweeping a
    Brownian path costs total-variation time instead of n_t full solves.
    """

    def __init__(self, flow: FlowMap, x0: Array):
        self.flow = flow
        self.x0 = x0
        self.w = 0.0
        self.state = _FlowState(
            x0.copy(), np.ones_like(x0), np.zeros_like(x0), np.zeros_like(x0)
        )

    def goto(self, w: float) -> _FlowState:
        span = float(w) - self.w
        if span != 0.0:
            self.state = self.flow._rk4_span(self.state, span)
            self.w = float(w)
        return self.state


@dataclass(frozen=True)
class GainFactor:
    """Multiplicative factor G(t,x) = exp int_0^t B(Z(s,x)) ds, B = -div sigma."""

    flow: FlowMap

    def divergence_defect(self, x) -> Array:
        return -self.flow.sigma.derivative(np.asarray(x, dtype=float))

    def __call__(self, t: float, x) -> Array:
        return self.flow.gain(t, x)


def flow_solve(flow: FlowMap, t: float, x):
    return flow.solve(t, x)


def gain(flow: FlowMap, t: float, x) -> Array:
    return flow.gain(t, x)


def _interpolate(grid: Grid1D, values: Array, targets: Array, order: int) -> Array:
    clipped = np.clip(targets, grid.x_min, grid.x_max)
    if order == 1:
        return np.interp(clipped, grid.nodes, values)
    if order == 3:
        return CubicSpline(grid.nodes, values)(clipped)
    raise ValueError(f"interpolation order must be 1 or 3, got {order}")


def conjugate_values(
    grid: Grid1D, values: Array, flow: FlowMap, w: float, order: int = 3
) -> Array:
    """Raw transport x -> G(w,x) * values(Z(w,x)) on grid nodes."""
    if w == 0.0:
        return values.copy()
    z, _, _, g = flow.solve_with_gain(w, grid.nodes)
    return g * _interpolate(grid, values, z, order)


def conjugate(
    v: SignedField, flow: FlowMap, w: float, direction: str = "forward", order: int = 3
):
    """Transport a field by the noise flow.

    forward is the group element taking the transformed state back to the
    physical one; inverse is the same map at -w, so forward-then-inverse is
    the identity up to interpolation error. Off-grid values use cubic
    interpolation with clamped boundary extrapolation.
    """
    if direction == "forward":
        out = conjugate_values(v.grid, v.values, flow, w, order)
    elif direction == "inverse":
        out = conjugate_values(v.grid, v.values, flow, -w, order)
    else:
        raise ValueError(f"direction must be forward or inverse, got {direction!r}")
    return type(v)(v.grid, out, time_tag=v.time_tag)


@dataclass(frozen=True)
class DressedCoefficients:
    """Transformed diffusion entry and drift at a frozen noise value w.

    The drift's measure argument stays the undressed state; callers supply
    its moments per evaluation.
    """

    grid: Grid1D
    w: float
    z_points: Array  # Z(-w, x) per node
    jac: Array  # dZ/dz(w, .) at z_points
    hess: Array  # d2Z/dz2(w, .) at z_points
    a_values: Array  # dressed diffusion entry
    sigma2_at_z: Array
    strat_at_z: Array  # (1/2) sigma_com sigma_com' at z_points
    drift: InteractionDrift | None

    def drift_values(self, t: float, moments: Array) -> Array:
        base = -self.strat_at_z
        if self.drift is not None:
            base = base + self.drift.values_at(t, self.z_points, moments)
        return base * self.jac + 0.5 * self.sigma2_at_z * self.hess

    def drift_moment_coeffs(self, t: float, moments: Array) -> Array:
        """d b-tilde / d s_j per node, shape (m, n)."""
        if self.drift is None:
            return np.zeros((0, len(self.z_points)))
        return self.drift.outer.d_s(t, self.z_points, moments) * self.jac

    def drift_moment_coeffs2(self, t: float, moments: Array) -> Array:
        if self.drift is None:
            n = len(self.z_points)
            return np.zeros((0, 0, n))
        return self.drift.outer.d2_s(t, self.z_points, moments) * self.jac

    @property
    def ellipticity_range(self) -> tuple:
        return float(self.a_values.min()), float(self.a_values.max())


def dress(
    sigma_ind: SmoothField1D,
    drift: InteractionDrift | None,
    flow: FlowMap,
    w: float,
    grid: Grid1D,
) -> DressedCoefficients:
    """Conjugated coefficients at noise value w on the grid."""
    z = flow.solve(-w, grid.nodes)[0] if w != 0.0 else grid.nodes.copy()
    jac, hess = _forward_derivatives_at(flow, w, z)
    return _dress_from_parts(sigma_ind, drift, flow.sigma, grid, w, z, jac, hess)


def _forward_derivatives_at(flow: FlowMap, w: float, z: Array):
    if w == 0.0:
        return np.ones_like(z), np.zeros_like(z)
    _, jac, hess = flow.solve(w, z)
    if np.abs(jac).min() < 1e-12:
        raise NumericsError("flow Jacobian became singular while dressing")
    return jac, hess


def _dress_from_parts(sigma_ind, drift, sigma_com, grid, w, z, jac, hess):
    sig2 = sigma_ind(z) ** 2
    strat = 0.5 * sigma_com(z) * sigma_com.derivative(z)
    a_values = sig2 * jac * jac
    return DressedCoefficients(
        grid=grid,
        w=float(w),
        z_points=z,
        jac=jac,
        hess=hess,
        a_values=a_values,
        sigma2_at_z=sig2,
        strat_at_z=strat,
        drift=drift,
    )


def dress_on_track(
    sigma_ind: SmoothField1D,
    drift: InteractionDrift | None,
    flow: FlowMap,
    back_track: FlowTrack,
    w: float,
    grid: Grid1D,
) -> DressedCoefficients:
    """Dressing that reuses a running integration of the inverse flow.

    ``back_track`` follows Z(-w, x) on the grid; the forward-flow Jacobian
    and Hessian at the transported points come from the 1-d chain-rule
    identities J(w, Z(-w,x)) = 1/J(-w,x) and
    H(w, Z(-w,x)) = -H(-w,x)/J(-w,x)^3.
    """
    state = back_track.goto(-w)
    if np.abs(state.jac).min() < 1e-12:
        raise NumericsError("flow Jacobian became singular while dressing")
    jac = 1.0 / state.jac
    hess = -state.hess / state.jac**3
    return _dress_from_parts(sigma_ind, drift, flow.sigma, grid, w, state.z, jac, hess)


def dress_translation(
    sigma_ind: SmoothField1D,
    drift: InteractionDrift | None,
    shift: float,
    grid: Grid1D,
) -> DressedCoefficients:
    """Degenerate dressing for constant common noise: a pure translation."""
    z = grid.nodes + shift
    ones = np.ones(grid.n)
    zeros = np.zeros(grid.n)
    sig2 = sigma_ind(z) ** 2
    return DressedCoefficients(
        grid=grid,
        w=float(shift),
        z_points=z,
        jac=ones,
        hess=zeros,
        a_values=sig2,
        sigma2_at_z=sig2,
        strat_at_z=zeros,
        drift=drift,
    )
