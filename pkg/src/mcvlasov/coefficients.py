"""Equation coefficients A, b, V with exact variational derivatives.

Drift and potential are restricted to the moment (cylindrical) form

    b(t, x, mu) = beta(t, x, (g_1, mu), ..., (g_m, mu)),

so that delta b / delta mu(z) = sum_j d(beta)/ds_j * g_j(z) and the second
variational derivative are exact formulas rather than numerical probes.
Boundedness is required on the truncated domain only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .core import (
    ConfigurationError,
    DensityField,
    Grid1D,
    NumericsError,
    SignedField,
    d1,
)

Array = np.ndarray


@dataclass(frozen=True)
class SmoothField1D:
    """A scalar field on the line with first/second derivatives.

    ``domain`` marks fields only defined on a truncated range (tabulated
    data); flows and solvers error out when they need values beyond it.
    """

    fn: Callable[[Array], Array]
    d1_fn: Callable[[Array], Array]
    d2_fn: Callable[[Array], Array]
    name: str = ""
    domain: tuple | None = None

    def __call__(self, x):
        return np.asarray(self.fn(np.asarray(x, dtype=float)), dtype=float)

    def derivative(self, x):
        return np.asarray(self.d1_fn(np.asarray(x, dtype=float)), dtype=float)

    def second_derivative(self, x):
        return np.asarray(self.d2_fn(np.asarray(x, dtype=float)), dtype=float)


def constant_field(value: float) -> SmoothField1D:
    return SmoothField1D(
        lambda x: np.full_like(x, float(value), dtype=float),
        lambda x: np.zeros_like(x, dtype=float),
        lambda x: np.zeros_like(x, dtype=float),
        name=f"constant({value})",
    )


def linear_field(rate: float) -> SmoothField1D:
    return SmoothField1D(
        lambda x: float(rate) * x,
        lambda x: np.full_like(x, float(rate), dtype=float),
        lambda x: np.zeros_like(x, dtype=float),
        name=f"linear({rate})",
    )


def bounded_odd_field(amplitude: float = 1.0) -> SmoothField1D:
    a = float(amplitude)
    return SmoothField1D(
        lambda x: a * x / (1.0 + x * x),
        lambda x: a * (1.0 - x * x) / (1.0 + x * x) ** 2,
        lambda x: a * 2.0 * x * (x * x - 3.0) / (1.0 + x * x) ** 3,
        name=f"bounded_odd({amplitude})",
    )


def sine_field(amplitude: float = 1.0, frequency: float = 1.0) -> SmoothField1D:
    a, k = float(amplitude), float(frequency)
    return SmoothField1D(
        lambda x: a * np.sin(k * x),
        lambda x: a * k * np.cos(k * x),
        lambda x: -a * k * k * np.sin(k * x),
        name=f"sine({amplitude},{frequency})",
    )


def tabulated_field(xs: Array, values: Array, name: str = "tabulated") -> SmoothField1D:
    spline = CubicSpline(np.asarray(xs, dtype=float), np.asarray(values, dtype=float))
    ds = spline.derivative()
    d2s = spline.derivative(2)
    lo, hi = float(xs[0]), float(xs[-1])

    def clamp(x):
        return np.clip(x, lo, hi)

    return SmoothField1D(
        lambda x: spline(clamp(x)),
        lambda x: ds(clamp(x)),
        lambda x: d2s(clamp(x)),
        name=name,
        domain=(lo, hi),
    )


def sigma_field(preset: str, **params) -> SmoothField1D:
    """Named field presets used by configurations and benchmarks."""
    if preset == "constant":
        return constant_field(params.get("value", 1.0))
    if preset == "linear":
        return linear_field(params.get("rate", 1.0))
    if preset == "bounded_odd":
        return bounded_odd_field(params.get("amplitude", 1.0))
    if preset == "sine":
        return sine_field(params.get("amplitude", 1.0), params.get("frequency", 1.0))
    if preset == "tabulated":
        return tabulated_field(
            np.asarray(params["xs"], dtype=float), np.asarray(params["values"], dtype=float)
        )
    raise ConfigurationError(f"unknown field preset {preset!r}")


@dataclass(frozen=True)
class DiffusionMatrix:
    """Uniformly elliptic diffusion entry A(x) (d = 1) with measured bounds.

    ``ellipticity`` is the smallest m with 1/m <= A(x) <= m on the grid;
    ``c2_bound`` is the finite-difference surrogate of the C^2 norm.
    """

    dim: int
    entry: SmoothField1D
    ellipticity: float
    c2_bound: float
    sigma: SmoothField1D | None = None

    @classmethod
    def measure(
        cls, entry: SmoothField1D | float, grid: Grid1D, sigma: SmoothField1D | None = None
    ) -> "DiffusionMatrix":
        if isinstance(entry, (int, float)):
            entry = constant_field(float(entry))
        a = entry(grid.nodes)
        if a.min() <= 0:
            raise ConfigurationError("diffusion entry must be positive on the grid")
        m = max(float(a.max()), 1.0 / float(a.min()))
        c2 = float(
            np.max(np.abs(a))
            + np.max(np.abs(entry.derivative(grid.nodes)))
            + np.max(np.abs(entry.second_derivative(grid.nodes)))
        )
        return cls(dim=1, entry=entry, ellipticity=m, c2_bound=c2, sigma=sigma)

    @classmethod
    def from_sigma(cls, sigma: SmoothField1D, grid: Grid1D) -> "DiffusionMatrix":
        entry = SmoothField1D(
            lambda x: sigma(x) ** 2,
            lambda x: 2.0 * sigma(x) * sigma.derivative(x),
            lambda x: 2.0 * (sigma.derivative(x) ** 2 + sigma(x) * sigma.second_derivative(x)),
            name=f"square({sigma.name})",
        )
        return cls.measure(entry, grid, sigma=sigma)

    def values(self, x: Array) -> Array:
        return self.entry(x)

    @property
    def is_constant(self) -> bool:
        return self.entry.name.startswith(("constant(", "square(constant("))

    def constant_value(self, grid: Grid1D) -> float:
        a = self.entry(grid.nodes)
        if float(a.max() - a.min()) > 1e-13 * max(1.0, float(np.abs(a).max())):
            raise ValueError("diffusion entry is not constant on the grid")
        return float(a[0])


class OuterFunction:
    """beta(t, x, s): outer function of the moment vector s, with s-derivatives."""

    n_moments: int = 0

    def value(self, t: float, x: Array, s: Array) -> Array:
        raise NotImplementedError

    def d_s(self, t: float, x: Array, s: Array) -> Array:
        """d(beta)/ds_j, shape (m, len(x))."""
        raise NotImplementedError

    def d2_s(self, t: float, x: Array, s: Array) -> Array:
        """d2(beta)/ds_j ds_k, shape (m, m, len(x))."""
        raise NotImplementedError


class FixedOuter(OuterFunction):
    """No measure dependence: beta(t, x, s) = f(x)."""

    n_moments = 0

    def __init__(self, fn: Callable[[Array], Array], name: str = "fixed"):
        self.fn = fn
        self.name = name

    def value(self, t, x, s):
        return np.asarray(self.fn(x), dtype=float)

    def d_s(self, t, x, s):
        return np.zeros((0, len(x)))

    def d2_s(self, t, x, s):
        return np.zeros((0, 0, len(x)))


class LinearMeanReversion(OuterFunction):
    """beta = -rate * (x - coupling * s_1); the moment is the mean."""

    n_moments = 1

    def __init__(self, rate: float = 1.0, coupling: float = 1.0):
        self.rate = float(rate)
        self.coupling = float(coupling)

    def value(self, t, x, s):
        return -self.rate * (x - self.coupling * s[0])

    def d_s(self, t, x, s):
        return np.full((1, len(x)), self.rate * self.coupling)

    def d2_s(self, t, x, s):
        return np.zeros((1, 1, len(x)))


class ComposedOuter(OuterFunction):
    """beta = base(x) + f(s) with user-supplied gradient and Hessian of f."""

    def __init__(
        self,
        f: Callable[[Array], float],
        grad: Callable[[Array], Array],
        hess: Callable[[Array], Array],
        n_moments: int,
        base: Callable[[Array], Array] | None = None,
        name: str = "composed",
    ):
        self.f = f
        self.grad = grad
        self.hess = hess
        self.n_moments = n_moments
        self.base = base
        self.name = name

    def value(self, t, x, s):
        out = np.full(len(x), float(self.f(s)))
        if self.base is not None:
            out = out + np.asarray(self.base(x), dtype=float)
        return out

    def d_s(self, t, x, s):
        g = np.asarray(self.grad(s), dtype=float).reshape(self.n_moments, 1)
        return np.broadcast_to(g, (self.n_moments, len(x))).copy()

    def d2_s(self, t, x, s):
        hval = np.asarray(self.hess(s), dtype=float).reshape(self.n_moments, self.n_moments, 1)
        return np.broadcast_to(hval, (self.n_moments, self.n_moments, len(x))).copy()


@dataclass(frozen=True)
class VariationKernel:
    """delta F / delta mu as the low-rank kernel sum_j coeffs_j(x) * g_j(z)."""

    grid: Grid1D
    coeffs: Array  # (m, n) over x
    kernel_vals: Array  # (m, n) over z

    def dense(self) -> Array:
        if self.coeffs.shape[0] == 0:
            return np.zeros((self.grid.n, self.grid.n))
        return self.coeffs.T @ self.kernel_vals

    def evaluate(self, x_idx: int, z_idx: int) -> float:
        return float(self.coeffs[:, x_idx] @ self.kernel_vals[:, z_idx])

    def contract(self, xi_values: Array) -> Array:
        """x |-> integral of the kernel against xi in z."""
        if self.coeffs.shape[0] == 0:
            return np.zeros(self.grid.n)
        pairings = self.kernel_vals @ (self.grid.weights * xi_values)
        return pairings @ self.coeffs

    def sup_abs(self) -> float:
        if self.coeffs.shape[0] == 0:
            return 0.0
        return float(np.abs(self.dense()).max())


@dataclass(frozen=True)
class SecondVariationKernel:
    """delta^2 F / delta mu^2 as sum_{jk} coeffs_{jk}(x) g_j(z) g_k(u)."""

    grid: Grid1D
    coeffs: Array  # (m, m, n) over x
    kernel_vals: Array  # (m, n)

    def evaluate(self, x_idx: int, z_idx: int, u_idx: int) -> float:
        g = self.kernel_vals
        return float(
            np.einsum("jk,j,k->", self.coeffs[:, :, x_idx], g[:, z_idx], g[:, u_idx])
        )

    def contract2(self, xi1_values: Array, xi2_values: Array) -> Array:
        """x |-> double integral against xi1(z) xi2(u), symmetrized."""
        m = self.kernel_vals.shape[0]
        if m == 0:
            return np.zeros(self.grid.n)
        w = self.grid.weights
        p1 = self.kernel_vals @ (w * xi1_values)
        p2 = self.kernel_vals @ (w * xi2_values)
        raw = np.einsum("jkn,j,k->n", self.coeffs, p1, p2)
        mirrored = np.einsum("jkn,j,k->n", self.coeffs, p2, p1)
        return 0.5 * (raw + mirrored)

    def sup_abs_bound(self) -> float:
        if self.kernel_vals.shape[0] == 0:
            return 0.0
        gmax = np.abs(self.kernel_vals).max(axis=1)
        return float(np.einsum("jkn,j,k->n", np.abs(self.coeffs), gmax, gmax).max())


class _MomentFunctional:
    """Shared machinery for drift and potential in moment form."""

    scalar_name = "coefficient"

    def __init__(self, outer: OuterFunction, kernels: Sequence[Callable[[Array], Array]], name: str = ""):
        if len(kernels) != outer.n_moments:
            raise ConfigurationError(
                f"outer function expects {outer.n_moments} moments, got {len(kernels)} kernels"
            )
        self.outer = outer
        self.kernels = tuple(kernels)
        self.name = name
        self._kernel_cache: dict = {}

    @property
    def n_moments(self) -> int:
        return self.outer.n_moments

    def kernel_values(self, grid: Grid1D) -> Array:
        key = (grid.x_min, grid.x_max, grid.n)
        vals = self._kernel_cache.get(key)
        if vals is None:
            if self.n_moments:
                vals = np.stack([np.asarray(g(grid.nodes), dtype=float) for g in self.kernels])
            else:
                vals = np.zeros((0, grid.n))
            self._kernel_cache[key] = vals
        return vals

    def kernel_values_at(self, points: Array) -> Array:
        """Kernels sampled at arbitrary points (transported moment rows)."""
        if not self.n_moments:
            return np.zeros((0, len(points)))
        return np.stack([np.asarray(g(points), dtype=float) for g in self.kernels])

    def moments(self, mu: SignedField) -> Array:
        kv = self.kernel_values(mu.grid)
        return kv @ (mu.grid.weights * mu.values)

    def moments_of_values(self, grid: Grid1D, values: Array) -> Array:
        return self.kernel_values(grid) @ (grid.weights * values)

    def values_at(self, t: float, x: Array, s: Array) -> Array:
        out = self.outer.value(t, np.asarray(x, dtype=float), s)
        if not np.all(np.isfinite(out)):
            raise NumericsError(f"{self.scalar_name} produced non-finite values")
        return out

    def evaluate(self, t: float, mu: DensityField) -> Array:
        return self.values_at(t, mu.grid.nodes, self.moments(mu))

    def variation(self, t: float, mu: SignedField) -> VariationKernel:
        s = self.moments(mu)
        coeffs = self.outer.d_s(t, mu.grid.nodes, s)
        return VariationKernel(mu.grid, coeffs, self.kernel_values(mu.grid))

    def second_variation(self, t: float, mu: SignedField) -> SecondVariationKernel:
        s = self.moments(mu)
        coeffs = self.outer.d2_s(t, mu.grid.nodes, s)
        return SecondVariationKernel(mu.grid, coeffs, self.kernel_values(mu.grid))


class InteractionDrift(_MomentFunctional):
    """Drift b(t, x, mu) in moment form."""

    scalar_name = "drift"


class PotentialTerm(_MomentFunctional):
    """Potential V(mu, x) in moment form; nonpositive on every evaluation."""

    scalar_name = "potential"

    def values_at(self, t, x, s):
        out = super().values_at(t, x, s)
        if out.max() > 0.0:
            raise NumericsError(f"potential went positive (max {out.max():.3e})")
        return out


def evaluate_drift(drift: InteractionDrift, t: float, mu: DensityField) -> Array:
    """b(t, x_i, mu) per grid node."""
    return drift.evaluate(t, mu)


def drift_variation(drift: InteractionDrift, t: float, mu: DensityField) -> VariationKernel:
    return drift.variation(t, mu)


def drift_second_variation(
    drift: InteractionDrift, t: float, mu: DensityField
) -> SecondVariationKernel:
    return drift.second_variation(t, mu)


@dataclass(frozen=True)
class CoefficientBounds:
    """Sampled sups of the coefficients and their variational derivatives.

    All entries dominate the corresponding sup over the provided sample
    family and the grid; the derivative norms use finite-difference
    surrogates in the spatial variable.
    """

    v_sup: float
    b_sup: float
    lip_measure: float
    r1: float
    r2: float
    r3: float
    r4: float
    c1: float

    def kappa(self, horizon: float, y_norm: float, scale: float = 1.0) -> float:
        """Growth rate scale[(V sqrt(T) + b) + L_A(sqrt(T) + 1) |Y|]."""
        root = math.sqrt(horizon)
        return scale * (
            (self.v_sup * root + self.b_sup) + self.lip_measure * (root + 1.0) * y_norm
        )


def _c1_surrogate(values: Array, h: float) -> float:
    return float(np.abs(values).max() + np.abs(d1(values, h)).max())


def measure_bounds(
    samples: Sequence[DensityField],
    drift: InteractionDrift | None = None,
    potential: PotentialTerm | None = None,
    times: Sequence[float] = (0.0,),
) -> CoefficientBounds:
    """Estimate the constants entering the stability envelopes by scanning
    the grid and a test family of measures."""
    if not samples:
        raise ValueError("need at least one sample measure")
    grid = samples[0].grid
    h = grid.h

    b_sup = v_sup = r1 = r2 = r3 = r4 = c1 = 0.0

    for mu in samples:
        for t in times:
            for term, is_drift in ((drift, True), (potential, False)):
                if term is None:
                    continue
                vals = term.evaluate(t, mu)
                if is_drift:
                    b_sup = max(b_sup, float(np.abs(vals).max()))
                else:
                    v_sup = max(v_sup, float(np.abs(vals).max()))
                c1 = max(c1, _c1_surrogate(vals, h))

                var = term.variation(t, mu)
                r1 = max(r1, var.sup_abs())
                if term.n_moments:
                    kv = var.kernel_vals
                    gmax = np.abs(kv).max(axis=1)
                    gdmax = np.abs(np.stack([d1(row, h) for row in kv])).max(axis=1)
                    cmax = np.abs(var.coeffs).max(axis=1)
                    cdmax = np.abs(
                        np.stack([d1(row, h) for row in var.coeffs])
                    ).max(axis=1)
                    # delta F(., y)/delta mu(w): C1 in y at fixed w, and in w at fixed y
                    r4 = max(r4, float(((cmax + cdmax) * gmax).sum()))
                    c1 = max(c1, float(((cmax + cdmax) * gmax).sum()),
                             float((cmax * (gmax + gdmax)).sum()))

                    var2 = term.second_variation(t, mu)
                    c2max = np.abs(var2.coeffs).max(axis=2)
                    r2 = max(r2, float(np.einsum("jk,j,k->", c2max, gmax, gmax)))
                    r3 = max(
                        r3,
                        float(np.einsum("jk,j,k->", c2max, gmax + gdmax, gmax + gdmax)),
                    )

    lip = 0.0
    for i in range(len(samples)):
        for j in range(i + 1, len(samples)):
            gap = grid.integrate(np.abs(samples[i].values - samples[j].values))
            if gap < 1e-14:
                continue
            for t in times:
                for term in (drift, potential):
                    if term is None:
                        continue
                    di = term.evaluate(t, samples[i]) - term.evaluate(t, samples[j])
                    lip = max(lip, float(np.abs(di).max()) / gap)

    return CoefficientBounds(
        v_sup=v_sup, b_sup=b_sup, lip_measure=lip, r1=r1, r2=r2, r3=r3, r4=r4, c1=c1
    )


@dataclass(frozen=True)
class CoefficientSet:
    """Diffusion + drift + potential bundle consumed by the solvers."""

    diffusion: DiffusionMatrix
    drift: InteractionDrift | None = None
    potential: PotentialTerm | None = None


def _bump_kernel(center: float, width: float) -> Callable[[Array], Array]:
    c, s = float(center), float(width)
    return lambda y: np.exp(-(((y - c) / s) ** 2))


def drift_preset(name: str, grid: Grid1D | None = None, **params) -> InteractionDrift | None:
    """Named drift presets: none | mean_reversion | moment_quadratic | custom_tabulated."""
    if name == "none":
        return None
    if name == "mean_reversion":
        outer = LinearMeanReversion(params.get("rate", 1.0), params.get("coupling", 1.0))
        return InteractionDrift(outer, (lambda y: y,), name="mean_reversion")
    if name == "moment_quadratic":
        scale = float(params.get("scale", 1.0))
        kernel = _bump_kernel(params.get("center", 0.0), params.get("width", 1.0))
        outer = ComposedOuter(
            f=lambda s: scale * s[0] ** 2,
            grad=lambda s: np.array([2.0 * scale * s[0]]),
            hess=lambda s: np.array([[2.0 * scale]]),
            n_moments=1,
            name="moment_quadratic",
        )
        return InteractionDrift(outer, (kernel,), name="moment_quadratic")
    if name == "custom_tabulated":
        if grid is None:
            raise ConfigurationError("custom_tabulated drift needs the grid")
        kernels = [
            tabulated_field(grid.nodes, np.asarray(v, dtype=float))
            for v in params.get("kernels", [])
        ]
        coeffs = np.asarray(params.get("coefficients", [1.0] * len(kernels)), dtype=float)
        if len(coeffs) != len(kernels):
            raise ConfigurationError("one coefficient per tabulated kernel required")
        base_vals = params.get("base")
        base = None
        if base_vals is not None:
            base = tabulated_field(grid.nodes, np.asarray(base_vals, dtype=float))
        outer = ComposedOuter(
            f=lambda s: float(coeffs @ s),
            grad=lambda s: coeffs.copy(),
            hess=lambda s: np.zeros((len(coeffs), len(coeffs))),
            n_moments=len(kernels),
            base=base,
            name="custom_tabulated",
        )
        return InteractionDrift(outer, tuple(kernels), name="custom_tabulated")
    raise ConfigurationError(f"unknown drift preset {name!r}")


def potential_preset(name: str, grid: Grid1D | None = None, **params) -> PotentialTerm | None:
    """Named potential presets; every preset is nonpositive by construction."""
    if name == "none":
        return None
    if name == "constant":
        value = float(params.get("value", -1.0))
        if value > 0:
            raise ConfigurationError("potential must be nonpositive")
        return PotentialTerm(FixedOuter(lambda x: np.full_like(x, value)), (), name="constant")
    if name == "moment_quadratic":
        scale = float(params.get("scale", 1.0))
        if scale < 0:
            raise ConfigurationError("moment_quadratic potential needs scale >= 0")
        kernel = _bump_kernel(params.get("center", 0.0), params.get("width", 1.0))
        outer = ComposedOuter(
            f=lambda s: -scale * s[0] ** 2,
            grad=lambda s: np.array([-2.0 * scale * s[0]]),
            hess=lambda s: np.array([[-2.0 * scale]]),
            n_moments=1,
            name="moment_quadratic",
        )
        return PotentialTerm(outer, (kernel,), name="moment_quadratic")
    if name == "custom_tabulated":
        if grid is None:
            raise ConfigurationError("custom_tabulated potential needs the grid")
        vals = np.asarray(params["values"], dtype=float)
        if vals.max() > 0:
            raise ConfigurationError("tabulated potential must be nonpositive")
        tab = tabulated_field(grid.nodes, vals)
        return PotentialTerm(FixedOuter(tab), (), name="custom_tabulated")
    raise ConfigurationError(f"unknown potential preset {name!r}")
