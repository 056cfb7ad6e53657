"""Pathwise solution of the common-noise equation via the characteristics
transform, with cross-checks and sensitivities along frozen paths.

Per time step the noise value is frozen at the left node, the coefficients
are re-dressed there, and the transformed deterministic equation advances
by an explicit drift sub-step followed by Crank-Nicolson diffusion. The
drift's measure argument is the undressed state, evaluated with a one-step
lag by default or by an inner fixed point in strict mode. Moments of the
undressed state are computed by the change of variables
(g_j, v) = int g_j(Z(-w, u)) g(u) du, which keeps them exactly linear in
the dressed state (the linearization the on-path sensitivities need).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .characteristics import (
    FlowMap,
    conjugate_values,
    dress_on_track,
    dress_translation,
)
from .coefficients import (
    CoefficientSet,
    DiffusionMatrix,
    InteractionDrift,
    SmoothField1D,
)
from .core import (
    ConfigurationError,
    DensityField,
    Grid1D,
    NumericsError,
    SignedField,
    TimeGrid,
    project_nonnegative,
)
from .kernels import conservative_diffusion_tridiag, tridiag_apply, tridiag_solve_shifted
from .mild_solver import solve_mild
from .sensitivity import SecondVariation, SensitivityKernel, snap_to_grid

Array = np.ndarray

_STRICT_TOL = 1e-8
_STRICT_CAP = 60


@dataclass(frozen=True)
class BrownianPath:
    """Sampled common-noise path on a time grid, W(0) = 0."""

    times: Array
    values: Array  # (n_t + 1, dims)
    seed: int
    dims: int

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        times.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def component(self, j: int = 0) -> Array:
        return self.values[:, j]


def sample_path(seed: int, tgrid: TimeGrid, dims: int = 1) -> BrownianPath:
    """Counter-based Gaussian increments; bit-reproducible per (seed, grid, dims)."""
    if dims < 1:
        raise ValueError("need at least one noise dimension")
    gen = np.random.Generator(np.random.Philox(key=int(seed)))
    increments = math.sqrt(tgrid.dt) * gen.standard_normal((tgrid.steps, dims))
    values = np.vstack([np.zeros((1, dims)), np.cumsum(increments, axis=0)])
    return BrownianPath(tgrid.nodes, values, int(seed), dims)


@dataclass(frozen=True)
class PathProblem:
    grid: Grid1D
    tgrid: TimeGrid
    sigma_ind: SmoothField1D
    drift: InteractionDrift | None
    sigma_com: object  # SmoothField1D | tuple of floats | None
    strict: bool = False
    interp_order: int = 3

    @property
    def noise_kind(self) -> str:
        if self.sigma_com is None:
            return "none"
        if isinstance(self.sigma_com, SmoothField1D):
            if self.sigma_com.name == "constant(0.0)":
                return "none"
            return "state_1d"
        return "constant_matrix"


@dataclass(frozen=True)
class PathSolution:
    """Dressed path g_t, undressed path v_t and the driving noise."""

    problem: PathProblem
    path: BrownianPath
    dressed: Array  # (n_t + 1, n)
    undressed: Array

    @property
    def grid(self) -> Grid1D:
        return self.problem.grid

    @property
    def times(self) -> Array:
        return self.path.times

    def dressed_field(self, k: int) -> DensityField:
        return DensityField(self.grid, self.dressed[k], time_tag=float(self.times[k]))

    def undressed_field(self, k: int) -> DensityField:
        return DensityField(self.grid, self.undressed[k], time_tag=float(self.times[k]))

    @property
    def final(self) -> DensityField:
        return self.undressed_field(self.path.n_steps)

    def mass_series(self) -> tuple:
        w = self.grid.weights
        return self.dressed @ w, self.undressed @ w


class _NoiseGeometry:
    """Per-step dressing and undressing machinery for one path."""

    def __init__(self, problem: PathProblem, path: BrownianPath):
        self.problem = problem
        self.grid = problem.grid
        kind = problem.noise_kind
        self.kind = kind
        if kind == "state_1d":
            self.w_series = path.component(0)
            self.flow = FlowMap(problem.sigma_com)
            self._back = self.flow.track(self.grid.nodes)
        elif kind == "constant_matrix":
            row = np.asarray(problem.sigma_com, dtype=float)
            if row.ndim != 1 or len(row) != path.dims:
                raise ConfigurationError(
                    f"constant noise row has {row.size} entries, path has {path.dims}"
                )
            self.w_series = path.values @ row
            self.flow = None
        else:
            raise ValueError("no noise geometry for the noiseless case")

    def dressed_at(self, k_or_w) -> object:
        w = float(k_or_w)
        if self.kind == "state_1d":
            return dress_on_track(
                self.problem.sigma_ind,
                self.problem.drift,
                self.flow,
                self._back,
                w,
                self.grid,
            )
        return dress_translation(
            self.problem.sigma_ind, self.problem.drift, w, self.grid
        )

    def undress(self, values: Array, w: float) -> Array:
        if self.kind == "state_1d":
            return conjugate_values(
                self.grid, values, self.flow, w, self.problem.interp_order
            )
        if w == 0.0:
            return values.copy()
        shifted = np.clip(self.grid.nodes - w, self.grid.x_min, self.grid.x_max)
        if self.problem.interp_order == 1:
            return np.interp(shifted, self.grid.nodes, values)
        from scipy.interpolate import CubicSpline

        return CubicSpline(self.grid.nodes, values)(shifted)


def _central_flux_divergence(flux: Array, h: float) -> Array:
    out = np.empty_like(flux)
    out[1:-1] = (flux[2:] - flux[:-2]) / (2.0 * h)
    out[0] = (flux[1] - flux[0]) / h
    out[-1] = (flux[-1] - flux[-2]) / h
    return out


def _run_path(
    problem: PathProblem,
    path: BrownianPath,
    initial_values: Array,
    probes: tuple = (),
    pairs: tuple = (),
):
    """March the dressed equation; optionally carry first/second variations
    of the discrete map along (exact linearization, lag mirrored)."""
    grid, tgrid = problem.grid, problem.tgrid
    n, dt = grid.n, tgrid.dt
    w_quad = grid.weights
    h = grid.h
    geometry = _NoiseGeometry(problem, path)
    drift = problem.drift

    if (probes or pairs) and problem.strict:
        raise ConfigurationError("path sensitivities require the lag mode, not strict")

    g = initial_values.copy()
    dressed = np.empty((tgrid.steps + 1, n))
    undressed = np.empty_like(dressed)
    dressed[0] = g
    undressed[0] = g  # W(0) = 0

    from .core import MOLLIFIER_WIDTH_FACTOR, mollified_delta

    width = MOLLIFIER_WIDTH_FACTOR * h
    xi = None
    if probes:
        xi = np.stack([mollified_delta(grid, p, width=width).values for p in probes])
        xi_paths = np.empty((len(probes), tgrid.steps + 1, n))
        xi_paths[:, 0] = xi
        probe_index = {p: i for i, p in enumerate(probes)}
    eta = None
    if pairs:
        eta = np.zeros((len(pairs), n))
        eta_paths = np.zeros((len(pairs), tgrid.steps + 1, n))

    for k in range(tgrid.steps):
        t = float(path.times[k])
        w_now = float(geometry.w_series[k])
        coeffs_k = geometry.dressed_at(w_now)
        tri = conservative_diffusion_tridiag(grid, coeffs_k.a_values)
        half = 0.5 * dt

        if drift is not None:
            rows = drift.kernel_values_at(coeffs_k.z_points)
            moments = rows @ (w_quad * g)
            if problem.strict:
                moments = _strict_moments(g, rows, w_quad, coeffs_k, t, tri, half, dt, h)
            bt = coeffs_k.drift_values(t, moments)
        else:
            moments = np.zeros(0)
            bt = coeffs_k.drift_values(t, moments)

        def advance(state: Array, flux_extra: Array | None = None) -> Array:
            flux = bt * state
            if flux_extra is not None:
                flux = flux + flux_extra
            rhs = state - dt * _central_flux_divergence(flux, h)
            rhs = rhs + half * tridiag_apply(tri, rhs)
            return tridiag_solve_shifted(tri, half, rhs)

        if xi is not None or eta is not None:
            c1 = coeffs_k.drift_moment_coeffs(t, moments) if drift is not None else None

        if eta is not None:
            c2 = coeffs_k.drift_moment_coeffs2(t, moments) if drift is not None else None
            new_eta = np.empty_like(eta)
            for q_idx, (pa, pb) in enumerate(pairs):
                ia, ib = probe_index[pa], probe_index[pb]
                extra = None
                if drift is not None and rows.shape[0]:
                    dm_x = rows @ (w_quad * xi[ia])
                    dm_z = rows @ (w_quad * xi[ib])
                    dm_eta = rows @ (w_quad * eta[q_idx])
                    second = 0.5 * (
                        np.einsum("jkn,j,k->n", c2, dm_x, dm_z)
                        + np.einsum("jkn,j,k->n", c2, dm_z, dm_x)
                    )
                    extra = (
                        (dm_z @ c1) * xi[ia]
                        + (dm_x @ c1) * xi[ib]
                        + second * g
                        + (dm_eta @ c1) * g
                    )
                new_eta[q_idx] = advance(eta[q_idx], extra)
            eta = new_eta
            eta_paths[:, k + 1] = eta

        if xi is not None:
            new_xi = np.empty_like(xi)
            for p_idx in range(len(probes)):
                extra = None
                if drift is not None and rows.shape[0]:
                    dm = rows @ (w_quad * xi[p_idx])
                    extra = (dm @ c1) * g
                new_xi[p_idx] = advance(xi[p_idx], extra)
            xi = new_xi
            xi_paths[:, k + 1] = xi

        g = advance(g)
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite dressed state at time index {k + 1}")
        dressed[k + 1] = g
        undressed[k + 1] = geometry.undress(g, float(geometry.w_series[k + 1]))

    out = {"dressed": dressed, "undressed": undressed, "geometry": geometry}
    if probes:
        out["xi"] = xi_paths
        out["width"] = width
    if pairs:
        out["eta"] = eta_paths
    return out


def _strict_moments(g, rows, w_quad, coeffs_k, t, tri, half, dt, h):
    """Inner fixed point: evaluate the measure argument at the new state."""
    moments = rows @ (w_quad * g)
    for _ in range(_STRICT_CAP):
        bt = coeffs_k.drift_values(t, moments)
        rhs = g - dt * _central_flux_divergence(bt * g, h)
        rhs = rhs + half * tridiag_apply(tri, rhs)
        candidate = tridiag_solve_shifted(tri, half, rhs)
        updated = rows @ (w_quad * candidate)
        gap = float(np.abs(updated - moments).max())
        moments = updated
        if gap < _STRICT_TOL:
            return moments
    raise NumericsError("strict measure-argument iteration did not converge")


def _project_path(values: Array) -> Array:
    return np.stack(
        [project_nonnegative(row, where=f"time index {k}") for k, row in enumerate(values)]
    )


def _delegate_noiseless(problem: PathProblem, path: BrownianPath, initial) -> PathSolution:
    coeffs = CoefficientSet(
        diffusion=DiffusionMatrix.from_sigma(problem.sigma_ind, problem.grid),
        drift=problem.drift,
    )
    mild = solve_mild(initial, coeffs, problem.grid, problem.tgrid, tol=1e-11)
    return PathSolution(problem, path, mild.values, mild.values)


def solve_path_1d(
    initial: DensityField,
    sigma_ind: SmoothField1D,
    drift: InteractionDrift | None,
    sigma_com: SmoothField1D | None,
    path: BrownianPath,
    grid: Grid1D,
    strict: bool = False,
    interp_order: int = 3,
) -> PathSolution:
    """Pathwise solve for 1-d state-dependent common noise."""
    if path.dims != 1:
        raise ConfigurationError("state-dependent noise needs a 1-d path")
    tgrid = TimeGrid(float(path.times[-1]), path.n_steps)
    problem = PathProblem(grid, tgrid, sigma_ind, drift, sigma_com, strict, interp_order)
    if problem.noise_kind == "none":
        return _delegate_noiseless(problem, path, initial)
    run = _run_path(problem, path, initial.values)
    return PathSolution(
        problem, path, _project_path(run["dressed"]), _project_path(run["undressed"])
    )


def solve_path_multi(
    initial: DensityField,
    sigma_ind: SmoothField1D,
    drift: InteractionDrift | None,
    sigma_com_row,
    path: BrownianPath,
    grid: Grid1D,
    strict: bool = False,
    interp_order: int = 3,
) -> PathSolution:
    """Constant d''-dimensional common noise; dressing degenerates to translation."""
    row = tuple(float(c) for c in np.atleast_1d(sigma_com_row))
    tgrid = TimeGrid(float(path.times[-1]), path.n_steps)
    problem = PathProblem(grid, tgrid, sigma_ind, drift, row, strict, interp_order)
    if all(c == 0.0 for c in row):
        return _delegate_noiseless(problem, path, initial)
    run = _run_path(problem, path, initial.values)
    return PathSolution(
        problem, path, _project_path(run["dressed"]), _project_path(run["undressed"])
    )


def sensitivity_on_path(solution: PathSolution, probes, pairs=()):
    """First (and optionally second) variations of the pathwise solve,
    undressed slice by slice along the frozen path."""
    problem = solution.problem
    grid = problem.grid
    probes = tuple(snap_to_grid(grid, float(p)) for p in np.atleast_1d(probes))
    pairs = tuple(
        (snap_to_grid(grid, float(a)), snap_to_grid(grid, float(b))) for a, b in pairs
    )
    needed = tuple(dict.fromkeys(probes + tuple(p for ab in pairs for p in ab)))
    if problem.noise_kind == "none":
        from .sensitivity import build_propagator, solve_first_variation, solve_second_variation
        from .mild_solver import SolutionPath

        coeffs = CoefficientSet(
            diffusion=DiffusionMatrix.from_sigma(problem.sigma_ind, grid),
            drift=problem.drift,
        )
        mild = SolutionPath(grid, solution.times, solution.dressed)
        xi = solve_first_variation(mild, coeffs, needed)
        eta = None
        if pairs:
            eta = solve_second_variation(mild, xi, build_propagator(mild, coeffs), pairs, coeffs)
        return _restrict_probes(xi, probes), eta

    run = _run_path(problem, solution.path, solution.dressed[0], probes=needed, pairs=pairs)
    geometry = run["geometry"]
    w_series = geometry.w_series
    xi_raw = run["xi"]
    xi_und = np.empty_like(xi_raw)
    for k in range(len(solution.times)):
        for i in range(len(needed)):
            xi_und[i, k] = geometry.undress(xi_raw[i, k], float(w_series[k]))
    xi = SensitivityKernel(grid, solution.times, needed, xi_und, run["width"])
    eta = None
    if pairs:
        eta_raw = run["eta"]
        eta_und = np.empty_like(eta_raw)
        for k in range(len(solution.times)):
            for q in range(len(pairs)):
                eta_und[q, k] = geometry.undress(eta_raw[q, k], float(w_series[k]))
        eta = SecondVariation(grid, solution.times, pairs, eta_und)
    return _restrict_probes(xi, probes), eta


def _restrict_probes(xi: SensitivityKernel, probes: tuple) -> SensitivityKernel:
    if probes == xi.probes:
        return xi
    idx = [xi.probes.index(p) for p in probes]
    return SensitivityKernel(
        xi.grid, xi.times, probes, xi.values[idx], xi.mollification_width
    )


def solve_ito_direct(
    initial: DensityField,
    sigma_ind: SmoothField1D,
    drift: InteractionDrift | None,
    sigma_com: SmoothField1D,
    path: BrownianPath,
    grid: Grid1D,
) -> Array:
    """Milstein finite-difference march of the untransformed equation:
    explicit drift/noise transport, implicit full diffusion."""
    if path.dims != 1:
        raise ConfigurationError("the direct scheme is for 1-d noise")
    h = grid.h
    w_quad = grid.weights
    dt = float(path.times[1] - path.times[0])
    half = 0.5 * dt
    x = grid.nodes
    sc = sigma_com(x)
    a_full = sc**2 + sigma_ind(x) ** 2
    tri = conservative_diffusion_tridiag(grid, a_full)
    v = initial.values.copy()
    wvals = path.component(0)
    for k in range(path.n_steps):
        t = float(path.times[k])
        dw = float(wvals[k + 1] - wvals[k])
        flux = sc * v
        rhs = v - dw * _central_flux_divergence(flux, h)
        rhs += 0.5 * (dw * dw - dt) * _central_flux_divergence(
            sc * _central_flux_divergence(flux, h), h
        )
        if drift is not None:
            moments = drift.moments_of_values(grid, v)
            b_vals = drift.values_at(t, x, moments)
            rhs -= dt * _central_flux_divergence(b_vals * v, h)
        rhs = rhs + half * tridiag_apply(tri, rhs)
        v = tridiag_solve_shifted(tri, half, rhs)
        if not np.all(np.isfinite(v)):
            raise NumericsError(f"direct scheme blew up at time index {k + 1}")
    return v


def ito_stratonovich_check(
    initial: DensityField,
    sigma_ind: SmoothField1D,
    drift: InteractionDrift | None,
    sigma_com: SmoothField1D,
    path: BrownianPath,
    grid: Grid1D,
) -> float:
    """Final-time L1 distance between the transform-based solve and the
    direct Milstein march of the untransformed form."""
    transform = solve_path_1d(initial, sigma_ind, drift, sigma_com, path, grid)
    direct = solve_ito_direct(initial, sigma_ind, drift, sigma_com, path, grid)
    return float(grid.weights @ np.abs(transform.undressed[-1] - direct))


@dataclass(frozen=True)
class StabilityFit:
    """Monte Carlo gap ratios and the fitted exponential growth constant."""

    times: Array
    mean_ratios: Array
    growth_constant: float
    n_paths: int


def expectation_stability(
    initial1: DensityField,
    initial2: DensityField,
    sigma_ind: SmoothField1D,
    drift: InteractionDrift | None,
    sigma_com,
    grid: Grid1D,
    tgrid: TimeGrid,
    n_paths: int,
    seed0: int = 0,
    workers: int = 1,
) -> StabilityFit:
    """Mean dressed-state gap ratio over paths and its log-linear growth fit."""
    if n_paths < 10:
        raise ValueError("need at least 10 paths")
    gap0 = float(grid.weights @ np.abs(initial1.values - initial2.values))
    times = tgrid.nodes

    def one(seed: int) -> Array:
        path = _sample_for(sigma_com, seed, tgrid)
        s1 = _solve_for(initial1, sigma_ind, drift, sigma_com, path, grid)
        s2 = _solve_for(initial2, sigma_ind, drift, sigma_com, path, grid)
        return np.abs(s1.dressed - s2.dressed) @ grid.weights

    seeds = [seed0 + j for j in range(n_paths)]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            gaps = list(pool.map(one, seeds))
    else:
        gaps = [one(s) for s in seeds]
    mean_gap = np.mean(gaps, axis=0)
    if gap0 == 0.0:
        return StabilityFit(times, np.zeros_like(mean_gap), 0.0, n_paths)
    ratios = mean_gap / gap0
    mask = times > 0
    slope, _ = np.polyfit(times[mask], np.log(np.maximum(ratios[mask], 1e-300)), 1)
    return StabilityFit(times, ratios, float(slope), n_paths)


def _sample_for(sigma_com, seed: int, tgrid: TimeGrid) -> BrownianPath:
    dims = len(np.atleast_1d(sigma_com)) if not isinstance(sigma_com, SmoothField1D) and sigma_com is not None else 1
    return sample_path(seed, tgrid, dims)


def _solve_for(initial, sigma_ind, drift, sigma_com, path, grid) -> PathSolution:
    if sigma_com is None or isinstance(sigma_com, SmoothField1D):
        return solve_path_1d(initial, sigma_ind, drift, sigma_com, path, grid)
    return solve_path_multi(initial, sigma_ind, drift, sigma_com, path, grid)


def pathwise_stability_ratios(s1: PathSolution, s2: PathSolution) -> Array:
    """|v1_t - v2_t| / |Y1 - Y2| along a shared path."""
    w = s1.grid.weights
    gap0 = float(w @ np.abs(s1.undressed[0] - s2.undressed[0]))
    if gap0 == 0.0:
        raise ValueError("initial conditions coincide")
    return (np.abs(s1.undressed - s2.undressed) @ w) / gap0


def write_path_dump(solution: PathSolution, times, stream) -> None:
    """One delimited-text dump per path: noise series in commented preamble
    lines, then t, x, v rows at the requested times."""
    stream.write(f"# seed {solution.path.seed} dims {solution.path.dims}\n")
    for t, row in zip(solution.path.times, solution.path.values):
        joined = "\t".join(f"{v:.17g}" for v in row)
        stream.write(f"# W\t{t:.17g}\t{joined}\n")
    stream.write("# t\tx\tv\n")
    nodes = solution.grid.nodes
    for t in times:
        k = int(np.argmin(np.abs(solution.times - t)))
        for x, v in zip(nodes, solution.undressed[k]):
            stream.write(f"{solution.times[k]:.17g}\t{x:.17g}\t{v:.17g}\n")
