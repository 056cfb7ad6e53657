import math

import numpy as np
import pytest
from scipy.stats import gaussian_kde

from mcvlasov.benchmarks import (
    heat_baseline,
    mean_reversion_benchmark,
    potential_decay_benchmark,
)
from mcvlasov.coefficients import CoefficientSet, DiffusionMatrix, drift_preset
from mcvlasov.core import (
    ConvergenceError,
    Grid1D,
    NumericsError,
    TimeGrid,
    d1,
    d2,
    gaussian_density,
    l1_distance,
)
from mcvlasov.mild_solver import (
    envelope_gain,
    fit_envelope_scale,
    heat_flow_path,
    picard_map,
    singularity_resolution,
    solve_mild,
    stability_ratios,
    weak_residual,
)
from mcvlasov.coefficients import measure_bounds
from mcvlasov.kernels import HeatKernel


@pytest.fixture(scope="module")
def mr():
    return mean_reversion_benchmark()


@pytest.fixture(scope="module")
def mr_solution(mr):
    return solve_mild(mr.initial, mr.coeffs, mr.grid, mr.tgrid, tol=mr.tol)


def fd_fokker_planck_oracle(grid, initial_values, rate, coupling, a, horizon, dt):
    """Independent explicit finite-difference march of the strong equation."""
    v = initial_values.copy()
    steps = int(round(horizon / dt))
    x = grid.nodes
    w = grid.weights
    for _ in range(steps):
        mean = float(w @ (x * v))
        drift = -rate * (x - coupling * mean)
        v = v + dt * (0.5 * a * d2(v, grid.h) - d1(drift * v, grid.h))
    return v


class TestHeatBaseline:
    def test_final_density_is_wider_gaussian(self):
        bench = heat_baseline()
        path = solve_mild(bench.initial, bench.coeffs, bench.grid, bench.tgrid, tol=bench.tol)
        target = gaussian_density(bench.grid, 0.0, math.sqrt(2.0))
        assert l1_distance(path.final, target) < 1e-4
        assert path.iterations == 1

    def test_picard_map_without_coefficients_is_heat_flow(self):
        bench = heat_baseline()
        grid, tgrid = bench.grid, bench.tgrid
        kernel = HeatKernel(grid, 1.0)
        flow = heat_flow_path(bench.initial.values, kernel, tgrid)
        # an arbitrary wrong candidate path must be mapped onto the heat flow
        wrong = np.tile(gaussian_density(grid, 1.0, 2.0).values, (tgrid.steps + 1, 1))
        from mcvlasov.mild_solver import SolutionPath

        candidate = SolutionPath(grid, tgrid.nodes, wrong)
        mapped = picard_map(bench.initial, candidate, bench.coeffs, kernel)
        np.testing.assert_allclose(mapped.values, flow, atol=1e-12)


class TestPotentialDecay:
    @pytest.mark.parametrize("rate", [0.5, 1.0])
    def test_mass_decays_like_scalar_ode(self, rate):
        bench = potential_decay_benchmark(rate)
        path = solve_mild(bench.initial, bench.coeffs, bench.grid, bench.tgrid)
        masses = path.mass_series()
        for k in (len(masses) // 2, len(masses) - 1):
            t = path.times[k]
            assert masses[k] == pytest.approx(math.exp(-rate * t), abs=1e-4)


class TestMeanReversion:
    def test_single_picard_step_matches_fd_oracle_at_small_time(self):
        grid = Grid1D(-8.0, 8.0, 801)
        tgrid = TimeGrid(0.05, 20)
        coeffs = CoefficientSet(
            diffusion=DiffusionMatrix.measure(1.0, grid),
            drift=drift_preset("mean_reversion"),
        )
        initial = gaussian_density(grid, 0.5, 1.0)
        kernel = HeatKernel(grid, 1.0)
        flow_vals = heat_flow_path(initial.values, kernel, tgrid)
        from mcvlasov.mild_solver import SolutionPath

        flow = SolutionPath(grid, tgrid.nodes, flow_vals)
        stepped = picard_map(initial, flow, coeffs, kernel)
        oracle = fd_fokker_planck_oracle(
            grid, initial.values, 1.0, 1.0, 1.0, 0.05, dt=1e-5
        )
        err_stepped = grid.integrate(np.abs(stepped.values[-1] - oracle))
        err_flow = grid.integrate(np.abs(flow_vals[-1] - oracle))
        assert err_stepped < 5e-3
        assert err_stepped < 0.15 * err_flow

    def test_converges_and_contracts(self, mr_solution):
        hist = mr_solution.residual_history
        crossing = next(i for i, r in enumerate(hist) if r <= 1e-8)
        assert crossing + 1 <= 30
        # contraction is monotone after the third sweep until the iteration
        # reaches its roundoff floor (past the 1e-8 crossing)
        for i in range(3, crossing + 1):
            assert hist[i] < hist[i - 1]
        assert mr_solution.residual < 1e-12

    def test_mass_and_positivity(self, mr_solution):
        masses = mr_solution.mass_series()
        assert np.max(np.abs(masses - masses[0])) < 1e-6
        assert mr_solution.min_value() >= -1e-12

    def test_against_particle_monte_carlo_oracle(self, mr, mr_solution):
        rng = np.random.default_rng(42)
        n = 100_000
        x = rng.normal(0.5, 0.8, n)
        dt = mr.tgrid.dt
        root = math.sqrt(dt)
        for _ in range(mr.tgrid.steps):
            x = x + (-0.5 * (x - x.mean())) * dt + root * rng.standard_normal(n)
        kde = gaussian_kde(x)
        oracle_values = kde(mr.grid.nodes)
        gap = mr.grid.integrate(np.abs(mr_solution.values[-1] - oracle_values))
        assert gap < 0.05

    def test_variance_relaxes_toward_equilibrium(self, mr, mr_solution):
        # Var' = -Var + 1 from 0.64 gives Var(1) = 1 - 0.36 e^-1.
        x = mr.grid.nodes
        w = mr.grid.weights
        final = mr_solution.values[-1]
        var = float(w @ (x**2 * final)) - float(w @ (x * final)) ** 2
        assert var == pytest.approx(1.0 - 0.36 * math.exp(-1.0), abs=2e-3)


class TestWeakResidual:
    def test_heat_second_moment_identity(self):
        bench = heat_baseline()
        path = solve_mild(bench.initial, bench.coeffs, bench.grid, bench.tgrid, tol=bench.tol)
        taper = np.exp(-((bench.grid.nodes / 7.0) ** 8))
        f = bench.grid.nodes**2 * taper
        assert weak_residual(path, bench.coeffs, [f]) < 1e-3

    def test_constant_test_function_sees_mass_drift(self, mr, mr_solution):
        f = np.ones(mr.grid.n)
        assert weak_residual(mr_solution, mr.coeffs, [f]) < 1e-6

    def test_refinement_reduces_residual(self):
        taper_fn = lambda x: np.exp(-((x / 7.0) ** 8))
        residuals = []
        for n, steps in ((361, 40), (721, 80)):
            grid = Grid1D(-9.0, 9.0, n)
            tgrid = TimeGrid(0.5, steps)
            coeffs = CoefficientSet(
                diffusion=DiffusionMatrix.measure(1.0, grid),
                drift=drift_preset("mean_reversion", rate=0.5),
            )
            path = solve_mild(gaussian_density(grid, 0.3, 1.0), coeffs, grid, tgrid, tol=2e-12)
            f = np.sin(grid.nodes) * taper_fn(grid.nodes)
            residuals.append(weak_residual(path, coeffs, [f]))
        assert residuals[1] < residuals[0] / 1.8


class TestStabilityEnvelope:
    def test_fitted_envelope_bounds_other_pairs(self, mr):
        base = solve_mild(mr.initial, mr.coeffs, mr.grid, mr.tgrid, tol=mr.tol)
        perturbations = [(0.05, 1.0), (0.0, 1.1), (-0.08, 0.95)]
        ratio_series = []
        for dm, sf in perturbations:
            shifted = gaussian_density(mr.grid, dm, sf)
            other = solve_mild(shifted, mr.coeffs, mr.grid, mr.tgrid, tol=mr.tol)
            gap = l1_distance(mr.initial, shifted)
            ratio_series.append(stability_ratios(base, other, gap))
        samples = [mr.initial] + [gaussian_density(mr.grid, dm, sf) for dm, sf in perturbations]
        bounds = measure_bounds(samples, drift=mr.coeffs.drift)
        kappa_raw = bounds.kappa(mr.tgrid.horizon, mr.initial.mass())
        scale = fit_envelope_scale(mr.tgrid.nodes, ratio_series[0], kappa_raw)
        kappa = kappa_raw * scale
        for ratios in ratio_series[1:]:
            assert envelope_gain(mr.tgrid.nodes, ratios, kappa) <= 2.0


class TestFailureModes:
    def test_iteration_cap_raises_with_history(self, mr):
        with pytest.raises(ConvergenceError) as err:
            solve_mild(mr.initial, mr.coeffs, mr.grid, mr.tgrid, tol=1e-16, max_iterations=2)
        assert len(err.value.residuals) == 2

    def test_nonfinite_coefficients_raise(self, mr):
        wild = CoefficientSet(
            diffusion=mr.coeffs.diffusion,
            drift=drift_preset("mean_reversion", rate=1e160),
        )
        with np.errstate(over="ignore"), pytest.raises(NumericsError):
            solve_mild(mr.initial, wild, mr.grid, mr.tgrid, max_iterations=3)

    def test_rejects_nonpositive_tolerance(self, mr):
        with pytest.raises(ValueError):
            solve_mild(mr.initial, mr.coeffs, mr.grid, mr.tgrid, tol=0.0)


def test_singularity_resolution_improves_with_steps():
    coarse = singularity_resolution(TimeGrid(1.0, 50))
    fine = singularity_resolution(TimeGrid(1.0, 800))
    assert fine < coarse
    assert fine < 0.011
