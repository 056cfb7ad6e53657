import math

import numpy as np
import pytest

from mcvlasov.core import (
    DensityField,
    Grid1D,
    SignedField,
    gaussian_density,
    gaussian_values,
    l1_distance,
    l1_norm,
    mollified_delta,
)
from mcvlasov.coefficients import DiffusionMatrix, sigma_field, tabulated_field
from mcvlasov.kernels import (
    HeatKernel,
    fit_gaussian_envelope,
    green_apply,
    green_gradient_apply,
)


@pytest.fixture(scope="module")
def grid():
    return Grid1D(-10.0, 10.0, 2001)


@pytest.fixture(scope="module")
def kernel(grid):
    return HeatKernel(grid, 1.0)


@pytest.fixture(scope="module")
def small_grid():
    return Grid1D(-6.0, 6.0, 321)


@pytest.fixture(scope="module")
def variable_unit_kernel(small_grid):
    # Variable-mode machinery at A identically 1, for cross-mode agreement.
    diff = DiffusionMatrix.measure(sigma_field("constant", value=1.0), small_grid)
    return HeatKernel(small_grid, diff, mode="variable", build_step=2.5e-4)


@pytest.fixture(scope="module")
def variable_kernel(small_grid):
    entry = tabulated_field(
        small_grid.nodes, 1.0 + 0.3 * np.sin(small_grid.nodes) ** 2
    )
    diff = DiffusionMatrix.measure(entry, small_grid)
    return HeatKernel(small_grid, diff, mode="variable", build_step=2.5e-4)


class TestGreenApply:
    def test_point_mass_closed_form(self, grid, kernel):
        out = green_apply(kernel, 1.0, [(0.0, 1.0)])
        center = out.values[grid.n // 2]
        # exact value including the recorded 2h mollification of the mass
        var = 1.0 + (2.0 * grid.h) ** 2
        assert center == pytest.approx(1.0 / math.sqrt(2 * math.pi * var), rel=1e-10)
        assert center == pytest.approx(0.3989422804, rel=1e-3)

    def test_mass_conserved(self, grid, kernel):
        src = DensityField(
            grid,
            0.3 * gaussian_values(grid.nodes, -2.0, 0.7)
            + 0.7 * gaussian_values(grid.nodes, 1.0, 1.2),
        )
        for t in (0.01, 0.5, 2.0):
            assert green_apply(kernel, t, src).mass() == pytest.approx(
                src.mass(), abs=1e-6
            )

    def test_variance_adds(self, grid, kernel):
        out = green_apply(kernel, 1.0, gaussian_density(grid, 0.0, 1.0))
        assert l1_distance(out, gaussian_density(grid, 0.0, math.sqrt(2.0))) < 1e-10

    def test_rejects_nonpositive_time(self, grid, kernel):
        src = gaussian_density(grid, 0.0, 1.0)
        for t in (0.0, -1.0):
            with pytest.raises(ValueError):
                green_apply(kernel, t, src)

    def test_positivity(self, grid, kernel):
        out = green_apply(kernel, 0.3, mollified_delta(grid, 1.5))
        assert out.values.min() >= 0.0

    def test_semigroup_constant_mode(self, grid, kernel):
        src = gaussian_density(grid, 0.5, 0.8)
        direct = green_apply(kernel, 0.75, src)
        nested = green_apply(kernel, 0.5, green_apply(kernel, 0.25, src))
        assert l1_distance(direct, nested) < 1e-5

    def test_cross_mode_agreement(self, small_grid, variable_unit_kernel):
        constant = HeatKernel(small_grid, 1.0)
        src = gaussian_density(small_grid, 0.0, 1.0)
        t = 0.5
        a = variable_unit_kernel.apply(t, src)
        b = constant.apply(t, src)
        assert l1_distance(a, b) < 1e-4


class TestGreenGradientApply:
    def test_divergence_form_integrates_to_zero(self, grid, kernel):
        w = SignedField(grid, 2.5 * gaussian_values(grid.nodes, 0.3, 1.1))
        out = green_gradient_apply(kernel, 0.4, w)
        assert abs(out.mass()) < 1e-6

    def test_delta_gives_gaussian_derivative_profile(self, grid, kernel):
        c = 1.7
        w = SignedField(grid, c * mollified_delta(grid, 0.0).values)
        out = green_gradient_apply(kernel, 1.0, w)
        x = grid.nodes
        var = 1.0 + (2.0 * grid.h) ** 2
        exact = -c * (x / var) * gaussian_values(x, 0.0, math.sqrt(var))
        np.testing.assert_allclose(out.values, exact, atol=1e-10)
        # and against the unmollified closed form at its stated scale
        profile = -c * x * np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
        assert np.max(np.abs(out.values - profile)) < 1e-3

    def test_singular_scaling_in_time(self, grid, kernel):
        # A sharp-edged flux probes the t^(-1/2) operator-norm scaling.
        w = SignedField(grid, np.where(np.abs(grid.nodes) <= 1.0, 0.5, 0.0))
        ts = np.array([0.1, 0.2, 0.4, 0.8])
        sups = [
            np.abs(green_gradient_apply(kernel, t, w).values).max() for t in ts
        ]
        slope = np.polyfit(np.log(ts), np.log(sups), 1)[0]
        assert slope == pytest.approx(-0.5, abs=0.1)


class TestVariableMode:
    def test_mass_defect(self, variable_kernel):
        assert variable_kernel.mass_defect(0.25) < 1e-6

    def test_entries_nonnegative(self, variable_kernel):
        assert variable_kernel.matrix(0.25).min() >= -1e-10

    def test_semigroup(self, small_grid, variable_kernel):
        src = gaussian_density(small_grid, 0.4, 0.9)
        direct = variable_kernel.apply(0.25, src)
        nested = variable_kernel.apply(0.125, variable_kernel.apply(0.125, src))
        assert l1_distance(direct, nested) < 1e-5

    def test_rejects_off_step_time(self, variable_kernel):
        with pytest.raises(ValueError):
            variable_kernel.matrix(0.25 + 1e-5)

    def test_gradient_matches_constant_mode(self, small_grid, variable_unit_kernel):
        constant = HeatKernel(small_grid, 1.0)
        w = SignedField(small_grid, gaussian_values(small_grid.nodes, 0.0, 1.0))
        a = variable_unit_kernel.gradient_apply(0.5, w)
        b = constant.gradient_apply(0.5, w)
        assert l1_distance(a, b) < 2e-4

    def test_aronson_envelope_fit(self, variable_kernel):
        fit = fit_gaussian_envelope(variable_kernel, 0.25)
        assert fit.succeeded
        assert fit.constant <= 10.0
        assert fit.sigma <= 10.0


def test_gradient_transport_direction(grid, kernel):
    # One explicit-Euler mild step with constant positive drift must move
    # mass to the right: G*Y - t * grad-term(b Y) vs the shifted source.
    src = gaussian_density(grid, 0.0, 1.0)
    b, t = 1.0, 0.05
    flux = SignedField(grid, b * src.values)
    stepped = kernel.apply_values(t, src.values) - t * kernel.gradient_values(t, flux.values)
    mean = grid.integrate(grid.nodes * stepped)
    assert mean == pytest.approx(b * t, rel=1e-2)
