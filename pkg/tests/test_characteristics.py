import math

import numpy as np
import pytest

from mcvlasov.coefficients import (
    bounded_odd_field,
    constant_field,
    linear_field,
    sigma_field,
    sine_field,
    tabulated_field,
)
from mcvlasov.core import (
    DomainExitError,
    Grid1D,
    SignedField,
    gaussian_density,
    l1_distance,
)
from mcvlasov.characteristics import (
    FlowMap,
    GainFactor,
    conjugate,
    dress,
    dress_on_track,
    dress_translation,
    flow_solve,
    gain,
)


@pytest.fixture(scope="module")
def grid():
    return Grid1D(-8.0, 8.0, 801)


class TestFlowSolve:
    def test_constant_field_translates(self):
        flow = FlowMap(constant_field(1.0))
        x = np.linspace(-2, 2, 9)
        z, jac, hess = flow_solve(flow, 0.7, x)
        np.testing.assert_allclose(z, x - 0.7, atol=1e-12)
        np.testing.assert_allclose(jac, 1.0, atol=1e-12)
        np.testing.assert_allclose(hess, 0.0, atol=1e-12)

    def test_linear_field_contracts(self):
        flow = FlowMap(linear_field(1.0))
        x = np.linspace(-2, 2, 9)
        for t in (0.5, -0.8):
            z, jac, _ = flow_solve(flow, t, x)
            np.testing.assert_allclose(z, x * math.exp(-t), rtol=1e-12)
            np.testing.assert_allclose(jac, math.exp(-t), rtol=1e-12)

    def test_jacobian_matches_finite_difference(self):
        flow = FlowMap(sine_field())
        x = np.linspace(-2.5, 2.5, 11)
        eps = 1e-5
        for t in (0.4, -0.6, 1.0):
            _, jac, hess = flow_solve(flow, t, x)
            zp = flow_solve(flow, t, x + eps)[0]
            zm = flow_solve(flow, t, x - eps)[0]
            fd_jac = (zp - zm) / (2 * eps)
            np.testing.assert_allclose(jac, fd_jac, atol=1e-6)
            # second difference needs a wider probe to clear roundoff
            eps2 = 1e-4
            zp2 = flow_solve(flow, t, x + eps2)[0]
            zm2 = flow_solve(flow, t, x - eps2)[0]
            z0 = flow_solve(flow, t, x)[0]
            fd_hess = (zp2 - 2 * z0 + zm2) / eps2**2
            np.testing.assert_allclose(hess, fd_hess, atol=1e-5)

    def test_group_property(self):
        flow = FlowMap(sine_field())
        x = np.linspace(-2, 2, 21)
        for t, s in ((0.3, 0.5), (-0.4, 0.9), (0.6, -0.6)):
            direct = flow_solve(flow, t + s, x)[0]
            nested = flow_solve(flow, t, flow_solve(flow, s, x)[0])[0]
            np.testing.assert_allclose(direct, nested, atol=1e-8)

    def test_track_matches_fresh_solves(self):
        flow = FlowMap(sine_field())
        x = np.linspace(-2, 2, 15)
        track = flow.track(x)
        for w in (0.2, 0.5, 0.1, -0.3, 0.0):
            state = track.goto(w)
            z, jac, hess = flow_solve(flow, w, x)
            np.testing.assert_allclose(state.z, z, atol=1e-9)
            np.testing.assert_allclose(state.jac, jac, atol=1e-9)
            np.testing.assert_allclose(state.hess, hess, atol=1e-7)

    def test_domain_exit_reported(self):
        xs = np.linspace(-2.0, 2.0, 101)
        sig = tabulated_field(xs, np.full_like(xs, -1.0))  # flows to the right
        flow = FlowMap(sig)
        with pytest.raises(DomainExitError) as err:
            flow_solve(flow, 1.0, np.array([1.5]))
        assert err.value.exit_time != 0.0

    def test_step_bound_enforced(self):
        with pytest.raises(ValueError):
            FlowMap(sine_field(), max_step=0.01)


class TestGain:
    def test_constant_field_unit_gain(self):
        flow = FlowMap(constant_field(2.0))
        assert gain(flow, 0.9, np.array([0.3]))[0] == pytest.approx(1.0, abs=1e-12)

    def test_linear_field_exponential_gain(self):
        flow = FlowMap(linear_field(1.0))
        x = np.linspace(-1, 1, 5)
        np.testing.assert_allclose(gain(flow, 0.7, x), math.exp(-0.7), rtol=1e-12)

    def test_inversion_identity(self):
        flow = FlowMap(sine_field())
        x = np.linspace(-2, 2, 21)
        for t in (0.4, 1.0, -0.7):
            z_back = flow_solve(flow, -t, x)[0]
            product = gain(flow, -t, x) * gain(flow, t, z_back)
            np.testing.assert_allclose(product, 1.0, atol=1e-8)

    def test_divergence_defect_sign(self):
        gf = GainFactor(FlowMap(linear_field(2.0)))
        np.testing.assert_allclose(gf.divergence_defect(np.zeros(3)), -2.0)

    def test_gain_is_jacobian_in_one_dimension(self):
        flow = FlowMap(bounded_odd_field())
        x = np.linspace(-2, 2, 11)
        z, jac, _ = flow_solve(flow, 0.8, x)
        np.testing.assert_allclose(gain(flow, 0.8, x), jac, rtol=1e-10)


class TestConjugate:
    def test_zero_noise_is_identity(self, grid):
        flow = FlowMap(sine_field())
        v = gaussian_density(grid, 0.0, 1.0)
        out = conjugate(v, flow, 0.0)
        assert l1_distance(out, v) == 0.0

    def test_mass_preserved(self, grid):
        # change-of-variables oracle: the gain is exactly the Jacobian
        flow = FlowMap(bounded_odd_field(0.8))
        v = gaussian_density(grid, 0.3, 0.9)
        for w in (0.6, -1.1):
            out = conjugate(v, flow, w, direction="forward")
            assert out.mass() == pytest.approx(v.mass(), abs=1e-5)

    def test_forward_then_inverse_returns_field(self, grid):
        flow = FlowMap(bounded_odd_field(0.8))
        v = gaussian_density(grid, -0.4, 1.1)
        roundtrip = conjugate(conjugate(v, flow, 0.7, "forward"), flow, 0.7, "inverse")
        assert l1_distance(roundtrip, v) < 1e-5

    def test_constant_noise_is_translation(self, grid):
        flow = FlowMap(constant_field(1.0))
        v = gaussian_density(grid, 0.0, 1.0)
        out = conjugate(v, flow, 0.5, "forward")
        shifted = gaussian_density(grid, 0.5, 1.0)
        assert l1_distance(out, shifted) < 1e-6

    def test_signed_fields_pass_through(self, grid):
        flow = FlowMap(linear_field(0.5))
        v = SignedField(grid, np.sin(grid.nodes) * np.exp(-grid.nodes**2))
        out = conjugate(v, flow, 0.4)
        assert isinstance(out, SignedField)

    def test_unknown_direction_rejected(self, grid):
        flow = FlowMap(linear_field(0.5))
        with pytest.raises(ValueError):
            conjugate(gaussian_density(grid, 0, 1), flow, 0.1, "sideways")


class TestDress:
    def test_constant_noise_shifts_coefficients(self, grid):
        sigma_ind = sigma_field(
            "tabulated",
            xs=np.linspace(-20, 20, 4001),
            values=1.0 + 0.3 * np.sin(np.linspace(-20, 20, 4001)) ** 2,
        )
        drift = None
        flow = FlowMap(constant_field(2.0))
        w = 0.4
        dressed = dress(sigma_ind, drift, flow, w, grid)
        np.testing.assert_allclose(dressed.z_points, grid.nodes + 0.8, atol=1e-10)
        np.testing.assert_allclose(
            dressed.a_values, sigma_ind(grid.nodes + 0.8) ** 2, atol=1e-9
        )
        np.testing.assert_allclose(dressed.drift_values(0.0, np.zeros(0)), 0.0, atol=1e-12)

    def test_linear_noise_closed_form(self, grid):
        # hand evaluation: Z(w, z) = z e^-w, so the entry is sigma^2 e^{-2w}
        # and the drift picks up -x/2 from the geometry
        sigma_ind = constant_field(1.3)
        flow = FlowMap(linear_field(1.0))
        w = 0.6
        dressed = dress(sigma_ind, None, flow, w, grid)
        np.testing.assert_allclose(
            dressed.a_values, 1.3**2 * math.exp(-2 * w), rtol=1e-10
        )
        np.testing.assert_allclose(
            dressed.drift_values(0.0, np.zeros(0)), -0.5 * grid.nodes, atol=1e-9
        )

    def test_zero_noise_value_gives_stratonovich_correction_only(self, grid):
        sigma_ind = constant_field(1.0)
        sigma_com = sine_field(0.7)
        flow = FlowMap(sigma_com)
        dressed = dress(sigma_ind, None, flow, 0.0, grid)
        np.testing.assert_allclose(dressed.a_values, 1.0, atol=1e-12)
        expected = -0.5 * sigma_com(grid.nodes) * sigma_com.derivative(grid.nodes)
        np.testing.assert_allclose(
            dressed.drift_values(0.0, np.zeros(0)), expected, atol=1e-12
        )

    def test_track_variant_matches_direct(self, grid):
        sigma_ind = constant_field(1.0)
        flow = FlowMap(bounded_odd_field(0.8))
        track = flow.track(grid.nodes)
        for w in (0.3, 0.7, 0.2):
            direct = dress(sigma_ind, None, flow, w, grid)
            tracked = dress_on_track(sigma_ind, None, flow, track, w, grid)
            np.testing.assert_allclose(tracked.a_values, direct.a_values, atol=1e-8)
            np.testing.assert_allclose(tracked.hess, direct.hess, atol=1e-7)
            np.testing.assert_allclose(
                tracked.drift_values(0.0, np.zeros(0)),
                direct.drift_values(0.0, np.zeros(0)),
                atol=1e-8,
            )

    def test_translation_dressing(self, grid):
        sigma_ind = sigma_field(
            "tabulated",
            xs=np.linspace(-20, 20, 4001),
            values=1.0 + 0.2 * np.cos(np.linspace(-20, 20, 4001)),
        )
        dressed = dress_translation(sigma_ind, None, 0.9, grid)
        np.testing.assert_allclose(
            dressed.a_values, sigma_ind(grid.nodes + 0.9) ** 2, atol=1e-9
        )


class TestBoundedDerivatives:
    def test_bounded_field_keeps_jacobian_uniform_in_noise(self):
        # bounded odd field: away from its stationary point the Jacobian
        # J = sigma(Z)/sigma(x) is trapped by the field range, so the sup
        # over w in [-5, 5] stays modest, far below the exp(|w|) envelope.
        # (At the hyperbolic zero itself J = exp(sigma'(0) |w|), so the
        # uniform claim genuinely needs the exclusion.)
        flow = FlowMap(bounded_odd_field(1.0), max_step=1e-3)
        x = np.concatenate([np.linspace(-4, -0.5, 36), np.linspace(0.5, 4, 36)])
        sup = 0.0
        for w in np.linspace(-5, 5, 21):
            if w == 0.0:
                continue
            _, jac, _ = flow_solve(flow, w, x)
            sup = max(sup, float(np.abs(jac).max()))
        assert sup < 5.0
        assert sup < 0.05 * math.exp(5.0)

    def test_ellipticity_envelope_with_fitted_exponent(self, grid):
        sigma_ind = constant_field(1.0)
        flow = FlowMap(linear_field(0.3))
        ws = np.linspace(-2.0, 2.0, 9)
        logs, rates = [], []
        for w in ws:
            if w == 0.0:
                continue
            lo, hi = dress(sigma_ind, None, flow, w, grid).ellipticity_range
            rates.append(max(abs(math.log(lo)), abs(math.log(hi))) / abs(w))
        fitted = max(rates)
        assert fitted <= 1.0
        for w in ws:
            lo, hi = dress(sigma_ind, None, flow, w, grid).ellipticity_range
            assert lo >= math.exp(-fitted * abs(w)) - 1e-9
            assert hi <= math.exp(fitted * abs(w)) + 1e-9
