import numba as nb
import numpy as np
import pytest

from hlode.errors import NoInfectedEquilibrium, StepSizeUnderflow
from hlode.ode import (HIV_SYSTEM, HivParameters, OdeSystem, hiv_equilibrium, hiv_rhs,
                       integrate, integrate_batch)


@nb.njit
def _decay(y, p, dy):
    for b in range(y.shape[1]):
        dy[0, b] = -p[0, b] * y[0, b]


@nb.njit
def _oscillator(y, p, dy):
    for b in range(y.shape[1]):
        dy[0, b] = y[1, b]
        dy[1, b] = -p[0, b] * y[0, b]


@nb.njit
def _blowup(y, p, dy):
    for b in range(y.shape[1]):
        dy[0, b] = y[0, b] * y[0, b]


DECAY = OdeSystem(1, _decay)
OSCILLATOR = OdeSystem(2, _oscillator)

TABLE2 = HivParameters(lam=np.exp(4.10), gamma=np.exp(-3.00), mu_T=np.exp(-2.20),
                       mu_Tstar=np.exp(-1.60), pi=np.exp(-0.170), mu_V=np.exp(3.40))


class TestHivRhs:
    def test_origin_keeps_only_production(self):
        p = HivParameters(1.0, 0.05, 0.1, 0.2, 0.8, 30.0)
        np.testing.assert_array_equal(hiv_rhs([0, 0, 0], p), [1.0, 0.0, 0.0])

    def test_hand_substitution(self):
        p = HivParameters(60.0, 0.05, 0.1, 0.2, 0.8, 30.0)
        np.testing.assert_allclose(hiv_rhs([100, 10, 50], p), [-200, 248, -1492], rtol=1e-14)

    def test_accepts_plain_array(self):
        np.testing.assert_array_equal(hiv_rhs([1, 2, 3], TABLE2.as_array()),
                                      hiv_rhs([1, 2, 3], TABLE2))


class TestEquilibrium:
    def test_fixed_point(self):
        y = hiv_equilibrium(TABLE2)
        assert np.max(np.abs(hiv_rhs(y, TABLE2))) <= 1e-10

    def test_closed_form_target_cells(self):
        T0 = hiv_equilibrium(TABLE2)[0]
        assert T0 == pytest.approx(np.exp(3.40 - 1.60 + 3.00 + 0.170), rel=1e-12)

    def test_all_components_positive(self):
        assert np.all(hiv_equilibrium(TABLE2) > 0)

    def test_low_production_raises(self):
        T0 = hiv_equilibrium(TABLE2)[0]
        p = HivParameters(0.5 * TABLE2.mu_T * T0, TABLE2.gamma, TABLE2.mu_T,
                          TABLE2.mu_Tstar, TABLE2.pi, TABLE2.mu_V)
        with pytest.raises(NoInfectedEquilibrium):
            hiv_equilibrium(p)

    def test_from_array_round_trip(self):
        assert HivParameters.from_array(TABLE2.as_array()) == TABLE2


class TestIntegrate:
    def test_exponential_decay(self):
        tr = integrate(DECAY, [1.0], [1.0], [0.0, 1.0])
        assert tr.states[0, 0] == 1.0
        assert tr.states[1, 0] == pytest.approx(np.exp(-1.0), abs=1e-8)

    def test_dense_output_between_steps(self):
        t = np.linspace(0, 10, 101)
        tr = integrate(OSCILLATOR, [4.0], [1.0, 0.0], t)
        np.testing.assert_allclose(tr.states[:, 0], np.cos(2 * t), atol=1e-7)

    def test_batch_members_independent(self):
        t = [0.5, 1.0, 2.0]
        batch = integrate_batch(DECAY, [[1.0], [3.0]], [[1.0], [2.0]], t)
        one = integrate(DECAY, [3.0], [2.0], t).states
        np.testing.assert_allclose(batch[1], one, rtol=1e-8)
        np.testing.assert_allclose(batch[:, :, 0], [np.exp(-np.array(t)), 2 * np.exp(-3 * np.array(t))],
                                   rtol=1e-7)

    def test_equilibrium_is_invariant(self):
        y0 = hiv_equilibrium(TABLE2)
        tr = integrate(HIV_SYSTEM, TABLE2.as_array(), y0, np.linspace(0, 30, 31))
        np.testing.assert_allclose(tr.states, np.tile(y0, (31, 1)), rtol=1e-6)

    def test_treatment_lowers_viral_load(self):
        y0 = hiv_equilibrium(TABLE2)
        p = TABLE2.as_array().copy()
        p[1] *= np.exp(-1.40)
        t = np.linspace(0, 3, 61)
        V = integrate(HIV_SYSTEM, p, y0, t, rtol=1e-11, atol=1e-12).states[:, 2]
        assert np.all(np.diff(V) < 0)

    def test_tolerance_refinement(self):
        y0 = hiv_equilibrium(TABLE2)
        p = TABLE2.as_array().copy()
        p[1] *= np.exp(-1.10)
        t = np.linspace(0, 30, 11)
        coarse = integrate(HIV_SYSTEM, p, y0, t, rtol=1e-8, atol=1e-10).states
        fine = integrate(HIV_SYSTEM, p, y0, t, rtol=5e-9, atol=5e-11).states
        assert np.all(np.abs(coarse - fine) <= 1e-8 * np.abs(fine) + 1e-10)

    def test_states_nonnegative(self):
        y0 = hiv_equilibrium(TABLE2)
        p = TABLE2.as_array().copy()
        p[1] *= np.exp(-2.5)
        tr = integrate(HIV_SYSTEM, p, y0, np.linspace(0, 30, 301))
        assert np.all(tr.states >= -1e-9)

    def test_blowup_reports_underflow(self):
        with pytest.raises(StepSizeUnderflow):
            integrate(OdeSystem(1, _blowup), [0.0], [1.0], [0.5, 2.0])

    @pytest.mark.parametrize("times", [[1.0, 0.5], [-1.0, 1.0], []])
    def test_bad_times(self, times):
        with pytest.raises(ValueError):
            integrate(DECAY, [1.0], [1.0], times)
