import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybridffl.config import build_config
from hybridffl.errors import ValidationError
from hybridffl.model import (
    FflModel,
    GeneKinetics,
    GeneUnit,
    SwitchingParams,
    expected_switch_rate_on,
    log_transition_weights,
    ou_mean,
    require_valid,
    steady_state_on_prob,
    switch_rate_on,
    topological_order,
    validate_model,
)


def default_model():
    return build_config({}).model


class TestSteadyState:
    def test_symmetric_rates(self):
        assert steady_state_on_prob(SwitchingParams(1, 1, 1), 0.0) == pytest.approx(0.5, abs=1e-15)

    def test_log_three(self):
        assert steady_state_on_prob(SwitchingParams(1, 1, 1), math.log(3)) == pytest.approx(0.75, rel=1e-14)

    @pytest.mark.parametrize("x", [-5.0, 0.0, 3.3])
    def test_unregulated_ratio(self, x):
        assert steady_state_on_prob(SwitchingParams(2, 0, 1), x) == pytest.approx(2 / 3, rel=1e-14)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            steady_state_on_prob(SwitchingParams(1, 1, 1), float("nan"))

    def test_rate_identity(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            sw = SwitchingParams(*rng.uniform(0.05, 5, 3))
            x = rng.uniform(-2, 2)
            f = switch_rate_on(sw, [x])
            assert steady_state_on_prob(sw, x) == pytest.approx(f / (f + sw.km), rel=1e-12)


rates = st.floats(0.01, 10.0)


class TestSteadyStateProperties:
    @given(rates, st.floats(0.01, 5.0), rates, st.floats(-3, 3), st.floats(0.01, 2))
    def test_increasing_in_regulator_level(self, kp, ke, km, x, step):
        sw = SwitchingParams(kp, ke, km)
        lo, hi = steady_state_on_prob(sw, x), steady_state_on_prob(sw, x + step)
        assert 0 < lo <= hi < 1

    @given(rates, st.floats(0, 5.0), rates, st.floats(-3, 3), st.floats(0, 1))
    def test_jensen_bound(self, kp, ke, km, m, v):
        # the expected exponential rate never falls below the rate at the mean
        sw = SwitchingParams(kp, ke, km)
        assert expected_switch_rate_on(sw, [m], [v]) >= switch_rate_on(sw, [m]) * (1 - 1e-12)


class TestSwitchRate:
    def test_unregulated(self):
        assert switch_rate_on(SwitchingParams(1, 2, 1), []) == 1.0

    def test_average_of_equal_values(self):
        sw = SwitchingParams(1, 1, 1)
        for x in (-1.0, 0.3, 2.0):
            assert switch_rate_on(sw, [x, x]) == pytest.approx(switch_rate_on(sw, [x]), rel=1e-15)
            assert switch_rate_on(sw, [x]) == pytest.approx(math.exp(x), rel=1e-15)

    def test_two_regulators(self):
        assert switch_rate_on(SwitchingParams(0.5, 2, 1), [1.0, 0.0]) == pytest.approx(0.5 * math.e, rel=1e-15)
        assert round(switch_rate_on(SwitchingParams(0.5, 2, 1), [1.0, 0.0]), 4) == 1.3591

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            switch_rate_on(SwitchingParams(1, 1, 1), [1.0, float("inf")])


class TestExpectedSwitchRate:
    def test_degenerate_gaussian(self):
        assert expected_switch_rate_on(SwitchingParams(1, 1, 1), [0.0], [0.0]) == 1.0

    def test_single_regulator(self):
        assert expected_switch_rate_on(SwitchingParams(1, 1, 1), [1.0], [2.0]) == pytest.approx(math.exp(2), rel=1e-14)

    def test_single_regulator_monte_carlo(self):
        rng = np.random.default_rng(11)
        x = 1.0 + math.sqrt(2.0) * rng.standard_normal(1_000_000)
        assert np.exp(x).mean() == pytest.approx(math.exp(2), rel=0.01)

    def test_averaged_regulators(self):
        assert expected_switch_rate_on(SwitchingParams(1, 2, 1), [1.0, 1.0], [1.0, 1.0]) == pytest.approx(
            math.exp(3), rel=1e-14
        )

    def test_empty_list(self):
        assert expected_switch_rate_on(SwitchingParams(0.7, 2, 1), [], []) == 0.7

    def test_zero_variance_matches_rate(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            sw = SwitchingParams(*rng.uniform(0.1, 3, 3))
            means = rng.normal(size=rng.integers(0, 3))
            assert expected_switch_rate_on(sw, means, np.zeros_like(means)) == pytest.approx(
                switch_rate_on(sw, means), rel=1e-12
            )

    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError):
            expected_switch_rate_on(SwitchingParams(1, 1, 1), [0.0], [-1e-3])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            expected_switch_rate_on(SwitchingParams(1, 1, 1), [0.0, 1.0], [0.1])


class TestOuMean:
    def test_fixed_point(self):
        kin = GeneKinetics(0.6, 1.5, 1.0, 0.1)
        np.testing.assert_allclose(ou_mean(kin, 0.4, np.linspace(0, 20, 50)), 0.4, rtol=1e-14)

    def test_initial_condition(self):
        assert ou_mean(GeneKinetics(0.6, 1.5, 1.0, 0.1), 3.2, 0.0) == 3.2

    def test_closed_form_value(self):
        value = ou_mean(GeneKinetics(2, 0.5, 0, 1), 0.0, 2.0)
        assert value == pytest.approx(4 * (1 - math.exp(-1)), rel=1e-14)
        assert round(value, 4) == 2.5285

    def test_negative_time_rejected(self):
        with pytest.raises(ValueError):
            ou_mean(GeneKinetics(1, 1, 0, 1), 0.0, -0.1)

    def test_monotone_without_overshoot(self):
        rng = np.random.default_rng(5)
        t = np.linspace(0, 10, 100)
        for _ in range(100):
            kin = GeneKinetics(rng.uniform(0.1, 3), rng.uniform(0.1, 3), 0.0, 1.0)
            x0 = rng.uniform(-5, 5)
            path = ou_mean(kin, x0, t)
            target = kin.b / kin.lam
            dist = np.abs(path - target)
            assert np.all(np.diff(dist) <= 1e-12)
            assert np.all(np.sign(path - target) * np.sign(x0 - target) >= 0)


class TestLogTransitionWeights:
    def test_values(self):
        sw = SwitchingParams(0.5, 2.0, 1.5)
        w = log_transition_weights(sw, np.array([0.0, 1.0]), 0.01)
        assert w.shape == (2, 2, 2)
        assert w[1, 0, 1] == pytest.approx(math.log(0.5 * math.exp(2) * 0.01))
        assert w[1, 0, 0] == pytest.approx(-0.5 * math.exp(2) * 0.01)
        assert w[0, 1, 0] == pytest.approx(math.log(0.015))
        assert w[0, 1, 1] == pytest.approx(-0.015)

    def test_unregulated(self):
        w = log_transition_weights(SwitchingParams(0.5, 2.0, 1.5), None, 0.1)
        assert w.shape == (2, 2)
        assert w[0, 1] == pytest.approx(math.log(0.05))


class TestValidateModel:
    def test_default_model_valid(self):
        assert validate_model(default_model()) == []

    def test_repression_constraint(self):
        m = default_model()
        k = m.genes["S"].kinetics
        bad = m.with_kinetics({"S": GeneKinetics(k.b, k.lam, -2 * k.b, k.sigma)})
        assert "A + b > 0 violated for gene S" in validate_model(bad)

    def test_topology(self):
        m = default_model()
        genes = dict(m.genes)
        genes["T"] = GeneUnit("T", genes["T"].kinetics, genes["T"].switching, ("M",))
        report = validate_model(FflModel(genes, m.sigma_obs))
        assert any("topology violation" in r and "gene T" in r for r in report)

    def test_all_violations_listed(self):
        m = FflModel.canonical(GeneKinetics(-1, -1, 0, -1), SwitchingParams(-1, -1, -1), 0.0)
        report = validate_model(m)
        assert len(report) == 3 * 7 + 1
        with pytest.raises(ValidationError) as exc:
            require_valid(m)
        assert exc.value.violations == report

    def test_cycle_detected(self):
        m = default_model()
        genes = dict(m.genes)
        genes["M"] = GeneUnit("M", genes["M"].kinetics, genes["M"].switching, ("T",))
        report = validate_model(FflModel(genes, m.sigma_obs))
        assert any("cycle" in r for r in report)

    def test_initial_conditions_checked(self):
        m = FflModel.canonical(GeneKinetics(1, 1, 1, 1), SwitchingParams(1, 1, 1), 0.1, {"S": {"p_on0": 1.5}})
        assert "p_on0 in [0, 1] violated for gene S" in validate_model(m)


class TestFflModel:
    def test_canonical_regulators(self):
        m = default_model()
        assert m.genes["M"].regulators == ()
        assert m.genes["S"].regulators == ("M",)
        assert m.genes["T"].regulators == ("M", "S")
        assert topological_order(m) == ["M", "S", "T"]

    def test_resolved_defaults(self):
        kin = GeneKinetics(0.5, 2.0, 1.0, 0.2)
        sw = SwitchingParams(0.5, 1.0, 1.0)
        m = FflModel.canonical(kin, sw, 0.1).resolved()
        for g in m.genes.values():
            assert g.x0 == pytest.approx(0.25)
            assert g.x0_var == pytest.approx(0.04 / 4)
        assert m.genes["M"].p_on0 == pytest.approx(steady_state_on_prob(sw, 0.0))
        assert m.genes["T"].p_on0 == pytest.approx(steady_state_on_prob(sw, 0.25))

    def test_with_kinetics(self):
        m = default_model()
        new = GeneKinetics(1, 2, 3, 4)
        m2 = m.with_kinetics({"T": new})
        assert m2.genes["T"].kinetics == new
        assert m2.genes["M"].kinetics == m.genes["M"].kinetics
        assert m.genes["T"].kinetics != new
