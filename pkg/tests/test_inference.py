import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from _instances import coupled_instance, decoupled_instance, unit_instance
from hybridffl.errors import InternalConsistencyError, ValidationError
from hybridffl.inference import (
    PromoterMarginals,
    ProteinMarginals,
    binary_chain_posterior,
    chain_moments,
    discretize,
    free_energy,
    free_energy_gradient,
    infer,
    initial_state,
    monotone_slack,
    run_inference,
    update_promoter_chain,
    update_protein_chain,
)
from hybridffl.model import FflModel, GeneKinetics, SwitchingParams
from hybridffl.oracle import compare_marginals, exact_decoupled_posterior, grid_unit_posterior, kalman_smoother, telegraph_smoother
from hybridffl.simulate import ObservationSet, TimeGrid, solve_master_equation


def simple_model(A=0.0, ke=0.0):
    return FflModel.canonical(GeneKinetics(0.4, 1.0, A, 0.3), SwitchingParams(0.6, ke, 0.9), 0.05)


def assert_monotone(trace):
    trace = np.asarray(trace)
    slack = np.array([monotone_slack(f) for f in trace[:-1]])
    assert np.all(np.diff(trace) <= slack)


class TestChainPrimitives:
    def test_chain_moments_match_dense_inverse(self):
        rng = np.random.default_rng(0)
        n = 30
        off = -rng.uniform(0.1, 1, n - 1)
        diag = np.abs(off).sum() / n + 2 + rng.uniform(0, 1, n)
        diag[:-1] += np.abs(off)
        rhs = rng.normal(size=n)
        P = np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)
        C = np.linalg.inv(P)
        mean, var, lag, logdet = chain_moments(diag, off, rhs)
        np.testing.assert_allclose(mean, C @ rhs, rtol=1e-12)
        np.testing.assert_allclose(var, np.diag(C), rtol=1e-12)
        np.testing.assert_allclose(lag, np.diag(C, 1), rtol=1e-11)
        assert logdet == pytest.approx(np.linalg.slogdet(P)[1], rel=1e-12)

    def test_binary_chain_matches_enumeration(self):
        rng = np.random.default_rng(1)
        K = 5
        log_init = np.log([0.3, 0.7])
        pot = rng.normal(size=(K, 2, 2))
        m, xi, log_z = binary_chain_posterior(log_init, pot)
        paths = np.array(np.meshgrid(*[[0, 1]] * (K + 1), indexing="ij")).reshape(K + 1, -1).T
        logw = np.array([log_init[p[0]] + sum(pot[k, p[k], p[k + 1]] for k in range(K)) for p in paths])
        w = np.exp(logw - logw.max())
        w /= w.sum()
        np.testing.assert_allclose(m, w @ paths, rtol=1e-12)
        assert log_z == pytest.approx(np.log(np.exp(logw).sum()), rel=1e-12)
        pair = np.array([[w[(paths[:, 0] == a) & (paths[:, 1] == b)].sum() for b in (0, 1)] for a in (0, 1)])
        np.testing.assert_allclose(xi[0], pair, atol=1e-14)


class TestDiscretize:
    def test_nodes_and_attachment(self):
        data = ObservationSet({"M": ([3.004], [1.0])}, 0.01)
        dm = discretize(simple_model(), data, TimeGrid(0, 10, 0.01))
        assert dm.grid.n_nodes == 1001
        assert dm.genes[dm.index("M")].obs_idx.tolist() == [300]

    def test_duplicate_attachment(self):
        data = ObservationSet({"S": ([3.001, 3.003], [1.0, 1.1])}, 0.01)
        with pytest.raises(ValueError, match="same grid node"):
            discretize(simple_model(), data, TimeGrid(0, 10, 0.01))

    def test_outside_span(self):
        data = ObservationSet({"S": ([12.0], [1.0])}, 0.01)
        with pytest.raises(ValueError):
            discretize(simple_model(), data, TimeGrid(0, 10, 0.01))

    def test_invalid_model(self):
        bad = FflModel.canonical(GeneKinetics(-1, 1, 0, 1), SwitchingParams(1, 1, 1), 0.1)
        with pytest.raises(ValidationError):
            discretize(bad, ObservationSet({}, 0.1), TimeGrid(0, 1, 0.1))

    def test_empty_data_is_smoothed_prior(self):
        dm = discretize(simple_model(), ObservationSet({}, 0.05), TimeGrid(0, 2, 0.01))
        state = infer(dm)
        exact = exact_decoupled_posterior(dm)
        for g in range(3):
            np.testing.assert_allclose(state.promoters[g].m, exact.m[g], atol=1e-10)
            np.testing.assert_allclose(state.proteins[g].mean, exact.mean[g], atol=1e-10)


class TestFreeEnergy:
    def test_decoupled_tight(self):
        dm = decoupled_instance(3)
        exact = exact_decoupled_posterior(dm)
        state = initial_state(dm)
        for g in range(3):
            P = exact
            state.promoters[g] = PromoterMarginals(P.m[g], P.xi[g])
            state.proteins[g] = ProteinMarginals(P.mean[g], P.var[g], P.lag[g])
        assert free_energy(state, dm) == pytest.approx(-exact.log_z, abs=1e-6)

    def test_prior_without_data(self):
        # The discretised path weights (jump: rate*dt, stay: exp(-rate*dt))
        # sum to 1 + O((rate*dt)^2) per step, so F at the prior is -log Z
        # of the path weights rather than exactly 0.
        dm = discretize(simple_model(), ObservationSet({}, 0.05), TimeGrid(0, 5, 0.01))
        exact = exact_decoupled_posterior(dm)
        state = infer(dm)
        F = free_energy(state, dm)
        assert F == pytest.approx(-exact.log_z, abs=1e-9)
        rate_dt = max(0.6, 0.9) * dm.grid.dt
        assert abs(F) <= 3 * dm.grid.n_steps * rate_dt**2

    def test_prior_without_data_vanishes_as_dt_shrinks(self):
        values = []
        for dt in (0.02, 0.01, 0.005):
            dm = discretize(simple_model(), ObservationSet({}, 0.05), TimeGrid(0, 5, dt))
            values.append(abs(infer(dm).free_energy))
        assert values[1] == pytest.approx(values[0] / 2, rel=0.05)
        assert values[2] == pytest.approx(values[1] / 2, rel=0.05)

    def test_invalid_state_rejected(self):
        dm = decoupled_instance(0)
        state = initial_state(dm)
        pm = state.proteins[0]
        state.proteins[0] = ProteinMarginals(pm.mean, -pm.var, pm.lag)
        with pytest.raises(ValueError):
            free_energy(state, dm)
        state = initial_state(dm)
        pr = state.promoters[1]
        state.promoters[1] = PromoterMarginals(pr.m + 0.2, pr.xi)
        with pytest.raises(ValueError):
            free_energy(state, dm)

    def test_local_optimality(self):
        dm, _, _ = unit_instance(4)
        state = infer(dm, tol=1e-12)
        F0 = state.free_energy
        rng = np.random.default_rng(0)
        pm = state.proteins[0]
        for _ in range(10):
            k = rng.integers(pm.mean.size)
            for field in ("mean", "var"):
                arr = getattr(pm, field).copy()
                arr[k] *= 1 + 1e-3 * rng.choice([-1, 1])
                s = state.copy()
                s.proteins[0] = ProteinMarginals(**{**pm.__dict__, field: arr})
                assert free_energy(s, dm) > F0
        # mixing pairwise tables keeps them consistent with the node marginals
        pr, alt = state.promoters[0], initial_state(dm).promoters[0]
        eps = 1e-3
        s = state.copy()
        s.promoters[0] = PromoterMarginals((1 - eps) * pr.m + eps * alt.m, (1 - eps) * pr.xi + eps * alt.xi)
        assert free_energy(s, dm) > F0


class TestPromoterUpdate:
    def grid_and_model(self):
        dm = discretize(simple_model(), ObservationSet({}, 0.05), TimeGrid(0, 4, 0.01))
        g = dm.index("M")
        return dm, g

    def test_unregulated_prior(self):
        dm, g = self.grid_and_model()
        state = update_promoter_chain(g, initial_state(dm), dm)
        gene = dm.genes[g]
        w = np.exp(np.broadcast_to(np.array([[-0.6 * 0.01, math.log(0.006)], [math.log(0.009), -0.009]]), (400, 2, 2)))
        m_exact, _, _ = telegraph_smoother([1 - gene.p_on0, gene.p_on0], w)
        np.testing.assert_allclose(state.promoters[g].m, m_exact, atol=1e-12)
        # the continuous-time master equation is matched to first order in dt
        p = solve_master_equation(lambda t: 0.6, lambda t: 0.9, gene.p_on0, dm.grid)
        assert np.max(np.abs(state.promoters[g].m - p)) < 1.5 * dm.grid.dt

    def test_idempotent(self):
        dm, g = self.grid_and_model()
        s1 = update_promoter_chain(g, initial_state(dm), dm)
        s2 = update_promoter_chain(g, s1, dm)
        assert np.max(np.abs(s2.promoters[g].m - s1.promoters[g].m)) < 1e-12

    def test_pairwise_tables_consistent(self):
        dm, _, _ = unit_instance(2)
        state = update_promoter_chain(0, initial_state(dm), dm)
        state.promoters[0].check(atol=1e-10)

    @pytest.mark.parametrize(
        "seed",
        [
            0,
            pytest.param(
                1,
                marks=pytest.mark.xfail(
                    strict=True,
                    reason="mean field is overconfident where the exact promoter posterior is diffuse "
                    "(difference 0.08; the acceptance bound of 0.1 holds)",
                ),
            ),
            2, 3, 4, 5, 6, 7, 8, 9,
        ],
    )
    def test_unit_oracle(self, seed):
        dm, _, _ = unit_instance(seed)
        state = infer(dm)
        exact = grid_unit_posterior(dm)
        assert np.abs(state.promoters[0].m - exact.m).mean() < 0.05


    @pytest.mark.xfail(
        strict=True,
        reason="exact marginal dips to 0.479 for 0.13 time units; mean field stays near 0.6",
    )
    def test_every_crossing_paired(self):
        dm, _, _ = unit_instance(8)
        t = dm.grid.times
        c = compare_marginals((t, infer(dm).promoters[0].m), (t, grid_unit_posterior(dm).m))
        assert c.unmatched == 0


class TestProteinUpdate:
    def test_kalman_with_observations(self):
        dm = decoupled_instance(1)
        g = dm.index("T")
        state = update_protein_chain(g, initial_state(dm), dm)
        gene = dm.genes[g]
        k = gene.kinetics
        dt = dm.grid.dt
        mean, var, lag, _ = kalman_smoother(
            1 - k.lam * dt, k.b * dt, k.sigma**2 * dt, gene.x0, gene.x0_var,
            gene.obs_idx, gene.obs_y, dm.sigma_obs**2, dm.grid.n_nodes,
        )
        assert np.max(np.abs(state.proteins[g].mean - mean)) < 1e-8
        np.testing.assert_allclose(state.proteins[g].var, var, rtol=1e-8)

    def test_moment_recursion_without_data(self):
        model = FflModel.canonical(GeneKinetics(0.4, 1.2, 0.9, 0.3), SwitchingParams(0.6, 0.0, 0.9), 0.05)
        dm = discretize(model, ObservationSet({}, 0.05), TimeGrid(0, 6, 0.01))
        g = dm.index("T")
        state = update_promoter_chain(g, initial_state(dm), dm)
        state = update_protein_chain(g, state, dm)
        gene, k, dt = dm.genes[g], dm.genes[g].kinetics, dm.grid.dt
        m = state.promoters[g].m
        mean = np.empty(dm.grid.n_nodes)
        mean[0] = gene.x0
        for i in range(dm.grid.n_steps):
            mean[i + 1] = mean[i] + (k.b - k.lam * mean[i] + k.A * m[i]) * dt
        assert np.max(np.abs(state.proteins[g].mean - mean)) < 1e-6
        # moment ODE dE[x]/dt = b - lam E[x] + A m(t), integrated independently
        t = dm.grid.times
        ode = solve_ivp(
            lambda s, y: k.b - k.lam * y + k.A * np.interp(s, t, m), (t[0], t[-1]), [gene.x0],
            t_eval=t, rtol=1e-10, atol=1e-12, max_step=dt,
        )
        assert np.max(np.abs(state.proteins[g].mean - ode.y[0])) < 2 * dt

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_unit_oracle_mean(self, seed):
        dm, _, _ = unit_instance(seed)
        state = infer(dm)
        exact = grid_unit_posterior(dm)
        dyn = exact.mean.max() - exact.mean.min()
        assert np.abs(state.proteins[0].mean - exact.mean).mean() < 0.05 * dyn

    def test_coupled_update_decreases_F(self):
        dm, state = coupled_instance(3)
        state.free_energy = free_energy(state, dm)
        for g in range(3):
            new = update_protein_chain(g, state, dm)
            assert new.free_energy <= state.free_energy
            state = new


class TestRunInference:
    def test_decoupled_two_sweeps(self):
        dm = decoupled_instance(5)
        state = infer(dm)
        assert state.converged and state.n_sweeps <= 2
        exact = exact_decoupled_posterior(dm)
        for g in range(3):
            np.testing.assert_allclose(state.promoters[g].m, exact.m[g], atol=1e-6)
            np.testing.assert_allclose(state.proteins[g].mean, exact.mean[g], atol=1e-6)

    def test_trace_monotone_on_full_loop(self, shipped_inference):
        _, state = shipped_inference
        assert_monotone(state.trace)
        assert_monotone(state.update_trace)

    def test_data_consistency(self, shipped_inference, shipped_data):
        dm, state = shipped_inference
        _, obs = shipped_data
        hits = total = 0
        for g, gene in enumerate(dm.genes):
            err = np.abs(state.proteins[g].mean[gene.obs_idx] - gene.obs_y)
            hits += int((err <= 3 * dm.sigma_obs).sum())
            total += err.size
        assert total == len(obs)
        assert hits / total >= 0.95

    def test_run_inference_wrapper(self):
        model = simple_model(A=0.5, ke=1.0)
        state = run_inference(model, ObservationSet({"T": ([1.0], [0.5])}, 0.05), TimeGrid(0, 2, 0.01))
        assert math.isfinite(state.free_energy)
        assert_monotone(state.trace)

    def test_consistency_trap(self, monkeypatch):
        import hybridffl.inference as inf

        dm = decoupled_instance(0)
        real = inf.update_promoter_chain

        def broken(g, state, dm):
            new = real(g, state, dm)
            new = new.copy()
            new.free_energy = state.free_energy + 1.0
            return new

        monkeypatch.setattr(inf, "update_promoter_chain", broken)
        with pytest.raises(InternalConsistencyError):
            inf.infer(dm)


class TestGradient:
    @pytest.mark.parametrize("seed", range(3))
    def test_analytic_matches_finite_differences(self, seed):
        dm, state = coupled_instance(seed)
        h = 1e-5
        for g in range(3):
            d_mean, d_var, _ = free_energy_gradient(state, dm, g)
            pm = state.proteins[g]

            def F(mean, var):
                s = state.copy()
                s.proteins[g] = ProteinMarginals(mean, var, pm.lag)
                return free_energy(s, dm)

            eye = np.eye(pm.mean.size)
            num_mean = np.array([(F(pm.mean + h * e, pm.var) - F(pm.mean - h * e, pm.var)) / (2 * h) for e in eye])
            num_var = np.array([(F(pm.mean, pm.var + h * e) - F(pm.mean, pm.var - h * e)) / (2 * h) for e in eye])
            assert np.max(np.abs(d_mean - num_mean)) < 1e-4 * np.max(np.abs(num_mean))
            assert np.max(np.abs(d_var - num_var)) < 1e-4 * np.max(np.abs(num_var))
