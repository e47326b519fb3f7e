import itertools
import math

import numpy as np
import pytest

from netcausal.effects import allocation_weights, direct_effect, draw_allocation, indirect_effect
from netcausal.meanfield import NonFiniteIterate, estimate_effects_mf, mf_iterate
from netcausal.measure import alpha_prime, rademacher, uniform
from netcausal.model import OutcomeModel, brute_force_means
from netcausal.network import complete_graph, custom, diagnostics, erdos_renyi, regular_graph


def instance(n, seed, d=1):
    rng = np.random.default_rng(seed)
    t = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    x = rng.uniform(-1, 1, (n, d))
    return t, x


class TestAllocationWeights:
    @pytest.mark.parametrize("p", [0.1, 0.3, 0.5, 0.9])
    def test_constraints(self, p):
        a, b = allocation_weights(p)
        assert a + b == pytest.approx(1 / p, rel=1e-14)
        assert b - a == pytest.approx(1 / (1 - p), rel=1e-14)

    def test_half(self):
        assert allocation_weights(0.5) == (0.0, 2.0)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.2])
    def test_rejects(self, p):
        with pytest.raises(ValueError):
            allocation_weights(p)

    def test_draw_allocation_frequency(self):
        t = draw_allocation(20_000, 0.3, np.random.default_rng(0))
        assert set(np.unique(t)) == {-1.0, 1.0}
        assert abs((t == 1).mean() - 0.3) < 3 * math.sqrt(0.21 / 20_000)


class TestHorvitzThompson:
    """The weighted sum is unbiased for the direct effect when the means are exact."""

    def test_independent_sites_exact_expectation(self):
        # A = 0: u_i depends on T_i only, so the expectation over allocations is a two-term sum
        n, tau, p = 5, 0.5, 0.3
        t, x = instance(n, 1)
        mu = uniform()
        f_plus = alpha_prime(mu, tau + 2.0 * x[:, 0])
        f_minus = alpha_prime(mu, -tau + 2.0 * x[:, 0])
        a, b = allocation_weights(p)
        expected_de = np.mean(p * (a + b) * f_plus + (1 - p) * (a - b) * f_minus)
        assert expected_de == pytest.approx(np.mean(f_plus - f_minus), abs=1e-14)

    @pytest.mark.parametrize("p", [0.5, 0.3])
    def test_interacting_sites_against_definition(self, p):
        n = 6
        _, x = instance(n, 2)
        rng = np.random.default_rng(3)
        a = np.triu(rng.uniform(0, 0.3, (n, n)), k=1)
        A = custom(a + a.T)
        m = OutcomeModel(A, 0.5, [2.0])
        allocations = np.array(list(itertools.product([-1.0, 1.0], repeat=n)))
        probs = np.prod(np.where(allocations == 1, p, 1 - p), axis=1)
        means = {tuple(t): brute_force_means(m, t, x)[0] for t in allocations}
        # definition: average over other units' treatments of the flip in unit i's own mean
        definition = 0.0
        for i in range(n):
            for t, w in zip(allocations, probs):
                if t[i] != 1.0:
                    continue
                flipped = t.copy()
                flipped[i] = -1.0
                w_others = w / p
                definition += w_others * (means[tuple(t)][i] - means[tuple(flipped)][i])
        definition /= n
        weighted = sum(w * direct_effect(t, means[tuple(t)], p) for t, w in zip(allocations, probs))
        assert weighted == pytest.approx(definition, abs=1e-12)

    def test_indirect_against_definition(self):
        # IE = mean over allocations of <Y>(T) - <Y>(all control), minus p * DE, per unit i with T_i = -1
        n, p = 5, 0.5
        _, x = instance(n, 4)
        m = OutcomeModel(complete_graph(n, 0.4), 0.5, [2.0])
        allocations = np.array(list(itertools.product([-1.0, 1.0], repeat=n)))
        control, _ = brute_force_means(m, -np.ones(n), x)
        means = [brute_force_means(m, t, x)[0] for t in allocations]
        w = 1.0 / len(allocations)
        definition = 0.0
        for i in range(n):
            for t, mean in zip(allocations, means):
                if t[i] == -1.0:
                    definition += 2 * w * (mean[i] - control[i])
        definition /= n
        estimates = [indirect_effect(mean, control, direct_effect(t, mean, p), p) for t, mean in zip(allocations, means)]
        assert np.mean(estimates) == pytest.approx(definition, abs=1e-12)


class TestIteration:
    def test_zero_coupling_one_step(self):
        n = 10
        t, x = instance(n, 0)
        m = OutcomeModel(custom(np.zeros((n, n))), 0.5, [2.0])
        s = mf_iterate(m, t, x, max_iter=50, tol=1e-12)
        np.testing.assert_array_equal(s.u, alpha_prime(m.mu, 0.5 * t + 2.0 * x[:, 0]))
        # one step reaches the answer; the second confirms a zero residual
        assert s.iter == 2
        assert s.residuals[-1] == 0.0

    def test_zero_field_stays_at_zero(self):
        n = 12
        t, x = instance(n, 1)
        m = OutcomeModel(erdos_renyi(n, 0.5, 0.3, 0), 0.0, [0.0], uniform())
        s = mf_iterate(m, t, x, max_iter=10, tol=1e-12)
        np.testing.assert_array_equal(s.u, 0.0)
        np.testing.assert_array_equal(s.u_tilde, 0.0)
        assert s.iter == 1

    def test_fixed_point_near_enumeration(self):
        n = 8
        t, x = instance(n, 2)
        A = complete_graph(n, 0.3)
        m = OutcomeModel(A, 0.5, [2.0])
        s = mf_iterate(m, t, x, max_iter=200, tol=1e-8)
        assert s.converged and s.residual < 1e-8
        np.testing.assert_allclose(s.u, alpha_prime(m.mu, A.dot(s.u) + m.field(t, x)), atol=1e-8)
        exact, _ = brute_force_means(m, t, x)
        assert np.max(np.abs(s.u - exact)) <= 0.15

    @pytest.mark.parametrize(
        "build",
        [
            lambda: complete_graph(300, 0.3),
            lambda: erdos_renyi(300, 0.1, 0.25, 1),  # ER norm sits above beta at finite n
            lambda: regular_graph(300, 10, 0.3, 2),
        ],
    )
    def test_contraction_budget(self, build):
        A = build()
        op = diagnostics(A).op_norm
        assert op <= 0.3 + 1e-9
        tol = 1e-8
        budget = math.ceil(math.log(tol) / math.log(op)) + 50
        t, x = instance(A.n, 3)
        s = mf_iterate(OutcomeModel(A, 0.5, [2.0]), t, x, max_iter=budget, tol=tol)
        assert s.converged
        r = np.array(s.residuals)
        # residual contracts by at least the operator norm, up to rounding
        assert np.all(r[1:] <= op * r[:-1] + 1e-15)

    def test_fixed_iteration_count(self):
        t, x = instance(50, 4)
        s = mf_iterate(OutcomeModel(complete_graph(50, 0.3), 0.5, [2.0]), t, x, max_iter=37, tol=None)
        assert s.iter == 37
        assert len(s.residuals) == 37
        assert s.converged

    def test_nonconvergence_flag(self):
        t, x = instance(30, 5)
        m = OutcomeModel(complete_graph(30, 0.3), 0.5, [2.0])
        s = mf_iterate(m, t, x, max_iter=3, tol=1e-14)
        assert not s.converged
        assert s.iter == 3

    def test_nan_is_hard_error(self):
        t, x = instance(4, 6)
        x[0, 0] = np.nan
        with pytest.raises(NonFiniteIterate):
            mf_iterate(OutcomeModel(complete_graph(4, 0.3), 0.5, [2.0]), t, x, max_iter=5, tol=1e-8)

    def test_argument_checks(self):
        t, x = instance(4, 6)
        m = OutcomeModel(complete_graph(4, 0.3), 0.5, [2.0])
        with pytest.raises(ValueError):
            mf_iterate(m, t, x, max_iter=0)
        with pytest.raises(ValueError):
            mf_iterate(m, t, x, tol=0.0)
        with pytest.raises(ValueError):
            mf_iterate(m, t, x, damping=1.0)

    def test_damping_same_fixed_point(self):
        t, x = instance(40, 7)
        m = OutcomeModel(complete_graph(40, 0.3), 0.5, [2.0])
        plain = mf_iterate(m, t, x, max_iter=500, tol=1e-12)
        damped = mf_iterate(m, t, x, max_iter=2000, tol=1e-12, damping=0.5)
        np.testing.assert_allclose(damped.u, plain.u, atol=1e-10)

    def test_sparse_equals_dense(self):
        A = erdos_renyi(200, 0.01, 0.3, 3)
        t, x = instance(200, 8)
        s1 = mf_iterate(OutcomeModel(A, 0.5, [2.0]), t, x, max_iter=100, tol=None)
        s2 = mf_iterate(OutcomeModel(custom(A.toarray()), 0.5, [2.0]), t, x, max_iter=100, tol=None)
        np.testing.assert_allclose(s1.u, s2.u, atol=1e-14)


class TestEffects:
    def test_independent_sites_closed_form(self):
        n = 40
        t, _ = instance(n, 9)
        x = np.random.default_rng(1).uniform(-1, 1, (n, 1))
        m = OutcomeModel(custom(np.zeros((n, n))), 0.5, [0.0], rademacher())
        draw = estimate_effects_mf(m, t, x, M=5, tol=None)
        assert draw.de == pytest.approx(2 * math.tanh(0.5), abs=1e-14)
        assert draw.ie == pytest.approx(math.tanh(0.5) * t.mean(), abs=1e-14)

    @pytest.mark.parametrize("mu", [rademacher(), uniform()])
    def test_zero_field_zero_effects_exactly(self, mu):
        n = 20
        t, x = instance(n, 10)
        m = OutcomeModel(complete_graph(n, 0.3), 0.0, [0.0], mu)
        draw = estimate_effects_mf(m, t, x, M=20, tol=None)
        assert draw.de == 0.0
        assert draw.ie == 0.0

    def test_zero_coupling_no_spillover_in_expectation(self):
        # with A = 0 nobody is affected by others' treatments, so the estimator has mean zero
        n = 500
        m = OutcomeModel(custom(np.zeros((n, n))), 0.5, [2.0])
        rng = np.random.default_rng(11)
        ies = []
        for _ in range(200):
            t = draw_allocation(n, 0.5, rng)
            x = rng.uniform(-1, 1, (n, 1))
            ies.append(estimate_effects_mf(m, t, x, M=2, tol=None).ie)
        assert abs(np.mean(ies)) < 3 * np.std(ies) / math.sqrt(len(ies))

    def test_ranges(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            n = 30
            t, x = instance(n, int(rng.integers(1000)))
            m = OutcomeModel(complete_graph(n, 0.3), float(rng.uniform(-1, 1)), [float(rng.uniform(-5, 5))])
            draw = estimate_effects_mf(m, t, x, M=50, tol=None)
            assert abs(draw.de) <= 2.0
            assert abs(draw.ie) <= 2.0
            # general allocations: weights are bounded by max(1/p, 1/(1-p))
            p = float(rng.uniform(0.2, 0.8))
            draw = estimate_effects_mf(m, t, x, M=50, tol=None, p_alloc=p)
            assert abs(draw.de) <= max(1 / p, 1 / (1 - p))

    def test_permutation_equivariance(self):
        n = 60
        t, x = instance(n, 13)
        A = erdos_renyi(n, 0.3, 0.3, 5)
        perm = np.random.default_rng(0).permutation(n)
        Ap = custom(A.toarray()[np.ix_(perm, perm)])
        a = estimate_effects_mf(OutcomeModel(A, 0.5, [2.0]), t, x, M=200, tol=None)
        b = estimate_effects_mf(OutcomeModel(Ap, 0.5, [2.0]), t[perm], x[perm], M=200, tol=None)
        np.testing.assert_allclose(b.state.u, a.state.u[perm], atol=1e-14)
        assert b.de == pytest.approx(a.de, abs=1e-14)
        assert b.ie == pytest.approx(a.ie, abs=1e-14)

    def test_half_allocation_matches_uniform_formula_bitwise(self):
        n = 50
        t, x = instance(n, 14)
        m = OutcomeModel(complete_graph(n, 0.3), 0.5, [2.0])
        draw = estimate_effects_mf(m, t, x, M=100, tol=None, p_alloc=0.5)
        u, ut = draw.state.u, draw.state.u_tilde
        de = float(np.sum(2.0 * t * u) / n)
        assert draw.de == de
        assert draw.ie == float((np.sum(u) - np.sum(ut)) / n - 0.5 * de)

    def test_early_stop_flag(self):
        t, x = instance(50, 15)
        m = OutcomeModel(complete_graph(50, 0.3), 0.5, [2.0])
        assert estimate_effects_mf(m, t, x, M=500, tol=1e-8).early_stopped
        assert not estimate_effects_mf(m, t, x, M=500, tol=None).early_stopped
