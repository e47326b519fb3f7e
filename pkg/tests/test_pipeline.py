import csv
import io
import json

import numpy as np
import pytest

from netcausal import pipeline
from netcausal.model import ModelParams
from netcausal.network import complete_graph, custom
from netcausal.pipeline import (
    ExperimentError,
    ExperimentSpec,
    ReplicateError,
    build_network,
    oracle_truth,
    quantile_ci,
    replicate_effects,
    run_experiment,
    stage_rng,
    table1,
    table2,
    table3,
)


def sorted_quantile(samples, q):
    """Linear interpolation at 1-based rank (k - 1) q + 1 of the sorted sample."""
    s = sorted(samples)
    rank = (len(s) - 1) * q + 1
    lo = int(np.floor(rank))
    frac = rank - lo
    if lo >= len(s):
        return s[-1]
    return s[lo - 1] + frac * (s[lo] - s[lo - 1])


class TestQuantileCI:
    def test_constant(self):
        assert quantile_ci([0.3] * 17, 0.05) == (0.3, 0.3)

    def test_one_to_hundred(self):
        lo, hi = quantile_ci(np.arange(1, 101), 0.05)
        assert lo == pytest.approx(3.475, abs=1e-12)
        assert hi == pytest.approx(97.525, abs=1e-12)

    @pytest.mark.parametrize("k", [1, 2, 7, 100, 333])
    @pytest.mark.parametrize("zeta", [0.05, 0.1, 0.5])
    def test_against_sort_and_index(self, k, zeta):
        x = np.random.default_rng(k).normal(size=k)
        lo, hi = quantile_ci(x, zeta)
        assert lo == pytest.approx(sorted_quantile(x, zeta / 2), abs=1e-14)
        assert hi == pytest.approx(sorted_quantile(x, 1 - zeta / 2), abs=1e-14)

    def test_permutation_invariant(self):
        x = np.random.default_rng(0).normal(size=50)
        assert quantile_ci(x, 0.05) == quantile_ci(x[::-1], 0.05)

    def test_nested_in_zeta(self):
        x = np.random.default_rng(1).normal(size=100)
        lo1, hi1 = quantile_ci(x, 0.1)
        lo2, hi2 = quantile_ci(x, 0.05)
        assert lo2 <= lo1 and hi1 <= hi2

    def test_errors(self):
        with pytest.raises(ValueError):
            quantile_ci([], 0.05)
        with pytest.raises(ValueError):
            quantile_ci([1.0], 1.0)


class TestSpec:
    def test_defaults_are_the_simulation_setting(self):
        s = table1(200)
        assert (s.tau, s.theta, s.gamma, s.beta) == (0.5, [2.0], [0.0], 0.3)
        assert (s.M, s.k, s.zeta, s.mu, s.covariates) == (500, 100, 0.05, "rademacher", "uniform")
        assert table2(0.01).family == "erdos_renyi" and table2(0.01).label == 0.01
        assert table3(400).algo == "amp" and table3(400).label == 400

    def test_presets(self):
        assert [s.n for s in pipeline.PRESETS["table1"]] == [200, 400, 800]
        assert [s.p for s in pipeline.PRESETS["table2"]] == [0.5, 0.01, 0.001]

    @pytest.mark.parametrize(
        "bad",
        [{"k": 0}, {"zeta": 1.0}, {"algo": "gibbs"}, {"family": "lattice"}, {"theta": [1.0, 2.0]}, {"tau": 3.0}],
    )
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            ExperimentSpec(n=10, **bad)

    def test_dict_round_trip(self):
        s = table3(200, seed=4, k=7)
        assert ExperimentSpec.from_dict(json.loads(json.dumps(s.to_dict()))) == s

    def test_build_network_families(self):
        assert build_network(table1(20)).family == "complete"
        assert build_network(table2(0.5, n=20)).family == "erdos_renyi"
        assert build_network(table3(20)).normalized is not None
        assert build_network(ExperimentSpec(n=20, family="regular", degree=4)).family == "regular"
        assert build_network(ExperimentSpec(n=20, family="graphon", rho=0.5, graphon="constant")).family == "graphon"


class TestSeeds:
    def test_streams_are_distinct_and_stable(self):
        a = stage_rng(7, pipeline.REPLICATES, 0).random(3)
        b = stage_rng(7, pipeline.REPLICATES, 1).random(3)
        c = stage_rng(7, pipeline.REPLICATES, 0).random(3)
        assert not np.array_equal(a, b)
        np.testing.assert_array_equal(a, c)
        assert not np.array_equal(stage_rng(8, pipeline.REPLICATES, 0).random(3), a)


class TestReplicates:
    def test_single_replicate(self):
        spec = table1(30, k=1, M=50)
        est = replicate_effects(spec, spec.true_params, build_network(spec))
        assert est.de_avg == est.de_replicates[0]
        assert est.ci_de == (est.de_replicates[0], est.de_replicates[0])

    def test_degenerate_all_zero(self):
        spec = ExperimentSpec(n=20, family="complete", tau=0.0, theta=[0.0], k=10, M=20, mu="uniform")
        A = custom(np.zeros((20, 20)))
        est = replicate_effects(spec, spec.true_params, A)
        np.testing.assert_array_equal(est.de_replicates, 0.0)
        assert est.ci_de == (0.0, 0.0)

    def test_invariants(self):
        spec = table1(40, k=15, M=100)
        est = replicate_effects(spec, spec.true_params, build_network(spec))
        assert est.de_avg == pytest.approx(np.mean(est.de_replicates), abs=1e-15)
        assert est.ci_de == quantile_ci(est.de_replicates, 0.05)
        assert est.ci_de[0] <= est.ci_de[1]
        assert est.metadata["k"] == 15 and not est.metadata["oracle"]

    def test_oracle_is_same_code_path(self):
        spec = table3(40, k=5, M=30, mc_samples=200)
        A = build_network(spec)
        a = oracle_truth(spec, spec.true_params, A)
        b = replicate_effects(spec, spec.true_params, A)
        np.testing.assert_array_equal(a.de_replicates, b.de_replicates)
        np.testing.assert_array_equal(a.ie_replicates, b.ie_replicates)
        assert a.metadata["oracle"] and "fixed_points" in a.metadata

    def test_workers_do_not_change_results(self):
        spec = table1(40, k=12, M=60)
        A = build_network(spec)
        serial = replicate_effects(spec, spec.true_params, A)
        spec.workers = 3
        parallel = replicate_effects(spec, spec.true_params, A)
        np.testing.assert_array_equal(serial.de_replicates, parallel.de_replicates)

    def test_general_allocation(self):
        spec = table1(40, k=10, M=60, p_alloc=0.3)
        est = replicate_effects(spec, spec.true_params, build_network(spec))
        assert np.all(np.isfinite(est.de_replicates))

    def test_fattening(self):
        spec = table1(30, k=10, M=30, fattening=0.02)
        est = replicate_effects(spec, spec.true_params, build_network(spec))
        lo, hi = quantile_ci(est.de_replicates, 0.05)
        assert est.ci_de == (lo - 0.02, hi + 0.02)

    def test_failure_names_replicate(self, monkeypatch):
        spec = table1(20, k=6, M=10)
        A = build_network(spec)
        calls = []
        real = pipeline.meanfield.estimate_effects_mf

        def flaky(*args, **kwargs):
            calls.append(1)
            if len(calls) == 4:
                raise FloatingPointError("boom")
            return real(*args, **kwargs)

        monkeypatch.setattr(pipeline.meanfield, "estimate_effects_mf", flaky)
        with pytest.raises(ReplicateError) as err:
            replicate_effects(spec, spec.true_params, A)
        assert err.value.index == 3


class TestExperiment:
    def test_report_shape_and_reproducibility(self):
        spec = table1(60, k=8, M=100, seed=3)
        a = run_experiment(spec)
        b = run_experiment(spec)
        assert a.to_json(include_timing=False) == b.to_json(include_timing=False)
        row = a.row()
        assert row["label"] == 60
        assert set(row) == {"label", "truth_de", "truth_ie", "estimate_de", "estimate_ie", "ci_de", "ci_ie",
                            "runtime_seconds"}
        payload = json.loads(a.to_json())
        assert payload["fit"]["converged"]
        assert set(payload) >= {"spec", "fit", "network", "truth", "estimate", "truth_in_ci"}

    def test_seed_changes_report(self):
        a = run_experiment(table1(40, k=4, M=50, seed=1))
        b = run_experiment(table1(40, k=4, M=50, seed=2))
        assert a.to_json(include_timing=False) != b.to_json(include_timing=False)

    def test_amp_provenance_has_fixed_points(self):
        rep = run_experiment(table3(60, k=4, M=50, mc_samples=200))
        fps = rep.to_dict()["estimate"]["metadata"]["fixed_points"]
        assert set(fps) == {"treated_random", "all_control"}

    def test_without_fit_uses_truth(self):
        rep = run_experiment(table1(40, k=4, M=50, fit=False))
        assert rep.fit is None
        np.testing.assert_array_equal(rep.truth.de_replicates, rep.estimate.de_replicates)

    def test_stage_labels(self, monkeypatch):
        def broken(*args, **kwargs):
            raise RuntimeError("singular")

        monkeypatch.setattr(pipeline.mple, "fit_outcome", broken)
        with pytest.raises(ExperimentError) as err:
            run_experiment(table1(20, k=2, M=10))
        assert err.value.stage == "fit"

    def test_table_csv(self):
        reps = [run_experiment(table2(p, n=40, k=4, M=40)) for p in (0.5, 0.1)]
        rows = list(csv.DictReader(io.StringIO(pipeline.table_csv(reps))))
        assert [r["label"] for r in rows] == ["0.5", "0.5", "0.1", "0.1"]
        assert [r["effect"] for r in rows[:2]] == ["direct", "indirect"]
        for r in rows:
            assert float(r["ci_lo"]) <= float(r["ci_hi"])

    def test_coverage_smoke(self):
        # 20 independent repetitions of the n = 200 complete-graph setting, CI fattened by 0.02
        covered = 0
        for seed in range(20):
            rep = run_experiment(table1(200, seed=100 + seed, fattening=0.02))
            covered += rep.truth_in_ci["de"]
        assert covered >= 15

    def test_plug_in_stability_at_scale(self):
        gaps = []
        for seed in range(5):
            rep = run_experiment(table1(800, seed=200 + seed, k=20))
            gaps.append(abs(rep.estimate.de_avg - rep.truth.de_avg))
        assert np.median(gaps) <= 0.1


def test_simulate_respects_propensity_network():
    A = complete_graph(30, 0.3)
    params = ModelParams(0.5, [2.0], [0.0])
    a = pipeline.simulate(A, params, pipeline.get_measure("rademacher"), 5)
    # a strongly ferromagnetic treatment network aligns treatments; the outcome network alone does not
    b = pipeline.simulate(A, params, pipeline.get_measure("rademacher"), 5, Mmat=complete_graph(30, 5.0))
    np.testing.assert_array_equal(a.X, b.X)
    assert not np.array_equal(a.T, b.T)
    assert abs(b.T.mean()) > 0.8
