"""End-to-end estimation: simulate, fit, plug in, replicate, summarise.

Randomness is derived from one master seed.  Each stage gets its own
``SeedSequence`` child keyed by a fixed stage number, and replicate ``j``
uses the key ``(REPLICATES, j)``.  Results therefore do not depend on the
number of workers or on completion order.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import amp, meanfield, mple, network
from .effects import draw_allocation
from .measure import BaseMeasure, get_measure
from .model import (
    CovariateDist,
    Dataset,
    ModelParams,
    OutcomeModel,
    PropensityModel,
    gibbs_sample_outcome,
    gibbs_sample_treatment,
)

log = logging.getLogger(__name__)

# stage keys for seed derivation
NETWORK, COVARIATES, TREATMENT, OUTCOME, REPLICATES, FIXED_POINT = range(6)

ALGORITHMS = ("meanfield", "amp")


def stage_seed(master: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=master, spawn_key=key)


def stage_rng(master: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(stage_seed(master, *key))


def quantile_ci(samples, zeta: float) -> tuple[float, float]:
    """Empirical ``zeta/2`` and ``1 - zeta/2`` quantiles.

    Linear interpolation between order statistics: quantile ``q`` sits at
    1-based rank ``(k - 1) q + 1``.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("cannot form a confidence interval from no samples")
    if not 0.0 < zeta < 1.0:
        raise ValueError("zeta must lie in (0, 1)")
    lo, hi = np.quantile(x, [zeta / 2.0, 1.0 - zeta / 2.0], method="linear")
    return float(lo), float(hi)


@dataclass
class ExperimentSpec:
    n: int
    family: str = "complete"
    beta: float = 0.3
    d: int = 1
    p: Optional[float] = None  # erdos_renyi edge probability
    degree: Optional[int] = None  # regular graph degree
    rho: Optional[float] = None  # graphon sparsity
    graphon: str = "product"  # product: W(u,v)=uv; constant: W=1
    mu: str = "rademacher"
    covariates: str = "uniform"
    tau: float = 0.5
    theta: list = field(default_factory=lambda: [2.0])
    gamma: list = field(default_factory=lambda: [0.0])
    algo: str = "meanfield"
    M: int = 500
    k: int = 100
    zeta: float = 0.05
    seed: int = 0
    p_alloc: float = 0.5
    tol: Optional[float] = None  # None: run exactly M mean-field iterations
    mc_samples: int = 1000
    gibbs_sweeps: int = 250
    gibbs_burn_in: int = 50
    fattening: float = 0.0
    fit: bool = True
    workers: int = 1
    box: tuple = (1.0, 5.0)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("need at least one replicate")
        if not 0.0 < self.zeta < 1.0:
            raise ValueError("zeta must lie in (0, 1)")
        if self.algo not in ALGORITHMS:
            raise ValueError(f"algo must be one of {ALGORITHMS}")
        if self.family not in network.FAMILIES:
            raise ValueError(f"unsupported network family {self.family!r}")
        if len(self.theta) != self.d or len(self.gamma) != self.d:
            raise ValueError("theta and gamma must have length d")
        self.box = tuple(self.box)
        self.true_params  # validates the box

    @property
    def true_params(self) -> ModelParams:
        return ModelParams(self.tau, self.theta, self.gamma, B=self.box[0], M=self.box[1])

    @property
    def measure(self) -> BaseMeasure:
        return get_measure(self.mu)

    @property
    def covariate_dist(self) -> CovariateDist:
        return CovariateDist.parse(self.covariates)

    @property
    def label(self):
        return self.p if self.family == "erdos_renyi" else self.n

    def to_dict(self) -> dict:
        out = asdict(self)
        out["box"] = list(self.box)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown spec keys: {sorted(unknown)}")
        data = dict(data)
        if "box" in data:
            data["box"] = tuple(data["box"])
        return cls(**data)


def table1(n: int = 200, **overrides) -> ExperimentSpec:
    """Complete graph, mean-field algorithm."""
    return ExperimentSpec(n=n, family="complete", algo="meanfield", **overrides)


def table2(p: float = 0.5, n: int = 200, **overrides) -> ExperimentSpec:
    """Erdos-Renyi graph of varying density, mean-field algorithm."""
    return ExperimentSpec(n=n, family="erdos_renyi", p=p, algo="meanfield", **overrides)


def table3(n: int = 200, **overrides) -> ExperimentSpec:
    """Gaussian couplings, message passing."""
    return ExperimentSpec(n=n, family="gaussian", algo="amp", **overrides)


PRESETS = {
    "table1": [table1(n) for n in (200, 400, 800)],
    "table2": [table2(p) for p in (0.5, 0.01, 0.001)],
    "table3": [table3(n) for n in (200, 400, 800)],
}

GRAPHONS = {
    "product": lambda u, v: u * v,
    "constant": lambda u, v: np.ones(np.broadcast(u, v).shape),
}


def build_network(spec: ExperimentSpec, rng=None) -> network.InteractionMatrix:
    rng = stage_rng(spec.seed, NETWORK) if rng is None else rng
    fam = spec.family
    if fam == "complete":
        return network.complete_graph(spec.n, spec.beta)
    if fam == "regular":
        return network.regular_graph(spec.n, spec.degree, spec.beta, rng)
    if fam == "erdos_renyi":
        return network.erdos_renyi(spec.n, spec.p, spec.beta, rng)
    if fam == "graphon":
        return network.graphon(spec.n, GRAPHONS[spec.graphon], spec.rho or 1.0, spec.beta, rng)
    if fam == "gaussian":
        return network.gaussian_sk(spec.n, spec.beta, rng)
    raise ValueError(f"cannot build family {fam!r}")


@dataclass
class EffectEstimate:
    de_replicates: np.ndarray
    ie_replicates: np.ndarray
    zeta: float
    algo: str
    metadata: dict = field(default_factory=dict)
    fattening: float = 0.0

    @property
    def de_avg(self) -> float:
        return float(np.mean(self.de_replicates))

    @property
    def ie_avg(self) -> float:
        return float(np.mean(self.ie_replicates))

    @property
    def ci_de(self) -> tuple[float, float]:
        lo, hi = quantile_ci(self.de_replicates, self.zeta)
        return lo - self.fattening, hi + self.fattening

    @property
    def ci_ie(self) -> tuple[float, float]:
        lo, hi = quantile_ci(self.ie_replicates, self.zeta)
        return lo - self.fattening, hi + self.fattening

    def to_dict(self) -> dict:
        return {
            "algo": self.algo,
            "zeta": self.zeta,
            "fattening": self.fattening,
            "de_avg": self.de_avg,
            "ie_avg": self.ie_avg,
            "ci_de": list(self.ci_de),
            "ci_ie": list(self.ci_ie),
            "de_replicates": [float(v) for v in self.de_replicates],
            "ie_replicates": [float(v) for v in self.ie_replicates],
            "metadata": self.metadata,
        }


def solve_fixed_points(spec: ExperimentSpec, params: ModelParams, beta: float):
    """Treated-random and all-control fixed points on frozen samples from the spec's seed."""
    mu = spec.measure
    out = []
    for key, variant in enumerate(amp.VARIANTS):
        rng = stage_rng(spec.seed, FIXED_POINT, key)
        fp = amp.solve_fixed_point(
            mu, params.tau, params.theta, spec.covariate_dist, beta,
            variant=variant, mc_samples=spec.mc_samples, rng=rng, p_treat=spec.p_alloc,
        )
        if not fp.converged:
            warnings.warn(f"{variant} fixed point did not converge at beta={beta}")
        out.append(fp)
    return tuple(out)


def replicate_effects(
    spec: ExperimentSpec,
    params: ModelParams,
    A: network.InteractionMatrix,
    oracle: bool = False,
) -> EffectEstimate:
    """Average DE/IE over ``spec.k`` independent hypothetical allocations.

    Replicate ``j`` draws (T_bar, X_bar) from the stream keyed
    ``(REPLICATES, j)``, so the same spec gives the same draws whatever
    ``params`` are plugged in.
    """
    mu = spec.measure
    cov = spec.covariate_dist
    meta = {
        "oracle": oracle,
        "n": A.n,
        "M": spec.M,
        "k": spec.k,
        "seed": spec.seed,
        "params": params.to_dict(),
    }
    if spec.algo == "amp":
        G = network.normalized_gaussian(A)
        fp, fp_tilde = solve_fixed_points(spec, params, A.beta)
        meta["fixed_points"] = {"treated_random": fp.to_dict(), "all_control": fp_tilde.to_dict()}

        def one(j):
            rng = stage_rng(spec.seed, REPLICATES, j)
            t_bar = draw_allocation(A.n, spec.p_alloc, rng)
            x_bar = cov.sample(A.n, params.d, rng)
            return amp.estimate_effects_amp(
                G, mu, params.tau, params.theta, t_bar, x_bar, A.beta, fp, fp_tilde, spec.M, spec.p_alloc
            )
    else:
        om = OutcomeModel(A, params.tau, params.theta, mu)

        def one(j):
            rng = stage_rng(spec.seed, REPLICATES, j)
            t_bar = draw_allocation(A.n, spec.p_alloc, rng)
            x_bar = cov.sample(A.n, params.d, rng)
            return meanfield.estimate_effects_mf(om, t_bar, x_bar, spec.M, spec.tol, spec.p_alloc)

    draws = [None] * spec.k
    if spec.workers > 1:
        with ThreadPoolExecutor(spec.workers) as pool:
            futures = {j: pool.submit(one, j) for j in range(spec.k)}
            for j, fut in futures.items():
                draws[j] = _checked(fut.result, j)
    else:
        for j in range(spec.k):
            draws[j] = _checked(lambda: one(j), j)

    if spec.algo == "meanfield":
        meta["early_stopped"] = any(d.early_stopped for d in draws)
        meta["all_converged"] = all(d.state.converged for d in draws)
    else:
        meta["max_tap_residual"] = max(d.state.tap_residual for d in draws)
    return EffectEstimate(
        de_replicates=np.array([d.de for d in draws]),
        ie_replicates=np.array([d.ie for d in draws]),
        zeta=spec.zeta,
        algo=spec.algo,
        metadata=meta,
        fattening=spec.fattening,
    )


class ReplicateError(RuntimeError):
    def __init__(self, index, cause):
        super().__init__(f"replicate {index} failed: {cause}")
        self.index = index


def _checked(call, j):
    try:
        return call()
    except Exception as exc:  # noqa: BLE001 - re-raised with the replicate index
        raise ReplicateError(j, exc) from exc


def oracle_truth(spec: ExperimentSpec, true_params: ModelParams, A: network.InteractionMatrix) -> EffectEstimate:
    """Same pipeline with the true parameters; its averages are the reference values."""
    return replicate_effects(spec, true_params, A, oracle=True)


def simulate(
    A: network.InteractionMatrix,
    params: ModelParams,
    mu: BaseMeasure,
    seed: int,
    cov_dist: CovariateDist = CovariateDist(),
    sweeps: int = 250,
    burn_in: int = 50,
    Mmat: Optional[network.InteractionMatrix] = None,
) -> Dataset:
    """Covariates, then treatments from the propensity field, then outcomes."""
    Mmat = A if Mmat is None else Mmat
    X = cov_dist.sample(A.n, params.d, stage_rng(seed, COVARIATES))
    T = gibbs_sample_treatment(
        PropensityModel(Mmat, params.gamma), X, sweeps, burn_in, stage_rng(seed, TREATMENT)
    )
    Y = gibbs_sample_outcome(
        OutcomeModel(A, params.tau, params.theta, mu), T, X, sweeps, burn_in, stage_rng(seed, OUTCOME)
    )
    return Dataset(Y, T, X)


def simulate_dataset(spec: ExperimentSpec, A: network.InteractionMatrix) -> Dataset:
    return simulate(
        A, spec.true_params, spec.measure, spec.seed, spec.covariate_dist,
        spec.gibbs_sweeps, spec.gibbs_burn_in,
    )


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage


@dataclass
class ExperimentReport:
    spec: ExperimentSpec
    truth: EffectEstimate
    estimate: EffectEstimate
    fit: Optional[dict]
    network_diagnostics: dict
    runtime_seconds: float

    @property
    def truth_in_ci(self) -> dict:
        lo, hi = self.estimate.ci_de
        lo_i, hi_i = self.estimate.ci_ie
        return {
            "de": bool(lo <= self.truth.de_avg <= hi),
            "ie": bool(lo_i <= self.truth.ie_avg <= hi_i),
        }

    def row(self) -> dict:
        return {
            "label": self.spec.label,
            "truth_de": self.truth.de_avg,
            "truth_ie": self.truth.ie_avg,
            "estimate_de": self.estimate.de_avg,
            "estimate_ie": self.estimate.ie_avg,
            "ci_de": list(self.estimate.ci_de),
            "ci_ie": list(self.estimate.ci_ie),
            "runtime_seconds": self.runtime_seconds,
        }

    def to_dict(self, include_timing: bool = True) -> dict:
        row = self.row()
        if not include_timing:
            row.pop("runtime_seconds")
        return {
            "row": row,
            "truth_in_ci": self.truth_in_ci,
            "spec": self.spec.to_dict(),
            "fit": self.fit,
            "network": self.network_diagnostics,
            "truth": self.truth.to_dict(),
            "estimate": self.estimate.to_dict(),
        }

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)


def run_experiment(spec: ExperimentSpec) -> ExperimentReport:
    """Simulate data, fit by pseudo-likelihood, and compare plug-in estimates with the oracle."""
    start = time.perf_counter()
    try:
        A = build_network(spec)
        data = simulate_dataset(spec, A)
    except Exception as exc:
        raise ExperimentError("simulate", exc) from exc
    diag = network.diagnostics(A)
    if not diag.high_temp_flag:
        log.warning("operator norm %.3f exceeds the high-temperature threshold %.3f", diag.op_norm, diag.threshold)
    fit_info = None
    params = spec.true_params
    if spec.fit:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fit = mple.fit_outcome(data, A, spec.measure, box=spec.box)
        except Exception as exc:
            raise ExperimentError("fit", exc) from exc
        params = ModelParams(fit.params.tau, fit.params.theta, spec.gamma, B=spec.box[0], M=spec.box[1])
        fit_info = fit.to_dict()
    try:
        truth = oracle_truth(spec, spec.true_params, A)
        estimate = replicate_effects(spec, params, A)
    except Exception as exc:
        raise ExperimentError("estimate", exc) from exc
    return ExperimentReport(spec, truth, estimate, fit_info, diag.to_dict(), time.perf_counter() - start)


TABLE_COLUMNS = ["label", "effect", "truth", "ci_lo", "ci_hi", "estimate", "runtime_seconds"]


def table_rows(reports) -> list[dict]:
    rows = []
    for rep in reports:
        r = rep.row()
        for effect, key in (("direct", "de"), ("indirect", "ie")):
            lo, hi = r[f"ci_{key}"]
            rows.append({
                "label": r["label"],
                "effect": effect,
                "truth": r[f"truth_{key}"],
                "ci_lo": lo,
                "ci_hi": hi,
                "estimate": r[f"estimate_{key}"],
                "runtime_seconds": r["runtime_seconds"],
            })
    return rows


def table_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, TABLE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in table_rows(reports):
        w.writerow(row)
    return buf.getvalue()
