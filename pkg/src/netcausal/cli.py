"""Command-line entry point: ``netcausal <command> ...``.

Exit codes: 0 success, 2 validation failure, 3 non-convergence, 1 usage or
input errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import amp, meanfield, mple, network, pipeline
from .measure import alpha, alpha_prime, alpha_second, get_measure
from .model import CovariateDist, Dataset, ModelParams, OutcomeModel, brute_force_means, gibbs_sample_outcome

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VALIDATION = 2
EXIT_NONCONVERGENCE = 3


def _write(text: str, out) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def cmd_network(args) -> int:
    fam = args.family
    seed = args.seed
    if fam == "complete":
        A = network.complete_graph(args.n, args.beta)
    elif fam == "regular":
        A = network.regular_graph(args.n, args.d, args.beta, seed)
    elif fam == "erdos_renyi":
        A = network.erdos_renyi(args.n, args.p, args.beta, seed)
    elif fam == "graphon":
        A = network.graphon(args.n, pipeline.GRAPHONS[args.graphon], args.rho, args.beta, seed)
    else:
        A = network.gaussian_sk(args.n, args.beta, seed)
    network.save_coo(A, args.out)
    if args.diagnostics:
        sys.stdout.write(_dump(network.diagnostics(A).to_dict()))
    return EXIT_OK


def cmd_simulate(args) -> int:
    A = network.load_coo(args.network)
    params = ModelParams.load(args.params)
    Mmat = network.load_coo(args.propensity_network) if args.propensity_network else None
    data = pipeline.simulate(
        A, params, get_measure(args.mu), args.seed, CovariateDist.parse(args.covariates),
        args.sweeps, args.burn_in, Mmat,
    )
    data.save_csv(args.out)
    return EXIT_OK


def cmd_fit(args) -> int:
    data = Dataset.load_csv(args.data)
    A = network.load_coo(args.network)
    box = (args.B, args.M)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = mple.fit_outcome(data, A, get_measure(args.mu), box=box, tol=args.tol, max_iter=args.max_iter)
        ok = res.converged
        report = {"outcome": res.to_dict()}
        params = res.params
        if args.propensity:
            Mmat = network.load_coo(args.propensity)
            pres = mple.fit_propensity(data, Mmat, box=box, tol=args.tol, max_iter=args.max_iter)
            report["propensity"] = pres.to_dict()
            params = ModelParams(res.params.tau, res.params.theta, pres.params.gamma, B=box[0], M=box[1])
            ok = ok and pres.converged
    report["params"] = params.to_dict()
    if args.out:
        params.save(args.out)
        Path(str(args.out) + ".fit.json").write_text(_dump(report))
    else:
        sys.stdout.write(_dump(report))
    return EXIT_OK if ok else EXIT_NONCONVERGENCE


def cmd_estimate(args) -> int:
    A = network.load_coo(args.network)
    params = ModelParams.load(args.params)
    if args.algo == "amp" and args.beta is not None and args.beta != A.beta:
        G = network.normalized_gaussian(A)
        A = network.InteractionMatrix(args.beta * G, "gaussian", args.beta, A.seed, normalized=G)
    spec = pipeline.ExperimentSpec(
        n=A.n, family=A.family, beta=A.beta, d=params.d, mu=args.mu, covariates=args.covariates,
        tau=params.tau, theta=list(params.theta), gamma=list(params.gamma), algo=args.algo,
        M=args.iters, k=args.replicates, zeta=args.zeta, seed=args.seed, p_alloc=args.p_alloc,
        tol=args.tol, mc_samples=args.mc_samples, fattening=args.fattening, workers=args.workers,
        box=(params.B, params.M),
    )
    est = pipeline.replicate_effects(spec, params, A)
    _write(_dump(est.to_dict()), args.out)
    meta = est.metadata
    converged = meta.get("all_converged", True)
    for fp in meta.get("fixed_points", {}).values():
        converged = converged and fp["converged"]
    return EXIT_OK if converged else EXIT_NONCONVERGENCE


def _load_specs(args) -> list:
    if args.preset:
        specs = [pipeline.ExperimentSpec.from_dict(s.to_dict()) for s in pipeline.PRESETS[args.preset]]
    else:
        raw = json.loads(Path(args.config).read_text())
        raw = raw if isinstance(raw, list) else [raw]
        specs = [pipeline.ExperimentSpec.from_dict(r) for r in raw]
    overrides = {}
    if args.replicates is not None:
        overrides["k"] = args.replicates
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if overrides:
        specs = [pipeline.ExperimentSpec.from_dict({**s.to_dict(), **overrides}) for s in specs]
    return specs


def cmd_experiment(args) -> int:
    reports = []
    for spec in _load_specs(args):
        try:
            reports.append(pipeline.run_experiment(spec))
        except pipeline.ExperimentError as exc:
            sys.stderr.write(f"error: {exc}\n")
            return EXIT_NONCONVERGENCE if isinstance(exc.__cause__, FloatingPointError) else EXIT_ERROR
    _write(pipeline.table_csv(reports), args.out_csv)
    if args.out_json:
        Path(args.out_json).write_text(_dump([r.to_dict() for r in reports]))
    fits_ok = all(r.fit is None or r.fit["converged"] for r in reports)
    return EXIT_OK if fits_ok else EXIT_NONCONVERGENCE


def _check_measure_calculus(rng) -> float:
    worst = 0.0
    h = 1e-5
    for mu in (get_measure("rademacher"), get_measure("uniform")):
        for lam2 in rng.uniform(-2, 2, 5):
            lam1 = rng.uniform(-3, 3, 20)
            fd1 = (alpha(mu, lam1 + h, lam2) - alpha(mu, lam1 - h, lam2)) / (2 * h)
            fd2 = (alpha_prime(mu, lam1 + h, lam2) - alpha_prime(mu, lam1 - h, lam2)) / (2 * h)
            worst = max(worst, np.max(np.abs(fd1 - alpha_prime(mu, lam1, lam2))))
            worst = max(worst, np.max(np.abs(fd2 - alpha_second(mu, lam1, lam2))))
    return float(worst)


def cmd_validate(args) -> int:
    """Fast oracle checks on an 8-site instance plus the degenerate identities."""
    rng = np.random.default_rng(args.seed)
    n = 8
    A = network.complete_graph(n, 0.3)
    om = OutcomeModel(A, 0.5, [2.0], get_measure("rademacher"))
    t = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    x = rng.uniform(-1, 1, (n, 1))
    results = {}

    exact, _ = brute_force_means(om, t, x)
    _, trace = gibbs_sample_outcome(om, t, x, args.sweeps + 100, 100, rng, return_trace=True)
    se = trace.std(axis=0, ddof=1) / np.sqrt(trace.shape[0])
    # autocorrelation is weak at this coupling; allow a generous multiple of the naive SE
    z = np.abs(trace.mean(axis=0) - exact) / np.maximum(se, 1e-12)
    results["gibbs_vs_enumeration"] = bool(np.all(z < 5.0))

    state = meanfield.mf_iterate(om, t, x, max_iter=200, tol=1e-8)
    fixed = alpha_prime(om.mu, A.dot(state.u) + om.field(t, x), 0.0)
    results["meanfield_fixed_point"] = bool(state.converged and np.max(np.abs(fixed - state.u)) <= 1e-8)

    results["alpha_derivatives"] = _check_measure_calculus(rng) <= 1e-6

    # zero field and zero coupling: every mean is the (zero) mean of a symmetric measure
    zero = network.custom(np.zeros((n, n)))
    draw = meanfield.estimate_effects_mf(OutcomeModel(zero, 0.0, [0.0]), t, x, M=50, tol=None)
    fp = amp.FixedPoint(q=0.5, sigma2=0.5, mc_samples=0, iterations=0, converged=True)
    G = np.asarray(network.gaussian_sk(n, 1.0, rng).normalized)
    amp_draw = amp.estimate_effects_amp(G, om.mu, 0.0, [0.0], t, x, 0.0, fp, fp, M=50)
    results["degenerate_zero_effects"] = draw.de == draw.ie == amp_draw.de == amp_draw.ie == 0.0

    # beta = 0 message passing reduces to independent sites, as does mean-field with A = 0
    mf0 = meanfield.mf_iterate(OutcomeModel(zero, 0.5, [2.0]), t, x, max_iter=5, tol=None)
    amp0 = amp.amp_iterate(G, om.mu, 0.5, [2.0], t, x, 0.0, fp, M=5)
    results["beta_zero_agreement"] = bool(np.array_equal(mf0.u, amp0.m))

    for name, ok in results.items():
        sys.stdout.write(f"{'PASS' if ok else 'FAIL'} {name}\n")
    return EXIT_OK if all(results.values()) else EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="netcausal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("network", help="generate an interaction matrix")
    p.add_argument("--family", required=True, choices=[f for f in network.FAMILIES if f != "custom"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--d", type=int, help="degree for regular graphs")
    p.add_argument("--p", type=float, help="edge probability for erdos_renyi")
    p.add_argument("--rho", type=float, default=1.0, help="graphon sparsity")
    p.add_argument("--graphon", choices=sorted(pipeline.GRAPHONS), default="product")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--diagnostics", action="store_true", help="print operator norm and flags")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_network)

    p = sub.add_parser("simulate", help="draw (Y, T, X) by Gibbs sampling")
    p.add_argument("--network", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--mu", default="rademacher")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--covariates", default="uniform")
    p.add_argument("--propensity-network", help="treatment interaction matrix (default: outcome network)")
    p.add_argument("--sweeps", type=int, default=250)
    p.add_argument("--burn-in", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="pseudo-likelihood parameter estimates")
    p.add_argument("--data", required=True)
    p.add_argument("--network", required=True)
    p.add_argument("--mu", default="rademacher")
    p.add_argument("--propensity", help="treatment interaction matrix; also fits gamma")
    p.add_argument("--B", type=float, default=1.0, help="bound on |tau|")
    p.add_argument("--M", type=float, default=5.0, help="bound on |theta_j| and |gamma_j|")
    p.add_argument("--tol", type=float, default=mple.DEFAULT_TOL)
    p.add_argument("--max-iter", type=int, default=mple.DEFAULT_MAX_ITER)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("estimate", help="DE/IE with Monte-Carlo intervals")
    p.add_argument("--algo", choices=pipeline.ALGORITHMS, default="meanfield")
    p.add_argument("--network", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--mu", default="rademacher")
    p.add_argument("--beta", type=float, help="AMP temperature (default: from the network)")
    p.add_argument("--mc-samples", type=int, default=1000)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--tol", type=float, help="mean-field early-stop tolerance (default: run all iterations)")
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--zeta", type=float, default=0.05)
    p.add_argument("--p-alloc", type=float, default=0.5)
    p.add_argument("--covariates", default="uniform")
    p.add_argument("--fattening", type=float, default=0.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("experiment", help="simulate, fit and estimate against the oracle")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="JSON spec or list of specs")
    src.add_argument("--preset", choices=sorted(pipeline.PRESETS))
    p.add_argument("--replicates", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out-csv")
    p.add_argument("--out-json")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("validate", help="quick oracle and invariant checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sweeps", type=int, default=20000)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
