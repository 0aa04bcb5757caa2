"""
BMO Martingale Laboratory - Command Line Entry Point

One subcommand per analysis; every run writes a report bundle (manifest plus
JSON/CSV payloads) into the output directory.
Run with: python app.py <subcommand> [flags]

Exit codes: 0 all asserted checks passed, 1 a check failed, 2 invalid configuration.
"""

import argparse
import logging
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from components.bmo_analytics import bmo_value, estimate_a, estimate_b, estimate_exponent_streamed
from components.counterexample import build_scenario, moment_blowup_scan, refinement_order, verify_solution
from components.errors import ConfigurationError, LabError
from components.filtration_tree import tree_to_document
from components.inequality_harness import INEQUALITIES, parse_corpus, run_corpus, summarize
from components.linear_systems import (
    BUNDLED_LINEAR_CASES,
    bmo_data_report,
    build_linear_case,
    check_fundamental_rp,
    continuation_scan,
    equivalent_bsde_spec,
    fundamental,
    inverse_sde_gap,
    linear_bsde_residual,
    linear_sde_h1_scan,
    rhi_family,
    solve_linear_bsde_explicit,
    solve_linear_sde,
)
from components.montecarlo_paths import TimeGrid, bundled_spec, simulate
from components.reports import ReportBundle
from components.se_bsde_solvers import (
    bounded_data_diagnostics,
    build_bsde_spec,
    build_se_spec,
    load_spec_document,
    solve_bsde,
    solve_bsde_bmo,
    solve_se,
    uniqueness_probe,
)
from components.spectral_exponent import (
    BUNDLED_SPECTRAL_CASES,
    bound_battery,
    build_spectral_ensemble,
    build_spectral_martingale,
    equivalence_battery,
    nilpotency_index,
    operator_matrix,
    resolvent_probe,
    spectral_radius_mc,
    spectral_radius_tree,
)
from config.lab_config import SCENARIO_DEFAULTS, Backend, RunConfig, SolverKind, read_config_file

logger = logging.getLogger(__name__)

# Known exponent values b(M) of the bundled path martingales
EXPONENT_ORACLES = {"stopped-time-change": np.pi / 2.0, "brownian": np.inf, "zero": np.inf}


def _floats(value: Any) -> List[float]:
    if isinstance(value, str):
        return [float(v) for v in value.split(",") if v.strip()]
    if isinstance(value, (int, float)):
        return [float(value)]
    return [float(v) for v in value]


def parse_complex(value: Any) -> complex:
    """'re,im', a single real or a complex"""
    if isinstance(value, (int, float, complex)):
        return complex(value)
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return complex(float(value[0]), float(value[1]))
    parts = [part.strip() for part in str(value).split(",")]
    try:
        if len(parts) == 1:
            return complex(float(parts[0]), 0.0)
        if len(parts) == 2:
            return complex(float(parts[0]), float(parts[1]))
    except ValueError:
        pass
    raise ConfigurationError(f"cannot read λ from '{value}'; expected 're,im'")


def _tree_seed(config: RunConfig) -> int:
    return 0 if config.seed is None else int(config.seed)


def _bundled_name(spec: str) -> str:
    return spec.split(":", 1)[1] if spec.startswith("bundled:") else spec


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def run_verify(config: RunConfig, bundle: ReportBundle) -> None:
    opts = config.options
    seed = _tree_seed(config)
    corpus = parse_corpus(str(opts["corpus"]), seed)
    names = list(INEQUALITIES) if opts["ineq"] == "all" else [opts["ineq"]]
    for name in names:
        reports = run_corpus(name, corpus, float(opts["p"]), seed)
        bundle.add(f"verify-{name}", reports)
        bundle.add(f"verify-{name}-summary", summarize(reports), asserted=False)
        bundle.add_table(f"verify-{name}-table", pd.DataFrame(
            [{"corpus_id": r.corpus_id, "lhs": r.lhs, "rhs": r.rhs, "ratio": r.ratio, "pass": r.passed}
             for r in reports]))


def run_solve(config: RunConfig, bundle: ReportBundle) -> None:
    opts = config.options
    doc = load_spec_document(str(opts["spec"]))
    kind = SolverKind(opts["kind"])
    if kind is SolverKind.SE:
        spec = build_se_spec(doc)
        _, report = solve_se(spec, settings=config.solver)
    else:
        spec = build_bsde_spec(doc)
        solver = solve_bsde if kind is SolverKind.BSDE else solve_bsde_bmo
        Y, Z, M_perp, report = solver(spec, settings=config.solver)
        if Y is not None:
            diagnostics = bounded_data_diagnostics(Y, Z, M_perp, spec)
            bundle.add("bounded-data", diagnostics, asserted=kind is SolverKind.BSDE_BMO)
    bundle.add(f"solve-{kind.value}", report)
    if opts.get("uniqueness") and kind is not SolverKind.BSDE_BMO:
        probe = uniqueness_probe(spec, config.solver)
        bundle.add("uniqueness", probe, asserted=False)
        bundle.add_check("uniqueness", probe["converged"] and probe["gap"] <= 2.0 * config.tolerances.tree)


def run_linear(config: RunConfig, bundle: ReportBundle) -> None:
    opts = config.options
    op = opts["op"]
    seed = _tree_seed(config)
    p = float(_floats(opts.get("p", 2.0))[0])
    tol = config.tolerances.tree
    if op == "h1-scan":
        corpus = parse_corpus(str(opts.get("corpus", "seeded:{n:20,depth:4,branching:2}")), seed)
        table = bundle.add_table("linear-h1", linear_sde_h1_scan(corpus, seed))
        bundle.add_check("linear-h1", bool((table["residual"] <= tol).all()))
        return
    case = build_linear_case(load_spec_document(str(opts["spec"]), BUNDLED_LINEAR_CASES))
    if op == "fundamental":
        fs = fundamental(case.tree, case.M, D=case.A)
        payload = {**fs.to_dict(), "inverse_sde_gap": inverse_sde_gap(fs), "rp": check_fundamental_rp(fs, p).to_dict()}
        bundle.add("fundamental", payload, asserted=False)
        bundle.add_check("fundamental", fs.identity_gap() <= tol and fs.recursion_gap() <= tol)
    elif op == "bsde":
        Y, Z, M_perp = solve_linear_bsde_explicit(case.A, case.M, case.xi, case.f, case.tree)
        residual = linear_bsde_residual(case.A, case.M, case.xi, case.f, Y, Z, M_perp)
        Y_picard, _, _, picard = solve_bsde(equivalent_bsde_spec(case.A, case.M, case.xi, case.f, case.tree),
                                            settings=config.solver)
        gap = (float(max(np.max(np.abs(a - b)) for a, b in zip(Y.values, Y_picard.values)))
               if Y_picard is not None else np.nan)
        bundle.add("linear-bsde", {"residual": residual, "picard_gap": gap, "picard": picard.to_dict()},
                   asserted=False)
        bundle.add_check("linear-bsde", residual <= tol and picard.converged and gap <= 10.0 * tol)
    elif op == "sde":
        _, report = solve_linear_sde(case.A, case.M, case.V, p)
        bundle.add("linear-sde", report, asserted=False)
        bundle.add_check("linear-sde", report.residual <= tol)
    elif op == "rhi":
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        bundle.add("rhi", rhi_family(case.A, case.M, rng, int(opts.get("count", 20)), p))
    elif op == "girsanov":
        bundle.add("bmo-data", bmo_data_report(case.A, case.M, case.xi), asserted=False)
    elif op == "continuation":
        fs = fundamental(case.tree, case.M, D=case.A)
        table = bundle.add_table("continuation", continuation_scan(fs, _floats(opts.get("p_grid", "1,1.5,2,3,4"))))
        bundle.add_check("continuation", bool(table["nondecreasing"].all()))
    else:
        raise ConfigurationError(f"unknown linear op '{op}'")


def run_spectral(config: RunConfig, bundle: ReportBundle) -> None:
    opts = config.options
    op = opts["op"]
    doc = load_spec_document(str(opts["spec"]), BUNDLED_SPECTRAL_CASES)
    backend = Backend(doc.get("backend", config.backend.value))
    p_list = _floats(opts["p"])
    if op == "equivalence":
        tree_doc = doc if backend is Backend.TREE else load_spec_document(
            str(opts.get("tree_spec", "bundled:binary-depth3")), BUNDLED_SPECTRAL_CASES)
        mc_doc = doc if backend is Backend.MC else load_spec_document(
            str(opts.get("mc_spec", "bundled:stopped-time-change")), BUNDLED_SPECTRAL_CASES)
        seed = config.require_seed()
        ensemble, spec = build_spectral_ensemble(mc_doc, seed, config.spectral, config.montecarlo)
        report = equivalence_battery(build_spectral_martingale(tree_doc), ensemble, spec.stop_rule, seed=seed,
                                     settings=config.spectral, exponent_settings=config.exponent)
        bundle.add("equivalence", report)
        bundle.add_table("lambda-ray", pd.DataFrame(report.ray))
        return
    if backend is Backend.TREE:
        seed = _tree_seed(config)
        m = build_spectral_martingale(doc)
        opm = operator_matrix(m, seed=seed, settings=config.spectral)
        if op == "matrix":
            bundle.add("operator", {**opm.to_dict(bool(opts.get("include_matrix"))),
                                    "nilpotency_index": nilpotency_index(opm)}, asserted=False)
            bundle.add_check("operator", opm.audit_gap <= config.tolerances.tree)
        elif op == "radius":
            for p in p_list:
                bundle.add(f"radius-p{p:g}", spectral_radius_tree(opm, p, config.spectral, seed), asserted=False)
        elif op == "resolvent":
            bundle.add("resolvent", resolvent_probe(m, parse_complex(opts["lam"]), p=p_list[0]))
        elif op == "bounds":
            report = bundle.add("bounds", bound_battery(opm, p_list, seed=seed, settings=config.spectral))
            bundle.add_table("bounds-table", report.frame())
        else:
            raise ConfigurationError(f"unknown spectral op '{op}'")
        return
    seed = config.require_seed()
    ensemble, spec = build_spectral_ensemble(doc, seed, config.spectral, config.montecarlo)
    if op == "radius":
        b_report = estimate_b(ensemble, stop_rule=spec.stop_rule, settings=config.exponent, seed=seed)
        bundle.add("b", b_report, asserted=False)
        for p in p_list:
            report = spectral_radius_mc(ensemble, p, seed=seed, b_report=b_report, settings=config.spectral)
            bundle.add(f"radius-p{p:g}", report, asserted=False)
    elif op == "resolvent":
        bundle.add("resolvent", resolvent_probe(ensemble, parse_complex(opts["lam"]), p=p_list[0],
                                                mc_settings=config.montecarlo))
    elif op == "bounds":
        report = bundle.add("bounds", bound_battery(ensemble, p_list, spec.stop_rule, seed=seed,
                                                    settings=config.spectral, exponent_settings=config.exponent))
        bundle.add_table("bounds-table", report.frame())
    else:
        raise ConfigurationError(f"spectral op '{op}' needs a tree case")


def run_counterexample(config: RunConfig, bundle: ReportBundle) -> None:
    opts = config.options
    seed = config.require_seed()
    scenario = build_scenario(int(opts["k"]), int(opts["paths"]), seed, keep_paths=bool(opts.get("keep_paths")),
                              settings=config.counterexample, mc_settings=config.montecarlo)
    bundle.add("scenario", scenario.to_dict(), asserted=False)
    bundle.add("solution", verify_solution(scenario))
    scan = moment_blowup_scan(scenario, _floats(opts["lambdas"]), config.tolerances.mc_sigmas, config.exponent, seed)
    bundle.add("blowup", scan)
    bundle.add_table("blowup-scan", scan.frame())
    if opts.get("refine"):
        refinement = refinement_order(None, int(opts.get("refine_paths", 4096)), seed,
                                      config.counterexample, config.montecarlo)
        bundle.add("refinement", refinement)
        bundle.add_table("refinement-table", refinement.frame())


def exponent_grid(singular: bool, k: int, step_offset: int) -> TimeGrid:
    t_end = 1.0 - 2.0 ** -k if singular else 1.0
    return TimeGrid.with_step(0.0, t_end, 2.0 ** -(k + step_offset))


def run_exponent(config: RunConfig, bundle: ReportBundle) -> None:
    opts = config.options
    seed = config.require_seed()
    name = _bundled_name(str(opts["spec"]))
    spec = bundled_spec(name)
    grid = exponent_grid(spec.singular_time is not None, int(opts["k"]), int(opts["step_offset"]))
    n_paths = int(opts["paths"])
    ensemble = None if spec.stop_rule is not None else simulate(spec, grid, n_paths, seed, config.montecarlo)

    def estimate(which: str):
        if ensemble is None:
            return estimate_exponent_streamed(which, spec, grid, n_paths, seed, config.exponent, config.montecarlo)
        estimator = estimate_b if which == "b" else estimate_a
        return estimator(ensemble, stop_rule=spec.stop_rule, settings=config.exponent, seed=seed)

    which = opts.get("which", "b")
    if which in ("b", "both"):
        report = estimate("b")
        bundle.add("b", report, asserted=False)
        oracle = EXPONENT_ORACLES.get(name)
        if oracle is not None:
            width = (report.hi - report.lo) / oracle if np.isfinite(oracle) else 0.0
            bundle.add("b-oracle", {"oracle": oracle, "contained": report.contains(oracle),
                                    "relative_width": width}, asserted=False)
            bundle.add_check("b-oracle", report.contains(oracle) and width <= config.exponent.oracle_width)
    if which in ("a", "both"):
        bundle.add("a", estimate("a"), asserted=False)


def run_corpus_command(config: RunConfig, bundle: ReportBundle) -> None:
    opts = config.options
    seed = _tree_seed(config)
    source = str(opts.get("file") or opts["corpus"])
    members = parse_corpus(source, seed)
    if opts["op"] == "generate":
        bundle.add("corpus", [dict(tree_to_document(m.tree, m.martingale), corpus_id=m.corpus_id) for m in members],
                   asserted=False)
    elif opts["op"] != "describe":
        raise ConfigurationError(f"unknown corpus op '{opts['op']}'")
    bundle.add_table("corpus-summary", pd.DataFrame([
        {"corpus_id": m.corpus_id, "depth": m.tree.depth, "branching": m.tree.branching,
         "nodes": m.tree.node_count, "bmo": bmo_value(m.martingale)}
        for m in members]))


HANDLERS: Dict[str, Callable[[RunConfig, ReportBundle], None]] = {
    "verify": run_verify,
    "solve": run_solve,
    "linear": run_linear,
    "spectral": run_spectral,
    "counterexample": run_counterexample,
    "exponent": run_exponent,
    "corpus": run_corpus_command,
}


def run(config: RunConfig) -> ReportBundle:
    """Dispatch the config to its subcommand and collect the reports"""
    if config.subcommand not in HANDLERS:
        raise ConfigurationError(f"unknown subcommand '{config.subcommand}'")
    bundle = ReportBundle(config.subcommand, config.echo())
    logger.info(f"Running {config.subcommand} with options {config.options}")
    HANDLERS[config.subcommand](config, bundle)
    for name in bundle.failing:
        logger.error(f"{config.subcommand}: check '{name}' failed")
    return bundle


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Seed; required for Monte Carlo runs")
    common.add_argument("--config", default=None, help="YAML or JSON file with flag values; flags win")
    common.add_argument("--output-dir", dest="output_dir", default=None, help="Bundle directory")
    common.add_argument("--format", dest="formats", nargs="+", choices=["json", "csv"], default=None)
    common.add_argument("--backend", choices=[b.value for b in Backend], default=None)
    common.add_argument("--log-level", dest="log_level", default=None)

    parser = argparse.ArgumentParser(prog="bmolab", description="BMO martingale laboratory")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("verify", parents=[common], help="Inequality suite over a tree corpus")
    p.add_argument("--ineq", choices=sorted(INEQUALITIES) + ["all"], default=None)
    p.add_argument("--corpus", default=None, help="seeded:{n:..,depth:..,branching:..} or a JSON file")
    p.add_argument("--p", type=float, default=None)

    p = sub.add_parser("solve", parents=[common], help="SE / BSDE Picard solvers")
    p.add_argument("--kind", choices=[k.value for k in SolverKind], default=None)
    p.add_argument("--spec", default=None, help="bundled:<name> or a JSON spec file")
    p.add_argument("--uniqueness", action="store_true", default=None)

    p = sub.add_parser("linear", parents=[common], help="Fundamental solutions, linear SDE/BSDE, reverse Hölder")
    p.add_argument("--op", choices=["fundamental", "bsde", "sde", "rhi", "girsanov", "continuation", "h1-scan"],
                   default=None)
    p.add_argument("--spec", default=None)
    p.add_argument("--corpus", default=None)
    p.add_argument("--p", type=float, default=None)
    p.add_argument("--p-grid", dest="p_grid", default=None, help="comma-separated exponents")
    p.add_argument("--count", type=int, default=None)

    p = sub.add_parser("spectral", parents=[common], help="Operator matrix, spectral radius, resolvent, bounds")
    p.add_argument("--op", choices=["matrix", "radius", "resolvent", "bounds", "equivalence"], default=None)
    p.add_argument("--spec", default=None)
    p.add_argument("--tree-spec", dest="tree_spec", default=None)
    p.add_argument("--mc-spec", dest="mc_spec", default=None)
    p.add_argument("--p", type=float, nargs="+", default=None)
    p.add_argument("--lambda", dest="lam", default=None, help="complex λ as re,im")
    p.add_argument("--include-matrix", dest="include_matrix", action="store_true", default=None)

    p = sub.add_parser("counterexample", parents=[common], help="Quadratic BSDE counterexample")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--paths", type=int, default=None)
    p.add_argument("--lambdas", type=float, nargs="+", default=None)
    p.add_argument("--refine", action="store_true", default=None)
    p.add_argument("--refine-paths", dest="refine_paths", type=int, default=None)
    p.add_argument("--keep-paths", dest="keep_paths", action="store_true", default=None)

    p = sub.add_parser("exponent", parents=[common], help="Kazamaki exponents on simulated paths")
    p.add_argument("--spec", default=None)
    p.add_argument("--paths", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--step-offset", dest="step_offset", type=int, default=None)
    p.add_argument("--which", choices=["a", "b", "both"], default=None)

    p = sub.add_parser("corpus", parents=[common], help="Generate or describe tree corpora")
    p.add_argument("op", choices=["generate", "describe"], nargs="?", default=None)
    p.add_argument("--corpus", default=None)
    p.add_argument("--file", default=None, help="JSON tree document(s) to describe")
    return parser


def build_config(args: argparse.Namespace) -> RunConfig:
    """Scenario defaults, then the config file, then explicit flags"""
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "subcommand")}
    config = RunConfig(subcommand=args.subcommand).merge(dict(SCENARIO_DEFAULTS.get(args.subcommand, {})))
    if args.config:
        config.merge(read_config_file(args.config))
    config.merge(flags)
    config.scenario = config.options.get("spec") or config.options.get("file") or config.options.get("corpus")
    return config


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = build_config(args)
        level = logging.getLevelName(config.log_level.upper())
        if not isinstance(level, int):
            raise ConfigurationError(f"unknown log level '{config.log_level}'")
        logging.getLogger().setLevel(level)
        bundle = run(config)
        path = bundle.write(config.output_dir, config.formats)
    except LabError as e:
        logger.error(f"{args.subcommand}: {e}")
        return 2
    status = "passed" if bundle.passed else f"FAILED ({', '.join(bundle.failing)})"
    print(f"{args.subcommand}: {len(bundle.checks)} checks {status}; bundle at {path}")
    return 0 if bundle.passed else 1


if __name__ == "__main__":
    sys.exit(main())
