"""Command-line orchestration: scenario configs in, reports out.

Subcommands price and hedge run the two sides of the superhedging
program on a configured market, chain and gap-demo produce the six-value
ordering report, decompose splits a supplied exercise-randomizing
measure into scenario measure and clock, and integrate runs the dyadic
integration battery.  Reports are JSON with sorted keys so that the same
config and seed reproduce the same bytes, timing aside; tabular strategy
and convergence data go to CSV next to the report.

Exit codes: 0 on success, 2 when the requested scenario class is empty
or a decomposition degenerates, 3 when an enumeration cap would be
exceeded, 4 on malformed configs or measure files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AmrobustError, SchemaError
from .lattice import EnlargedIndex
from .measures import (EnlargedMeasure, ModelClass, epsilon_modify)
from .pathwise import (DEFAULT_LEVEL, IntegrandSpec, SampledPath,
                       beta_limsup, karandikar_integral, quadratic_variation,
                       sample_diffusion)
from .solvers import (dual_superhedge_american, inequality_chain, lift_payoff,
                      lifted_model, primal_enlarged, robust_dpp,
                      verify_superhedge)
from .scenarios import (band_from_config, build_gap_demo, lattice_from_config,
                        options_from_catalog, scenario_from_config,
                        trivial_joint)
from .stopping import (DEFAULT_RULE_CAP, is_adapted, multiplicative_decompose,
                       random_adapted_table, verify_reconstruction,
                       verify_martingale_preservation)

REPORT_SCHEMA_VERSION = 1
WORKERS_ENV = "AMROBUST_WORKERS"

_ONE = IntegrandSpec(lambda t, x: np.ones_like(t), name="1", vectorized=True)
_CURRENT = IntegrandSpec(lambda t, x: x, name="X", vectorized=True)


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise SchemaError(f"{WORKERS_ENV} must be an integer, got {raw!r}")
    return max(1, n)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"),
                       default=_jsonable)
    return hashlib.sha256(canon.encode()).hexdigest()


@dataclass
class RunReport:
    """One command's complete output.

    Everything except ``timing`` is a pure function of the config and
    seed, which is what makes reports diff-able regression artifacts.
    """

    command: str
    config_hash: str = ""
    seed: int | None = None
    values: dict = field(default_factory=dict)
    value_report: dict | None = None
    certificates: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        out = {
            "schema_version": self.schema_version,
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "values": self.values,
            "certificates": self.certificates,
            "artifacts": self.artifacts,
            "versions": {
                "numpy": np.__version__,
                "python": platform.python_version(),
            },
            "timing": self.timing,
        }
        if self.value_report is not None:
            out["value_report"] = self.value_report
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2,
                          default=_jsonable)


def _write_outputs(args, report: RunReport, tables: dict) -> None:
    """CSV tables plus report.json under --out; artifact list first."""
    if not getattr(args, "out", None):
        return
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    for name in sorted(tables):
        header, rows = tables[name]
        with open(outdir / name, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        report.artifacts.append(name)
    report.artifacts.append("report.json")
    (outdir / "report.json").write_text(report.to_json() + "\n")


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise SchemaError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise SchemaError(f"config {path} must be a JSON object")
    return cfg


def _require_config(args) -> dict:
    if not args.config:
        raise SchemaError(f"{args.command} requires --config")
    return _load_json(args.config)


def _optional_config(args) -> dict:
    return _load_json(args.config) if args.config else {}


def enlarged_measure_config(measure: EnlargedMeasure, *, band=None,
                            options=None, extra=None) -> dict:
    """Serialize an exercise-randomizing measure to the decompose schema."""
    lat = measure.lattice
    cfg = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "lattice": {
            "dates": list(lat.grid.dates),
            "pre_date": lat.grid.pre_date,
            "paths": lat.path_values.tolist(),
        },
        "theta_dates": [int(u) for u in measure.index.theta_dates],
        "weights": measure.weights.tolist(),
    }
    if band is not None:
        cfg["band"] = band
    if options is not None:
        cfg["options"] = options
    if extra:
        cfg.update(extra)
    return cfg


def _measure_from_config(cfg: dict):
    """(measure, model-or-None) from a decompose file."""
    try:
        version = cfg.get("schema_version", REPORT_SCHEMA_VERSION)
        if version != REPORT_SCHEMA_VERSION:
            raise SchemaError(f"unsupported measure schema version {version}")
        lat = lattice_from_config(cfg["lattice"])
        theta = tuple(int(u) for u in cfg["theta_dates"])
        index = EnlargedIndex(lat, theta)
        weights = np.asarray(cfg["weights"], dtype=float)
        measure = EnlargedMeasure(index, weights)
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad measure file: {exc}") from exc
    model = None
    if cfg.get("band") is not None:
        band = band_from_config(lat.dim, cfg["band"])
        options = options_from_catalog(lat, cfg.get("options"))
        model = ModelClass(lat, band, options=options)
    return measure, model


def _chain_inputs(args):
    sc = scenario_from_config(_require_config(args))
    joint = sc.joint
    if joint is None:
        if sc.model.options is not None:
            raise SchemaError(
                "chain report with quoted options needs a y_spec so the "
                "option values can be traded as lattice coordinates")
        joint = trivial_joint(sc.model.lattice)
    return sc, joint


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_price(args) -> RunReport:
    cfg = _require_config(args)
    sc = scenario_from_config(cfg)
    res = primal_enlarged(sc.model, sc.payoff, eps=args.eps)
    report = RunReport("price", config_hash(cfg), seed=sc.seed)
    report.values["value"] = res.value
    if args.eps is not None:
        report.values["eps"] = args.eps
    report.certificates["theta_dates"] = [int(u) for u in
                                          res.measure.index.theta_dates]
    report.certificates["exercise_weights"] = res.measure.weights.tolist()
    if sc.model.options is None:
        tol = args.tol if args.tol is not None else sc.chain_tol
        dpp = robust_dpp(sc.model, sc.payoff, build_witness=False)
        report.values["dpp_value"] = dpp.value
        report.values["primal_dpp_agree"] = bool(
            abs(dpp.value - res.value) <= tol)
        report.certificates["dpp_stop"] = dpp.stop.tolist()
    _write_outputs(args, report, {})
    return report


def cmd_hedge(args) -> RunReport:
    cfg = _require_config(args)
    sc = scenario_from_config(cfg)
    res = dual_superhedge_american(sc.model, sc.payoff)
    tol = args.tol if args.tol is not None else 1e-9
    shortfall = verify_superhedge(res.plan, sc.model, sc.payoff, res.support,
                                  tol=tol)
    report = RunReport("hedge", config_hash(cfg), seed=sc.seed)
    report.values["value"] = res.value
    report.values["initial_capital"] = res.plan.initial_capital
    report.values["worst_shortfall"] = shortfall
    report.values["superhedges"] = bool(shortfall <= tol)
    if res.plan.option_position is not None:
        report.certificates["option_position"] = \
            res.plan.option_position.tolist()
    _write_outputs(args, report,
                   {"hedge_plan.csv": _hedge_table(res.plan)})
    return report


def _hedge_table(plan):
    header = ["kind", "exercise_date", "step", "node", "component", "value"]
    rows = [("capital", "", "", "", "", plan.initial_capital)]
    if plan.option_position is not None:
        for i, v in enumerate(plan.option_position):
            rows.append(("option", "", "", "", i, float(v)))

    def spread(kind, mapping, with_date):
        for key in sorted(mapping):
            vec = np.atleast_1d(mapping[key])
            for k, v in enumerate(vec):
                if with_date:
                    u, t, node = key
                    rows.append((kind, u, t, node, k, float(v)))
                else:
                    t, node = key
                    rows.append((kind, "", t, node, k, float(v)))

    spread("trade", plan.trading, False)
    spread("restart_trade", plan.restart_trading, True)
    spread("variance_long", plan.variance_long, False)
    spread("variance_short", plan.variance_short, False)
    spread("restart_variance_long", plan.restart_variance_long, True)
    spread("restart_variance_short", plan.restart_variance_short, True)
    return header, rows


def cmd_chain(args) -> RunReport:
    sc, joint = _chain_inputs(args)
    rule_cap = args.rule_cap if args.rule_cap is not None else sc.rule_cap
    rep = inequality_chain(sc.model, sc.payoff, joint, rule_cap=rule_cap)
    if args.tol is not None:
        rep.tol = args.tol
    report = RunReport("chain", config_hash(sc.config), seed=sc.seed)
    report.value_report = rep.as_dict()
    report.values["lifted"] = rep.lifted
    report.values["static"] = rep.static_info
    report.values["chain_ok"] = rep.chain_ok
    _write_outputs(args, report, {})
    return report


def cmd_gap_demo(args) -> RunReport:
    cfg = _optional_config(args)
    constants = {
        "p": float(cfg.get("p", 0.05)),
        "up": float(cfg.get("up", 0.2)),
        "cap": float(cfg.get("cap", 100.0)),
        "include_options": bool(cfg.get("include_options", True)),
    }
    demo = build_gap_demo(p=constants["p"], up=constants["up"],
                          cap=constants["cap"])
    if constants["include_options"]:
        model, joint = demo.model, demo.joint
    else:
        model = ModelClass(demo.model.lattice, demo.model.band, options=None)
        joint = trivial_joint(model.lattice)
    rule_cap = args.rule_cap if args.rule_cap is not None else DEFAULT_RULE_CAP
    rep = inequality_chain(model, demo.payoff, joint, rule_cap=rule_cap)
    if args.tol is not None:
        rep.tol = args.tol
    report = RunReport("gap-demo", config_hash(constants))
    report.value_report = rep.as_dict()
    report.values["static"] = rep.static_info
    report.values["lifted"] = rep.lifted
    report.values["gap"] = rep.static_lifted_gap
    report.values.update(constants)
    if args.eps is not None:
        jm = lifted_model(joint, model.band)
        jp = lift_payoff(joint, demo.payoff)
        eps_res = primal_enlarged(jm, jp, eps=args.eps)
        marginal = eps_res.measure.path_marginal()
        terminal_leg = float(marginal.weights @ jp.table[-1])
        report.values["eps"] = args.eps
        report.values["eps_value"] = eps_res.value
        report.values["eps_terminal_leg"] = terminal_leg
        report.values["eps_linear_combination"] = \
            (1.0 - args.eps) * rep.enlarged + args.eps * terminal_leg
    _write_outputs(args, report, {})
    return report


def cmd_decompose(args) -> RunReport:
    cfg = _require_config(args)
    measure, model = _measure_from_config(cfg)
    eps = args.eps if args.eps is not None else cfg.get("eps")
    if eps is not None:
        measure = epsilon_modify(measure, float(eps))
    # no silent repair here: a degenerate exercise supply without a
    # requested mixture is an input problem and exits accordingly
    split = multiplicative_decompose(measure, strict_survival=True)
    preservation = verify_martingale_preservation(measure, split, model)

    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    n_tests = int(cfg.get("n_tests", 100))
    rng = np.random.default_rng(seed)
    lat = measure.lattice
    worst = 0.0
    for _ in range(n_tests):
        table = random_adapted_table(lat, rng)
        worst = max(worst,
                    verify_reconstruction(measure, split, table).error)
    extra_reports = []
    for item in cfg.get("test_tables", []):
        table = np.asarray(item["table"], dtype=float)
        adapted = is_adapted(lat, table)
        rep = verify_reconstruction(measure, split, table,
                                    allow_non_adapted=True)
        if adapted:
            worst = max(worst, rep.error)
        extra_reports.append({"name": item.get("name", "table"),
                              "adapted": adapted, "error": rep.error})

    tol = args.tol if args.tol is not None else 1e-10
    report = RunReport("decompose", config_hash(cfg), seed=seed)
    report.values.update({
        "eps_applied": float(eps) if eps is not None else 0.0,
        "n_tests": n_tests,
        "max_reconstruction_error": worst,
        "reconstruction_ok": bool(worst <= tol),
        "martingale_ok": preservation.martingale_ok,
        "max_martingale_violation": preservation.max_martingale_violation,
        "max_stopped_increment": preservation.max_stopped_increment,
        "band_ok": preservation.band_ok,
    })
    if extra_reports:
        report.values["test_tables"] = extra_reports
    if preservation.calibration_residuals is not None:
        report.values["calibration_residuals"] = \
            preservation.calibration_residuals.tolist()
    report.certificates.update({
        "clock": split.clock.tolist(),
        "density": split.density.tolist(),
        "martingale_part": split.martingale_part.tolist(),
        "pre_survival": split.pre_survival.tolist(),
        "post_survival": split.post_survival.tolist(),
        "marginal": split.marginal.weights.tolist(),
        "extracted": split.measure.weights.tolist(),
    })
    _write_outputs(args, report, {})
    return report


def _sigma_from_spec(spec):
    if isinstance(spec, (int, float)):
        return float(spec), f"constant {float(spec)}"
    if isinstance(spec, dict) and spec.get("kind") == "two_regime":
        first = float(spec["first"])
        second = float(spec["second"])
        change = float(spec.get("change", 0.5))
        return (lambda t, x: first if t < change else second,
                f"two_regime {first}/{second} at {change}")
    raise SchemaError(f"unknown sigma spec: {spec!r}")


def _integrate_one(seed, sigma, level, table_levels, beta_times, strict, x0):
    path = sample_diffusion(seed, sigma, level, x0=x0)
    conv = karandikar_integral(_CURRENT, path, strict=strict)
    one_rows, ito_rows = [], []
    for lv in table_levels:
        sub = path.at_level(lv)
        one = karandikar_integral(_ONE, path, lv, strict=strict)
        one_rows.append((seed, lv, float(np.max(np.abs(
            one.values - (sub.values - sub.values[0]))))))
        qv = quadratic_variation(path, lv, strict=strict)
        direct = np.concatenate(([0.0],
                                 np.cumsum(np.diff(sub.values) ** 2)))
        ito_rows.append((seed, lv, float(np.max(np.abs(qv.values - direct)))))
    beta_rows = [(seed, t, beta_limsup(path, t)) for t in beta_times]
    return {
        "seed": seed,
        "converged": conv.converged,
        "sup_distances": [(lv, d) for lv, d in conv.sup_distances],
        "one_rows": one_rows,
        "ito_rows": ito_rows,
        "beta_rows": beta_rows,
        "terminal_qv": quadratic_variation(path, level,
                                           strict=strict).terminal,
    }


def cmd_integrate(args) -> RunReport:
    cfg = _optional_config(args)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    seeds = [int(s) for s in cfg.get("seeds", [seed])]
    level = int(cfg.get("level", DEFAULT_LEVEL))
    table_levels = [int(v) for v in
                    cfg.get("table_levels", range(4, level + 1, 2))]
    beta_times = [float(t) for t in cfg.get("beta_times", (0.5, 1.0))]
    sigma, sigma_desc = _sigma_from_spec(cfg.get("sigma", 0.7))
    strict = bool(args.strict_integration)
    x0 = float(cfg.get("x0", 0.0))

    workers = worker_count()
    run_one = lambda s: _integrate_one(s, sigma, level, table_levels,
                                       beta_times, strict, x0)
    if workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, seeds))
    else:
        results = [run_one(s) for s in seeds]

    # the deterministic companion: a finite-variation path whose
    # variation table should sit at mesh size
    smooth_rows = []
    for lv in table_levels:
        n = 2 ** lv
        smooth = SampledPath(np.arange(n + 1) / n, lv)
        smooth_rows.append((lv, quadratic_variation(smooth).terminal))

    report = RunReport("integrate", config_hash({
        "seeds": seeds, "level": level, "table_levels": table_levels,
        "beta_times": beta_times, "sigma": sigma_desc, "strict": strict,
        "x0": x0}), seed=seed)
    report.values.update({
        "sigma": sigma_desc,
        "level": level,
        "strict": strict,
        "workers": workers,
        "max_one_residual": max((r for res in results
                                 for _, _, r in res["one_rows"]), default=0.0),
        "max_ito_residual": max((r for res in results
                                 for _, _, r in res["ito_rows"]), default=0.0),
        "all_converged": all(res["converged"] for res in results),
        "terminal_qv": {str(res["seed"]): res["terminal_qv"]
                        for res in results},
        "beta": [list(row) for res in results for row in res["beta_rows"]],
        "smooth_qv": [list(row) for row in smooth_rows],
    })
    tables = {
        "convergence.csv": (["seed", "level", "sup_distance"],
                            [(res["seed"], lv, d) for res in results
                             for lv, d in res["sup_distances"]]),
        "residuals.csv": (["seed", "experiment", "level", "residual"],
                          [(s, "one", lv, r) for res in results
                           for s, lv, r in res["one_rows"]]
                          + [(s, "ito", lv, r) for res in results
                             for s, lv, r in res["ito_rows"]]
                          + [("", "smooth_qv", lv, v)
                             for lv, v in smooth_rows]),
        "beta.csv": (["seed", "t", "beta"],
                     [list(row) for res in results
                      for row in res["beta_rows"]]),
    }
    _write_outputs(args, report, tables)
    return report


# ---------------------------------------------------------------------------
# argument parsing and entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "price": cmd_price,
    "hedge": cmd_hedge,
    "gap-demo": cmd_gap_demo,
    "decompose": cmd_decompose,
    "integrate": cmd_integrate,
    "chain": cmd_chain,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a JSON scenario or "
                                         "measure file")
    common.add_argument("--out", help="directory for report.json and CSVs")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--eps", type=float, default=None,
                        help="hold-to-expiry mixing fraction")
    common.add_argument("--strict-integration", action="store_true",
                        help="zero out non-convergent integrals instead of "
                             "reporting the last approximation")
    common.add_argument("--rule-cap", type=int, default=None,
                        help="cap on enumerated exercise rules")
    common.add_argument("--tol", type=float, default=None)

    parser = argparse.ArgumentParser(
        prog="amrobust",
        description="Robust pricing, hedging, and decomposition on "
                    "scenario lattices")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "price": "solve the exercise-randomizing primal",
        "hedge": "solve the superhedging dual and emit the plan",
        "gap-demo": "run the built-in information-gap market",
        "decompose": "split a supplied measure into scenario law and clock",
        "integrate": "run the dyadic integration battery",
        "chain": "compute the six-value ordering report",
    }
    for name, fn in _COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=helps[name])
        sp.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        report = args.func(args)
    except AmrobustError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    report.timing["seconds"] = round(time.perf_counter() - started, 6)
    if args.out:
        # rewrite with timing included so the file matches stdout
        (Path(args.out) / "report.json").write_text(report.to_json() + "\n")
    print(report.to_json())
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
