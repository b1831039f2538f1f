"""Command line entry points: report contents, artifacts, exit codes.

Every test drives ``main(argv)`` in process and reads the JSON report off
captured stdout, the way a shell pipeline would.
"""

import csv
import json

import numpy as np
import pytest

from amrobust.cli import (WORKERS_ENV, enlarged_measure_config, main,
                          worker_count)
from amrobust.errors import SchemaError
from amrobust.lattice import enlarge
from amrobust.measures import EnlargedMeasure
from amrobust.pathwise import quadratic_variation, sample_diffusion
from amrobust.scenarios import build_gap_demo, gap_demo_config
from amrobust.stopping import StoppingRule, rule_to_enlarged

# two-step binomial, no quoted options: the martingale weights are forced
# to one half at every node, so the price is exactly 0.1 by hand
FREE_CONFIG = {
    "lattice": {"dates": [0.0, 0.5, 1.0], "x0": [1.0],
                "increments": [[[-0.2], [0.2]], [[-0.1], [0.1]]]},
    "band": {"by_date": {"0": [0.0, 0.04], "1": [0.0, 0.01]}},
    "payoff": {"kind": "call", "strike": 1.0},
    "seed": 5,
}


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def report(capsys, *argv):
    code, out, err = run(capsys, *argv)
    assert code == 0, err
    return json.loads(out)


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def anticipating_measure_config(extra=None):
    """Stop exactly the path that stays flat, before the tree reveals it.

    Not realizable by any exercise rule, so reconstruction should fail on
    tables that peek at the terminal value. Its conditional exercise
    supply also dies on the surviving paths, so the strict decomposition
    refuses it without a hold-to-expiry mixture.
    """
    demo = build_gap_demo()
    idx = enlarge(demo.model.lattice)
    w = np.zeros((5, 5))
    w[1, 2] = 0.5
    for p in (0, 1, 3, 4):
        w[4, p] = 0.125
    return enlarged_measure_config(EnlargedMeasure(idx, w), extra=extra)


# ---------------------------------------------------------------------------
# gap-demo
# ---------------------------------------------------------------------------

def test_gap_demo_report_values(capsys):
    rep = report(capsys, "gap-demo")
    assert rep["command"] == "gap-demo"
    assert rep["values"]["static"] == pytest.approx(0.075, abs=1e-12)
    assert rep["values"]["lifted"] == pytest.approx(0.0875, abs=1e-12)
    assert rep["values"]["gap"] == pytest.approx(0.0125, abs=1e-12)
    assert rep["values"]["p"] == 0.05
    vr = rep["value_report"]
    assert vr["chain_ok"] and vr["ends_coincide"]
    assert vr["american_base"] == pytest.approx(vr["lifted"], abs=1e-9)


def test_gap_demo_without_options_collapses(tmp_path, capsys):
    cfg = write_json(tmp_path / "noopt.json", {"include_options": False})
    rep = report(capsys, "gap-demo", "--config", cfg)
    # drop the quoted call and nothing anticipating pays: every value in
    # the chain is the plain stopped expectation 0.1
    assert rep["values"]["gap"] == pytest.approx(0.0, abs=1e-9)
    vr = rep["value_report"]
    for key in ("american_base", "calibrated_randomized", "american_joint",
                "enlarged", "lifted", "static_info"):
        assert vr[key] == pytest.approx(0.1, abs=1e-9), key
    assert vr["ends_coincide"]


def test_gap_demo_eps_mixture_is_linear(capsys):
    rep = report(capsys, "gap-demo", "--eps", "0.1")
    v = rep["values"]
    assert v["eps_terminal_leg"] == pytest.approx(0.05, abs=1e-12)
    assert v["eps_value"] == pytest.approx(0.08375, abs=1e-12)
    assert v["eps_value"] == pytest.approx(v["eps_linear_combination"],
                                           abs=1e-12)


# ---------------------------------------------------------------------------
# price / hedge / chain
# ---------------------------------------------------------------------------

def test_price_reports_dpp_agreement(tmp_path, capsys):
    cfg = write_json(tmp_path / "free.json", FREE_CONFIG)
    rep = report(capsys, "price", "--config", cfg)
    v = rep["values"]
    assert v["value"] == pytest.approx(0.1, abs=1e-8)
    assert v["dpp_value"] == pytest.approx(v["value"], abs=1e-8)
    assert v["primal_dpp_agree"] is True
    assert "dpp_stop" in rep["certificates"]
    weights = np.asarray(rep["certificates"]["exercise_weights"])
    assert weights.sum() == pytest.approx(1.0, abs=1e-9)


def test_hedge_superhedges_and_writes_plan(tmp_path, capsys):
    cfg = write_json(tmp_path / "free.json", FREE_CONFIG)
    out = tmp_path / "out"
    rep = report(capsys, "hedge", "--config", cfg, "--out", str(out))
    v = rep["values"]
    assert v["value"] == pytest.approx(0.1, abs=1e-8)
    assert v["worst_shortfall"] <= 1e-9
    assert v["superhedges"] is True
    assert rep["artifacts"] == ["hedge_plan.csv", "report.json"]
    header, rows = read_csv(out / "hedge_plan.csv")
    assert header == ["kind", "exercise_date", "step", "node", "component",
                      "value"]
    assert rows[0][0] == "capital"
    assert float(rows[0][-1]) == pytest.approx(v["initial_capital"], abs=1e-12)
    assert {r[0] for r in rows} >= {"capital", "trade"}


def test_chain_matches_the_demo(tmp_path, capsys):
    cfg = write_json(tmp_path / "gap.json", gap_demo_config())
    rep = report(capsys, "chain", "--config", cfg)
    assert rep["values"]["static"] == pytest.approx(0.075, abs=1e-9)
    assert rep["values"]["lifted"] == pytest.approx(0.0875, abs=1e-9)
    assert rep["values"]["chain_ok"] is True
    assert rep["value_report"]["lift_residual"] == pytest.approx(0.0,
                                                                 abs=1e-9)


def test_chain_needs_a_y_grid_for_quoted_options(tmp_path, capsys):
    cfg = gap_demo_config()
    cfg.pop("y_spec")
    path = write_json(tmp_path / "noy.json", cfg)
    code, _, err = run(capsys, "chain", "--config", path)
    assert code == 4
    assert "y_spec" in err


# ---------------------------------------------------------------------------
# decompose
# ---------------------------------------------------------------------------

def test_decompose_round_trips_a_rule_measure(tmp_path, capsys):
    demo = build_gap_demo()
    rule = StoppingRule(demo.model.lattice, (1, 1, 1, 1, 1))
    em = rule_to_enlarged(rule, demo.reference)
    gcfg = gap_demo_config()
    cfg = write_json(tmp_path / "rule.json",
                     enlarged_measure_config(em, band=gcfg["band"],
                                             options=gcfg["options"]))
    rep = report(capsys, "decompose", "--config", cfg, "--seed", "7")
    v = rep["values"]
    assert v["eps_applied"] == 0.0
    assert v["n_tests"] == 100
    assert v["max_reconstruction_error"] <= 1e-12
    assert v["reconstruction_ok"] is True
    assert v["martingale_ok"] is True and v["band_ok"] is True
    assert max(abs(r) for r in v["calibration_residuals"]) <= 1e-9
    clock = np.asarray(rep["certificates"]["clock"])
    # the rule stops everything at the second date
    assert clock[1] == pytest.approx(np.ones(5), abs=1e-12)


def test_decompose_strict_exit_and_eps_repair(tmp_path, capsys):
    cfg = write_json(tmp_path / "anticipating.json",
                     anticipating_measure_config())
    code, _, err = run(capsys, "decompose", "--config", cfg)
    assert code == 2
    assert "error:" in err
    rep = report(capsys, "decompose", "--config", cfg, "--eps", "0.01")
    assert rep["values"]["eps_applied"] == 0.01
    assert rep["values"]["reconstruction_ok"] is True


def test_decompose_flags_a_future_peeking_table(tmp_path, capsys):
    demo = build_gap_demo()
    bad = np.zeros((5, 5))
    bad[1] = np.maximum(demo.model.lattice.path_values[:, -1, 0] - 1.0, 0.0)
    cfg = write_json(
        tmp_path / "peek.json",
        anticipating_measure_config(
            extra={"test_tables": [{"name": "future_peeking",
                                    "table": bad.tolist()}]}))
    rep = report(capsys, "decompose", "--config", cfg, "--eps", "0.01")
    v = rep["values"]
    # random adapted probes reconstruct fine; the anticipating one cannot
    assert v["max_reconstruction_error"] <= 1e-10
    (entry,) = v["test_tables"]
    assert entry["name"] == "future_peeking"
    assert entry["adapted"] is False
    assert entry["error"] > 1e-3


# ---------------------------------------------------------------------------
# integrate
# ---------------------------------------------------------------------------

INTEGRATE_CONFIG = {"seeds": [0, 1], "level": 10, "sigma": 0.5,
                    "beta_times": [1.0], "table_levels": [4, 6, 8, 10]}


def test_integrate_report_and_tables(tmp_path, capsys):
    cfg = write_json(tmp_path / "int.json", INTEGRATE_CONFIG)
    out = tmp_path / "out"
    rep = report(capsys, "integrate", "--config", cfg, "--out", str(out))
    v = rep["values"]
    assert v["all_converged"] is True
    assert v["max_one_residual"] <= 1e-13
    assert v["max_ito_residual"] <= 1e-12
    for lv, qv in v["smooth_qv"]:
        assert qv == 2.0 ** -lv
    # report rows agree with a direct library run on the same walks
    for seed_key, qv in v["terminal_qv"].items():
        path = sample_diffusion(int(seed_key), 0.5, level=10)
        assert qv == quadratic_variation(path).terminal
    for seed, t, beta in v["beta"]:
        path = sample_diffusion(int(seed), 0.5, level=10)
        assert beta == quadratic_variation(path, beta_times=(t,)).beta[t]
    header, rows = read_csv(out / "residuals.csv")
    assert header == ["seed", "experiment", "level", "residual"]
    assert {r[1] for r in rows} == {"one", "ito", "smooth_qv"}
    _, conv = read_csv(out / "convergence.csv")
    assert len(conv) > 0 and all(float(r[2]) >= 0.0 for r in conv)
    _, brows = read_csv(out / "beta.csv")
    assert len(brows) == 2


def test_strict_integration_zeroes_unconverged_values(tmp_path, capsys):
    # seed 4 at this level is one of the walks the window test rejects
    cfg = write_json(tmp_path / "int4.json",
                     {"seeds": [4], "sigma": 0.3, "level": 12,
                      "table_levels": [8, 10, 12]})
    lax = report(capsys, "integrate", "--config", cfg)
    assert lax["values"]["all_converged"] is False
    assert lax["values"]["max_ito_residual"] <= 1e-12
    assert lax["values"]["terminal_qv"]["4"] == pytest.approx(0.09, rel=0.05)
    strict = report(capsys, "integrate", "--config", cfg,
                    "--strict-integration")
    assert strict["values"]["terminal_qv"]["4"] == 0.0
    # zeroed values no longer match the squared increment sums
    assert strict["values"]["max_ito_residual"] > 0.01


def test_worker_env_controls_parallelism(tmp_path, capsys, monkeypatch):
    cfg = write_json(tmp_path / "int.json",
                     {"seeds": [0, 1, 2], "level": 8, "sigma": 0.5})
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    serial = report(capsys, "integrate", "--config", cfg)
    monkeypatch.setenv(WORKERS_ENV, "3")
    parallel = report(capsys, "integrate", "--config", cfg)
    assert serial["values"].pop("workers") == 1
    assert parallel["values"].pop("workers") == 3
    assert serial["values"] == parallel["values"]


def test_worker_env_parsing(monkeypatch):
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    assert worker_count() == 1
    monkeypatch.setenv(WORKERS_ENV, "5")
    assert worker_count() == 5
    monkeypatch.setenv(WORKERS_ENV, "")
    assert worker_count() == 1
    monkeypatch.setenv(WORKERS_ENV, "many")
    with pytest.raises(SchemaError):
        worker_count()


def test_bad_worker_env_exits_schema(tmp_path, capsys, monkeypatch):
    cfg = write_json(tmp_path / "int.json", {"seeds": [0], "level": 8})
    monkeypatch.setenv(WORKERS_ENV, "many")
    code, _, err = run(capsys, "integrate", "--config", cfg)
    assert code == 4
    assert "AMROBUST_WORKERS" in err


# ---------------------------------------------------------------------------
# report plumbing
# ---------------------------------------------------------------------------

def test_reports_reproducible_modulo_timing(capsys):
    first = report(capsys, "gap-demo")
    second = report(capsys, "gap-demo")
    first.pop("timing")
    second.pop("timing")
    assert first == second


def test_out_report_file_matches_stdout(tmp_path, capsys):
    out = tmp_path / "out"
    code, stdout, _ = run(capsys, "gap-demo", "--out", str(out))
    assert code == 0
    assert (out / "report.json").read_text() == stdout
    assert json.loads(stdout)["artifacts"] == ["report.json"]


def test_missing_config_is_a_schema_error(capsys):
    code, _, err = run(capsys, "price")
    assert code == 4
    assert "--config" in err


def test_malformed_config_is_a_schema_error(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    code, _, err = run(capsys, "price", "--config", str(path))
    assert code == 4
    assert "broken.json" in err


def test_unknown_subcommand_uses_argparse_exit(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    capsys.readouterr()
    assert exc.value.code == 2
