import numpy as np
import pytest

from amrobust.errors import SchemaError
from amrobust.lattice import Lattice, TimeGrid, count_stopping_rules
from amrobust.measures import (ModelClass, PathMeasure, VolatilityBand,
                               check_constraints)
from amrobust.scenarios import (build_gap_demo, gap_demo_config,
                                options_from_catalog, payoff_from_catalog,
                                random_instance, scenario_from_config,
                                trivial_joint)
from amrobust.solvers import chargeable_support, inequality_chain, lifted_model
from amrobust.stopping import enumerate_rules


@pytest.fixture()
def binomial():
    grid = TimeGrid((0.0, 0.5, 1.0))
    return Lattice.from_increments(grid, 1.0, [[[-0.2], [0.2]],
                                               [[-0.1], [0.1]]])


# ---------------------------------------------------------------------------
# catalogs
# ---------------------------------------------------------------------------

def test_payoff_catalog_kinds(binomial):
    call = payoff_from_catalog(binomial, {"kind": "call", "strike": 1.0})
    assert call.table[0, 0] == 0.0
    assert call.table[-1].max() == pytest.approx(0.3)

    put = payoff_from_catalog(binomial, {"kind": "put", "strike": 1.0,
                                         "cap": 0.25})
    assert put.table[-1].max() == pytest.approx(0.25)

    flat = payoff_from_catalog(binomial, {"kind": "constant", "level": 2.0})
    assert np.all(flat.table == 2.0)

    rows = np.zeros((3, binomial.n_paths))
    rows[-1] = 1.0
    tab = payoff_from_catalog(binomial, {"kind": "table",
                                         "rows": rows.tolist(),
                                         "exercise_dates": [2]})
    assert tab.exercise_dates == (2,)

    by_atom = payoff_from_catalog(binomial, {
        "kind": "table", "fill": 0.5,
        "by_atom": {f"1:{binomial.path_nodes[0, 1]}": 3.0}})
    assert by_atom.table[1, 0] == 3.0
    assert by_atom.table[0, 0] == 0.5

    with pytest.raises(SchemaError):
        payoff_from_catalog(binomial, {"kind": "swaption"})
    with pytest.raises(SchemaError):
        payoff_from_catalog(binomial, {"kind": "call"})


def test_option_catalog(binomial):
    opts = options_from_catalog(binomial, [
        {"kind": "call", "strike": 1.0, "price": 0.05},
        {"kind": "forward", "strike": 1.0},
        {"kind": "terminal_table",
         "values": binomial.path_values[:, -1, 0].tolist(), "price": 1.0},
    ])
    assert opts.n_options == 3
    # net payoffs subtract the price
    assert opts.matrix[0].max() == pytest.approx(0.3 - 0.05)
    assert opts.matrix[2] == pytest.approx(opts.matrix[1])
    assert options_from_catalog(binomial, []) is None
    with pytest.raises(SchemaError):
        options_from_catalog(binomial, [{"kind": "terminal_table",
                                         "values": [1.0]}])


# ---------------------------------------------------------------------------
# the demonstration market
# ---------------------------------------------------------------------------

def test_gap_demo_structure():
    demo = build_gap_demo()
    lat = demo.model.lattice
    assert lat.n_paths == 5
    assert demo.joint.lattice.n_paths == 5
    assert demo.joint.m == 1
    # frozen branch sits in the middle of the canonical path order
    assert demo.calibrated_weights == pytest.approx(
        [0.125, 0.125, 0.5, 0.125, 0.125])
    report = check_constraints(demo.reference, demo.model)
    assert report.ok and report.calibration_ok
    # the quote splits into -p and up/2 - p at date 0
    y0 = sorted(set(np.round(demo.joint.lattice.path_values[:, 1, 1], 12)))
    assert y0 == pytest.approx([-0.05, 0.05])
    # exercise payoff on the frozen path: peak at the quarter date only
    frozen_path = 2
    assert demo.payoff.table[:, frozen_path] == pytest.approx(
        [0.0, 0.075, 0.0, 0.0, 0.0])
    assert demo.payoff.table[3, 4] == pytest.approx(0.2)
    assert demo.payoff.table[4, 4] == pytest.approx(0.4)
    with pytest.raises(ValueError):
        build_gap_demo(p=0.2)


def _best_rule_value(lattice, payoff, weights) -> float:
    best = -np.inf
    for rule in enumerate_rules(lattice):
        if any(u not in payoff.exercise_dates for u in rule.dates):
            continue
        best = max(best, float(weights @ rule.payoff_collected(payoff.table)))
    return best


def test_gap_demo_chain_values():
    demo = build_gap_demo()
    report = inequality_chain(demo.model, demo.payoff, demo.joint)

    # the calibrated class is a single measure here, so enumerating rules
    # against it is an exact oracle for both information levels
    oracle_static = _best_rule_value(demo.model.lattice, demo.payoff,
                                     demo.calibrated_weights)
    assert oracle_static == pytest.approx(0.075, abs=1e-12)
    from amrobust.solvers import lift_payoff
    oracle_joint = _best_rule_value(demo.joint.lattice,
                                    lift_payoff(demo.joint, demo.payoff),
                                    demo.joint_weights)
    assert oracle_joint == pytest.approx(0.0875, abs=1e-12)

    assert report.static_info == pytest.approx(0.075, abs=1e-9)
    # the only calibrated path measure is the reference mixture, yet the
    # randomized program beats every rule against it by stopping exactly
    # the mass that will stay flat: exercise reads the scenario's future,
    # which no adapted rule can, and the measure is still admissible
    assert report.calibrated_randomized == pytest.approx(0.0875, abs=1e-9)
    assert report.lifted == pytest.approx(0.0875, abs=1e-9)
    assert report.enlarged == pytest.approx(0.0875, abs=1e-9)
    assert report.american_joint == pytest.approx(0.0875, abs=1e-9)
    assert report.american_base == pytest.approx(0.0875, abs=1e-9)
    assert report.chain_ok
    # two option-value branches are enough to carry the optimizer here
    assert report.ends_coincide
    assert report.lift_residual == pytest.approx(0.0, abs=1e-9)
    assert report.static_lifted_gap == pytest.approx(0.0125, abs=1e-9)


def test_gap_demo_config_roundtrip():
    cfg = gap_demo_config()
    scen = scenario_from_config(cfg)
    demo = build_gap_demo()
    assert np.array_equal(scen.model.lattice.path_values,
                          demo.model.lattice.path_values)
    assert scen.payoff.table == pytest.approx(demo.payoff.table)
    assert scen.joint is not None
    assert scen.joint.lattice.n_paths == 5
    assert scen.model.options.matrix == pytest.approx(
        demo.model.options.matrix)


# ---------------------------------------------------------------------------
# config assembly
# ---------------------------------------------------------------------------

def test_scenario_from_increments_config():
    cfg = {
        "lattice": {"dates": [0.0, 1.0], "x0": 1.0,
                    "increments": [[-0.1, 0.1]]},
        "band": {"default": [0.0, None]},
        "payoff": {"kind": "call", "strike": 1.0},
    }
    scen = scenario_from_config(cfg)
    assert scen.model.lattice.n_paths == 2
    assert scen.joint is None
    assert scen.rule_cap > 0 and scen.chain_tol == 1e-7


def test_scenario_config_errors(binomial):
    with pytest.raises(SchemaError):
        scenario_from_config({"schema_version": 99, "lattice": {},
                              "payoff": {}})
    with pytest.raises(SchemaError):
        scenario_from_config({"lattice": {"dates": [0, 1], "x0": 1.0,
                                          "increments": [[-0.1, 0.1]]}})
    with pytest.raises(SchemaError):
        scenario_from_config({
            "lattice": {"dates": [0, 1], "x0": 1.0,
                        "increments": [[-0.1, 0.1]]},
            "payoff": {"kind": "call", "strike": 1.0},
            "y_spec": {"components": [[0.5, 0.5]], "mix": [1.0]},
        })


def test_trivial_joint(binomial):
    joint = trivial_joint(binomial)
    assert joint.lattice.grid.dates[0] < binomial.grid.dates[0]
    assert joint.lattice.n_paths == binomial.n_paths
    assert np.all(joint.lattice.path_values[:, :, 1] == 0.0)


# ---------------------------------------------------------------------------
# random instances
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(8))
def test_random_instance_feasible(seed):
    inst = random_instance(seed)
    assert count_stopping_rules(inst.model.lattice) <= 800
    report = check_constraints(inst.reference, inst.model)
    assert report.ok
    for w in inst.components:
        assert check_constraints(PathMeasure(inst.model.lattice, w),
                                 inst.model).ok
    support = chargeable_support(inst.model)
    assert support.chargeable.all()


@pytest.mark.parametrize("seed", range(4))
def test_random_instance_with_options(seed):
    inst = random_instance(seed, with_options=True)
    assert inst.joint is not None
    report = check_constraints(inst.reference, inst.model)
    assert report.ok and report.calibration_ok
    # the component mixture lifts to an admissible joint measure
    assert inst.joint_reference.mass == pytest.approx(1.0)
    jm = lifted_model(inst.joint, inst.model.band)
    assert check_constraints(inst.joint_reference, jm).ok
    # and restricts back to the plain mixture
    restricted = np.zeros(inst.model.lattice.n_paths)
    for jp, b in enumerate(inst.joint.base_path_id):
        restricted[b] += inst.joint_reference.weights[jp]
    assert restricted == pytest.approx(inst.reference.weights)


def test_random_instance_reproducible():
    a = random_instance(7)
    b = random_instance(7)
    c = random_instance(8)
    assert np.array_equal(a.model.lattice.path_values,
                          b.model.lattice.path_values)
    assert np.array_equal(a.payoff.table, b.payoff.table)
    assert a.band_spec == b.band_spec
    assert not np.array_equal(a.payoff.table, c.payoff.table) or \
        a.payoff.table.shape != c.payoff.table.shape
