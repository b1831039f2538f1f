import json

import numpy as np
import pytest

from amrobust.errors import CapExceededError, InfeasibleError, SchemaError
from amrobust.lattice import (EnlargedIndex, Lattice, TimeGrid, YComponentSpec,
                              YProductSpec, atoms, build_joint_lattice,
                              build_lattice, count_stopping_rules, enlarge,
                              enumerate_paths)

from conftest import GAP_PATHS


# ---------------------------------------------------------------------------
# TimeGrid
# ---------------------------------------------------------------------------

def test_grid_requires_increasing_dates():
    with pytest.raises(ValueError):
        TimeGrid((0.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        TimeGrid((1.0, 0.5))
    with pytest.raises(ValueError):
        TimeGrid((0.0,))


def test_grid_pre_date_must_precede_first_date():
    with pytest.raises(ValueError):
        TimeGrid((0.0, 1.0), pre_date=0.0)
    g = TimeGrid((0.0, 1.0), pre_date=-0.5)
    assert g.terminal_index == 1


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def test_one_step_binomial():
    lat = build_lattice(TimeGrid((0.0, 1.0)), 1.0, [[(-0.2,), (0.2,)]])
    assert lat.n_paths == 2
    assert lat.dim == 1
    np.testing.assert_allclose(sorted(lat.path_values[:, 1, 0]), [0.8, 1.2])


def test_single_child_must_be_self_child():
    with pytest.raises(ValueError):
        build_lattice(TimeGrid((0.0, 1.0)), 1.0, [[(0.1,)]])
    lat = build_lattice(TimeGrid((0.0, 1.0, 2.0)), 1.0,
                        [[(0.0,)], [(-0.1,), (0.1,)]])
    assert lat.n_paths == 2


def test_empty_branching_rejected():
    with pytest.raises(ValueError):
        build_lattice(TimeGrid((0.0, 1.0)), 1.0, [[]])


def test_duplicate_increments_rejected():
    with pytest.raises(ValueError):
        build_lattice(TimeGrid((0.0, 1.0)), 1.0, [[(0.1,), (0.1,)]])


def test_path_cap_enforced():
    with pytest.raises(CapExceededError):
        build_lattice(TimeGrid(tuple(range(12))), 0.0,
                      [[(-1.0,), (1.0,)]] * 11, path_cap=1000)


def test_gap_lattice_has_five_paths(gap_lattice):
    # frozen: 1 constant path + 4 binomial-tail paths
    assert gap_lattice.n_paths == 5
    assert gap_lattice.n_dates == 5


def test_gap_lattice_single_atom_at_mid_date(gap_lattice):
    # frozen: all paths share the value prefix (1,1,1)
    assert len(gap_lattice.atoms(2)) == 1
    assert len(gap_lattice.atoms(3)) == 3
    assert len(gap_lattice.atoms(4)) == 5


def test_atoms_partition_paths(gap_lattice):
    for t in range(gap_lattice.n_dates):
        seen = sorted(p for a in gap_lattice.atoms(t) for p in a.path_ids)
        assert seen == list(range(gap_lattice.n_paths))


def test_recombining_float_arithmetic_shares_atoms():
    # 1 + 0.2 - 0.2 must land in the same atom as the constant path
    vals = np.array([
        [1.0, 1.2, 1.2 - 0.2],
        [1.0, 1.2, 1.4],
        [1.0, 0.8, 1.0],
        [1.0, 0.8, 0.6],
    ])
    lat = Lattice.from_paths(TimeGrid((0.0, 0.5, 1.0)), vals)
    terminal_values = sorted(v[0] for v in lat.node_value[lat.node_date == 2])
    assert terminal_values == [0.6, 1.0, 1.0, 1.4]


def test_canonical_order_is_input_order_independent():
    grid = TimeGrid((0.0, 0.25, 0.5, 0.75, 1.0))
    a = Lattice.from_paths(grid, GAP_PATHS)
    b = Lattice.from_paths(grid, GAP_PATHS[::-1])
    assert a.dumps() == b.dumps()


def test_increments_array(gap_lattice):
    inc = gap_lattice.increments
    assert inc.shape == (5, 4, 1)
    np.testing.assert_allclose(inc[:, :2], 0.0)


# ---------------------------------------------------------------------------
# paths and serialization
# ---------------------------------------------------------------------------

def test_enumerate_paths_round_trip(gap_lattice):
    paths = enumerate_paths(gap_lattice)
    assert [p.path_id for p in paths] == list(range(5))
    for p in paths:
        np.testing.assert_array_equal(p.values, gap_lattice.path_values[p.path_id])


def test_stopped_path_freezes_values(gap_lattice):
    from amrobust.lattice import StoppedPath
    path = enumerate_paths(gap_lattice)[4]
    sp = StoppedPath(path, 3)
    frozen = sp.stopped_values()
    np.testing.assert_allclose(frozen[3:], np.broadcast_to(path.values[3], (2, 1)))
    np.testing.assert_allclose(frozen[:3], path.values[:3])


def test_serialization_round_trip(gap_lattice):
    text = gap_lattice.dumps()
    again = Lattice.loads(text)
    assert again.dumps() == text
    np.testing.assert_array_equal(again.path_nodes, gap_lattice.path_nodes)
    np.testing.assert_array_equal(again.node_value, gap_lattice.node_value)


def test_loads_rejects_malformed_documents():
    with pytest.raises(SchemaError):
        Lattice.loads("not json at all {")
    with pytest.raises(SchemaError):
        Lattice.loads(json.dumps({"schema_version": 99}))


# ---------------------------------------------------------------------------
# enlargement
# ---------------------------------------------------------------------------

def test_enlarged_element_counts(gap_lattice):
    full = enlarge(gap_lattice)
    assert full.n_elements == 5 * 5
    two = EnlargedIndex(gap_lattice, [0, 4])
    assert two.n_elements == 10
    with pytest.raises(ValueError):
        EnlargedIndex(gap_lattice, [0, 1])  # terminal date missing


def test_enlarged_atoms_refine_base_atoms(gap_lattice):
    enl = enlarge(gap_lattice)
    for t in range(gap_lattice.n_dates):
        groups = enl.enlarged_atoms(t)
        # members partition the full index set
        seen = sorted(m for g in groups for m in g.members)
        assert seen == sorted(enl.pairs())
        for g in groups:
            if g.status is not None:
                assert g.status <= t
            # all members share the base atom
            for kt, p in g.members:
                assert gap_lattice.node_of(p, t) == g.node_id


def test_stop_status_monotone_along_tree(gap_lattice):
    enl = enlarge(gap_lattice)
    # a member in a status-u group at t stays in a status-u group at t+1
    for t in range(gap_lattice.n_dates - 1):
        nxt = {}
        for g in enl.enlarged_atoms(t + 1):
            for mem in g.members:
                nxt[mem] = g.status
        for g in enl.enlarged_atoms(t):
            if g.status is None:
                continue
            for mem in g.members:
                assert nxt[mem] == g.status


def test_flat_unflat(gap_lattice):
    enl = enlarge(gap_lattice)
    for kt, p in enl.pairs():
        assert enl.unflat(enl.flat(kt, p)) == (kt, p)


# ---------------------------------------------------------------------------
# joint lattice
# ---------------------------------------------------------------------------

def one_step_lattice(u=0.2, pre=-0.5):
    grid = TimeGrid((0.0, 1.0), pre_date=pre)
    return build_lattice(grid, 1.0, [[(-u,), (u,)]])


def test_joint_one_step_option_pin():
    lat = one_step_lattice()
    # call struck at 1 minus premium u/2: payoffs -0.1 / +0.1
    g = np.array([[-0.1], [0.1]])
    spec = YProductSpec.from_lists({0: [(0.0,)]})
    joint = build_joint_lattice(lat, g, spec)
    assert joint.lattice.n_paths == 2
    assert joint.lattice.n_dates == 3  # pre + 2 dates
    # pre-date node carries Y = 0
    np.testing.assert_allclose(joint.lattice.path_values[:, 0, 1], 0.0)
    # terminal Y pinned to g per path
    for p in range(2):
        x_term = joint.lattice.path_values[p, 2, 0]
        y_term = joint.lattice.path_values[p, 2, 1]
        expected = g[joint.base_path_id[p], 0]
        assert y_term == pytest.approx(expected)
        assert x_term in (0.8, 1.2)


def test_joint_single_path_nonzero_pin_is_infeasible():
    grid = TimeGrid((0.0, 1.0), pre_date=-0.5)
    lat = build_lattice(grid, 1.0, [[(0.0,)]] )
    g = np.array([[0.3]])  # no martingale runs from 0 to 0.3 on one path
    with pytest.raises(InfeasibleError):
        build_joint_lattice(lat, g, YProductSpec.from_lists({0: [(0.0,)]}))


def test_joint_component_mode_gap_demo(gap_lattice):
    p = 0.05
    g = np.minimum(np.maximum(gap_lattice.path_values[:, -1, 0] - 1.0, 0.0), 100.0) - p
    const = np.array([0.0, 0.0, 1.0, 0.0, 0.0])
    binom = np.array([0.25, 0.25, 0.0, 0.25, 0.25])
    spec = YComponentSpec.from_measures([const, binom], [0.5, 0.5])
    joint = build_joint_lattice(gap_lattice, g, spec)
    assert joint.lattice.n_paths == 5
    assert joint.lattice.n_dates == 6
    y0 = sorted(set(np.round(joint.lattice.path_values[:, 1, 1], 12)))
    assert y0 == [pytest.approx(-p), pytest.approx(p)]
    # terminal pin
    for jp in range(joint.lattice.n_paths):
        bp = joint.base_path_id[jp]
        assert joint.lattice.path_values[jp, -1, 1] == pytest.approx(g[bp])
    # base atom lookup agrees with the X prefix
    for jp in range(joint.lattice.n_paths):
        for jt in range(1, 6):
            nid = joint.base_node_for(jt, jp)
            np.testing.assert_allclose(
                gap_lattice.node_value[nid],
                joint.lattice.path_values[jp, jt, :1])


def test_joint_product_mode_richer_levels_keep_paths(gap_lattice):
    p = 0.05
    g = np.minimum(np.maximum(gap_lattice.path_values[:, -1, 0] - 1.0, 0.0), 100.0) - p
    narrow = YProductSpec.from_lists({0: [(-p,), (p,)], 1: [(-p,), (p,)],
                                      2: [(-p,), (p,)], 3: [(-0.05,), (0.15,)]})
    jn = build_joint_lattice(gap_lattice, g, narrow)
    wide = YProductSpec.from_lists({0: [(-p,), (0.0,), (p,)], 1: [(-p,), (0.0,), (p,)],
                                    2: [(-p,), (0.0,), (p,)], 3: [(-0.05,), (0.0,), (0.15,)]})
    jw = build_joint_lattice(gap_lattice, g, wide)
    assert jw.lattice.n_paths >= jn.lattice.n_paths


# ---------------------------------------------------------------------------
# rule counting
# ---------------------------------------------------------------------------

def test_rule_count_small_cases():
    one = build_lattice(TimeGrid((0.0, 1.0)), 1.0, [[(-0.1,), (0.1,)]])
    assert count_stopping_rules(one) == 2
    two = build_lattice(TimeGrid((0.0, 0.5, 1.0)), 1.0,
                        [[(-0.1,), (0.1,)], [(-0.1,), (0.1,)]])
    assert count_stopping_rules(two) == 5


def test_rule_count_gap_demo(gap_lattice):
    # frozen: oracle recursion gives 11 for the gap-demo tree
    assert count_stopping_rules(gap_lattice) == 11
