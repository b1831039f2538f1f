"""Finite scenario lattices with explicit path storage.

A lattice is a prefix tree over d-dimensional state values on a fixed date
grid.  Nodes are value-prefix classes: two stored paths that agree on all
values up to date t pass through the same node at t, so nodes double as the
filtration atoms used everywhere else in the package.  Ordering is
deterministic (children sorted by value, paths in depth-first order) which
makes serialized lattices byte-stable.

Node coordinates are rounded to a fixed number of decimals at build time so
recombining float arithmetic cannot split an atom into spurious copies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import CapExceededError, InfeasibleError, SchemaError

DEFAULT_PATH_CAP = 100_000
VALUE_DECIMALS = 12

LATTICE_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# time grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing trading dates, with an optional pre-trading date.

    The pre date sits strictly before the first date and is used only when a
    lattice is extended with tradeable option coordinates; on the base
    lattice it carries no nodes.
    """

    dates: tuple[float, ...]
    pre_date: float | None = None

    def __post_init__(self):
        dates = tuple(float(t) for t in self.dates)
        object.__setattr__(self, "dates", dates)
        if len(dates) < 2:
            raise ValueError("a time grid needs at least two dates")
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise ValueError("dates must be strictly increasing")
        if self.pre_date is not None:
            object.__setattr__(self, "pre_date", float(self.pre_date))
            if self.pre_date >= dates[0]:
                raise ValueError("pre_date must lie strictly before the first date")

    @property
    def n_dates(self) -> int:
        return len(self.dates)

    @property
    def terminal_index(self) -> int:
        return len(self.dates) - 1


# ---------------------------------------------------------------------------
# core containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Path:
    """One stored scenario: a leaf-to-root chain of nodes."""

    path_id: int
    node_ids: tuple[int, ...]
    values: np.ndarray  # (n_dates, dim), read-only view


@dataclass(frozen=True)
class StoppedPath:
    """A path together with an exercise index; values freeze after the stop."""

    path: Path
    stop_index: int

    def stopped_values(self) -> np.ndarray:
        v = np.asarray(self.path.values)
        out = v.copy()
        out[self.stop_index:] = v[self.stop_index]
        return out


@dataclass(frozen=True)
class FiltrationAtom:
    """A value-prefix equivalence class of paths at a date.

    ``node_id`` identifies the atom inside its lattice; ``path_ids`` are the
    member paths in canonical order.
    """

    t: int
    node_id: int
    path_ids: tuple[int, ...]


def _canon(value, dim, decimals) -> tuple[float, ...]:
    v = np.round(np.asarray(value, dtype=float).reshape(dim), decimals)
    # normalise -0.0 so keys compare equal
    v = v + 0.0
    return tuple(v.tolist())


class Lattice:
    """Prefix tree over state values on a date grid.

    Use :func:`build_lattice` or the ``from_*`` constructors; the raw
    constructor expects already-validated canonical node tables.
    """

    def __init__(self, grid: TimeGrid, dim: int, node_date: np.ndarray,
                 node_value: np.ndarray, node_parent: np.ndarray,
                 node_children: list[tuple[int, ...]], path_nodes: np.ndarray):
        self.grid = grid
        self.dim = int(dim)
        self.node_date = node_date            # (n_nodes,) date index per node
        self.node_value = node_value          # (n_nodes, dim)
        self.node_parent = node_parent        # (n_nodes,), -1 at the root
        self.node_children = node_children    # tuple of child ids per node
        self.path_nodes = path_nodes          # (n_paths, n_dates) node ids
        self.n_nodes = len(node_date)
        self.n_paths = path_nodes.shape[0]
        self.path_values = node_value[path_nodes]      # (n_paths, n_dates, dim)
        self.increments = np.diff(self.path_values, axis=1)
        self._atoms: list[list[FiltrationAtom]] | None = None
        self._validate()

    # -- construction -------------------------------------------------------

    @classmethod
    def from_paths(cls, grid: TimeGrid, values, *, path_cap: int = DEFAULT_PATH_CAP,
                   decimals: int = VALUE_DECIMALS) -> "Lattice":
        """Build the prefix tree of an explicit (n_paths, n_dates, dim) table.

        Input paths that coincide after rounding are merged.  Path order in
        the result is canonical depth-first order, not the input order.
        """
        arr = np.asarray(values, dtype=float)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError("values must have shape (n_paths, n_dates) or (n_paths, n_dates, dim)")
        n_in, n_dates, dim = arr.shape
        if n_dates != grid.n_dates:
            raise ValueError("path length does not match the date grid")
        if n_in == 0:
            raise ValueError("at least one path is required")
        arr = np.round(arr, decimals) + 0.0

        # prefix tree keyed by canonical value tuples
        root_key = _canon(arr[0, 0], dim, decimals)
        for i in range(n_in):
            if _canon(arr[i, 0], dim, decimals) != root_key:
                raise ValueError("all paths must share the same initial value")

        children_map: dict[int, dict[tuple, int]] = {}
        node_date = [0]
        node_value = [np.asarray(root_key)]
        node_parent = [-1]
        for i in range(n_in):
            cur = 0
            for t in range(1, n_dates):
                key = _canon(arr[i, t], dim, decimals)
                slot = children_map.setdefault(cur, {})
                nxt = slot.get(key)
                if nxt is None:
                    nxt = len(node_date)
                    node_date.append(t)
                    node_value.append(np.asarray(key))
                    node_parent.append(cur)
                    slot[key] = nxt
                cur = nxt

        return cls._finalize(grid, dim, node_date, node_value, node_parent,
                             children_map, path_cap)

    @classmethod
    def from_increments(cls, grid: TimeGrid, x0, increments, *,
                        path_cap: int = DEFAULT_PATH_CAP,
                        decimals: int = VALUE_DECIMALS) -> "Lattice":
        """Grow a tree from per-date branching increments.

        ``increments`` is a sequence indexed by step t (0..T-1).  Each entry
        is either a list of increment vectors applied at every date-t node,
        or a callable ``f(t, value) -> list of increments`` for
        state-dependent branching.  A single-increment entry must be the zero
        increment (an explicit constant step); anything else would force a
        deterministic non-constant move, which no martingale supports.
        """
        dim = np.asarray(x0, dtype=float).reshape(-1).shape[0]
        steps = list(increments)
        if len(steps) != grid.n_dates - 1:
            raise ValueError("need one increment set per step")

        root_key = _canon(x0, dim, decimals)
        node_date = [0]
        node_value = [np.asarray(root_key)]
        node_parent = [-1]
        children_map: dict[int, dict[tuple, int]] = {}
        frontier = [0]
        count = 1
        for t, spec in enumerate(steps):
            nxt_frontier = []
            for nid in frontier:
                val = node_value[nid]
                incs = spec(t, val) if callable(spec) else spec
                incs = [np.asarray(iv, dtype=float).reshape(dim) for iv in incs]
                if len(incs) == 0:
                    raise ValueError(f"empty branching at step {t}")
                if len(incs) == 1 and np.any(np.round(incs[0], decimals) != 0.0):
                    raise ValueError(
                        f"single non-zero increment at step {t}: a lone child must be a self-child")
                keys = sorted({_canon(val + iv, dim, decimals) for iv in incs})
                if len(keys) < len(incs):
                    raise ValueError(f"duplicate increments at step {t}")
                slot = children_map.setdefault(nid, {})
                for key in keys:
                    cid = len(node_date)
                    node_date.append(t + 1)
                    node_value.append(np.asarray(key))
                    node_parent.append(nid)
                    slot[key] = cid
                    nxt_frontier.append(cid)
                    count += 1
                    if count > path_cap * grid.n_dates:
                        raise CapExceededError("node count exceeds the configured cap")
            frontier = nxt_frontier
            if len(frontier) > path_cap:
                raise CapExceededError(
                    f"path count {len(frontier)} exceeds cap {path_cap}")
        return cls._finalize(grid, dim, node_date, node_value, node_parent,
                             children_map, path_cap)

    @classmethod
    def _finalize(cls, grid, dim, node_date, node_value, node_parent,
                  children_map, path_cap) -> "Lattice":
        n_dates = grid.n_dates
        # canonical order: renumber nodes in DFS order with children sorted by value
        order: list[int] = []
        remap: dict[int, int] = {}

        def visit(nid):
            remap[nid] = len(order)
            order.append(nid)
            slot = children_map.get(nid, {})
            for key in sorted(slot):
                visit(slot[key])

        import sys
        old_limit = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old_limit, 10 * n_dates + 1000))
        try:
            visit(0)
        finally:
            sys.setrecursionlimit(old_limit)

        nd = np.array([node_date[i] for i in order], dtype=int)
        nv = np.array([node_value[i] for i in order], dtype=float).reshape(len(order), dim)
        npar = np.array([-1 if node_parent[i] < 0 else remap[node_parent[i]]
                         for i in order], dtype=int)
        nch: list[tuple[int, ...]] = []
        for i in order:
            slot = children_map.get(i, {})
            nch.append(tuple(remap[slot[key]] for key in sorted(slot)))

        # paths = chains ending at terminal-date leaves, in node order
        leaves = [i for i in range(len(order)) if nd[i] == n_dates - 1]
        if len(leaves) > path_cap:
            raise CapExceededError(f"path count {len(leaves)} exceeds cap {path_cap}")
        path_nodes = np.empty((len(leaves), n_dates), dtype=int)
        for p, leaf in enumerate(leaves):
            cur = leaf
            for t in range(n_dates - 1, -1, -1):
                path_nodes[p, t] = cur
                cur = npar[cur]
        return cls(grid, dim, nd, nv, npar, nch, path_nodes)

    def _validate(self):
        if self.n_paths == 0:
            raise ValueError("lattice has no complete paths")
        T = self.grid.terminal_index
        for nid in range(self.n_nodes):
            t = self.node_date[nid]
            ch = self.node_children[nid]
            if t < T:
                if len(ch) == 0:
                    raise InfeasibleError(
                        f"node {nid} at date index {t} has no children; "
                        "every path must reach the terminal date")
                if len(ch) == 1:
                    only = ch[0]
                    if not np.array_equal(self.node_value[only], self.node_value[nid]):
                        raise ValueError(
                            f"node {nid} has a single non-self child; a forced move "
                            "is incompatible with the martingale property")
            else:
                if len(ch) != 0:
                    raise ValueError("terminal nodes cannot have children")

    # -- queries ------------------------------------------------------------

    @property
    def n_dates(self) -> int:
        return self.grid.n_dates

    @property
    def terminal_index(self) -> int:
        return self.grid.terminal_index

    @property
    def x0(self) -> np.ndarray:
        return self.node_value[0]

    def node_of(self, path_id: int, t: int) -> int:
        return int(self.path_nodes[path_id, t])

    def value_of(self, node_id: int) -> np.ndarray:
        return self.node_value[node_id]

    def atoms(self, t: int) -> list[FiltrationAtom]:
        if t < 0 or t >= self.n_dates:
            raise ValueError(f"date index {t} out of range")
        if self._atoms is None:
            per_date: list[dict[int, list[int]]] = [dict() for _ in range(self.n_dates)]
            for p in range(self.n_paths):
                for tt in range(self.n_dates):
                    per_date[tt].setdefault(int(self.path_nodes[p, tt]), []).append(p)
            self._atoms = [
                [FiltrationAtom(tt, nid, tuple(ps)) for nid, ps in sorted(d.items())]
                for tt, d in enumerate(per_date)
            ]
        return self._atoms[t]

    def atom_of(self, t: int, path_id: int) -> FiltrationAtom:
        nid = self.node_of(path_id, t)
        for atom in self.atoms(t):
            if atom.node_id == nid:
                return atom
        raise KeyError((t, path_id))

    def paths(self) -> list[Path]:
        out = []
        for p in range(self.n_paths):
            out.append(Path(p, tuple(int(n) for n in self.path_nodes[p]),
                            self.path_values[p]))
        return out

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": LATTICE_SCHEMA_VERSION,
            "kind": "lattice",
            "dates": list(self.grid.dates),
            "pre_date": self.grid.pre_date,
            "dim": self.dim,
            "nodes": [
                {"id": i, "t": int(self.node_date[i]),
                 "value": self.node_value[i].tolist(),
                 "parent": (None if self.node_parent[i] < 0 else int(self.node_parent[i]))}
                for i in range(self.n_nodes)
            ],
            "paths": [[int(n) for n in row] for row in self.path_nodes],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Lattice":
        try:
            if data.get("schema_version") != LATTICE_SCHEMA_VERSION or data.get("kind") != "lattice":
                raise SchemaError("not a supported lattice document")
            grid = TimeGrid(tuple(data["dates"]), data.get("pre_date"))
            dim = int(data["dim"])
            nodes = data["nodes"]
            nd = np.array([n["t"] for n in nodes], dtype=int)
            nv = np.array([n["value"] for n in nodes], dtype=float).reshape(len(nodes), dim)
            npar = np.array([-1 if n["parent"] is None else n["parent"] for n in nodes], dtype=int)
            nch: list[list[int]] = [[] for _ in nodes]
            for n in nodes:
                if n["parent"] is not None:
                    nch[n["parent"]].append(n["id"])
            path_nodes = np.array(data["paths"], dtype=int)
            return cls(grid, dim, nd, nv, npar, [tuple(c) for c in nch], path_nodes)
        except (KeyError, TypeError, IndexError) as exc:
            raise SchemaError(f"malformed lattice document: {exc}") from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def loads(cls, text: str) -> "Lattice":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(data)


def build_lattice(grid: TimeGrid, x0, increments, *, path_cap: int = DEFAULT_PATH_CAP,
                  decimals: int = VALUE_DECIMALS) -> Lattice:
    """Public alias for :meth:`Lattice.from_increments`."""
    return Lattice.from_increments(grid, x0, increments, path_cap=path_cap,
                                   decimals=decimals)


def enumerate_paths(lattice: Lattice) -> list[Path]:
    """All stored scenarios in canonical order."""
    return lattice.paths()


def atoms(lattice: Lattice, t: int) -> list[FiltrationAtom]:
    """Filtration atoms (value-prefix classes) at date index t."""
    return lattice.atoms(t)


# ---------------------------------------------------------------------------
# enlargement with an exercise coordinate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnlargedAtom:
    """An atom of the enlarged filtration at date t.

    ``status`` is the exercise date u if the members exercised at u <= t,
    or None for the not-yet-exercised group.  Members are (theta_position,
    path_id) pairs; theta_position indexes into the enlargement's
    ``theta_dates``.
    """

    t: int
    node_id: int
    status: int | None
    members: tuple[tuple[int, int], ...]


class EnlargedIndex:
    """Index set {exercise date} x {paths} with its filtration structure.

    Elements are (theta_position, path_id) pairs, flattened row-major with
    theta varying slowest.  theta_dates must contain the terminal date:
    exercise at expiry is always possible.
    """

    def __init__(self, lattice: Lattice, theta_dates: Sequence[int] | None = None):
        T = lattice.terminal_index
        if theta_dates is None:
            theta_dates = range(lattice.n_dates)
        td = tuple(sorted(set(int(u) for u in theta_dates)))
        if any(u < 0 or u > T for u in td):
            raise ValueError("theta dates out of range")
        if T not in td:
            raise ValueError("theta dates must include the terminal date")
        self.lattice = lattice
        self.theta_dates = td
        self.n_theta = len(td)
        self.n_elements = self.n_theta * lattice.n_paths
        self._atom_cache: dict[int, list[EnlargedAtom]] = {}

    def flat(self, theta_pos: int, path_id: int) -> int:
        return theta_pos * self.lattice.n_paths + path_id

    def unflat(self, k: int) -> tuple[int, int]:
        return divmod(k, self.lattice.n_paths)

    def pairs(self) -> Iterable[tuple[int, int]]:
        for kt in range(self.n_theta):
            for p in range(self.lattice.n_paths):
                yield kt, p

    def enlarged_atoms(self, t: int) -> list[EnlargedAtom]:
        """Atoms of the enlarged filtration at date t, in canonical order.

        For each base atom: one group per exercise date u <= t in
        theta_dates (members follow a frozen path), plus one group of
        members that have not exercised yet.  Stop statuses are monotone
        along the tree by construction: a member that appears in a
        status-u group at t stays in it at every later date.
        """
        if t in self._atom_cache:
            return self._atom_cache[t]
        out: list[EnlargedAtom] = []
        for atom in self.lattice.atoms(t):
            for kt, u in enumerate(self.theta_dates):
                if u <= t:
                    out.append(EnlargedAtom(
                        t, atom.node_id, u,
                        tuple((kt, p) for p in atom.path_ids)))
            cont = tuple((kt, p)
                         for kt, u in enumerate(self.theta_dates) if u > t
                         for p in atom.path_ids)
            if cont:
                out.append(EnlargedAtom(t, atom.node_id, None, cont))
        self._atom_cache[t] = out
        return out


def enlarge(lattice: Lattice, theta_dates: Sequence[int] | None = None) -> EnlargedIndex:
    """Enlarge a lattice with an exercise-date coordinate."""
    return EnlargedIndex(lattice, theta_dates)


# ---------------------------------------------------------------------------
# joint lattice: state plus tradeable option values
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class YProductSpec:
    """Explicit per-date level grids for the option-value coordinates.

    ``levels[t]`` lists the m-vectors the Y coordinates may take at base
    date t, for t = 0..T-1.  The terminal levels are always the achieved
    payoff values and the pre-date level is always zero, so neither is
    given here.
    """

    levels: dict[int, tuple[tuple[float, ...], ...]]

    @classmethod
    def from_lists(cls, levels: dict[int, Sequence]) -> "YProductSpec":
        canon: dict[int, tuple[tuple[float, ...], ...]] = {}
        for t, vals in levels.items():
            rows = []
            for v in vals:
                a = np.atleast_1d(np.asarray(v, dtype=float))
                rows.append(tuple(np.round(a, VALUE_DECIMALS).tolist()))
            canon[int(t)] = tuple(sorted(set(rows)))
        return cls(canon)


@dataclass(frozen=True)
class YComponentSpec:
    """Build Y as per-component conditional expectations of the payoffs.

    Each component is a probability vector over base paths; before
    ``branch_date`` the Y values condition on the mixture, from
    ``branch_date`` on they condition per component.  The resulting joint
    tree glues the component subtrees at the branch date.
    """

    component_weights: tuple[tuple[float, ...], ...]
    mix_weights: tuple[float, ...]
    branch_date: int = 0

    @classmethod
    def from_measures(cls, weights_list: Sequence, mix: Sequence[float],
                      branch_date: int = 0) -> "YComponentSpec":
        comps = tuple(tuple(float(x) for x in np.asarray(w, dtype=float)) for w in weights_list)
        mixw = tuple(float(x) for x in mix)
        if len(comps) != len(mixw):
            raise ValueError("one mixing weight per component")
        if abs(sum(mixw) - 1.0) > 1e-12 or any(w < 0 for w in mixw):
            raise ValueError("mixing weights must be a probability vector")
        for w in comps:
            if abs(sum(w) - 1.0) > 1e-10 or any(x < -1e-15 for x in w):
                raise ValueError("each component must be a probability vector over paths")
        return cls(comps, mixw, int(branch_date))


@dataclass
class JointLattice:
    """A base lattice extended with option-value coordinates.

    ``lattice`` is an ordinary Lattice over (X, Y) with the pre date
    included as date index 0; all solver machinery treats it uniformly.
    ``base_path_id`` maps each joint path to the base path carrying its X
    component, which is how volatility bands indexed by base atoms are
    looked up from joint atoms.
    """

    lattice: Lattice
    base: Lattice
    m: int
    base_path_id: np.ndarray

    @property
    def x_dim(self) -> int:
        return self.base.dim

    def base_date(self, joint_t: int) -> int | None:
        """Base date index for a joint date; None for the pre date."""
        return None if joint_t == 0 else joint_t - 1

    def base_node_for(self, joint_t: int, joint_path: int) -> int:
        """Base atom (node) under a joint path at a joint date >= 1."""
        b = self.base_date(joint_t)
        if b is None:
            raise ValueError("the pre date has no base atom")
        return int(self.base.path_nodes[self.base_path_id[joint_path], b])


def _conditional_payoff_table(base: Lattice, weights: np.ndarray,
                              g_values: np.ndarray) -> np.ndarray:
    """E[g | atom] under ``weights``, per (date, path) on the support.

    Paths outside the support get NaN rows; atoms are restricted to
    support members.
    """
    n, T1 = base.n_paths, base.n_dates
    m = g_values.shape[1]
    out = np.full((T1, n, m), np.nan)
    sup = weights > 0
    for t in range(T1):
        for atom in base.atoms(t):
            ids = [p for p in atom.path_ids if sup[p]]
            if not ids:
                continue
            w = weights[ids]
            avg = (w[:, None] * g_values[ids]).sum(axis=0) / w.sum()
            out[t, ids] = avg
    return out


def build_joint_lattice(lattice: Lattice, g_values, y_spec, *,
                        path_cap: int = DEFAULT_PATH_CAP) -> JointLattice:
    """Extend a lattice with martingale-compatible option coordinates.

    ``g_values`` is an (n_paths, m) table of terminal payoff values for the
    statically tradeable options, already shifted so their market price is
    zero.  The joint tree starts from a single pre-date node where Y = 0,
    and every joint path ends with Y equal to the payoffs achieved on its X
    component (the terminal pin is structural, not a constraint).

    With a :class:`YProductSpec` the Y coordinates range over explicit level
    grids and transitions are pruned by the per-coordinate interval
    condition (a node must lie in the hull of its children, otherwise no
    martingale charges it).  With a :class:`YComponentSpec` the Y values are
    conditional payoff expectations per mixture component.
    """
    grid = lattice.grid
    if grid.pre_date is None:
        raise ValueError("the base grid needs a pre_date to build a joint lattice")
    g = np.asarray(g_values, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    if g.shape[0] != lattice.n_paths:
        raise ValueError("g_values must have one row per base path")
    m = g.shape[1]
    T = lattice.terminal_index
    joint_grid = TimeGrid((grid.pre_date,) + grid.dates, None)

    if isinstance(y_spec, YComponentSpec):
        rows = []          # (n_joint_paths, n_dates+1, d+m)
        base_ids = []
        mix_table = None
        if y_spec.branch_date > 0:
            mixw = np.zeros(lattice.n_paths)
            for lam, cw in zip(y_spec.mix_weights, y_spec.component_weights):
                mixw += lam * np.asarray(cw)
            mix_table = _conditional_payoff_table(lattice, mixw, g)
        for lam, cw in zip(y_spec.mix_weights, y_spec.component_weights):
            w = np.asarray(cw, dtype=float)
            table = _conditional_payoff_table(lattice, w, g)
            for p in np.nonzero(w > 0)[0]:
                yvals = np.empty((grid.n_dates, m))
                for t in range(grid.n_dates):
                    src = mix_table if (mix_table is not None and t < y_spec.branch_date) else table
                    yvals[t] = src[t, p]
                pre = np.concatenate([lattice.path_values[p, 0], np.zeros(m)])
                body = np.concatenate([lattice.path_values[p], yvals], axis=1)
                rows.append(np.vstack([pre, body]))
                base_ids.append(int(p))
        joint_values = np.array(rows)
        joint, kept = _joint_from_rows(joint_grid, joint_values, base_ids, path_cap)
        return JointLattice(joint, lattice, m, kept)

    if isinstance(y_spec, YProductSpec):
        levels = {t: [np.asarray(v, dtype=float) for v in vals]
                  for t, vals in y_spec.levels.items()}
        for t in range(T):
            if t not in levels or not levels[t]:
                raise ValueError(f"missing Y levels for base date index {t}")
        rows = []
        base_ids = []
        combos_per_path = 1
        for t in range(T):
            combos_per_path *= len(levels[t])
        if combos_per_path * lattice.n_paths > path_cap:
            raise CapExceededError("joint path count exceeds cap")
        import itertools as _it
        for p in range(lattice.n_paths):
            for combo in _it.product(*(levels[t] for t in range(T))):
                yvals = np.vstack(list(combo) + [g[p]])
                pre = np.concatenate([lattice.path_values[p, 0], np.zeros(m)])
                body = np.concatenate([lattice.path_values[p], yvals], axis=1)
                rows.append(np.vstack([pre, body]))
                base_ids.append(p)
        joint_values = np.array(rows)
        joint, kept = _joint_from_rows(joint_grid, joint_values, base_ids, path_cap,
                                       prune=True, x_dim=lattice.dim)
        return JointLattice(joint, lattice, m, kept)

    raise TypeError("y_spec must be a YProductSpec or YComponentSpec")


def _joint_from_rows(joint_grid, joint_values, base_ids, path_cap,
                     prune=False, x_dim=None):
    """Assemble a joint Lattice from explicit rows, optionally pruning
    nodes that cannot carry any martingale (hull condition per coordinate).

    Returns the lattice and the base-path id per kept joint path.
    """
    base_ids = np.asarray(base_ids, dtype=int)
    if prune:
        keep = _prune_hull(joint_values)
        if not keep.any():
            raise InfeasibleError("no joint path survives the martingale hull pruning")
        lost = set(base_ids.tolist()) - set(base_ids[keep].tolist())
        if lost:
            raise InfeasibleError(
                "terminal option pin unreachable for base path(s) "
                f"{sorted(lost)}: no Y path connects 0 to the required payoff")
        joint_values = joint_values[keep]
        base_ids = base_ids[keep]
    lat = Lattice.from_paths(joint_grid, joint_values, path_cap=path_cap)
    # map canonical (reordered, merged) paths back to base ids via value match
    kept = np.empty(lat.n_paths, dtype=int)
    index = {}
    for row, b in zip(joint_values, base_ids):
        key = tuple(np.round(row, VALUE_DECIMALS).ravel().tolist())
        index.setdefault(key, int(b))
    for p in range(lat.n_paths):
        key = tuple(np.round(lat.path_values[p], VALUE_DECIMALS).ravel().tolist())
        kept[p] = index[key]
    return lat, kept


def _prune_hull(joint_values: np.ndarray) -> np.ndarray:
    """Drop rows whose prefix tree contains a node outside its children's
    per-coordinate hull.  Necessary (not sufficient) for a martingale to
    charge the row; iterates because pruning shrinks child sets.
    """
    n, T1, D = joint_values.shape
    keep = np.ones(n, dtype=bool)
    changed = True
    while changed:
        changed = False
        # group rows by prefix at each date, check hull of next values
        for t in range(T1 - 1):
            groups: dict[tuple, list[int]] = {}
            for i in np.nonzero(keep)[0]:
                key = tuple(np.round(joint_values[i, :t + 1], VALUE_DECIMALS).ravel().tolist())
                groups.setdefault(key, []).append(i)
            for ids in groups.values():
                cur = joint_values[ids[0], t]
                nxt = joint_values[ids, t + 1]
                lo, hi = nxt.min(axis=0), nxt.max(axis=0)
                tol = 1e-12
                if np.any(cur < lo - tol) or np.any(cur > hi + tol):
                    keep[ids] = False
                    changed = True
    return keep


# ---------------------------------------------------------------------------
# rule counting oracle
# ---------------------------------------------------------------------------

def count_stopping_rules(lattice: Lattice) -> int:
    """Number of pure adapted exercise rules, by tree recursion.

    A rule decides stop/continue per atom reached while still active;
    terminal atoms are forced stops.  N(terminal atom) = 1 and
    N(atom) = 1 + prod over children of N(child).
    """
    T = lattice.terminal_index
    memo: dict[int, int] = {}

    def rec(node: int) -> int:
        if node in memo:
            return memo[node]
        if lattice.node_date[node] == T:
            memo[node] = 1
            return 1
        prod = 1
        for c in lattice.node_children[node]:
            prod *= rec(c)
        memo[node] = 1 + prod
        return memo[node]

    return rec(0)
