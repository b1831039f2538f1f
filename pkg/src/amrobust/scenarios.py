"""Ready-made markets: payoff catalogs, config-driven assembly, the
information-gap demonstration market, and seeded random instances.

Everything here builds plain model/payoff objects for the solver layer;
nothing in this module prices anything itself.  The demo market is small
enough that each reported value can be recovered by enumerating exercise
rules against an explicitly known admissible measure, which is what the
test suite does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapExceededError, InfeasibleError, SchemaError
from .lattice import (VALUE_DECIMALS, JointLattice, Lattice, TimeGrid,
                      YComponentSpec, build_joint_lattice,
                      count_stopping_rules)
from .measures import ModelClass, PathMeasure, StaticOptionSet, VolatilityBand
from .solvers import AmericanPayoff
from .stopping import DEFAULT_RULE_CAP

CONFIG_SCHEMA_VERSION = 1

DEFAULT_RULE_BUDGET = 800       # keeps generated instances enumerable fast


# ---------------------------------------------------------------------------
# payoff and option catalogs
# ---------------------------------------------------------------------------

def _capped(values: np.ndarray, cap) -> np.ndarray:
    return values if cap is None else np.minimum(values, float(cap))


def payoff_from_catalog(lattice: Lattice, spec: dict) -> AmericanPayoff:
    """Build an exercise payoff from a catalog spec.

    Kinds: "call" and "put" on the running first price coordinate with an
    optional cap, "constant", "tent_call" (a time tent peaking strictly
    inside the horizon, on top of a capped call), and "table" for explicit
    values given as full rows or per (date, node) atom.
    """
    try:
        kind = spec["kind"]
        dates = spec.get("exercise_dates")
        X = lattice.path_values[:, :, 0].T      # (n_dates, n_paths)
        if kind == "call":
            tab = _capped(np.maximum(X - float(spec["strike"]), 0.0),
                          spec.get("cap"))
        elif kind == "put":
            tab = _capped(np.maximum(float(spec["strike"]) - X, 0.0),
                          spec.get("cap"))
        elif kind == "constant":
            tab = np.full((lattice.n_dates, lattice.n_paths),
                          float(spec["level"]))
        elif kind == "tent_call":
            p = float(spec.get("p", 0.05))
            strike = float(spec.get("strike", 1.0))
            cap = float(spec.get("cap", 100.0))
            peak = float(spec.get("peak_time", 0.25))
            grid = np.asarray(lattice.grid.dates)
            tent = np.maximum(1.5 * p - 6.0 * p * np.abs(grid - peak), 0.0)
            tab = tent[:, None] + _capped(np.maximum(X - strike, 0.0), cap)
        elif kind == "table":
            if "rows" in spec:
                tab = np.asarray(spec["rows"], dtype=float)
            else:
                tab = np.full((lattice.n_dates, lattice.n_paths),
                              float(spec.get("fill", 0.0)))
                for key, v in spec["by_atom"].items():
                    t_s, node_s = key.split(":")
                    t, node = int(t_s), int(node_s)
                    tab[t, lattice.path_nodes[:, t] == node] = float(v)
        else:
            raise SchemaError(f"unknown payoff kind {kind!r}")
        return AmericanPayoff(lattice, tab, exercise_dates=dates)
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad payoff spec: {exc}") from exc


def options_from_catalog(lattice: Lattice, specs) -> StaticOptionSet | None:
    """Terminal-payoff options from catalog specs, shifted by their prices.

    Kinds: "call", "put" (optional cap), "forward", and "terminal_table"
    with one value per path.
    """
    if not specs:
        return None
    rows, prices, names = [], [], []
    try:
        for i, spec in enumerate(specs):
            kind = spec["kind"]
            xT = lattice.path_values[:, -1, 0]
            if kind == "call":
                row = _capped(np.maximum(xT - float(spec["strike"]), 0.0),
                              spec.get("cap"))
            elif kind == "put":
                row = _capped(np.maximum(float(spec["strike"]) - xT, 0.0),
                              spec.get("cap"))
            elif kind == "forward":
                row = xT - float(spec["strike"])
            elif kind == "terminal_table":
                row = np.asarray(spec["values"], dtype=float)
                if row.shape != (lattice.n_paths,):
                    raise SchemaError("terminal_table needs one value per path")
            else:
                raise SchemaError(f"unknown option kind {kind!r}")
            rows.append(row)
            prices.append(float(spec.get("price", 0.0)))
            names.append(str(spec.get("name", f"{kind}{i}")))
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad option spec: {exc}") from exc
    return StaticOptionSet(np.vstack(rows), names=names, prices=prices)


# ---------------------------------------------------------------------------
# config-driven assembly
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    """A fully assembled market: model, payoff, and optional joint lattice."""

    config: dict
    model: ModelClass
    payoff: AmericanPayoff
    joint: JointLattice | None

    @property
    def rule_cap(self) -> int:
        return int((self.config.get("caps") or {}).get("rule_cap",
                                                       DEFAULT_RULE_CAP))

    @property
    def chain_tol(self) -> float:
        return float((self.config.get("tolerances") or {}).get("chain", 1e-7))

    @property
    def seed(self):
        return self.config.get("seed")


def lattice_from_config(spec: dict) -> Lattice:
    grid = TimeGrid(tuple(spec["dates"]), spec.get("pre_date"))
    path_cap = int(spec.get("path_cap", 100_000))
    if "paths" in spec:
        return Lattice.from_paths(grid, np.asarray(spec["paths"], dtype=float),
                                  path_cap=path_cap)
    steps = []
    for step in spec["increments"]:
        steps.append([np.atleast_1d(np.asarray(v, dtype=float)) for v in step])
    return Lattice.from_increments(grid, spec["x0"], steps, path_cap=path_cap)


def _band_pair(value):
    lo, hi = value
    return (lo, np.inf if hi is None else hi)


def band_from_config(dim: int, spec: dict) -> VolatilityBand:
    default = spec.get("default")
    by_date = {int(t): _band_pair(v)
               for t, v in (spec.get("by_date") or {}).items()}
    by_atom = {}
    for key, v in (spec.get("by_atom") or {}).items():
        t_s, node_s = key.split(":")
        by_atom[(int(t_s), int(node_s))] = _band_pair(v)
    return VolatilityBand(dim,
                          default=_band_pair(default) if default else None,
                          by_date=by_date, by_atom=by_atom)


def scenario_from_config(cfg: dict) -> Scenario:
    """Assemble a scenario from a plain config mapping.

    Structural problems raise SchemaError; an over-cap lattice or an empty
    admissible class keeps its own error class so callers can distinguish
    bad input from hard instances.
    """
    try:
        version = cfg.get("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise SchemaError(f"unsupported config schema version {version}")
        lat = lattice_from_config(cfg["lattice"])
        band = band_from_config(lat.dim, cfg.get("band") or {})
        options = options_from_catalog(lat, cfg.get("options"))
        model = ModelClass(lat, band, options=options,
                           conditioning=cfg.get("conditioning", "enlarged"))
        payoff = payoff_from_catalog(lat, cfg["payoff"])
        joint = None
        y_cfg = cfg.get("y_spec")
        if y_cfg is not None:
            if options is None:
                raise SchemaError("y_spec requires a nonempty options list")
            y_spec = YComponentSpec.from_measures(
                y_cfg["components"], y_cfg["mix"],
                int(y_cfg.get("branch_date", 0)))
            joint = build_joint_lattice(lat, options.matrix.T, y_spec)
        return Scenario(cfg, model, payoff, joint)
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad scenario config: {exc}") from exc


def joint_component_weights(joint: JointLattice, options: StaticOptionSet,
                            components, mix) -> np.ndarray:
    """Joint-lattice weights of a component mixture.

    Each component keeps its base path weights and follows its own
    conditional quote path.  Only valid when the joint lattice was built
    from exactly these components branching at date 0; the resulting
    measure restricts to the plain mixture on the base lattice.
    """
    base = joint.base
    g = options.matrix.T
    lat = joint.lattice
    index = {}
    for jp in range(lat.n_paths):
        key = tuple(np.round(lat.path_values[jp], VALUE_DECIMALS)
                    .ravel().tolist())
        index[key] = jp
    out = np.zeros(lat.n_paths)
    for lam, w in zip(mix, components):
        w = np.asarray(w, dtype=float)
        table = np.full((base.n_dates, base.n_paths, joint.m), np.nan)
        for t in range(base.n_dates):
            for atom in base.atoms(t):
                ids = [q for q in atom.path_ids if w[q] > 0]
                if not ids:
                    continue
                ww = w[ids]
                table[t, ids] = (ww[:, None] * g[ids]).sum(axis=0) / ww.sum()
        for q in np.nonzero(w > 0)[0]:
            pre = np.concatenate([base.path_values[q, 0], np.zeros(joint.m)])
            body = np.concatenate([base.path_values[q], table[:, q]], axis=1)
            key = tuple(np.round(np.vstack([pre, body]), VALUE_DECIMALS)
                        .ravel().tolist())
            jp = index.get(key)
            if jp is None:
                raise InfeasibleError(
                    "joint lattice does not contain the lift of a component; "
                    "was it built from different components?")
            out[jp] += lam * w[q]
    return out


def trivial_joint(lattice: Lattice) -> JointLattice:
    """A joint lattice whose traded option coordinate is identically zero.

    Lets chain reports run on markets with no quoted options; the lift adds
    a pre date and a frozen Y = 0 coordinate and nothing else.
    """
    if lattice.grid.pre_date is None:
        gap = lattice.grid.dates[1] - lattice.grid.dates[0]
        grid = TimeGrid(lattice.grid.dates, lattice.grid.dates[0] - gap)
        lattice = Lattice.from_paths(grid, lattice.path_values)
    zero = StaticOptionSet(np.zeros((1, lattice.n_paths)), names=("null",))
    uniform = np.full(lattice.n_paths, 1.0 / lattice.n_paths)
    y_spec = YComponentSpec.from_measures([uniform], [1.0])
    return build_joint_lattice(lattice, zero.matrix.T, y_spec)


# ---------------------------------------------------------------------------
# the information-gap demonstration market
# ---------------------------------------------------------------------------

@dataclass
class GapDemo:
    """The five-scenario market whose quoted call is worth more than any
    static position in it.

    One branch of the admissible class freezes the price forever; the other
    branches binomially after the midpoint.  A call quoted at ``p`` tells
    the two apart at date 0, but the exercise payoff peaks at the quarter
    date where the price history alone says nothing, so a holder who can
    read the quote is worth strictly more than one who cannot.
    """

    model: ModelClass
    payoff: AmericanPayoff
    joint: JointLattice
    p: float
    up: float
    cap: float
    component_weights: tuple[np.ndarray, np.ndarray]   # (frozen, branching)
    mix: tuple[float, float]
    calibrated_weights: np.ndarray
    joint_weights: np.ndarray

    @property
    def reference(self) -> PathMeasure:
        return PathMeasure(self.model.lattice, self.calibrated_weights)

    @property
    def joint_reference(self) -> PathMeasure:
        return PathMeasure(self.joint.lattice, self.joint_weights)


def build_gap_demo(*, p: float = 0.05, up: float = 0.2,
                   cap: float = 100.0) -> GapDemo:
    """Construct the demonstration market.

    Requires 0 < p < up/2 so that a mixture of the frozen and branching
    components prices the call at exactly p.  At the defaults the best
    static-information value is 0.075 and the joint value is 0.0875.
    """
    if not 0.0 < p < up / 2.0:
        raise ValueError("need 0 < p < up/2 for a calibrated mixture")
    dates = (0.0, 0.25, 0.5, 0.75, 1.0)
    rows = [[1.0] * 5]
    for first in (-up, up):
        for second in (-up, up):
            rows.append([1.0, 1.0, 1.0, 1.0 + first, 1.0 + first + second])
    grid = TimeGrid(dates, pre_date=-0.25)
    lat = Lattice.from_paths(grid, np.asarray(rows)[:, :, None])

    band = VolatilityBand(1, by_date={0: (0.0, 0.0), 1: (0.0, 0.0),
                                      2: (0.0, up * up), 3: (0.0, up * up)})

    def call(x):
        return min(max(float(x[0]) - 1.0, 0.0), cap)

    options = StaticOptionSet.from_terminal(lat, call, prices=[p],
                                            names=("quoted_call",))
    model = ModelClass(lat, band, options=options)
    payoff = payoff_from_catalog(lat, {"kind": "tent_call", "p": p,
                                       "strike": 1.0, "cap": cap,
                                       "peak_time": 0.25})

    frozen = np.zeros(lat.n_paths)
    branching = np.zeros(lat.n_paths)
    for q in range(lat.n_paths):
        if np.all(lat.path_values[q, :, 0] == 1.0):
            frozen[q] = 1.0
        else:
            branching[q] = 0.25
    # mixture weight on the frozen branch that prices the call at p
    lam = 1.0 - 2.0 * p / up
    mix = (lam, 1.0 - lam)
    y_spec = YComponentSpec.from_measures([frozen, branching], mix)
    joint = build_joint_lattice(lat, options.matrix.T, y_spec)
    calibrated = lam * frozen + (1.0 - lam) * branching
    jw = joint_component_weights(joint, options, (frozen, branching), mix)
    return GapDemo(model, payoff, joint, p, up, cap,
                   (frozen, branching), mix, calibrated, jw)


def gap_demo_config(*, p: float = 0.05, up: float = 0.2,
                    cap: float = 100.0) -> dict:
    """The demonstration market as a plain config mapping."""
    demo = build_gap_demo(p=p, up=up, cap=cap)
    lat = demo.model.lattice
    return {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "lattice": {
            "dates": list(lat.grid.dates),
            "pre_date": lat.grid.pre_date,
            "paths": lat.path_values[:, :, 0].tolist(),
        },
        "band": {"by_date": {str(t): [lo[0], hi[0] if np.isfinite(hi[0]) else None]
                             for t, (lo, hi) in
                             ((t, demo.model.band.bounds(t, 0)) for t in range(4))}},
        "payoff": {"kind": "tent_call", "p": p, "strike": 1.0, "cap": cap,
                   "peak_time": 0.25},
        "options": [{"kind": "call", "strike": 1.0, "cap": cap, "price": p,
                     "name": "quoted_call"}],
        "y_spec": {"components": [demo.component_weights[0].tolist(),
                                  demo.component_weights[1].tolist()],
                   "mix": list(demo.mix)},
    }


# ---------------------------------------------------------------------------
# seeded random instances
# ---------------------------------------------------------------------------

@dataclass
class RandomInstance:
    """A seeded market with admissible measures known by construction."""

    model: ModelClass
    payoff: AmericanPayoff
    joint: JointLattice | None
    reference: PathMeasure                      # admissible and calibrated
    components: tuple[np.ndarray, ...]          # the kernels behind it
    band_spec: dict[int, tuple[float, float]]   # per-date variance bounds
    joint_reference: PathMeasure | None = None


def _rule_count(branchings) -> int:
    n = 1
    for b in reversed(branchings):
        n = 1 + n ** b
    return n


def _kernel(neg: float, pos: float, mid_mass: float | None) -> np.ndarray:
    """Zero-mean weights over sorted increments {neg[, 0], pos}."""
    spread = pos - neg
    if mid_mass is None:
        return np.array([pos / spread, -neg / spread])
    rest = 1.0 - mid_mass
    return np.array([rest * pos / spread, mid_mass, -rest * neg / spread])


def _product_weights(lat: Lattice, kernels) -> np.ndarray:
    """Path weights of the measure applying kernels[t] at every date-t node."""
    w = np.ones(lat.n_paths)
    for q in range(lat.n_paths):
        for t, kern in enumerate(kernels):
            node = int(lat.path_nodes[q, t])
            child = int(lat.path_nodes[q, t + 1])
            w[q] *= kern[lat.node_children[node].index(child)]
    return w


def random_instance(seed: int, *, max_depth: int = 4, max_branching: int = 3,
                    with_options: bool = False,
                    rule_budget: int = DEFAULT_RULE_BUDGET) -> RandomInstance:
    """A reproducible market with a feasible reference measure built in.

    Bands are sampled around the variances of two explicit product-measure
    kernels, so the admissible class always contains both of them and (with
    options) their calibrated mixture.  Branching is trimmed until the pure
    exercise rules stay within ``rule_budget``, keeping full enumeration
    affordable.
    """
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(2, max_depth + 1))
    if with_options:
        depth = min(depth, 3)
    brans = [int(rng.integers(2, max_branching + 1)) for _ in range(depth)]
    if with_options and max_branching >= 3:
        brans[0] = 3        # a free mid weight makes the two kernels differ
    while _rule_count(brans) > rule_budget and any(b > 2 for b in brans):
        brans[max(i for i, b in enumerate(brans) if b > 2)] = 2
    if _rule_count(brans) > rule_budget:
        raise CapExceededError("no branching profile fits the rule budget")

    steps, kerns1, kerns2, band_spec = [], [], [], {}
    for t, b in enumerate(brans):
        neg = -round(float(rng.uniform(0.05, 0.3)), 3)
        pos = round(float(rng.uniform(0.05, 0.3)), 3)
        if b == 2:
            steps.append([[neg], [pos]])
            kerns1.append(_kernel(neg, pos, None))
            kerns2.append(_kernel(neg, pos, None))
            v1 = v2 = -neg * pos
        else:
            steps.append([[neg], [0.0], [pos]])
            kerns1.append(_kernel(neg, pos, 0.2))
            kerns2.append(_kernel(neg, pos, 0.6))
            v1, v2 = 0.8 * -neg * pos, 0.4 * -neg * pos
        lo = min(v1, v2) * float(rng.uniform(0.3, 0.95))
        hi = max(v1, v2) * float(rng.uniform(1.05, 1.8))
        if rng.random() < 0.15:
            lo, hi = 0.0, np.inf
        band_spec[t] = (lo, hi)

    pre = -1.0 / depth if with_options else None
    grid = TimeGrid(tuple(k / depth for k in range(depth + 1)), pre)
    lat = Lattice.from_increments(grid, 1.0, steps)
    band = VolatilityBand(1, by_date=band_spec)

    zval = rng.uniform(0.0, 1.0, size=lat.n_nodes)
    Z = zval[lat.path_nodes].T
    exercise_dates = None
    if rng.random() < 0.5:
        keep = [t for t in range(lat.terminal_index) if rng.random() < 0.6]
        exercise_dates = tuple(keep) + (lat.terminal_index,)

    w1 = _product_weights(lat, kerns1)
    w2 = _product_weights(lat, kerns2)
    mix = 0.5 * w1 + 0.5 * w2

    options = None
    joint = None
    if with_options:
        n_opts = int(rng.integers(1, 3))
        gmat = rng.uniform(-0.5, 0.5, size=(n_opts, lat.n_paths))
        prices = gmat @ mix
        options = StaticOptionSet(gmat, prices=prices)
    model = ModelClass(lat, band, options=options)
    payoff = AmericanPayoff(lat, Z, exercise_dates=exercise_dates)
    joint_ref = None
    if with_options:
        y_spec = YComponentSpec.from_measures([w1, w2], (0.5, 0.5))
        joint = build_joint_lattice(lat, options.matrix.T, y_spec)
        jw = joint_component_weights(joint, options, (w1, w2), (0.5, 0.5))
        joint_ref = PathMeasure(joint.lattice, jw)
    return RandomInstance(model, payoff, joint, PathMeasure(lat, mix),
                          (w1, w2), band_spec, joint_ref)
