"""Robust pricing and superhedging of American options on scenario lattices.

The package prices American-style claims under volatility uncertainty on
finite scenario trees: the scenario class is every martingale measure whose
one-step conditional variances stay inside per-atom bands, optionally
calibrated to a set of zero-cost static options.  Exercise flexibility is
handled by enlarging the scenario space with an exercise date, which turns
the American claim into a European one and makes both sides of the pricing
problem finite linear programs.
"""

from .errors import (AmrobustError, CapExceededError, InfeasibleError,
                     LPNumericalError, NonAdaptedError, SchemaError,
                     SurvivalHitZeroError, UnboundedError)
from .lattice import (EnlargedAtom, EnlargedIndex, FiltrationAtom, JointLattice,
                      Lattice, Path, StoppedPath, TimeGrid, YComponentSpec,
                      YProductSpec, atoms, build_joint_lattice, build_lattice,
                      count_stopping_rules, enlarge, enumerate_paths)

__version__ = "0.1.0"
