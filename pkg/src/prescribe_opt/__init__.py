"""Optimal prescriptive trees from observational data.

A library and command line tool that learns treatment-assignment policies in
the form of shallow binary trees by solving mixed-integer optimization models
over counterfactual policy-value estimators (inverse propensity weighting, the
direct method, and the doubly robust combination), alongside two within-leaf
sample-average baselines and an exact enumeration solver used both as an
oracle and as the engine for small benchmark runs.
"""

__version__ = "0.1.0"

from . import data, estimators, exact, formulations, milp, policy  # noqa: E402,F401
