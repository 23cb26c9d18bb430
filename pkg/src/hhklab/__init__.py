"""Optimal consumption with local substitution under recursive utility on a
discretized Poisson market.

The modules build the event tree (:mod:`market_tree`), consumption plans and
satisfaction (:mod:`plans`), aggregators (:mod:`aggregators`), the backward
utility solver (:mod:`bsde`), first-order condition audits (:mod:`foc`) and
candidate optimal plans (:mod:`policies`).
"""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
