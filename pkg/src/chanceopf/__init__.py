"""Chance-constrained security-constrained AC optimal power flow.

Uncertain loads are expanded in orthogonal polynomial bases, the AC power
flow equations are propagated through the expansion by Galerkin projection,
and probabilistic limits become smooth moment constraints solved by an
interior-point method.  A Monte Carlo path through a plain Newton power flow
validates the resulting dispatch empirically.
"""

__version__ = "0.1.0"
