"""Numerical lab for the single-period Kyle insider-trading equilibrium.

Neural insider and market-maker agents are trained by alternating best
responses and compared against closed-form and quadrature oracles.
"""

__version__ = "0.1.0"
