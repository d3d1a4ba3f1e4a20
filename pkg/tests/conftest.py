"""Shared helpers for the test suite.

The closed-form quantities of the linear-interaction model are checked
against an independent composite-Simpson quadrature (written before the
library code, frozen below). Tests import these via plain `import conftest`
(pytest puts this directory on sys.path).
"""

import numpy as np


def simpson_gamma_sq_integral(kappa_bar: float, T: float = 1.0, nodes: int = 2001) -> float:
    """Composite-Simpson value of int_0^T exp(2*kappa_bar*(T-t)) dt.

    Deliberately does NOT call anything in palab: this is the oracle the
    library's closed forms are judged against. nodes must be odd.
    """
    t = np.linspace(0.0, T, nodes)
    y = np.exp(2.0 * kappa_bar * (T - t))
    h = t[1] - t[0]
    return float(h / 3.0 * (y[0] + y[-1] + 4.0 * y[1:-1:2].sum() + 2.0 * y[2:-2:2].sum()))


# Frozen values of 0.5 * int_0^1 exp(2*kappa*(1-t)) dt from the oracle above
# (computed once with nodes=200001 and pinned; regression guard for both the
# oracle and the closed form).
HALF_GAMMA_SQ_FROZEN = {
    -1.0: 0.21616617919084682,
    -0.5: 0.3160602794142788,
    0.0: 0.5,
    0.5: 0.8591409142295226,
    1.0: 1.5972640247326626,
}


def gamma_hat(kappa_bar: float, T: float = 1.0):
    """The optimal slope t -> exp(kappa_bar * (T - t)) as a plain closure."""

    def g(t):
        return float(np.exp(kappa_bar * (T - t)))

    return g
