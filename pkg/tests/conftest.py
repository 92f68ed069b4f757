import numpy as np
import pytest

from weightedfp.config import initial_field
from weightedfp.discrete_ops import OperatorBundle
from weightedfp.model import Potential, build_problem, make_coefficients


def make_case(kind: str, n: int, R: float | None = 7.0, d: int = 1, upwind: bool = True):
    """Problem + operator bundle for the configurations used across tests.

    ``ou``      beta = r/2, b = 0
    ``pm``      beta = r|r|, b = 1 + 0.5/(1+r^2), D = -tanh
    ``ou_drift`` beta = r/2, same b and D as ``pm``
    ``heat``    beta = r, b = 0
    """
    pot = Potential("quadratic", (1.0,), d)
    if kind == "ou":
        coeffs = make_coefficients(pot, "linear", (0.5,))
    elif kind == "heat":
        coeffs = make_coefficients(pot, "linear", (1.0,))
    elif kind == "pm":
        coeffs = make_coefficients(pot, "porous_medium", (2.0, 1.0), "saturating", (1.0, 0.5), "tanh", (1.0,))
    elif kind == "ou_drift":
        coeffs = make_coefficients(pot, "linear", (0.5,), "saturating", (1.0, 0.5), "tanh", (1.0,))
    else:
        raise KeyError(kind)
    prob = build_problem(pot, coeffs, n, R)
    return prob, OperatorBundle(prob.grid, prob.weight, coeffs, upwind=upwind)


def gaussian_u0(prob, mean=1.0, var=0.04):
    params = tuple(np.atleast_1d(mean).tolist()) + (var,)
    if len(params) != prob.grid.d + 1:
        params = (mean,) * prob.grid.d + (var,)
    return initial_field(prob, "gaussian", params)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
