"""Shared oracles and fixtures for the test suite."""
from __future__ import annotations

import math

import numpy as np
import sympy

from coefid.nn import Bounds, MlpParams
from coefid.synth import X_SYM, manufacture

x = X_SYM[0]


def fd_gradient(fun, v: np.ndarray, step: float = 1e-6, idx=None) -> np.ndarray:
    """Central differences of a scalar function of a flat vector."""
    idx = list(range(v.size)) if idx is None else list(idx)
    out = np.zeros(len(idx))
    for k, i in enumerate(idx):
        e = np.zeros_like(v)
        e[i] = step
        out[k] = (fun(v + e) - fun(v - e)) / (2 * step)
    return out


def rel_err(approx, exact) -> float:
    approx, exact = np.asarray(approx, float), np.asarray(exact, float)
    return float(np.abs(approx - exact).max() / max(np.abs(exact).max(), 1e-300))


def _net(A1, b1, A2, b2) -> MlpParams:
    return MlpParams((np.atleast_2d(np.asarray(A1, float)), np.atleast_2d(np.asarray(A2, float))),
                     (np.asarray(b1, float), np.asarray(b2, float)))


def representable_mixed_problem():
    """1D problem with a = 1.2 and flux sigma = a u' = 1.2 tanh(3 (x - 1/2)), both exact networks."""
    a0, w = 1.2, 3.0
    u = (sympy.log(sympy.cosh(w * (x - sympy.Rational(1, 2)))) - sympy.log(sympy.cosh(w / 2))) / w
    problem = manufacture(sympy.Float(a0), u, Bounds(0.5, 2.0), 1, 0.0, "tanh-mixed")
    theta = _net([[0.0]], [0.0], [[0.0]], [a0])
    kappa = _net([[w]], [-w / 2], [[a0]], [0.0])
    return problem, theta, kappa


def representable_pinn_problem():
    """1D problem whose coefficient and state are both one-hidden-layer tanh networks."""
    w, al, c = 3.0, 0.25, 0.5
    shift = c * (math.tanh(w * (1 - al)) - math.tanh(w * al))
    u = c * (sympy.tanh(w * x - w * al) - sympy.tanh(w * x - w * (1 - al))) - shift
    a = sympy.Float(1.2) + sympy.Float(0.3) * sympy.tanh(2 * x - 1)
    problem = manufacture(a, u, Bounds(0.5, 2.0), 1, 0.0, "tanh-pinn")
    theta = _net([[2.0]], [-1.0], [[0.3]], [1.2])
    kappa = _net([[w], [w]], [-w * al, -w * (1 - al)], [[c, -c]], [-shift])
    return problem, theta, kappa
