"""Dynamics discovery with linear multistep methods.

Convention: sum_m alpha_m y_{n-m} = h sum_m beta_m f(y_{n-m}), m = 0..M, with
index 0 on the newest state. Given an exact trajectory the same relation is a
banded linear system for the unknown dynamics values f_n.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import sympy as sp

from .nn import Jet, MlpParams, jet_vjp, mlp_eval, mlp_jet

FAMILIES = {"adams-bashforth": 8, "adams-moulton": 8, "bdf": 6}
_ALIASES = {"ab": "adams-bashforth", "am": "adams-moulton", "bdf": "bdf"}
BOUNDARY_TOL = 1e-9
STABLE_TOL = 1e-10
BLOWUP = 1e12


@dataclass(frozen=True)
class LmmScheme:
    M: int
    alpha: tuple
    beta: tuple
    family: str
    p: int

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if len(self.alpha) != self.M + 1 or len(self.beta) != self.M + 1:
            raise ValueError("alpha and beta need length M + 1")
        if self.alpha[0] == 0:
            raise ValueError("alpha_0 must be nonzero")
        bad = consistency_defect(self)
        if bad > 1e-10:
            raise ValueError(f"scheme is not consistent to order {self.p} (defect {bad:.2e})")

    @property
    def explicit(self) -> bool:
        return self.beta[0] == 0

    @property
    def name(self) -> str:
        short = {"adams-bashforth": "AB", "adams-moulton": "AM", "bdf": "BDF"}.get(self.family, "LMM")
        return f"{short}{self.M}"


def consistency_defect(scheme: LmmScheme) -> float:
    """Largest Taylor coefficient of rho(e^z) - z sigma(e^z) up to z^p."""
    a = np.asarray(scheme.alpha, float)
    b = np.asarray(scheme.beta, float)
    powers = scheme.M - np.arange(scheme.M + 1, dtype=float)
    worst = abs(a.sum())
    for k in range(1, scheme.p + 1):
        c = (a * powers**k).sum() / math.factorial(k) - (b * powers ** (k - 1)).sum() / math.factorial(k - 1)
        worst = max(worst, abs(c))
    return float(worst)


@lru_cache(maxsize=None)
def _rational_coefficients(family: str, M: int) -> tuple[tuple, tuple, int]:
    # order conditions on y = t^k about the newest point: sum a_m (-m)^k = k sum b_m (-m)^(k-1)
    def mono(m, k):
        return sp.Integer(1) if k == 0 else sp.Integer(-m) ** k

    if family in ("adams-bashforth", "adams-moulton"):
        alpha = [sp.Integer(1), sp.Integer(-1)] + [sp.Integer(0)] * (M - 1)
        first = 1 if family == "adams-bashforth" else 0
        bs = sp.symbols(f"b{first}:{M + 1}")
        beta = [sp.Integer(0)] * first + list(bs)
        p = M if first else M + 1
        eqs = [sum(alpha[m] * mono(m, k) for m in range(M + 1)) - k * sum(beta[m] * mono(m, k - 1) for m in range(M + 1))
               for k in range(1, p + 1)]
        sol = sp.solve(eqs, bs, dict=True)[0]
        beta = [sp.nsimplify(b).subs(sol) for b in beta]
    else:
        a_s = sp.symbols(f"a1:{M + 1}")
        b0 = sp.Symbol("b0")
        alpha = [sp.Integer(1)] + list(a_s)
        beta = [b0] + [sp.Integer(0)] * M
        p = M
        eqs = [sum(alpha[m] * mono(m, k) for m in range(M + 1)) for k in range(1)]
        eqs += [sum(alpha[m] * mono(m, k) for m in range(M + 1)) - k * sum(beta[m] * mono(m, k - 1) for m in range(M + 1))
                for k in range(1, p + 1)]
        sol = sp.solve(eqs, [*a_s, b0], dict=True)[0]
        alpha = [sp.sympify(a).subs(sol) for a in alpha]
        beta = [sp.sympify(b).subs(sol) for b in beta]
    return tuple(sp.Rational(a) for a in alpha), tuple(sp.Rational(b) for b in beta), p


def lmm_coefficients(family: str, M: int) -> LmmScheme:
    family = _ALIASES.get(family.lower(), family.lower())
    if family not in FAMILIES:
        raise ValueError(f"unknown LMM family {family!r}")
    if not 1 <= M <= FAMILIES[family]:
        raise ValueError(f"{family} supports M in 1..{FAMILIES[family]}, got {M}")
    alpha, beta, p = _rational_coefficients(family, M)
    return LmmScheme(M, tuple(float(a) for a in alpha), tuple(float(b) for b in beta), family, p)


def exact_coefficients(family: str, M: int) -> tuple[tuple, tuple]:
    """Rational (alpha, beta) as sympy numbers, for display and oracles."""
    family = _ALIASES.get(family.lower(), family.lower())
    lmm_coefficients(family, M)
    return _rational_coefficients(family, M)[:2]


def characteristic_polynomials(scheme: LmmScheme) -> tuple[np.ndarray, np.ndarray]:
    """rho(z) = sum alpha_{M-m} z^m, sigma(z) = sum beta_{M-m} z^m, ascending powers."""
    return np.asarray(scheme.alpha[::-1], float), np.asarray(scheme.beta[::-1], float)


def sigma_roots(scheme: LmmScheme) -> np.ndarray:
    _, sig = characteristic_polynomials(scheme)
    nz = np.flatnonzero(np.abs(sig) > 0)
    if nz.size == 0:
        raise ValueError("sigma is identically zero")
    sig = sig[: nz[-1] + 1]  # trim vanishing leading coefficients
    deg = sig.size - 1
    if deg == 0:
        return np.zeros(0, complex)
    comp = np.zeros((deg, deg))
    comp[0, :] = -sig[-2::-1] / sig[-1]
    comp[1:, :-1] = np.eye(deg - 1)
    return np.linalg.eigvals(comp)


def discovery_stable(scheme: LmmScheme) -> tuple[bool, list, list]:
    """(stable, root moduli, boundary flags); stable iff every root of sigma lies strictly inside the unit disc."""
    mod = np.sort(np.abs(sigma_roots(scheme)))
    boundary = [bool(abs(m - 1.0) <= BOUNDARY_TOL) for m in mod]
    stable = bool(np.all(mod < 1.0 - STABLE_TOL))
    return stable, [float(m) for m in mod], boundary


# -- trajectories ------------------------------------------------------------

@dataclass
class Trajectory:
    h: float
    states: np.ndarray  # (N + 1, d)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, float))
        if not self.h > 0:
            raise ValueError("step h must be positive")

    @property
    def N(self) -> int:
        return self.states.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.h * np.arange(self.N + 1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *(f"y_{i + 1}" for i in range(self.dim))])
            for t, y in zip(self.times, self.states):
                w.writerow([repr(float(t)), *(repr(float(v)) for v in y)])

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        t = data[:, 0]
        h = float(t[1] - t[0])
        if not np.allclose(np.diff(t), h, rtol=1e-9, atol=1e-12):
            raise ValueError("trajectory times are not equidistant")
        return cls(h, data[:, 1:])


def reference_trajectory(f, y0, h: float, N: int, substeps: int = 8) -> Trajectory:
    """Classical RK4 with ``substeps`` internal steps per output interval."""
    y = np.atleast_1d(np.asarray(y0, float)).copy()
    out = np.empty((N + 1, y.size))
    out[0] = y
    k = h / substeps
    for n in range(1, N + 1):
        with np.errstate(over="ignore", invalid="ignore"):  # blow-up is reported below
            for _ in range(substeps):
                k1 = f(y)
                k2 = f(y + 0.5 * k * k1)
                k3 = f(y + 0.5 * k * k2)
                k4 = f(y + k * k3)
                y = y + k / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)) or np.abs(y).max() > BLOWUP:
            raise FloatingPointError(f"trajectory blew up at step {n} (t={n * h:g})")
        out[n] = y
    return Trajectory(h, out)


def fd_weights(offsets, order: int = 1) -> np.ndarray:
    """Finite-difference weights for the ``order``-th derivative at 0 from the given integer offsets."""
    offsets = [sp.Integer(o) for o in offsets]
    n = len(offsets)
    A = sp.Matrix(n, n, lambda k, j: offsets[j] ** k if k else sp.Integer(1))
    rhs = sp.Matrix([sp.factorial(order) if k == order else 0 for k in range(n)])
    return np.array([float(v) for v in A.LUsolve(rhs)])


def one_sided_init(traj: Trajectory, p: int, M: int) -> np.ndarray:
    """Forward differences of order p at n = 0..M-1: f_n ~ h^-1 sum_m g_m y_{n+m}."""
    if p < 1:
        raise ValueError("finite-difference order must be >= 1")
    if traj.N < M + p:
        raise ValueError(f"trajectory too short: need N >= M + p = {M + p}, got {traj.N}")
    g = fd_weights(range(p + 1))
    return np.stack([g @ traj.states[n:n + p + 1] for n in range(M)]) / traj.h


def _backward_end(traj: Trajectory, p: int) -> np.ndarray:
    g = fd_weights(range(-p, 1))
    return g @ traj.states[traj.N - p:] / traj.h


def recover_dynamics(scheme: LmmScheme, traj: Trajectory, seeds=None) -> np.ndarray:
    """March the LMM relation for f_0..f_N; explicit schemes shift by one index and
    close the last value with a backward difference of order p."""
    M, N, h = scheme.M, traj.N, traj.h
    if N < M + 1:
        raise ValueError(f"trajectory too short for {scheme.name}")
    seeds = one_sided_init(traj, scheme.p, M) if seeds is None else np.atleast_2d(np.asarray(seeds, float))
    if seeds.shape[0] != M:
        raise ValueError(f"need exactly M={M} seed values, got {seeds.shape[0]}")
    a = np.asarray(scheme.alpha)
    b = np.asarray(scheme.beta)
    Y = traj.states
    F = np.zeros_like(Y)
    F[:M] = seeds
    lead = 1 if scheme.explicit else 0
    if b[lead] == 0:
        raise ValueError("no nonzero leading beta for marching")
    for n in range(M + lead, N + 1):
        rhs = (a[:, None] * Y[n - np.arange(M + 1)]).sum(axis=0) / h
        rest = sum(b[m] * F[n - m] for m in range(lead + 1, M + 1))
        F[n - lead] = (rhs - rest) / b[lead]
    if lead:
        F[N] = _backward_end(traj, min(scheme.p, N))
    return F


def system_matrix(scheme: LmmScheme, N: int) -> np.ndarray:
    """Square lower-triangular matrix of the marching system (seed rows first)."""
    M = scheme.M
    lead = 1 if scheme.explicit else 0
    A = np.zeros((N + 1, N + 1))
    A[np.arange(M), np.arange(M)] = 1.0
    for n in range(M + lead, N + 1):
        for m in range(M + 1):
            A[n - lead, n - m] += scheme.beta[m]
    if lead:
        A[N, N] = 1.0
    return A


def condition_number(scheme: LmmScheme, N: int) -> float:
    return float(np.linalg.cond(system_matrix(scheme, N)))


def write_recovery_csv(path, traj: Trajectory, F: np.ndarray, f_true=None) -> None:
    true = None if f_true is None else np.stack([f_true(y) for y in traj.states])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["t", *(f"fhat_{i + 1}" for i in range(traj.dim))]
        if true is not None:
            head += [f"f_true_{i + 1}" for i in range(traj.dim)]
        w.writerow(head)
        for n, t in enumerate(traj.times):
            row = [repr(float(t)), *(repr(float(v)) for v in F[n])]
            if true is not None:
                row += [repr(float(v)) for v in true[n]]
            w.writerow(row)


# -- network variant ---------------------------------------------------------

class LmmNetworkLoss:
    """N^-1 sum_{n<M} |f_theta(y_n) - FD_n|^2 + N^-1 sum_{n>=M} |sum_m beta_m f_theta(y_{n-m}) - h^-1 sum_m alpha_m y_{n-m}|^2."""

    def __init__(self, traj: Trajectory, scheme: LmmScheme, p_init: int | None = None):
        self.traj, self.scheme = traj, scheme
        M, N = scheme.M, traj.N
        self.seed_targets = one_sided_init(traj, scheme.p if p_init is None else p_init, M)
        rows = np.arange(M, N + 1)
        self.B = np.zeros((rows.size, N + 1))
        R = np.zeros((rows.size, traj.dim))
        for i, n in enumerate(rows):
            for m in range(M + 1):
                self.B[i, n - m] = scheme.beta[m]
                R[i] += scheme.alpha[m] * traj.states[n - m]
        self.rhs = R / traj.h

    def loss_and_grad(self, params):
        theta = params[0]
        if theta.input_dim != self.traj.dim or theta.output_dim != self.traj.dim:
            raise ValueError("network dimensions must match the trajectory state dimension")
        M, N = self.scheme.M, self.traj.N
        jet, cache = mlp_jet(theta, self.traj.states, 0)
        Fv = jet.value
        r0 = Fv[:M] - self.seed_targets
        r1 = self.B @ Fv - self.rhs
        init, lmm = float((r0**2).sum()) / N, float((r1**2).sum()) / N
        bar = 2.0 / N * (self.B.T @ r1)
        bar[:M] += 2.0 / N * r0
        return init + lmm, (jet_vjp(theta, cache, Jet(bar)),), {"init": init, "lmm": lmm}


def lmm_nn_loss(theta: MlpParams, traj: Trajectory, scheme: LmmScheme, p_init: int | None = None) -> float:
    return LmmNetworkLoss(traj, scheme, p_init).loss_and_grad((theta,))[0]


# -- test dynamics -----------------------------------------------------------

def linear(y):
    return np.asarray(y, float)


def logistic(y, r: float = 1.0, K: float = 1.0):
    y = np.asarray(y, float)
    return r * y * (1.0 - y / K)


def lotka_volterra(y, a: float = 1.0, b: float = 0.5, c: float = 0.5, d: float = 1.0):
    x, z = y
    return np.array([a * x - b * x * z, c * x * z - d * z])


DYNAMICS = {
    "linear": (linear, np.array([1.0])),
    "logistic": (logistic, np.array([0.1])),
    "lotka-volterra": (lotka_volterra, np.array([2.0, 1.0])),
}


def network_dynamics(theta: MlpParams):
    return lambda y: mlp_eval(theta, np.atleast_2d(y))[0]
