"""Output least-squares reconstruction with P1 coefficients and H1 penalty.

Minimises 1/2 ||u_h(a_h) - z||^2 + gamma/2 ||grad a_h||^2 over nodal
coefficients in the box [c0, c1] by projected gradient (Barzilai-Borwein
step, Armijo backtracking). Gradients come from one adjoint solve.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fem
from .mesh import Mesh
from .nn import Bounds
from .synth import Observation, Problem, weighted_misfit

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FemReconConfig:
    gamma: float
    bounds: Bounds
    max_iters: int = 2000
    grad_tol: float = 1e-8
    step_rule: str = "barzilai-borwein-with-armijo"
    fixed_step: float = 1.0
    quad_level: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")
        if self.step_rule not in ("fixed", "barzilai-borwein-with-armijo"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")


@dataclass
class ReconResult:
    a_h: object
    u_h: object
    loss_history: list
    l2_error: float
    weighted_error: float
    iterations: int
    converged: bool
    extra: dict = field(default_factory=dict)

    def to_json(self, config=None) -> str:
        payload = {
            "config": _config_echo(config),
            "l2_error": self.l2_error,
            "weighted_error": self.weighted_error,
            "iterations": self.iterations,
            "converged": self.converged,
            "loss_history": list(map(float, self.loss_history)),
            **{k: v for k, v in self.extra.items() if isinstance(v, (bool, int, float, str))},
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def _config_echo(config) -> dict | None:
    if config is None:
        return None
    d = asdict(config)
    return json.loads(json.dumps(d, default=str))


class FemTikhonov:
    """Loss and adjoint gradient of the discrete Tikhonov functional on one mesh."""

    def __init__(self, mesh: Mesh, obs, f, gamma: float, quad_level: int = 2):
        self.mesh = mesh
        self.gamma = gamma
        self.rule = fem.quad_rule(mesh, quad_level)
        self.z_qp = fem._eval(obs, self.rule, mesh)
        self.F = fem.assemble_load(mesh, f, quad_level)
        self.K1 = fem.assemble_stiffness(mesh, 1.0, 0)
        self.G = fem.basis_gradients(mesh)

    def state(self, a: np.ndarray) -> tuple[np.ndarray, fem.DirichletSolver]:
        if np.any(a <= 0):
            raise fem.AdmissibilityError("nodal coefficient values must be positive")
        abar = self.mesh.volumes * a[self.mesh.elements].mean(axis=1)  # exact for P1 coefficients
        solver = fem.DirichletSolver(self.mesh, fem.stiffness_from_weights(self.mesh, abar))
        return solver.solve(self.F), solver

    def _misfit(self, u: np.ndarray) -> np.ndarray:
        idx = self.mesh.elements[self.rule.elem]
        return np.einsum("qj,qj->q", self.rule.bary, u[idx]) - self.z_qp

    def loss(self, a: np.ndarray) -> float:
        u, _ = self.state(a)
        r = self._misfit(u)
        return 0.5 * self.rule.integrate(r**2) + 0.5 * self.gamma * float(a @ (self.K1 @ a))

    def loss_and_gradient(self, a: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        u, solver = self.state(a)
        r = self._misfit(u)
        loss = 0.5 * self.rule.integrate(r**2) + 0.5 * self.gamma * float(a @ (self.K1 @ a))
        p = solver.solve(fem.load_from_values(self.mesh, r, self.rule))
        gu = np.einsum("ejd,ej->ed", self.G, u[self.mesh.elements])
        gp = np.einsum("ejd,ej->ed", self.G, p[self.mesh.elements])
        per_elem = -(gu * gp).sum(axis=1) * self.mesh.volumes / (self.mesh.dim + 1)
        grad = np.bincount(self.mesh.elements.ravel(), weights=np.repeat(per_elem, self.mesh.dim + 1),
                           minlength=self.mesh.n_nodes)
        grad += self.gamma * (self.K1 @ a)
        return loss, grad, u


def fem_loss(a_h: fem.FemFunction, obs, gamma: float, mesh: Mesh, f, quad_level: int = 2) -> float:
    return FemTikhonov(mesh, obs, f, gamma, quad_level).loss(a_h.values)


def fem_adjoint_gradient(a_h: fem.FemFunction, obs, gamma: float, mesh: Mesh, f, quad_level: int = 2) -> np.ndarray:
    return FemTikhonov(mesh, obs, f, gamma, quad_level).loss_and_gradient(a_h.values)[1]


def _projected_gradient_norm(a, g, bounds: Bounds) -> float:
    return float(np.abs(np.clip(a - g, bounds.lower, bounds.upper) - a).max())


def reconstruct_fem(problem: Problem, obs: Observation, mesh: Mesh, config: FemReconConfig,
                    a0: np.ndarray | None = None) -> ReconResult:
    """Projected-gradient Tikhonov reconstruction; stalls are reported, not raised."""
    if obs.norm_tag != "L2":
        raise ValueError("FEM reconstruction expects an L2-tagged observation")
    lo, hi = config.bounds.lower, config.bounds.upper
    tik = FemTikhonov(mesh, obs, problem.f, config.gamma, config.quad_level)
    a = np.full(mesh.n_nodes, config.bounds.mid) if a0 is None else np.clip(np.asarray(a0, float), lo, hi)
    J, g, u = tik.loss_and_gradient(a)
    history = [J]
    converged = False
    step = 0.1 * (hi - lo) / max(np.abs(g).max(), 1e-300)
    a_prev = g_prev = None
    it = 0
    for it in range(1, config.max_iters + 1):
        if _projected_gradient_norm(a, g, config.bounds) < config.grad_tol:
            converged = True
            it -= 1
            break
        if config.step_rule == "fixed":
            a_new = np.clip(a - config.fixed_step * g, lo, hi)
            J_new, g_new, u_new = tik.loss_and_gradient(a_new)
        else:
            if a_prev is not None:
                s, yv = a - a_prev, g - g_prev
                sy = float(s @ yv)
                if sy > 0:
                    step = float(s @ s) / sy
            t = step
            while True:
                a_new = np.clip(a - t * g, lo, hi)
                J_new = tik.loss(a_new)
                if J_new <= J + 1e-4 * float(g @ (a_new - a)):
                    break
                t *= 0.5
                if t < 1e-30 * max(step, 1e-300) or np.array_equal(a_new, a):
                    a_new = None
                    break
            if a_new is None:
                log.info("line search stalled at iteration %d", it)
                break
            J_new, g_new, u_new = tik.loss_and_gradient(a_new)
            assert J_new <= J, "Armijo step increased the loss"
            step = t
        assert a_new.min() >= lo and a_new.max() <= hi
        a_prev, g_prev = a, g
        a, J, g, u = a_new, J_new, g_new, u_new
        history.append(J)
    else:
        converged = _projected_gradient_norm(a, g, config.bounds) < config.grad_tol
    a_h = fem.FemFunction(mesh, a)
    u_h = fem.FemFunction(mesh, u, zero_trace=True)
    l2 = fem.norm(lambda X: a_h(X) - problem.a_true(X), "L2", mesh, 3)
    werr = weighted_misfit(a_h, problem, mesh, 3)
    return ReconResult(a_h, u_h, history, l2, werr, it, converged)


def apriori_quantity(result: ReconResult, problem: Problem, gamma: float) -> float:
    """||u_h(a_h*) - u_true||^2 + gamma ||grad a_h*||^2."""
    u_err = fem.error_norm(result.u_h, problem.u_true, "L2", 3)
    return u_err**2 + gamma * fem.norm(result.a_h, "H1semi", result.a_h.mesh, 0) ** 2
