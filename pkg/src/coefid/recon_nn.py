"""Network-based reconstructions: hybrid DNN-FEM, mixed least squares and PINN.

Every scheme exposes ``loss_and_grad(params) -> (loss, grads, terms)`` with
``params`` a tuple of MlpParams, which is what ``train`` consumes.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import fem
from .mesh import Mesh, build_uniform_mesh
from .nn import Bounds, Jet, MlpParams, cutoff, init_mlp, jet_vjp, mlp_eval, mlp_jet, parallelize
from .recon_fem import ReconResult
from .synth import Observation, Problem, boundary_tangents, sample_boundary, weighted_misfit

log = logging.getLogger(__name__)

COEFF_ARCH = (16, 16)
STATE_ARCH = (32, 32)


@dataclass(frozen=True)
class SamplingPlan:
    n_d: int
    n_b: int
    seed: int

    def __post_init__(self):
        if self.n_d < 1 or self.n_b < 1:
            raise ValueError("sampling plan needs n_d >= 1 and n_b >= 1")

    def sample(self, dim: int, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.seed) if rng is None else rng
        X = rng.uniform(size=(self.n_d, dim))
        Y = sample_boundary(dim, self.n_b, rng)
        return X, Y


@dataclass(frozen=True)
class PenaltyVector:
    """Mixed scheme: (gamma_sigma, gamma_a, gamma_b); PINN: (gamma_d, gamma_b, gamma_a)."""

    scheme: str
    values: tuple

    def __post_init__(self):
        expected = {"hybrid": 1, "mixed": 3, "pinn": 3}
        if self.scheme not in expected:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if len(self.values) != expected[self.scheme]:
            raise ValueError(f"{self.scheme} needs {expected[self.scheme]} penalties")
        if any(not v > 0 for v in self.values):
            raise ValueError("penalty parameters must be strictly positive")

    def __getitem__(self, i):
        return self.values[i]


def mixed_penalties(gamma_sigma: float, gamma_a: float, gamma_b: float) -> PenaltyVector:
    return PenaltyVector("mixed", (gamma_sigma, gamma_a, gamma_b))


def pinn_penalties(gamma_d: float, gamma_b: float, gamma_a: float) -> PenaltyVector:
    return PenaltyVector("pinn", (gamma_d, gamma_b, gamma_a))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20_000
    learning_rate: float = 1e-3
    optimizer: str = "adaptive-moment"
    seed: int = 0
    log_every: int = 100
    resample: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.optimizer not in ("adaptive-moment", "plain-gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def _add(p: MlpParams, q: MlpParams) -> MlpParams:
    return MlpParams(tuple(a + b for a, b in zip(p.weights, q.weights)),
                     tuple(a + b for a, b in zip(p.biases, q.biases)))


def network(layer_dims, seed: int, output_bias: float = 0.0) -> MlpParams:
    p = init_mlp(layer_dims, seed)
    bs = list(p.biases)
    bs[-1] = np.full_like(bs[-1], output_bias)
    return MlpParams(p.weights, tuple(bs))


# -- hybrid DNN-FEM ----------------------------------------------------------

class HybridScheme:
    """1/2 ||u_h(P_A(a_theta)) - z||^2 + gamma/2 Q_h(|grad a_theta|^2) with a FEM state."""

    def __init__(self, mesh: Mesh, obs, f, gamma: float, bounds: Bounds, n: int = 0,
                 data_level: int | None = None, load_level: int | None = None):
        if gamma < 0:
            raise ValueError("gamma must be nonnegative")
        self.mesh, self.gamma, self.bounds, self.n = mesh, gamma, bounds, n
        self.rule = fem.quad_rule(mesh, n)
        self.data_rule = fem.quad_rule(mesh, n if data_level is None else data_level)
        self.z_qp = fem._eval(obs, self.data_rule, mesh)
        self.F = fem.assemble_load(mesh, f, n if load_level is None else load_level)
        self.G = fem.basis_gradients(mesh)

    def _state(self, coeff_qp: np.ndarray):
        abar = fem.element_coefficient_weights(self.mesh, coeff_qp, self.rule)
        solver = fem.DirichletSolver(self.mesh, fem.stiffness_from_weights(self.mesh, abar))
        u = solver.solve(self.F)
        idx = self.mesh.elements[self.data_rule.elem]
        r = np.einsum("qj,qj->q", self.data_rule.bary, u[idx]) - self.z_qp
        return u, r, solver

    def state(self, theta: MlpParams) -> fem.FemFunction:
        a = mlp_eval(theta, self.rule.points)[:, 0]
        u, _, _ = self._state(cutoff(a, self.bounds)[0])
        return fem.FemFunction(self.mesh, u, zero_trace=True)

    def loss(self, theta: MlpParams) -> float:
        return self.loss_and_grad((theta,))[0]

    def loss_and_grad(self, params):
        theta = params[0]
        jet, cache = mlp_jet(theta, self.rule.points, 1)
        a = jet.value[:, 0]
        grad_a = jet.grad[:, :, 0]
        clipped, mask = cutoff(a, self.bounds)
        u, r, solver = self._state(clipped)
        data = 0.5 * self.data_rule.integrate(r**2)
        penalty = 0.5 * self.gamma * self.rule.integrate((grad_a**2).sum(axis=1))
        p = solver.solve(fem.load_from_values(self.mesh, r, self.data_rule))
        gu = np.einsum("ejd,ej->ed", self.G, u[self.mesh.elements])
        gp = np.einsum("ejd,ej->ed", self.G, p[self.mesh.elements])
        dJ_dc = -self.rule.weights * (gu * gp).sum(axis=1)[self.rule.elem]
        bar = Jet(np.where(mask, dJ_dc, 0.0)[:, None],
                  (self.gamma * self.rule.weights[:, None] * grad_a)[:, :, None])
        grad = jet_vjp(theta, cache, bar)
        return data + penalty, (grad,), {"data": data, "penalty": penalty}


def hybrid_loss(theta: MlpParams, mesh: Mesh, obs, gamma: float, n: int, f, bounds: Bounds) -> float:
    return HybridScheme(mesh, obs, f, gamma, bounds, n).loss(theta)


def hybrid_gradient(theta: MlpParams, mesh: Mesh, obs, gamma: float, n: int, f, bounds: Bounds) -> MlpParams:
    return HybridScheme(mesh, obs, f, gamma, bounds, n).loss_and_grad((theta,))[1][0]


# -- mixed least squares -----------------------------------------------------

class MixedLeastSquares:
    """Two networks (a_theta, sigma_kappa) fitted to the first-order system with z in place of u."""

    def __init__(self, problem: Problem, obs: Observation, plan: SamplingPlan, gammas: PenaltyVector,
                 bounds: Bounds | None = None):
        if gammas.scheme != "mixed":
            raise ValueError("mixed scheme needs mixed penalties")
        if getattr(obs, "mode", "smooth") != "smooth":
            raise ValueError("mixed least squares needs a smooth-mode observation (grad z pointwise)")
        self.problem, self.obs, self.plan, self.gammas = problem, obs, plan, gammas
        self.bounds = problem.bounds if bounds is None else bounds
        self.resample(np.random.default_rng(plan.seed))

    def resample(self, rng: np.random.Generator) -> None:
        p = self.problem
        self.X, self.Y = self.plan.sample(p.dim, rng)
        self.grad_z = self.obs.grad(self.X)
        self.f_X = p.f(self.X)
        self.flux_b = p.a_true(self.Y)[:, None] * self.obs.grad(self.Y)

    def loss_and_grad(self, params):
        theta, kappa = params
        p, (g_s, g_a, g_b) = self.problem, self.gammas.values
        cd = p.domain_volume / self.plan.n_d
        cb = p.boundary_measure / self.plan.n_b
        ja, ca = mlp_jet(theta, self.X, 1)
        js, cs = mlp_jet(kappa, self.X, 1)
        jb, cbb = mlp_jet(kappa, self.Y, 0)
        a, grad_a = ja.value[:, 0], ja.grad[:, :, 0]
        Pa, mask = cutoff(a, self.bounds)
        R_d = js.value - Pa[:, None] * self.grad_z
        div = np.einsum("nmm->n", js.grad)
        R_s = div + self.f_X
        R_b = jb.value - self.flux_b
        terms = {
            "E_d": cd * float((R_d**2).sum()),
            "E_sigma": cd * float((R_s**2).sum()),
            "E_a": cd * float((grad_a**2).sum()),
            "E_b": cb * float((R_b**2).sum()),
        }
        loss = terms["E_d"] + g_s * terms["E_sigma"] + g_a * terms["E_a"] + g_b * terms["E_b"]

        bar_sg = np.zeros_like(js.grad)
        idx = np.arange(p.dim)
        bar_sg[:, idx, idx] = (2 * g_s * cd * R_s)[:, None]
        g_kappa = _add(jet_vjp(kappa, cs, Jet(2 * cd * R_d, bar_sg)),
                       jet_vjp(kappa, cbb, Jet(2 * g_b * cb * R_b)))
        bar_a = -2 * cd * mask * (R_d * self.grad_z).sum(axis=1)
        g_theta = jet_vjp(theta, ca, Jet(bar_a[:, None], (2 * g_a * cd * grad_a)[:, :, None]))
        return loss, (g_theta, g_kappa), terms


def mixed_ls_empirical_loss(theta, kappa, plan, gammas, obs, problem) -> float:
    return MixedLeastSquares(problem, obs, plan, gammas).loss_and_grad((theta, kappa))[0]


# -- PINN --------------------------------------------------------------------

class Pinn:
    """Networks (a_theta, u_kappa): H1 data fit, PDE residual, boundary and gradient penalties."""

    def __init__(self, problem: Problem, obs: Observation, plan: SamplingPlan, gammas: PenaltyVector,
                 bounds: Bounds | None = None):
        if gammas.scheme != "pinn":
            raise ValueError("PINN scheme needs pinn penalties")
        if getattr(obs, "mode", "smooth") != "smooth":
            raise ValueError("PINN needs a smooth-mode observation (H1 data fit)")
        self.problem, self.obs, self.plan, self.gammas = problem, obs, plan, gammas
        self.bounds = problem.bounds if bounds is None else bounds
        self.resample(np.random.default_rng(plan.seed))

    def resample(self, rng: np.random.Generator) -> None:
        p = self.problem
        self.X, self.Y = self.plan.sample(p.dim, rng)
        self.z_X, self.grad_z = self.obs(self.X), self.obs.grad(self.X)
        self.f_X = p.f(self.X)
        self.tangent = boundary_tangents(self.Y) if p.dim == 2 else None

    def residual(self, theta: MlpParams, kappa: MlpParams, X: np.ndarray, f_X: np.ndarray) -> np.ndarray:
        ja, _ = mlp_jet(theta, X, 1)
        ju, _ = mlp_jet(kappa, X, 2)
        Pa, mask = cutoff(ja.value[:, 0], self.bounds)
        return (mask[:, None] * ja.grad[:, :, 0] * ju.grad[:, :, 0]).sum(axis=1) + Pa * ju.lap[:, 0] + f_X

    def loss_and_grad(self, params):
        theta, kappa = params
        p, (g_d, g_b, g_a) = self.problem, self.gammas.values
        cd = p.domain_volume / self.plan.n_d
        cb = p.boundary_measure / self.plan.n_b
        ja, ca = mlp_jet(theta, self.X, 1)
        ju, cu = mlp_jet(kappa, self.X, 2)
        order_b = 1 if p.dim == 2 else 0
        jb, cbb = mlp_jet(kappa, self.Y, order_b)
        a, grad_a = ja.value[:, 0], ja.grad[:, :, 0]
        u, grad_u, lap_u = ju.value[:, 0], ju.grad[:, :, 0], ju.lap[:, 0]
        Pa, mask = cutoff(a, self.bounds)
        m = mask.astype(float)
        e_val = u - self.z_X
        e_grad = grad_u - self.grad_z
        res = m * (grad_a * grad_u).sum(axis=1) + Pa * lap_u + self.f_X
        ub = jb.value[:, 0]
        tang = (jb.grad[:, :, 0] * self.tangent).sum(axis=1) if order_b else np.zeros_like(ub)
        terms = {
            "E_u": cd * float((e_val**2).sum() + (e_grad**2).sum()),
            "E_d": cd * float((res**2).sum()),
            "E_b": cb * float((ub**2).sum() + (tang**2).sum()),
            "E_a": cd * float((m[:, None] * grad_a**2).sum()),
        }
        loss = terms["E_u"] + g_d * terms["E_d"] + g_b * terms["E_b"] + g_a * terms["E_a"]

        wr = 2 * g_d * cd * res
        bar_u = Jet((2 * cd * e_val)[:, None],
                    (2 * cd * e_grad + (wr * m)[:, None] * grad_a)[:, :, None],
                    (wr * Pa)[:, None])
        bar_b = Jet((2 * g_b * cb * ub)[:, None],
                    ((2 * g_b * cb * tang)[:, None] * self.tangent)[:, :, None] if order_b else None)
        g_kappa = _add(jet_vjp(kappa, cu, bar_u), jet_vjp(kappa, cbb, bar_b))
        bar_a = Jet((wr * m * lap_u)[:, None],
                    ((wr * m)[:, None] * grad_u + (2 * g_a * cd * m)[:, None] * grad_a)[:, :, None])
        g_theta = jet_vjp(theta, ca, bar_a)
        return loss, (g_theta, g_kappa), terms


def pinn_empirical_loss(theta, kappa, plan, gammas, obs, problem) -> float:
    return Pinn(problem, obs, plan, gammas).loss_and_grad((theta, kappa))[0]


# -- training ----------------------------------------------------------------

@dataclass
class TrainLogRow:
    step: int
    loss: float
    terms: dict
    grad_norm: float


def train(loss_handle, init: tuple, config: TrainConfig):
    """First-order training loop; returns (final params tuple, list of TrainLogRow).

    ``loss_handle`` is either a callable or an object with ``loss_and_grad``;
    it maps a params tuple to (loss, grads tuple[, terms]).
    """
    fn = getattr(loss_handle, "loss_and_grad", loss_handle)
    params = tuple(init)
    shapes = [p.n_params for p in params]
    theta = np.concatenate([p.flat() for p in params])
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    rng = np.random.default_rng(config.seed)

    def unpack(vec):
        out, k = [], 0
        for p, n in zip(params, shapes):
            out.append(p.with_flat(vec[k:k + n]))
            k += n
        return tuple(out)

    def evaluate(vec):
        res = fn(unpack(vec))
        loss, grads = res[0], res[1]
        terms = res[2] if len(res) > 2 else {}
        g = np.concatenate([gp.flat() if isinstance(gp, MlpParams) else np.ravel(gp) for gp in grads])
        if not (math.isfinite(loss) and np.all(np.isfinite(g))):
            raise FloatingPointError(f"non-finite loss/gradient at step {step}: loss={loss!r}, terms={terms}")
        return loss, g, terms

    history = []
    step = 0
    for step in range(1, config.steps + 1):
        if config.resample and hasattr(loss_handle, "resample"):
            loss_handle.resample(rng)
        loss, g, terms = evaluate(theta)
        if (step - 1) % config.log_every == 0:
            history.append(TrainLogRow(step - 1, loss, dict(terms), float(np.linalg.norm(g))))
        if config.optimizer == "plain-gd":
            theta = theta - config.learning_rate * g
        else:
            m = config.beta1 * m + (1 - config.beta1) * g
            v = config.beta2 * v + (1 - config.beta2) * g**2
            mhat = m / (1 - config.beta1**step)
            vhat = v / (1 - config.beta2**step)
            theta = theta - config.learning_rate * mhat / (np.sqrt(vhat) + config.eps)
    loss, g, terms = evaluate(theta)
    history.append(TrainLogRow(config.steps, loss, dict(terms), float(np.linalg.norm(g))))
    return unpack(theta), history


def write_train_log(path, history) -> None:
    keys = sorted({k for row in history for k in row.terms})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", *keys, "grad_norm"])
        for row in history:
            w.writerow([row.step, repr(row.loss), *(repr(row.terms.get(k, "")) for k in keys), repr(row.grad_norm)])


# -- reconstruction drivers --------------------------------------------------

class ClippedNetwork:
    """P_A(a_theta) as a pointwise evaluator."""

    def __init__(self, theta: MlpParams, bounds: Bounds):
        self.theta, self.bounds = theta, bounds

    def __call__(self, X):
        return cutoff(mlp_eval(self.theta, np.atleast_2d(X))[:, 0], self.bounds)[0]


def _coefficient_errors(problem: Problem, a_eval, eval_mesh: Mesh | None = None) -> tuple[float, float]:
    mesh = eval_mesh or build_uniform_mesh(problem.dim, 64 if problem.dim == 1 else 32)
    l2 = fem.norm(lambda X: a_eval(X) - problem.a_true(X), "L2", mesh, 2)
    return l2, weighted_misfit(a_eval, problem, mesh, 2)


def _result(problem, a_eval, history, config: TrainConfig, params, extra=None) -> ReconResult:
    l2, werr = _coefficient_errors(problem, a_eval)
    mesh = build_uniform_mesh(problem.dim, 64 if problem.dim == 1 else 32)
    a_h = fem.interpolate_nodal(mesh, a_eval)
    res = ReconResult(a_h, None, [row.loss for row in history], l2, werr, config.steps, True,
                      extra={"params": params, **(extra or {})})
    res.extra["history"] = history
    return res


def reconstruct_hybrid(problem: Problem, obs, mesh: Mesh, gamma: float, config: TrainConfig, n: int = 0,
                       arch=COEFF_ARCH) -> ReconResult:
    scheme = HybridScheme(mesh, obs, problem.f, gamma, problem.bounds, n)
    theta0 = network([problem.dim, *arch, 1], config.seed, problem.bounds.mid)
    (theta,), history = train(scheme, (theta0,), config)
    a_eval = ClippedNetwork(theta, problem.bounds)
    res = _result(problem, a_eval, history, config, (theta,))
    res.u_h = scheme.state(theta)
    return res


def reconstruct_mixed(problem: Problem, obs, plan: SamplingPlan, gammas: PenaltyVector, config: TrainConfig,
                      arch_a=COEFF_ARCH, arch_sigma=STATE_ARCH) -> ReconResult:
    scheme = MixedLeastSquares(problem, obs, plan, gammas)
    theta0 = network([problem.dim, *arch_a, 1], config.seed, problem.bounds.mid)
    kappa0 = parallelize([network([problem.dim, *arch_sigma, 1], config.seed + 1 + i) for i in range(problem.dim)])
    (theta, kappa), history = train(scheme, (theta0, kappa0), config)
    return _result(problem, ClippedNetwork(theta, problem.bounds), history, config, (theta, kappa))


class _StateOnly:
    """Loss handle that freezes the coefficient network (zero gradient)."""

    def __init__(self, scheme):
        self.scheme = scheme

    def loss_and_grad(self, params):
        loss, (g_theta, g_kappa), terms = self.scheme.loss_and_grad(params)
        return loss, (g_theta.with_flat(np.zeros(g_theta.n_params)), g_kappa), terms


def reconstruct_pinn(problem: Problem, obs, plan: SamplingPlan, gammas: PenaltyVector, config: TrainConfig,
                     arch_a=COEFF_ARCH, arch_u=STATE_ARCH, warmup_steps: int | None = None) -> ReconResult:
    """PINN reconstruction; the state network is first trained alone for ``warmup_steps``
    (default steps // 4) so the coefficient does not drift into the clipped region
    while u_kappa is still far from the data."""
    scheme = Pinn(problem, obs, plan, gammas)
    theta0 = network([problem.dim, *arch_a, 1], config.seed, problem.bounds.mid)
    kappa0 = network([problem.dim, *arch_u, 1], config.seed + 1)
    warm = config.steps // 4 if warmup_steps is None else warmup_steps
    history = []
    params = (theta0, kappa0)
    if warm > 0:
        params, history = train(_StateOnly(scheme), params, replace(config, steps=warm))
    params, joint = train(scheme, params, config)
    for row in joint:
        row.step += warm
    history = history + joint
    return _result(problem, ClippedNetwork(params[0], problem.bounds), history, config, params,
                   extra={"warmup_steps": warm})
