"""Manufactured benchmark problems, noisy observations and stability diagnostics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import sympy

from . import fem
from .mesh import Mesh
from .nn import Bounds

X_SYM = sympy.symbols("x y", real=True)
_GL_NODES = 48


class ClosedForm:
    """Vectorised closed-form function of (x[, y]) with exact gradient and Laplacian."""

    def __init__(self, expr, dim: int):
        self.expr = sympy.sympify(expr)
        self.dim = dim
        syms = X_SYM[:dim]
        grads = [sympy.diff(self.expr, s) for s in syms]
        lap = sum(sympy.diff(g, s) for g, s in zip(grads, syms))
        self._f = sympy.lambdify(syms, self.expr, "numpy")
        self._g = [sympy.lambdify(syms, g, "numpy") for g in grads]
        self._lap = sympy.lambdify(syms, lap, "numpy")
        self.grad_exprs = grads
        self.lap_expr = lap

    def _call(self, fn, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = fn(*(X[:, i] for i in range(self.dim)))
        return np.broadcast_to(np.asarray(out, dtype=float), (X.shape[0],)).copy()

    def __call__(self, X) -> np.ndarray:
        return self._call(self._f, X)

    def grad(self, X) -> np.ndarray:
        return np.column_stack([self._call(g, X) for g in self._g])

    def lap(self, X) -> np.ndarray:
        return self._call(self._lap, X)

    def __repr__(self):
        return f"ClosedForm({self.expr})"


@dataclass(frozen=True, eq=False)
class Problem:
    name: str
    dim: int
    a_true: ClosedForm
    u_true: ClosedForm
    f: ClosedForm
    bounds: Bounds
    beta: float

    @property
    def domain_volume(self) -> float:
        return 1.0

    @property
    def boundary_measure(self) -> float:
        return 2.0 if self.dim == 1 else 4.0

    def weight(self, X) -> np.ndarray:
        """f u + a |grad u|^2, the weight of the stability functional."""
        return self.f(X) * self.u_true(X) + self.a_true(X) * (self.u_true.grad(X) ** 2).sum(axis=1)


def sample_boundary(dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. uniform points on the boundary of the unit interval / square."""
    if dim == 1:
        return rng.integers(0, 2, size=n).astype(float)[:, None]
    side = rng.integers(0, 4, size=n)
    t = rng.uniform(size=n)
    fixed = (side % 2).astype(float)
    pts = np.where((side < 2)[:, None], np.column_stack([t, fixed]), np.column_stack([fixed, t]))
    return pts


def boundary_tangents(Y: np.ndarray) -> np.ndarray:
    """Unit tangent at boundary points of the unit square (edges y=0,1 -> e_x, x=0,1 -> e_y)."""
    on_horizontal = np.isclose(Y[:, 1], 0.0) | np.isclose(Y[:, 1], 1.0)
    return np.where(on_horizontal[:, None], [[1.0, 0.0]], [[0.0, 1.0]])


def manufacture(a_true, u_true, bounds: Bounds, dim: int, beta: float = 0.0, name: str = "custom",
                seed: int = 0) -> Problem:
    """Attach f = -div(a grad u) and validate the problem invariants."""
    a = a_true if isinstance(a_true, ClosedForm) else ClosedForm(a_true, dim)
    u = u_true if isinstance(u_true, ClosedForm) else ClosedForm(u_true, dim)
    syms = X_SYM[:dim]
    f_expr = -sum(sympy.diff(a.expr * sympy.diff(u.expr, s), s) for s in syms)
    f = ClosedForm(f_expr, dim)
    rng = np.random.default_rng(seed)

    X = rng.uniform(size=(10_000, dim))
    av = a(X)
    if av.min() < bounds.lower or av.max() > bounds.upper:
        raise ValueError(f"a_true leaves [{bounds.lower}, {bounds.upper}]: range [{av.min()}, {av.max()}]")
    Yb = sample_boundary(dim, 200, rng)
    if np.abs(u(Yb)).max() > 1e-12:
        raise ValueError("u_true does not vanish on the boundary")
    Xr = rng.uniform(size=(1000, dim))
    residual = -((a.grad(Xr) * u.grad(Xr)).sum(axis=1) + a(Xr) * u.lap(Xr)) - f(Xr)
    if np.abs(residual).max() > 1e-10:
        raise ValueError(f"manufactured residual {np.abs(residual).max():.3e} too large")
    return Problem(name, dim, a, u, f, bounds, beta)


x, y = X_SYM
_REGISTRY = {
    "1d-const": dict(a=1, u=x * (1 - x), bounds=(0.5, 2.0), dim=1, beta=0.0),
    "1d-poisson": dict(a=1, u=x * (1 - x) / 2, bounds=(0.5, 2.0), dim=1, beta=0.0),
    "1d-affine-a": dict(a=1 + x / 2, u=x * (1 - x), bounds=(0.5, 2.0), dim=1, beta=0.0),
    "1d-smooth-a": dict(a=1 + sympy.Rational(3, 10) * sympy.sin(2 * sympy.pi * x), u=x * (1 - x),
                        bounds=(0.5, 2.0), dim=1, beta=0.0),
    "2d-sine": dict(a=1, u=sympy.sin(sympy.pi * x) * sympy.sin(sympy.pi * y), bounds=(0.5, 2.0), dim=2, beta=2.0),
    "2d-affine-a": dict(a=1 + (x + y) / 4, u=sympy.sin(sympy.pi * x) * sympy.sin(sympy.pi * y),
                        bounds=(0.5, 2.0), dim=2, beta=2.0),
}
_CACHE: dict[str, Problem] = {}


def problem_ids() -> list[str]:
    return sorted(_REGISTRY)


def get_problem(problem_id: str) -> Problem:
    if problem_id not in _REGISTRY:
        raise KeyError(f"unknown problem id {problem_id!r}; known: {', '.join(problem_ids())}")
    if problem_id not in _CACHE:
        e = _REGISTRY[problem_id]
        _CACHE[problem_id] = manufacture(e["a"], e["u"], Bounds(*e["bounds"]), e["dim"], e["beta"], problem_id)
    return _CACHE[problem_id]


# -- observations ------------------------------------------------------------

def gauss_legendre_box(dim: int, n: int = _GL_NODES) -> tuple[np.ndarray, np.ndarray]:
    t, w = np.polynomial.legendre.leggauss(n)
    t, w = (t + 1) / 2, w / 2
    if dim == 1:
        return t[:, None], w
    T1, T2 = np.meshgrid(t, t, indexing="ij")
    return np.column_stack([T1.ravel(), T2.ravel()]), np.outer(w, w).ravel()


class SmoothPerturbation:
    """Sum of three products of seeded sine modes, with closed-form gradient."""

    def __init__(self, dim: int, seed: int, scale: float = 1.0):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.coef = rng.standard_normal(3)
        self.freq = rng.integers(1, 4, size=(3, dim)) * np.pi
        self.phase = rng.uniform(0.0, 2 * np.pi, size=(3, dim))
        self.scale = scale

    def _factors(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        arg = X[:, None, :] * self.freq[None] + self.phase[None]  # (N, 3, d)
        return np.sin(arg), np.cos(arg) * self.freq[None]

    def __call__(self, X) -> np.ndarray:
        s, _ = self._factors(X)
        return self.scale * (s.prod(axis=2) @ self.coef)

    def grad(self, X) -> np.ndarray:
        s, c = self._factors(X)
        out = []
        for i in range(self.dim):
            others = np.prod(np.delete(s, i, axis=2), axis=2) if self.dim > 1 else 1.0
            out.append((c[:, :, i] * others) @ self.coef)
        return self.scale * np.column_stack(out)


def _tag_norm(g, dim: int, tag: str) -> float:
    X, w = gauss_legendre_box(dim)
    sq = w @ g(X) ** 2
    if tag == "H1":
        sq += w @ (g.grad(X) ** 2).sum(axis=1)
    elif tag != "L2":
        raise ValueError(f"unknown norm tag {tag!r}")
    return float(np.sqrt(sq))


class _Sum:
    def __init__(self, u, eta):
        self.u, self.eta = u, eta

    def __call__(self, X):
        return self.u(X) + self.eta(X)

    def grad(self, X):
        return self.u.grad(X) + self.eta.grad(X)


@dataclass(frozen=True, eq=False)
class Observation:
    z: object  # evaluator with grad
    noise: object  # z - u_true, evaluator with grad
    delta: float
    norm_tag: str
    seed: int
    mode: str
    requested_tag: str

    def __call__(self, X):
        return self.z(X)

    def grad(self, X):
        return self.z.grad(X)

    def measured_noise(self, dim: int) -> float:
        if self.mode == "nodal":
            return _nodal_norm(self.noise, self.norm_tag)
        return _tag_norm(self.noise, dim, self.norm_tag)


def _nodal_norm(xi: fem.FemFunction, tag: str) -> float:
    v = xi.values
    M = fem.assemble_mass(xi.mesh)
    sq = v @ (M @ v)
    if tag == "H1":
        sq += v @ (fem.assemble_stiffness(xi.mesh, 1.0, 0) @ v)
    return float(np.sqrt(sq))


def make_observation(problem: Problem, delta: float, norm_tag: str = "L2", mode: str = "smooth",
                     seed: int = 0, mesh: Mesh | None = None) -> Observation:
    """z = u_true + noise with the noise scaled to have tagged norm ``delta``.

    ``norm_tag='H3/2'`` is accepted and calibrated in H1 (recorded in
    ``requested_tag``).
    """
    if delta < 0:
        raise ValueError(f"noise level must be nonnegative, got {delta}")
    requested = norm_tag
    if norm_tag == "H3/2":
        norm_tag = "H1"
    if norm_tag not in ("L2", "H1"):
        raise ValueError(f"unknown norm tag {requested!r}")
    if mode == "smooth":
        eta = SmoothPerturbation(problem.dim, seed)
        nrm = _tag_norm(eta, problem.dim, norm_tag)
        eta.scale = delta / nrm
        noise = eta
    elif mode == "nodal":
        if mesh is None:
            raise ValueError("nodal-noise observations need a mesh")
        rng = np.random.default_rng(seed)
        xi = fem.FemFunction(mesh, rng.standard_normal(mesh.n_nodes))
        nrm = _nodal_norm(xi, norm_tag)
        noise = fem.FemFunction(mesh, xi.values * (delta / nrm))
    else:
        raise ValueError(f"unknown observation mode {mode!r}")
    return Observation(_Sum(problem.u_true, noise), noise, float(delta), norm_tag, seed, mode, requested)


# -- stability diagnostics ---------------------------------------------------

def _sample_grid(dim: int, n_samples: int) -> np.ndarray:
    if dim == 1:
        return np.linspace(0.0, 1.0, n_samples)[:, None]
    m = int(np.ceil(np.sqrt(n_samples)))
    t = np.linspace(0.0, 1.0, m)
    T1, T2 = np.meshgrid(t, t, indexing="ij")
    return np.column_stack([T1.ravel(), T2.ravel()])


def distance_to_boundary(X: np.ndarray) -> np.ndarray:
    return np.minimum(X, 1.0 - X).min(axis=1)


def pc_beta_check(problem: Problem, n_samples: int = 1001, beta: float | None = None) -> tuple[float, float]:
    """Minimum of the weight f u + a|grad u|^2 and of weight / dist^beta over a sample grid.

    Points on the boundary are excluded from the ratio when beta > 0.
    """
    if n_samples < 100:
        raise ValueError("pc_beta_check needs at least 100 samples")
    beta = problem.beta if beta is None else beta
    X = _sample_grid(problem.dim, n_samples)
    w = problem.weight(X)
    dist = distance_to_boundary(X)
    if beta > 0:
        keep = dist > 0
        ratio = w[keep] / dist[keep] ** beta
    else:
        ratio = w
    return float(w.min()), float(ratio.min())


def certify_beta(problem: Problem, n_samples: int = 1001) -> float:
    """0 when the weight is bounded away from zero on the sample, otherwise 2 if that holds."""
    min_weight, _ = pc_beta_check(problem, n_samples, 0.0)
    if min_weight > 0:
        return 0.0
    if pc_beta_check(problem, n_samples, 2.0)[1] > 0:
        return 2.0
    raise ValueError(f"positivity condition fails for beta in (0, 2) on {problem.name}")


def weighted_misfit(a_candidate, problem: Problem, mesh: Mesh, n: int = 2) -> float:
    """Q_h of ((a_true - a)/a_true)^2 (f u + a_true |grad u|^2)."""
    rule = fem.quad_rule(mesh, n)
    P = rule.points
    a_c = fem._eval(a_candidate, rule, mesh)
    if np.any(a_c <= 0):
        raise fem.AdmissibilityError("candidate coefficient is not positive on quadrature points")
    at = problem.a_true(P)
    return rule.integrate(((at - a_c) / at) ** 2 * problem.weight(P))


def holder_stability_ratios(problem: Problem, mesh: Mesh, n_perturbations: int = 30, seed: int = 0,
                            amplitude: float = 0.2, n: int = 2) -> np.ndarray:
    """||a_true - a||_L2^2 / ||grad(u_h(a) - u_h(a_true))||^(1/(1+beta)) over random admissible a."""
    rng = np.random.default_rng(seed)
    u_ref = fem.solve_dirichlet(mesh, problem.a_true, problem.f, n)
    lo, hi = problem.bounds.lower, problem.bounds.upper
    ratios = []
    for k in range(n_perturbations):
        pert = SmoothPerturbation(problem.dim, int(rng.integers(2**31)))
        pert.scale = amplitude / max(_tag_norm(pert, problem.dim, "L2"), 1e-300)

        def a_k(X, pert=pert):
            return np.clip(problem.a_true(X) + pert(X), lo, hi)

        u_k = fem.solve_dirichlet(mesh, a_k, problem.f, n)
        num = fem.norm(lambda X: problem.a_true(X) - a_k(X), "L2", mesh, n) ** 2
        diff = fem.FemFunction(mesh, u_k.values - u_ref.values)
        den = fem.norm(diff, "H1semi", mesh, n) ** (1.0 / (1.0 + problem.beta))
        ratios.append(num / den)
    return np.array(ratios)
