"""P1 finite elements with the composite sub-simplex vertex quadrature.

Pointwise evaluators are vectorised callables ``g(X) -> (N,)`` for ``X`` of
shape ``(N, dim)``. Where a gradient is needed (H1 seminorms) the evaluator
must also expose ``g.grad(X) -> (N, dim)``.
"""
from __future__ import annotations

import csv
import weakref
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .mesh import Mesh, reference_rule

DENSE_LIMIT = 200
CG_RTOL = 1e-10


class AdmissibilityError(ValueError):
    """A coefficient sample fell outside the admissible (positive) range."""


class SolverError(RuntimeError):
    def __init__(self, message: str, iterations: int):
        super().__init__(f"{message} after {iterations} iterations")
        self.iterations = iterations


@dataclass(frozen=True)
class QuadRule:
    """Global Q_h rule: vertices of the level-n sub-simplices of every element."""

    level: int
    points: np.ndarray  # (Q, d)
    weights: np.ndarray  # (Q,)
    elem: np.ndarray  # (Q,)
    bary: np.ndarray  # (Q, d+1)

    def integrate(self, values: np.ndarray) -> float:
        return float(np.dot(self.weights, values))

    def element_sums(self, values: np.ndarray, n_elements: int) -> np.ndarray:
        return np.bincount(self.elem, weights=self.weights * values, minlength=n_elements)


_RULES: "weakref.WeakKeyDictionary[Mesh, dict]" = weakref.WeakKeyDictionary()
_GRADS: "weakref.WeakKeyDictionary[Mesh, np.ndarray]" = weakref.WeakKeyDictionary()


def quad_rule(mesh: Mesh, n: int) -> QuadRule:
    if n < 0:
        raise ValueError(f"quadrature level must be >= 0, got {n}")
    cache = _RULES.setdefault(mesh, {})
    if n not in cache:
        bary_ref, w_ref = reference_rule(mesh.dim, n)
        m = len(w_ref)
        verts = mesh.nodes[mesh.elements]  # (E, d+1, d)
        pts = np.einsum("qj,ejd->eqd", bary_ref, verts).reshape(-1, mesh.dim)
        weights = (mesh.volumes[:, None] * w_ref[None, :]).ravel()
        elem = np.repeat(np.arange(mesh.n_elements), m)
        bary = np.tile(bary_ref, (mesh.n_elements, 1))
        cache[n] = QuadRule(n, pts, weights, elem, bary)
    return cache[n]


def basis_gradients(mesh: Mesh) -> np.ndarray:
    """Constant gradients of the P1 hat functions on each element, shape (E, d+1, d)."""
    if mesh not in _GRADS:
        verts = mesh.nodes[mesh.elements]
        T = np.transpose(verts[:, 1:, :] - verts[:, :1, :], (0, 2, 1))  # (E, d, d)
        Tinv = np.linalg.inv(T)  # rows: gradients of lambda_1..lambda_d
        g = np.concatenate([-Tinv.sum(axis=1, keepdims=True), Tinv], axis=1)
        _GRADS[mesh] = g
    return _GRADS[mesh]


class FemFunction:
    """Nodal P1 function on a mesh; ``zero_trace`` marks membership of X_h."""

    def __init__(self, mesh: Mesh, values, zero_trace: bool = False):
        values = np.array(values, dtype=float)
        if values.shape != (mesh.n_nodes,):
            raise ValueError(f"expected {mesh.n_nodes} nodal values, got shape {values.shape}")
        if zero_trace and mesh.boundary_nodes:
            bn = list(mesh.boundary_nodes)
            if np.any(values[bn] != 0.0):
                raise ValueError("zero-trace FemFunction has nonzero boundary values")
        values.setflags(write=False)
        self.mesh = mesh
        self.values = values
        self.zero_trace = zero_trace

    def __call__(self, X) -> np.ndarray:
        elem, bary = self.mesh.locate(X)
        return np.einsum("qj,qj->q", bary, self.values[self.mesh.elements[elem]])

    def element_gradients(self) -> np.ndarray:
        G = basis_gradients(self.mesh)
        return np.einsum("ejd,ej->ed", G, self.values[self.mesh.elements])

    def grad(self, X) -> np.ndarray:
        elem, _ = self.mesh.locate(X)
        return self.element_gradients()[elem]

    def at_rule(self, rule: QuadRule) -> np.ndarray:
        return np.einsum("qj,qj->q", rule.bary, self.values[self.mesh.elements[rule.elem]])

    def to_csv(self, path) -> None:
        cols = ["node_index", "x", "y"][: self.mesh.dim + 1] + ["value"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for i, (p, v) in enumerate(zip(self.mesh.nodes, self.values)):
                w.writerow([i, *(repr(float(c)) for c in p), repr(float(v))])


def _eval(g, rule: QuadRule, mesh: Mesh) -> np.ndarray:
    if isinstance(g, FemFunction):
        return g.at_rule(rule)
    if np.isscalar(g):
        return np.full(len(rule.weights), float(g))
    return np.broadcast_to(np.asarray(g(rule.points), dtype=float), rule.weights.shape)


def _eval_grad(g, rule: QuadRule) -> np.ndarray:
    if isinstance(g, FemFunction):
        return g.element_gradients()[rule.elem]
    return np.asarray(g.grad(rule.points), dtype=float).reshape(len(rule.weights), -1)


def quadrature_integrate(mesh: Mesh, g, n: int) -> float:
    rule = quad_rule(mesh, n)
    return rule.integrate(_eval(g, rule, mesh))


def inner_product_h(mesh: Mesh, w, v, n: int) -> float:
    """Discrete inner product (w, v)_h = Q_h(w v)."""
    rule = quad_rule(mesh, n)
    return rule.integrate(_eval(w, rule, mesh) * _eval(v, rule, mesh))


def element_coefficient_weights(mesh: Mesh, coeff_at_qp: np.ndarray, rule: QuadRule) -> np.ndarray:
    """abar_K = Q_K(coeff); the P1 stiffness depends on coeff only through these."""
    if np.any(~np.isfinite(coeff_at_qp)) or np.any(coeff_at_qp <= 0.0):
        bad = int(np.argmin(np.where(np.isfinite(coeff_at_qp), coeff_at_qp, -np.inf)))
        raise AdmissibilityError(
            f"coefficient sample {coeff_at_qp[bad]!r} at {rule.points[bad].tolist()} is not positive"
        )
    return rule.element_sums(coeff_at_qp, mesh.n_elements)


def stiffness_from_weights(mesh: Mesh, abar: np.ndarray) -> sp.csr_matrix:
    G = basis_gradients(mesh)
    local = np.einsum("e,eid,ejd->eij", abar, G, G)
    E = mesh.elements
    k = E.shape[1]
    rows = np.repeat(E, k, axis=1).ravel()
    cols = np.tile(E, (1, k)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes,) * 2).tocsr()


def assemble_stiffness(mesh: Mesh, coeff, n: int = 0) -> sp.csr_matrix:
    """Full (all-node) weighted stiffness matrix with entries (coeff grad phi_j, grad phi_i)_h."""
    rule = quad_rule(mesh, n)
    return stiffness_from_weights(mesh, element_coefficient_weights(mesh, _eval(coeff, rule, mesh), rule))


def load_from_values(mesh: Mesh, values: np.ndarray, rule: QuadRule) -> np.ndarray:
    idx = mesh.elements[rule.elem]  # (Q, d+1)
    contrib = (rule.weights * values)[:, None] * rule.bary
    return np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=mesh.n_nodes)


def assemble_load(mesh: Mesh, f, n: int = 0) -> np.ndarray:
    rule = quad_rule(mesh, n)
    return load_from_values(mesh, _eval(f, rule, mesh), rule)


def assemble_mass(mesh: Mesh) -> sp.csr_matrix:
    """Consistent P1 mass matrix (exact)."""
    d = mesh.dim
    ref = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    local = mesh.volumes[:, None, None] * ref[None]
    E = mesh.elements
    k = d + 1
    rows = np.repeat(E, k, axis=1).ravel()
    cols = np.tile(E, (1, k)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes,) * 2).tocsr()


def pcg(A: sp.spmatrix, b: np.ndarray, rtol: float = CG_RTOL, maxiter: int | None = None) -> tuple[np.ndarray, int]:
    """Jacobi-preconditioned conjugate gradients for SPD ``A``."""
    n = A.shape[0]
    maxiter = 10 * n if maxiter is None else maxiter
    dinv = 1.0 / A.diagonal()
    x = np.zeros(n)
    r = b.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return x, 0
    z = dinv * r
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= rtol * bnorm:
            r = b - A @ x  # guard against drift of the recursive residual
            if np.linalg.norm(r) <= rtol * bnorm:
                return x, it
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError("conjugate gradient did not reach relative residual "
                      f"{rtol:g} (last {np.linalg.norm(r) / bnorm:.3e})", maxiter)


class DirichletSolver:
    """Factorises the interior block of a stiffness matrix once; solves many right-hand sides."""

    def __init__(self, mesh: Mesh, K: sp.spmatrix):
        self.mesh = mesh
        self.interior = mesh.interior_nodes
        self.K_ii = K[self.interior][:, self.interior].tocsr()
        self._chol = None
        if len(self.interior) < DENSE_LIMIT:
            try:
                self._chol = scipy.linalg.cho_factor(self.K_ii.toarray(), lower=True)
            except np.linalg.LinAlgError as exc:
                raise SolverError(f"Cholesky factorisation failed: {exc}", 0) from exc

    def solve(self, rhs_full: np.ndarray) -> np.ndarray:
        """Solve with zero Dirichlet data; ``rhs_full`` is indexed by all nodes."""
        b = rhs_full[self.interior]
        out = np.zeros(self.mesh.n_nodes)
        if len(b) == 0:
            return out
        if self._chol is not None:
            x = scipy.linalg.cho_solve(self._chol, b)
            res = np.linalg.norm(self.K_ii @ x - b)
            if res > CG_RTOL * np.linalg.norm(b):
                raise SolverError(f"dense solve residual {res:.3e} too large", 0)
        else:
            x, _ = pcg(self.K_ii, b)
        out[self.interior] = x
        return out


def solve_dirichlet(mesh: Mesh, coeff, f, n: int = 0, load_level: int | None = None) -> FemFunction:
    """Galerkin solution of -div(coeff grad u) = f, u = 0 on the boundary.

    ``n`` sets the stiffness quadrature level, ``load_level`` (default ``n``)
    the level used for (f, phi_i)_h.
    """
    K = assemble_stiffness(mesh, coeff, n)
    F = assemble_load(mesh, f, n if load_level is None else load_level)
    return FemFunction(mesh, DirichletSolver(mesh, K).solve(F), zero_trace=True)


def _boundary_l2_sq(g, mesh: Mesh, n: int) -> float:
    if mesh.dim == 1:
        v = _point_values(g, np.array([[0.0], [1.0]]))
        return float(np.sum(v**2))
    m = mesh.cells_per_side * 2**n
    t = np.linspace(0.0, 1.0, m + 1)
    total = 0.0
    for side in range(4):
        z = np.zeros_like(t) if side % 2 == 0 else np.ones_like(t)
        pts = np.column_stack([t, z]) if side < 2 else np.column_stack([z, t])
        v = _point_values(g, pts) ** 2
        total += (v[:-1] + v[1:]).sum() / (2 * m)
    return float(total)


def _point_values(g, X: np.ndarray) -> np.ndarray:
    if np.isscalar(g):
        return np.full(len(X), float(g))
    return np.broadcast_to(np.asarray(g(X), dtype=float), (len(X),))


def norm(g, kind: str, mesh: Mesh, n: int = 0) -> float:
    """L2, H1semi or L2boundary norm of a FemFunction or evaluator via Q_h at level n."""
    rule = quad_rule(mesh, n)
    if kind == "L2":
        return float(np.sqrt(max(rule.integrate(_eval(g, rule, mesh) ** 2), 0.0)))
    if kind == "H1semi":
        return float(np.sqrt(max(rule.integrate((_eval_grad(g, rule) ** 2).sum(axis=1)), 0.0)))
    if kind == "L2boundary":
        return float(np.sqrt(_boundary_l2_sq(g, mesh, n)))
    raise ValueError(f"unknown norm kind {kind!r}")


def error_norm(uh: FemFunction, exact, kind: str, n: int = 3) -> float:
    """Norm of uh - exact; the exact function needs ``grad`` for H1semi."""
    rule = quad_rule(uh.mesh, n)
    if kind == "L2":
        return float(np.sqrt(rule.integrate((uh.at_rule(rule) - exact(rule.points)) ** 2)))
    if kind == "H1semi":
        diff = uh.element_gradients()[rule.elem] - np.asarray(exact.grad(rule.points)).reshape(len(rule.weights), -1)
        return float(np.sqrt(rule.integrate((diff**2).sum(axis=1))))
    raise ValueError(f"unknown norm kind {kind!r}")


def interpolate_nodal(mesh: Mesh, g, zero_trace: bool = False) -> FemFunction:
    vals = _point_values(g, mesh.nodes).copy()
    if zero_trace:
        vals[list(mesh.boundary_nodes)] = 0.0
    return FemFunction(mesh, vals, zero_trace=zero_trace)


def l2_projection(mesh: Mesh, g, n: int = 4) -> FemFunction:
    """L2 projection onto V_h; mass and load share the level-n rule so V_h is reproduced exactly."""
    rule = quad_rule(mesh, n)
    idx = mesh.elements[rule.elem]
    vals = rule.weights[:, None, None] * rule.bary[:, :, None] * rule.bary[:, None, :]
    rows = np.repeat(idx, idx.shape[1], axis=1).ravel()
    cols = np.tile(idx, (1, idx.shape[1])).ravel()
    M = sp.coo_matrix((vals.ravel(), (rows, cols)), shape=(mesh.n_nodes,) * 2).tocsr()
    b = load_from_values(mesh, _eval(g, rule, mesh), rule)
    x, _ = pcg(M, b, rtol=1e-13)
    return FemFunction(mesh, x)
