"""Tanh multilayer perceptrons with exact input/parameter derivatives.

The network is the usual recursion: tanh on the hidden layers, affine output.
Input derivatives are propagated forward as a jet (value, gradient, summed
second derivatives = Laplacian); ``jet_vjp`` runs the exact reverse sweep of
that jet computation, so any loss built from values, gradients and
Laplacians at sample points gets an exact parameter gradient.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import block_diag


@dataclass(frozen=True)
class Bounds:
    lower: float
    upper: float

    def __post_init__(self):
        if not (0.0 < self.lower < self.upper):
            raise ValueError(f"need 0 < lower < upper, got ({self.lower}, {self.upper})")

    @property
    def mid(self) -> float:
        return 0.5 * (self.lower + self.upper)


@dataclass(frozen=True, eq=False)
class MlpParams:
    weights: tuple  # A^(l), shape (d_l, d_{l-1})
    biases: tuple  # b^(l), shape (d_l,)
    depth: int = field(init=False)
    width: int = field(init=False)
    bound: float = field(init=False)

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=float) for w in self.weights)
        bs = tuple(np.array(b, dtype=float).reshape(-1) for b in self.biases)
        if len(ws) != len(bs) or not ws:
            raise ValueError("weights and biases must be non-empty and of equal length")
        for l, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {l}: weight {w.shape} and bias {b.shape} disagree")
            if l and w.shape[1] != ws[l - 1].shape[0]:
                raise ValueError(f"layer {l}: input size {w.shape[1]} != previous output {ws[l - 1].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l}: non-finite parameters")
            w.setflags(write=False)
            b.setflags(write=False)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "depth", len(ws))
        object.__setattr__(self, "width", max(self.layer_dims))
        object.__setattr__(self, "bound", self._max_abs())

    def _max_abs(self) -> float:
        return float(max(max(np.abs(w).max(initial=0.0), np.abs(b).max(initial=0.0))
                         for w, b in zip(self.weights, self.biases)))

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def check_invariants(self) -> bool:
        return self.width == max(self.layer_dims) and self.bound == self._max_abs()

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def with_flat(self, vec: np.ndarray) -> "MlpParams":
        ws, bs, k = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[k:k + w.size].reshape(w.shape))
            k += w.size
            bs.append(vec[k:k + b.size])
            k += b.size
        return MlpParams(tuple(ws), tuple(bs))


def init_mlp(layer_dims: Sequence[int], seed: int, rng: np.random.Generator | None = None) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed) if rng is None else rng
    ws, bs = [], []
    for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
        lim = np.sqrt(6.0 / (d_in + d_out))
        ws.append(rng.uniform(-lim, lim, size=(d_out, d_in)))
        bs.append(np.zeros(d_out))
    return MlpParams(tuple(ws), tuple(bs))


def constant_mlp(layer_dims: Sequence[int], value: float) -> MlpParams:
    """Zero weights and hidden biases; output bias ``value``."""
    ws = [np.zeros((o, i)) for i, o in zip(layer_dims[:-1], layer_dims[1:])]
    bs = [np.zeros(o) for o in layer_dims[1:]]
    bs[-1] = np.full(layer_dims[-1], float(value))
    return MlpParams(tuple(ws), tuple(bs))


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != params.input_dim:
        raise ValueError(f"input dimension {X.shape[1]} != network input {params.input_dim}")
    return X, single


def mlp_eval(params: MlpParams, x) -> np.ndarray:
    X, single = _as_batch(params, x)
    v = X
    for A, b in zip(params.weights[:-1], params.biases[:-1]):
        v = np.tanh(v @ A.T + b)
    out = v @ params.weights[-1].T + params.biases[-1]
    return out[0] if single else out


def hidden_activations(params: MlpParams, x) -> list[np.ndarray]:
    X, _ = _as_batch(params, x)
    acts, v = [], X
    for A, b in zip(params.weights[:-1], params.biases[:-1]):
        v = np.tanh(v @ A.T + b)
        acts.append(v)
    return acts


@dataclass
class Jet:
    """Network outputs at N points: value (N, out), grad (N, d, out), lap (N, out)."""

    value: np.ndarray
    grad: np.ndarray | None = None
    lap: np.ndarray | None = None


def mlp_jet(params: MlpParams, X: np.ndarray, order: int = 1) -> tuple[Jet, list]:
    """Forward jet up to ``order`` (0 value, 1 gradient, 2 Laplacian) plus a cache for ``jet_vjp``."""
    X, _ = _as_batch(params, X)
    N, d = X.shape
    V = X
    T = np.broadcast_to(np.eye(d), (N, d, d)) if order >= 1 else None
    S = np.zeros((N, d)) if order >= 2 else None
    cache = []
    for A, b in zip(params.weights[:-1], params.biases[:-1]):
        rho = np.tanh(V @ A.T + b)
        r1 = 1.0 - rho**2
        ent = {"V": V, "T": T, "S": S, "rho": rho, "r1": r1}
        Vn, Tn, Sn = rho, None, None
        if order >= 1:
            dZ = T @ A.T
            ent["dZ"] = dZ
            Tn = r1[:, None, :] * dZ
            if order >= 2:
                r2 = -2.0 * rho * r1
                SZ = S @ A.T
                ent.update(r2=r2, r3=(6.0 * rho**2 - 2.0) * r1, SZ=SZ, dZ2=(dZ**2).sum(axis=1))
                Sn = r2 * ent["dZ2"] + r1 * SZ
        cache.append(ent)
        V, T, S = Vn, Tn, Sn
    A, b = params.weights[-1], params.biases[-1]
    cache.append({"V": V, "T": T, "S": S})
    jet = Jet(V @ A.T + b, None if T is None else T @ A.T, None if S is None else S @ A.T)
    return jet, cache


def jet_vjp(params: MlpParams, cache: list, bar: Jet) -> MlpParams:
    """Parameter gradient of sum(bar.value*value + bar.grad*grad + bar.lap*lap)."""
    L = params.depth
    gW, gB = [None] * L, [None] * L
    ent = cache[-1]
    A = params.weights[-1]
    bV, bT, bS = bar.value, bar.grad, bar.lap
    if bV is None:
        bV = np.zeros((ent["V"].shape[0], A.shape[0]))
    gA = bV.T @ ent["V"]
    if bT is not None:
        gA = gA + np.einsum("nmo,nmi->oi", bT, ent["T"])
    if bS is not None:
        gA = gA + bS.T @ ent["S"]
    gW[-1], gB[-1] = gA, bV.sum(axis=0)
    bV = bV @ A
    bT = None if bT is None else bT @ A
    bS = None if bS is None else bS @ A
    for l in range(L - 2, -1, -1):
        ent = cache[l]
        A = params.weights[l]
        r1 = ent["r1"]
        bz = bV * r1
        bdZ = bSZ = None
        if bT is not None:
            bz = bz + (bT * ent["dZ"]).sum(axis=1) * ent.get("r2", -2.0 * ent["rho"] * r1)
            bdZ = bT * r1[:, None, :]
        if bS is not None:
            bz = bz + bS * (ent["r3"] * ent["dZ2"] + ent["r2"] * ent["SZ"])
            extra = 2.0 * (bS * ent["r2"])[:, None, :] * ent["dZ"]
            bdZ = extra if bdZ is None else bdZ + extra
            bSZ = bS * r1
        gA = bz.T @ ent["V"]
        if bdZ is not None:
            gA = gA + np.einsum("nmo,nmi->oi", bdZ, ent["T"])
        if bSZ is not None:
            gA = gA + bSZ.T @ ent["S"]
        gW[l], gB[l] = gA, bz.sum(axis=0)
        bV = bz @ A
        bT = None if bdZ is None else bdZ @ A
        bS = None if bSZ is None else bSZ @ A
    return MlpParams(tuple(gW), tuple(gB))


def mlp_derivatives(params: MlpParams, x, order: str = "grad") -> np.ndarray:
    """Exact input gradient (Jacobian for vector outputs) or Laplacian of a scalar network."""
    X, single = _as_batch(params, x)
    if order == "grad":
        jet, _ = mlp_jet(params, X, 1)
        g = jet.grad[..., 0] if params.output_dim == 1 else np.transpose(jet.grad, (0, 2, 1))
        return g[0] if single else g
    if order == "laplacian":
        if params.output_dim != 1:
            raise ValueError("laplacian requires a scalar-output network")
        jet, _ = mlp_jet(params, X, 2)
        return jet.lap[0, 0] if single else jet.lap[:, 0]
    raise ValueError(f"unknown derivative order {order!r}")


LossOnJet = Callable[[Jet], "tuple[float, Jet]"]


def mlp_loss_gradient(params: MlpParams, X: np.ndarray, loss: LossOnJet, order: int = 1) -> tuple[float, MlpParams]:
    """Value and parameter gradient of ``loss(jet)``.

    ``loss`` receives the network jet at ``X`` and returns the scalar value
    together with its cotangent jet (partials with respect to value, grad and
    lap); the chain rule through the network is applied here.
    """
    jet, cache = mlp_jet(params, X, order)
    value, bar = loss(jet)
    if np.ndim(value) != 0:
        raise ValueError(f"loss must be scalar, got shape {np.shape(value)}")
    return float(value), jet_vjp(params, cache, bar)


def parallelize(parts: Sequence[MlpParams]) -> MlpParams:
    """Stack networks of equal depth and input into one with block-diagonal weights."""
    if not parts:
        raise ValueError("need at least one network")
    L, d = parts[0].depth, parts[0].input_dim
    for p in parts:
        if p.depth != L:
            raise ValueError(f"depth mismatch: {p.depth} != {L}")
        if p.input_dim != d:
            raise ValueError(f"input dimension mismatch: {p.input_dim} != {d}")
    ws = [np.vstack([p.weights[0] for p in parts])]
    for l in range(1, L):
        ws.append(block_diag(*[p.weights[l] for p in parts]))
    bs = [np.concatenate([p.biases[l] for p in parts]) for l in range(L)]
    return MlpParams(tuple(ws), tuple(bs))


def cutoff(value, bounds: Bounds):
    """P_A(v) = min(max(c0, v), c1) and the derivative mask (True inside the closed box)."""
    v = np.asarray(value, dtype=float)
    clipped = np.clip(v, bounds.lower, bounds.upper)
    active = (v >= bounds.lower) & (v <= bounds.upper)
    if v.ndim == 0:
        return float(clipped), bool(active)
    return clipped, active


def derivative_bounds(params: MlpParams) -> dict:
    """Shape of the tanh-network bounds (constant c = 1) for reporting."""
    R, W, L = params.bound, params.width, params.depth
    return {
        "sup": R * (W + 1),
        "w1inf": R**L * W ** (L - 1),
        "w2inf": R ** (2 * L) * W ** (2 * L - 2),
        "w3inf": R ** (3 * L) * W ** (3 * L - 3),
    }


def lipschitz_constant(depth: int, width: int, bound: float) -> float:
    """Parameter-to-function Lipschitz factor 2 L R^(L-1) W^L in the sup norm."""
    return 2.0 * depth * bound ** (depth - 1) * width**depth


def save_checkpoint(path, params: MlpParams, seed: int, step: int) -> None:
    payload = {
        "seed": seed,
        "step": step,
        "layer_dims": params.layer_dims,
        "weights": [w.ravel().tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> tuple[MlpParams, int, int]:
    with open(path) as fh:
        payload = json.load(fh)
    dims = payload["layer_dims"]
    ws = [np.array(w).reshape(o, i) for w, i, o in zip(payload["weights"], dims[:-1], dims[1:])]
    params = MlpParams(tuple(ws), tuple(np.array(b) for b in payload["biases"]))
    return params, payload["seed"], payload["step"]
