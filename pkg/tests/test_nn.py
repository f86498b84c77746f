import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coefid.nn import (Bounds, Jet, MlpParams, constant_mlp, cutoff, derivative_bounds, hidden_activations,
                       init_mlp, lipschitz_constant, load_checkpoint, mlp_derivatives, mlp_eval, mlp_jet,
                       mlp_loss_gradient, parallelize, save_checkpoint)

from helpers import fd_gradient, rel_err


def test_bounds_validation():
    with pytest.raises(ValueError):
        Bounds(0.0, 1.0)
    with pytest.raises(ValueError):
        Bounds(2.0, 1.0)
    assert Bounds(0.5, 2.0).mid == 1.25


def test_params_invariants():
    p = init_mlp([2, 8, 5, 1], seed=3)
    assert p.layer_dims == [2, 8, 5, 1]
    assert p.depth == 3 and p.width == 8
    assert p.bound == max(np.abs(np.concatenate([p.flat()])).max(), 0.0)
    assert p.check_invariants()
    assert p.n_params == 2 * 8 + 8 + 8 * 5 + 5 + 5 + 1
    with pytest.raises(ValueError):
        MlpParams((np.array([[np.nan]]),), (np.zeros(1),))


def test_glorot_init_range_and_seed():
    p = init_mlp([3, 10, 1], seed=7)
    lim = np.sqrt(6 / 13)
    assert np.abs(p.weights[0]).max() <= lim
    assert all(np.all(b == 0) for b in p.biases)
    np.testing.assert_array_equal(p.flat(), init_mlp([3, 10, 1], seed=7).flat())
    assert not np.array_equal(p.flat(), init_mlp([3, 10, 1], seed=8).flat())


def test_trivial_evaluations():
    z = constant_mlp([2, 4, 1], 0.0)
    assert np.all(mlp_eval(z, np.random.default_rng(0).uniform(size=(5, 2))) == 0.0)
    A, b = np.array([[1.5, -2.0]]), np.array([0.25])
    aff = MlpParams((A,), (b,))
    x = np.array([0.3, 0.7])
    assert mlp_eval(aff, x)[0] == pytest.approx(1.5 * 0.3 - 2.0 * 0.7 + 0.25)
    np.testing.assert_allclose(mlp_derivatives(aff, x, "grad").ravel(), A[0])
    assert float(mlp_derivatives(aff, x, "laplacian")) == 0.0
    with pytest.raises(ValueError):
        mlp_eval(aff, np.zeros(3))


def test_hidden_activations_bounded():
    p = init_mlp([2, 6, 6, 1], 1)
    p = p.with_flat(5 * p.flat() + 1)
    for act in hidden_activations(p, np.random.default_rng(1).normal(size=(100, 2)) * 10):
        assert np.abs(act).max() <= 1.0


@pytest.mark.parametrize("seed", range(10))
def test_input_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    d = 1 + seed % 2
    p = init_mlp([d, 7, 5, 1], seed)
    x0 = rng.uniform(size=d)
    fd = fd_gradient(lambda z: mlp_eval(p, z)[0], x0, 1e-5)
    assert rel_err(fd, mlp_derivatives(p, x0, "grad").ravel()) < 1e-6


def test_vector_output_jacobian_and_laplacian_guard():
    p = init_mlp([2, 5, 3], 0)
    x0 = np.array([0.2, 0.6])
    J = mlp_derivatives(p, x0, "grad")
    for i in range(2):
        e = np.zeros(2)
        e[i] = 1e-6
        np.testing.assert_allclose((mlp_eval(p, x0 + e) - mlp_eval(p, x0 - e)) / 2e-6, J[:, i], rtol=1e-6)
    with pytest.raises(ValueError):
        mlp_derivatives(p, x0, "laplacian")


def test_laplacian_matches_second_differences():
    p = init_mlp([2, 6, 6, 1], 11)
    x0 = np.array([0.4, 0.3])
    h = 1e-4
    f0 = mlp_eval(p, x0)[0]
    fd = sum((mlp_eval(p, x0 + h * e)[0] - 2 * f0 + mlp_eval(p, x0 - h * e)[0]) / h**2 for e in np.eye(2))
    assert abs(fd - float(mlp_derivatives(p, x0, "laplacian"))) < 1e-5 * abs(fd) + 1e-8


def _quad_loss(cv, cg, cl):
    def loss(jet):
        val = float((cv * jet.value[:, 0] ** 2).sum() + (cg * jet.grad[:, :, 0] ** 2).sum() + (cl * jet.lap[:, 0] ** 2).sum())
        return val, Jet((2 * cv * jet.value[:, 0])[:, None], (2 * cg * jet.grad[:, :, 0])[:, :, None],
                        (2 * cl * jet.lap[:, 0])[:, None])
    return loss


def test_parameter_gradient_fd():
    rng = np.random.default_rng(5)
    for k in range(6):
        d = 1 + k % 2
        p = init_mlp([d, 5, 4, 1], 100 + k)
        X = rng.uniform(size=(9, d))
        loss = _quad_loss(rng.normal(size=9), rng.normal(size=(9, d)), rng.normal(size=9))
        _, g = mlp_loss_gradient(p, X, loss, 2)
        fd = fd_gradient(lambda t: mlp_loss_gradient(p.with_flat(t), X, loss, 2)[0], p.flat(), 1e-5)
        assert rel_err(fd, g.flat()) < 1e-6


def test_parameter_gradient_trivial_cases():
    z = constant_mlp([1, 3, 1], 0.0)
    sq = lambda jet: (float((jet.value**2).sum()), Jet(2 * jet.value))
    _, g = mlp_loss_gradient(z, np.array([[0.3]]), sq, 0)
    assert np.all(g.flat() == 0)
    p = init_mlp([1, 3, 1], 2)
    p = MlpParams((p.weights[0], np.zeros((1, 3))), (np.ones(3), np.zeros(1)))
    _, g = mlp_loss_gradient(p, np.array([[0.3], [0.8]]), lambda j: (float(j.value.sum()), Jet(np.ones_like(j.value))), 0)
    assert np.all(g.biases[0] == 0)
    with pytest.raises(ValueError):
        mlp_loss_gradient(p, np.array([[0.3]]), lambda j: (j.value, Jet(np.ones_like(j.value))), 0)


def test_parallelize():
    a, b = init_mlp([2, 4, 3, 1], 1), init_mlp([2, 5, 2, 1], 2)
    X = np.random.default_rng(0).uniform(size=(100, 2))
    np.testing.assert_array_equal(mlp_eval(parallelize([a]), X), mlp_eval(a, X))
    pq = parallelize([a, b])
    np.testing.assert_allclose(mlp_eval(pq, X), np.hstack([mlp_eval(a, X), mlp_eval(b, X)]), atol=1e-13)
    assert pq.layer_dims == [2, 9, 5, 2] and pq.depth == 3
    ja, _ = mlp_jet(a, X, 2)
    jp, _ = mlp_jet(pq, X, 2)
    np.testing.assert_allclose(jp.lap[:, 0], ja.lap[:, 0], atol=1e-12)
    with pytest.raises(ValueError):
        parallelize([a, init_mlp([2, 4, 1], 0)])
    with pytest.raises(ValueError):
        parallelize([a, init_mlp([1, 4, 3, 1], 0)])


def test_cutoff_examples():
    b = Bounds(0.5, 2.0)
    assert cutoff(3.0, b) == (2.0, False)
    assert cutoff(1.0, b) == (1.0, True)
    assert cutoff(2.0, b) == (2.0, True)  # closed box counts as inside
    vals, mask = cutoff(np.array([0.1, 1.0, 9.0]), b)
    np.testing.assert_array_equal(vals, [0.5, 1.0, 2.0])
    np.testing.assert_array_equal(mask, [False, True, False])


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(0.5, 2.0))
def test_cutoff_contracts_towards_admissible(w, a):
    b = Bounds(0.5, 2.0)
    assert abs(cutoff(w, b)[0] - a) <= abs(w - a)


def test_gradient_bound_logged():
    p = init_mlp([2, 8, 8, 1], 4)
    X = np.random.default_rng(3).uniform(size=(10_000, 2))
    jet, _ = mlp_jet(p, X, 1)
    sup = np.abs(jet.grad).sum(axis=1).max()
    assert sup <= max(p.bound, 1.0) ** p.depth * p.width ** (p.depth - 1) * p.input_dim
    assert set(derivative_bounds(p)) == {"sup", "w1inf", "w2inf", "w3inf"}


@pytest.mark.parametrize("L", [1, 2, 3])
def test_parameter_lipschitz(L):
    rng = np.random.default_rng(L)
    X = rng.uniform(size=(400, 2))
    for _ in range(20):
        W = int(rng.integers(2, 9))
        p = init_mlp([2] + [W] * (L - 1) + [1], int(rng.integers(1 << 30)))
        scale = rng.uniform(1.0, 2.0) / max(p.bound, 1e-12)
        p = p.with_flat(np.clip(p.flat() * scale, -2, 2))
        eps = 1e-3
        q = p.with_flat(p.flat() + eps * rng.choice([-1.0, 1.0], size=p.n_params))
        R = max(p.bound, q.bound, 1.0)
        diff = np.abs(mlp_eval(p, X) - mlp_eval(q, X)).max()
        assert diff <= lipschitz_constant(L, max(p.width, 2), R) * eps


def test_checkpoint_roundtrip(tmp_path):
    p = init_mlp([2, 4, 3], 9)
    save_checkpoint(tmp_path / "ck.json", p, seed=9, step=120)
    q, seed, step = load_checkpoint(tmp_path / "ck.json")
    assert (seed, step) == (9, 120)
    np.testing.assert_array_equal(q.flat(), p.flat())
    assert q.layer_dims == p.layer_dims
