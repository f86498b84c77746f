import dataclasses

import numpy as np
import pytest

from coefid import fem
from coefid.mesh import build_uniform_mesh
from coefid.nn import Bounds, MlpParams, constant_mlp, init_mlp, mlp_jet
from coefid.recon_nn import (HybridScheme, MixedLeastSquares, PenaltyVector, Pinn, SamplingPlan, TrainConfig,
                             hybrid_gradient, hybrid_loss, mixed_ls_empirical_loss, mixed_penalties, network,
                             pinn_empirical_loss, pinn_penalties, reconstruct_hybrid, reconstruct_pinn, train,
                             write_train_log)
from coefid.synth import gauss_legendre_box, get_problem, make_observation

from helpers import fd_gradient, rel_err, representable_mixed_problem, representable_pinn_problem


def _flat_fd(scheme, params, k, step=1e-6):
    def f(v):
        ps = list(params)
        ps[k] = ps[k].with_flat(v)
        return scheme.loss_and_grad(tuple(ps))[0]
    return fd_gradient(f, params[k].flat(), step)


@pytest.mark.parametrize("dim,gamma", [(1, 0.0), (1, 1e-2), (2, 1e-3)])
def test_hybrid_gradient_fd(dim, gamma):
    p = get_problem("1d-smooth-a" if dim == 1 else "2d-affine-a")
    m = build_uniform_mesh(dim, 8 if dim == 1 else 4)
    obs = make_observation(p, 0.01, seed=1)
    theta = network([dim, 2, 1], 3, 1.2)
    scheme = HybridScheme(m, obs, p.f, gamma, p.bounds)
    _, (g,), _ = scheme.loss_and_grad((theta,))
    assert rel_err(_flat_fd(scheme, (theta,), 0), g.flat()) < 1e-6
    assert hybrid_loss(theta, m, obs, gamma, 0, p.f, p.bounds) == scheme.loss(theta)
    np.testing.assert_array_equal(hybrid_gradient(theta, m, obs, gamma, 0, p.f, p.bounds).flat(), g.flat())


def test_hybrid_fully_clipped_has_no_data_gradient():
    p = get_problem("1d-smooth-a")
    m = build_uniform_mesh(1, 8)
    theta = network([1, 4, 1], 0, 10.0)
    theta = theta.with_flat(theta.flat() * 0.01)
    theta = MlpParams(theta.weights, theta.biases[:-1] + (np.array([10.0]),))
    _, (g,), _ = HybridScheme(m, make_observation(p, 0.01), p.f, 0.0, p.bounds).loss_and_grad((theta,))
    assert np.all(g.flat() == 0)


def test_hybrid_stationary_at_constant_truth():
    p = get_problem("1d-const")
    m = build_uniform_mesh(1, 16)
    uh = fem.solve_dirichlet(m, 1.0, p.f, 0)
    obs = dataclasses.replace(make_observation(p, 0.0), z=uh)
    theta = constant_mlp([1, 5, 1], 1.0)
    loss, (g,), terms = HybridScheme(m, obs, p.f, 1e-3, p.bounds).loss_and_grad((theta,))
    assert terms["penalty"] == 0.0
    assert np.abs(g.flat()).max() < 1e-7 and loss < 1e-20


def test_hybrid_penalty_quadrature_rate():
    p = get_problem("2d-sine")
    m = build_uniform_mesh(2, 2)
    theta = init_mlp([2, 6, 1], 4)
    obs = make_observation(p, 0.0)
    pen = [HybridScheme(m, obs, p.f, 1.0, p.bounds, n).loss_and_grad((theta,))[2]["penalty"] for n in range(5)]
    d = np.diff(pen)
    np.testing.assert_allclose(d[:-1] / d[1:], 4.0, rtol=0.05)


def test_mixed_representable_truth():
    problem, theta, kappa = representable_mixed_problem()
    gam = mixed_penalties(1.0, 1e-3, 1.0)
    scheme = MixedLeastSquares(problem, make_observation(problem, 0.0), SamplingPlan(200, 20, 0), gam)
    loss, _, terms = scheme.loss_and_grad((theta, kappa))
    assert terms["E_d"] < 1e-25 and terms["E_sigma"] < 1e-25 and terms["E_b"] < 1e-25
    assert loss == pytest.approx(1e-3 * terms["E_a"], abs=1e-25)


def test_pinn_representable_truth():
    problem, theta, kappa = representable_pinn_problem()
    plan = SamplingPlan(200, 20, 0)
    scheme = Pinn(problem, make_observation(problem, 0.0), plan, pinn_penalties(1.0, 1.0, 1e-3))
    loss, _, terms = scheme.loss_and_grad((theta, kappa))
    assert np.abs(scheme.residual(theta, kappa, scheme.X, scheme.f_X)).max() < 1e-12
    assert loss == pytest.approx(1e-3 * terms["E_a"], rel=1e-10, abs=1e-25)


@pytest.mark.parametrize("dim", [1, 2])
def test_mixed_and_pinn_gradients_fd(dim):
    p = get_problem("1d-smooth-a" if dim == 1 else "2d-affine-a")
    obs = make_observation(p, 0.01, "H1", seed=0)
    plan = SamplingPlan(12, 6, 1)
    theta = network([dim, 3, 1], 1, 1.2)
    kappa_s = network([dim, 3, dim], 2)
    kappa_u = network([dim, 3, 1], 3)
    for scheme, params in ((MixedLeastSquares(p, obs, plan, mixed_penalties(0.7, 0.3, 0.5)), (theta, kappa_s)),
                           (Pinn(p, obs, plan, pinn_penalties(0.7, 0.5, 0.3)), (theta, kappa_u))):
        _, grads, _ = scheme.loss_and_grad(params)
        for k in range(2):
            assert rel_err(_flat_fd(scheme, params, k), grads[k].flat()) < 1e-6


def _exact_ea(theta, dim):
    X, w = gauss_legendre_box(dim, 64)
    jet, _ = mlp_jet(theta, X, 1)
    return float(w @ (jet.grad[:, :, 0] ** 2).sum(axis=1))


def _ea_samples(theta, problem, obs, n_d, seeds):
    out = []
    for s in seeds:
        sch = MixedLeastSquares(problem, obs, SamplingPlan(n_d, 4, s), mixed_penalties(1, 1, 1))
        out.append(sch.loss_and_grad((theta, network([2, 3, 2], 0)))[2]["E_a"])
    return np.array(out)


def test_empirical_penalty_unbiased_and_mc_rate():
    p = get_problem("2d-sine")
    obs = make_observation(p, 0.0)
    theta = init_mlp([2, 5, 1], 7)
    exact = _exact_ea(theta, 2)
    s = _ea_samples(theta, p, obs, 32, range(200))
    assert abs(s.mean() - exact) < 3 * s.std(ddof=1) / np.sqrt(len(s))
    rms = [np.sqrt(np.mean((_ea_samples(theta, p, obs, n, range(50)) - exact) ** 2)) for n in (32, 128)]
    assert 1.5 < rms[0] / rms[1] < 2.7


def test_empirical_loss_wrappers():
    problem, theta, kappa = representable_mixed_problem()
    obs = make_observation(problem, 0.0)
    plan = SamplingPlan(50, 10, 2)
    g = mixed_penalties(1.0, 0.1, 1.0)
    assert mixed_ls_empirical_loss(theta, kappa, plan, g, obs, problem) == \
        MixedLeastSquares(problem, obs, plan, g).loss_and_grad((theta, kappa))[0]
    problem, theta, kappa = representable_pinn_problem()
    g = pinn_penalties(1.0, 1.0, 0.1)
    assert pinn_empirical_loss(theta, kappa, plan, g, make_observation(problem, 0.0), problem) >= 0


def test_validation():
    p = get_problem("1d-const")
    with pytest.raises(ValueError):
        SamplingPlan(0, 4, 0)
    with pytest.raises(ValueError):
        mixed_penalties(1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        PenaltyVector("pinn", (1.0, 1.0))
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lbfgs")
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        HybridScheme(build_uniform_mesh(1, 4), make_observation(p, 0.0), p.f, -1.0, p.bounds)
    nodal = make_observation(p, 0.01, mode="nodal", mesh=build_uniform_mesh(1, 4))
    with pytest.raises(ValueError):
        MixedLeastSquares(p, nodal, SamplingPlan(4, 4, 0), mixed_penalties(1, 1, 1))
    with pytest.raises(ValueError):
        Pinn(p, make_observation(p, 0.0), SamplingPlan(4, 4, 0), mixed_penalties(1, 1, 1))


class _Quadratic:
    """0.5 |theta - c|^2 on the flattened parameters."""

    def __init__(self, target):
        self.target = target

    def loss_and_grad(self, params):
        r = params[0].flat() - self.target
        return 0.5 * float(r @ r), (r,)


@pytest.mark.parametrize("opt,lr", [("plain-gd", 0.5), ("adaptive-moment", 0.05)])
def test_train_converges_on_quadratic(opt, lr):
    p0 = init_mlp([1, 3, 1], 0)
    target = np.linspace(-1, 1, p0.n_params)
    (p,), hist = train(_Quadratic(target), (p0,), TrainConfig(steps=500, learning_rate=lr, optimizer=opt))
    assert np.abs(p.flat() - target).max() < 1e-6
    assert hist[0].step == 0 and hist[-1].step == 500


def test_train_zero_rate_and_determinism(tmp_path):
    p0 = init_mlp([1, 3, 1], 0)
    q = _Quadratic(np.ones(p0.n_params))
    (p,), _ = train(q, (p0,), TrainConfig(steps=20, learning_rate=0.0))
    np.testing.assert_array_equal(p.flat(), p0.flat())
    cfg = TrainConfig(steps=30, learning_rate=0.01, log_every=10)
    (a,), ha = train(q, (p0,), cfg)
    (b,), hb = train(q, (p0,), cfg)
    np.testing.assert_array_equal(a.flat(), b.flat())
    assert [r.loss for r in ha] == [r.loss for r in hb]
    assert [r.step for r in ha] == [0, 10, 20, 30]
    write_train_log(tmp_path / "log.csv", ha)
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "step,loss,grad_norm"


def test_train_aborts_on_nan():
    p0 = init_mlp([1, 2, 1], 0)
    bad = lambda params: (float("nan"), (np.zeros(p0.n_params),))
    with pytest.raises(FloatingPointError):
        train(bad, (p0,), TrainConfig(steps=5))


def test_reported_coefficient_in_bounds():
    p = get_problem("1d-smooth-a")
    bounds = Bounds(0.9, 1.1)
    p = dataclasses.replace(p, bounds=bounds)
    res = reconstruct_hybrid(p, make_observation(p, 0.05, seed=0), build_uniform_mesh(1, 8), 1e-4,
                             TrainConfig(steps=40, learning_rate=0.05))
    assert res.a_h.values.min() >= 0.9 and res.a_h.values.max() <= 1.1
    assert len(res.loss_history) == len(res.extra["history"])


def test_pinn_warmup_history():
    p = get_problem("1d-smooth-a")
    res = reconstruct_pinn(p, make_observation(p, 0.01, "H1"), SamplingPlan(32, 8, 0), pinn_penalties(1, 1, 1e-4),
                           TrainConfig(steps=20, log_every=5), arch_a=(4,), arch_u=(4,))
    steps = [r.step for r in res.extra["history"]]
    assert res.extra["warmup_steps"] == 5 and steps == sorted(steps) and steps[-1] == 25


def test_hybrid_loss_floor_at_constant_truth():
    p = get_problem("1d-const")
    theta = constant_mlp([1, 3, 1], 1.0)
    obs = make_observation(p, 0.0)
    loss = [HybridScheme(build_uniform_mesh(1, c), obs, p.f, 0.0, p.bounds, 2, 2, 2).loss(theta) for c in (8, 16, 32, 64)]
    slope = np.polyfit(np.log([1 / 8, 1 / 16, 1 / 32, 1 / 64]), np.log(loss), 1)[0]
    assert abs(slope - 4.0) < 0.3
