"""Network, pathwise gradient, optimizer, and schedule checks.

The finite-difference comparison here is the primary correctness gate for
the hand-derived adjoint sweep; everything else leans on it.
"""
from __future__ import annotations

import numpy as np
import pytest

from mfcontrol.core import Ensemble, SeededStream, make_uniform_grid
from mfcontrol.cost import empirical_cs_cost
from mfcontrol.dynamics import CsParams, rollout, sample_initial_ensemble
from mfcontrol.policy import (
    AdamState,
    LrSchedule,
    MlpPolicy,
    adam_step,
    feature_dim,
    feedback_from_mlp,
    flatten_params,
    init_adam_state,
    init_policy,
    load_policy,
    lr_at,
    mlp_forward,
    replace_params,
    rollout_cost_and_grad,
    save_policy,
)


def frozen_noise(grid, N, d, seed):
    s = SeededStream(seed, "rollout-noise")
    return np.stack([np.sqrt(grid.h) * s.normals(m, N, d) for m in range(grid.M)])


# --- forward --------------------------------------------------------------


def test_zero_network_outputs_zero():
    pol = MlpPolicy(
        layer_dims=(3, 4, 2),
        weights=(np.zeros((3, 4)), np.zeros((4, 2))),
        biases=(np.zeros(4), np.zeros(2)),
    )
    out = mlp_forward(pol, np.ones((5, 3)))
    assert np.array_equal(out, np.zeros((5, 2)))


def test_dead_relu_path():
    pol = MlpPolicy(
        layer_dims=(1, 1, 1),
        weights=(np.ones((1, 1)), np.ones((1, 1))),
        biases=(np.zeros(1), np.zeros(1)),
    )
    assert mlp_forward(pol, np.array([-3.0]))[0] == 0.0


def test_hand_computed_toy_forward():
    # relu( [1,-2] @ W0 + b0 ) @ W1 + b1 with:
    #   W0 = [[1, .5], [-1, 2]], b0 = (.5, -.25) -> pre (3.5, -3.75) -> relu (3.5, 0)
    #   W1 = [[2], [-1]], b1 = (.75)             -> 3.5*2 + .75 = 7.75
    pol = MlpPolicy(
        layer_dims=(2, 2, 1),
        weights=(np.array([[1.0, 0.5], [-1.0, 2.0]]), np.array([[2.0], [-1.0]])),
        biases=(np.array([0.5, -0.25]), np.array([0.75])),
    )
    assert mlp_forward(pol, np.array([1.0, -2.0]))[0] == pytest.approx(7.75)


def test_forward_rejects_wrong_input_dim():
    pol = init_policy([3, 8, 1], seed=0)
    with pytest.raises(ValueError):
        mlp_forward(pol, np.ones((4, 2)))


def test_forward_batch_matches_rows():
    pol = init_policy([2, 7, 2], seed=1)
    X = SeededStream(2, "x").normals(0, 9, 2)
    batch = mlp_forward(pol, X)
    rows = np.stack([mlp_forward(pol, X[i]) for i in range(9)])
    assert np.allclose(batch, rows, atol=0, rtol=1e-15)


def test_forward_worker_count_is_invisible():
    pol = init_policy([3, 32, 1], seed=3)
    X = SeededStream(4, "x").normals(0, 700, 3)  # 3 chunks of 256
    a = mlp_forward(pol, X, workers=1)
    b = mlp_forward(pol, X, workers=4)
    assert np.array_equal(a, b)


def test_tanh_activation_forward():
    pol = MlpPolicy(
        layer_dims=(1, 1, 1),
        weights=(np.array([[2.0]]), np.array([[1.0]])),
        biases=(np.zeros(1), np.zeros(1)),
        hidden_activation="tanh",
    )
    assert mlp_forward(pol, np.array([0.5]))[0] == pytest.approx(np.tanh(1.0))


# --- init -----------------------------------------------------------------


def test_init_deterministic():
    a, b = init_policy([2, 110, 110, 1], seed=5), init_policy([2, 110, 110, 1], seed=5)
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    c = init_policy([2, 110, 110, 1], seed=6)
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_init_biases_zero_and_bounds():
    pol = init_policy([100, 100, 1], seed=7)
    for b in pol.biases:
        assert np.array_equal(b, np.zeros_like(b))
    w = pol.weights[0]
    limit = np.sqrt(6.0 / 200)
    assert np.abs(w).max() <= limit
    # 1e4 draws: uniform on (-limit, limit) has mean 0, var limit^2/3
    assert abs(w.mean()) < 4 * limit / np.sqrt(3 * w.size)
    assert abs(w.var() / (limit**2 / 3) - 1) < 0.05


def test_flatten_replace_roundtrip():
    pol = init_policy([3, 5, 2], seed=8)
    theta = flatten_params(pol)
    assert theta.shape == (pol.n_params,)
    pol2 = replace_params(pol, theta)
    for wa, wb in zip(pol.weights, pol2.weights):
        assert np.array_equal(wa, wb)
    with pytest.raises(ValueError):
        replace_params(pol, theta[:-1])


def test_feedback_dimension_guards():
    p = CsParams(beta=0.0, d=1)
    with pytest.raises(ValueError):
        feedback_from_mlp(init_policy([4, 8, 1], seed=0), p)
    p1 = CsParams(beta=1.0, d=1)
    assert feature_dim(p1) == 3
    with pytest.raises(ValueError):
        feedback_from_mlp(init_policy([2, 8, 1], seed=0), p1)


# --- pathwise gradient ----------------------------------------------------


def test_cost_matches_recorded_trajectory_bitwise():
    p = CsParams(beta=0.0, d=1)
    pol = init_policy([2, 12, 12, 1], seed=9)
    e0 = sample_initial_ensemble(20, 1, SeededStream(10, "init"))
    grid = make_uniform_grid(0, 1, 8)
    noise = frozen_noise(grid, 20, 1, seed=11)
    cost, _ = rollout_cost_and_grad(pol, e0, grid, p, noise=noise)
    traj = rollout(e0, pol, grid, p, noise=noise)
    assert cost == empirical_cs_cost(traj, p.gamma1).total


@pytest.mark.parametrize("beta,d", [(0.0, 1), (0.0, 2), (1.0, 1), (1.0, 2)])
def test_gradient_matches_finite_differences(beta, d):
    p = CsParams(beta=beta, d=d)
    pol = init_policy([feature_dim(p), 12, 12, d], seed=12)
    N, M = 8, 4
    e0 = sample_initial_ensemble(N, d, SeededStream(13, "init"))
    grid = make_uniform_grid(0, 1, M)
    noise = frozen_noise(grid, N, d, seed=14)
    _, grad = rollout_cost_and_grad(pol, e0, grid, p, noise=noise)
    theta = flatten_params(pol)

    def cost_at(vec):
        traj = rollout(e0, replace_params(pol, vec), grid, p, noise=noise)
        return empirical_cs_cost(traj, p.gamma1).total

    picks = SeededStream(15, "coords").uniforms(0, 25, 1).ravel()
    coords = np.unique((picks * theta.size).astype(int))
    assert len(coords) >= 20
    h_fd = 1e-5
    for j in coords:
        up, down = theta.copy(), theta.copy()
        up[j] += h_fd
        down[j] -= h_fd
        fd = (cost_at(up) - cost_at(down)) / (2 * h_fd)
        rel = abs(fd - grad[j]) / max(abs(fd), abs(grad[j]), 1e-8)
        assert rel < 1e-5, f"coordinate {j}: adjoint {grad[j]}, fd {fd}"


def test_degenerate_cost_floor():
    # gamma1=0, sigma=0, flocked start, zero network: cost identically zero
    p = CsParams(beta=0.0, sigma=0.0, gamma1=0.0, d=1)
    pol = MlpPolicy(
        layer_dims=(2, 4, 1),
        weights=(np.zeros((2, 4)), np.zeros((4, 1))),
        biases=(np.zeros(4), np.zeros(1)),
    )
    e0 = Ensemble(x=np.arange(6.0)[:, None], v=np.full((6, 1), 0.3))
    grid = make_uniform_grid(0, 1, 4)
    cost, grad = rollout_cost_and_grad(pol, e0, grid, p, noise=np.zeros((4, 6, 1)))
    assert cost == 0.0
    assert np.isfinite(grad).all()


def test_gamma1_decomposition_two_forward_passes():
    p1 = CsParams(beta=0.0, gamma1=0.1)
    p2 = CsParams(beta=0.0, gamma1=0.2)
    pol = init_policy([2, 10, 1], seed=16)
    e0 = sample_initial_ensemble(30, 1, SeededStream(17, "init"))
    grid = make_uniform_grid(0, 1, 8)
    noise = frozen_noise(grid, 30, 1, seed=18)
    c1, _ = rollout_cost_and_grad(pol, e0, grid, p1, noise=noise)
    c2, _ = rollout_cost_and_grad(pol, e0, grid, p2, noise=noise)
    # same controls both times (theta and states frozen): the difference is
    # exactly the extra control penalty
    traj = rollout(e0, pol, grid, p1, noise=noise)
    extra = empirical_cs_cost(traj, p1.gamma1).running_control
    assert c2 - c1 == pytest.approx(extra, rel=1e-12)


def test_grad_linear_in_cost_scale():
    p = CsParams(beta=1.0, d=1)
    pol = init_policy([3, 8, 1], seed=19)
    e0 = sample_initial_ensemble(10, 1, SeededStream(20, "init"))
    grid = make_uniform_grid(0, 1, 4)
    noise = frozen_noise(grid, 10, 1, seed=21)
    c1, g1 = rollout_cost_and_grad(pol, e0, grid, p, noise=noise)
    c2, g2 = rollout_cost_and_grad(pol, e0, grid, p, noise=noise, cost_scale=2.0)
    assert c2 == 2.0 * c1
    assert np.array_equal(g2, 2.0 * g1)  # doubling is exact in floating point
    c3, g3 = rollout_cost_and_grad(pol, e0, grid, p, noise=noise, cost_scale=3.0)
    assert np.allclose(g3, 3.0 * g1, rtol=1e-13, atol=0)


def test_grad_worker_count_is_invisible():
    p = CsParams(beta=0.0, d=1)
    pol = init_policy([2, 16, 1], seed=22)
    e0 = sample_initial_ensemble(600, 1, SeededStream(23, "init"))  # 3 chunks
    grid = make_uniform_grid(0, 1, 6)
    noise = frozen_noise(grid, 600, 1, seed=24)
    c1, g1 = rollout_cost_and_grad(pol, e0, grid, p, noise=noise, workers=1)
    c2, g2 = rollout_cost_and_grad(pol, e0, grid, p, noise=noise, workers=4)
    assert c1 == c2
    assert np.array_equal(g1, g2)


def test_nonfinite_abort_reports_step():
    p = CsParams(beta=0.0, d=1)
    pol = init_policy([2, 8, 1], seed=25)
    pol = replace_params(pol, flatten_params(pol) * 1e200)
    e0 = sample_initial_ensemble(4, 1, SeededStream(26, "init"))
    grid = make_uniform_grid(0, 1, 4)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(RuntimeError, match="step"):
            rollout_cost_and_grad(pol, e0, grid, p, noise=np.zeros((4, 4, 1)))


# --- adam -----------------------------------------------------------------


def test_adam_null_gradient():
    theta = np.array([1.0, -2.0])
    state = init_adam_state(2)
    theta2, state2 = adam_step(theta, np.zeros(2), state, lr=0.01)
    assert np.array_equal(theta2, theta)
    assert state2.step == 1


def test_adam_first_step_magnitude():
    g = np.array([0.37])
    theta, state = adam_step(np.zeros(1), g, init_adam_state(1), lr=0.001)
    # first step: m_hat = g, v_hat = g^2, so |update| = lr*|g|/(|g|+eps)
    expected = 0.001 * abs(g[0]) / (abs(g[0]) + 1e-8)
    assert abs(theta[0]) == pytest.approx(expected, rel=1e-12)
    assert theta[0] < 0  # descends against the gradient


def test_adam_repeated_gradient_shrinks_step():
    g = np.array([1.0])
    theta, state = adam_step(np.zeros(1), g, init_adam_state(1), lr=0.001)
    first = abs(theta[0])
    theta2, _ = adam_step(theta, g, state, lr=0.001)
    second = abs(theta2[0] - theta[0])
    assert second < first


def test_adam_scale_invariance_without_eps():
    s = SeededStream(27, "g")
    g = s.normals(0, 7, 1).ravel() + 0.1  # keep away from exact zeros
    theta0 = np.zeros(7)
    st = init_adam_state(7)
    st0 = AdamState(m=st.m, v=st.v, step=0, eps=0.0)
    t1, _ = adam_step(theta0, g, st0, lr=0.01)
    t2, _ = adam_step(theta0, 37.0 * g, st0, lr=0.01)
    assert np.allclose(t1, t2, rtol=1e-12, atol=0)


def test_adam_matches_torch_reference():
    torch = pytest.importorskip("torch")
    s = SeededStream(28, "ref")
    theta = s.normals(0, 11, 1).ravel()
    grads = [s.normals(1 + k, 11, 1).ravel() for k in range(5)]

    param = torch.nn.Parameter(torch.tensor(theta, dtype=torch.float64))
    opt = torch.optim.Adam([param], lr=0.003, betas=(0.9, 0.999), eps=1e-8)
    mine = theta.copy()
    state = init_adam_state(11)
    for g in grads:
        opt.zero_grad()
        param.grad = torch.tensor(g, dtype=torch.float64)
        opt.step()
        mine, state = adam_step(mine, g, state, lr=0.003)
    assert np.allclose(mine, param.detach().numpy(), rtol=1e-12, atol=1e-15)


# --- schedule -------------------------------------------------------------


def test_lr_schedule_values():
    sched = LrSchedule()
    assert lr_at(sched, 0) == 0.001
    assert lr_at(sched, 49) == 0.001
    assert lr_at(sched, 50) == pytest.approx(0.000617, rel=1e-12)
    assert lr_at(sched, 100) == pytest.approx(0.001 * 0.617**2, rel=1e-12)
    with pytest.raises(ValueError):
        lr_at(sched, -1)
    with pytest.raises(ValueError):
        LrSchedule(decay=0.0)
    with pytest.raises(ValueError):
        LrSchedule(period=0)


# --- serialization --------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    pol = init_policy([3, 9, 2], seed=29, hidden_activation="tanh")
    path = tmp_path / "policy.txt"
    save_policy(pol, path)
    loaded = load_policy(path)
    assert loaded.layer_dims == pol.layer_dims
    assert loaded.hidden_activation == "tanh"
    assert np.array_equal(flatten_params(loaded), flatten_params(pol))


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("not a checkpoint\n1 2 3\n")
    with pytest.raises(ValueError):
        load_policy(path)
