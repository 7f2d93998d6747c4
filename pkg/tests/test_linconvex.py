from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfcontrol.core import SeededStream, make_uniform_grid
from mfcontrol.linconvex import (
    LinConvexCoeffs,
    hat_alpha_lq,
    optimality_residual,
    project_piecewise_constant,
    psi_zeta,
)

EXAMPLE = LinConvexCoeffs(b2=1.0, gamma=0.0, q=1.0, qbar=1.0, r=1.0, c=1.0)


def test_psi_zeta_vanishing_mean_penalty():
    assert psi_zeta(0.0, LinConvexCoeffs(b2=2.0, gamma=1.0, q=3.0, qbar=0.0, r=5.0, c=4.0)) == (0.0, 0.0)


@pytest.mark.parametrize("r", [0.0, 2.0])
def test_psi_zeta_zero_numerator_factor(r):
    psi, zeta = psi_zeta(0.0, LinConvexCoeffs(b2=1.0, gamma=2.0, q=1.0, qbar=3.0, r=r, c=1.0))
    assert psi == 0.0 and zeta == 0.0


def test_psi_zeta_example_values():
    # denominator q + qbar (r-1)^2 = 1, factor r(r-2) = -1
    psi, zeta = psi_zeta(0.0, EXAMPLE)
    assert psi == pytest.approx(-1.0)
    assert zeta == pytest.approx(-1.0)


def test_psi_zeta_ratio_identity():
    coeffs = LinConvexCoeffs(b2=0.7, gamma=0.4, q=2.0, qbar=1.5, r=3.0, c=0.9)
    psi, zeta = psi_zeta(0.3, coeffs)
    assert psi / zeta == pytest.approx(0.9 / (0.7 + 0.4), rel=1e-13)


def test_psi_zeta_rejects_q_below_floor():
    # q >= floor > 0 plus qbar >= 0 keep the shared denominator positive,
    # so the floor check is the one that has to fire.
    bad = LinConvexCoeffs(q=lambda t: 1.0 - t, qbar=1.0, r=1.0)
    assert psi_zeta(0.0, bad) == (0.0, 0.0)  # r(r-2) = -1 but qbar*r*(r-2)*c with c=0
    with pytest.raises(ValueError, match="floor"):
        psi_zeta(1.0, bad)


def test_coeffs_reject_negative_qbar():
    bad = LinConvexCoeffs(q=1.0, qbar=lambda t: -t)
    bad.at(0.0)
    with pytest.raises(ValueError, match="nonnegative"):
        bad.at(0.5)


def test_hat_alpha_zero_input():
    assert hat_alpha_lq(0.0, 0.0, 0.0, 0.0, 0.0, EXAMPLE) == 0.0


def test_hat_alpha_example_value():
    # (-1 - 1 + (-1)*1 + (0 - 1)*1)/2 = -2
    assert hat_alpha_lq(0.0, 1.0, 1.0, 1.0, 1.0, EXAMPLE) == pytest.approx(-2.0)


def test_hat_alpha_mean_consistency():
    # one-point law at x=y=1: E[alpha] should match the closed-form mean
    a = hat_alpha_lq(0.0, 1.0, 1.0, 1.0, 1.0, EXAMPLE)
    v = EXAMPLE.at(0.0)
    denom = v.q + v.qbar * (v.r - 1.0) ** 2
    expected_mean = (-(v.b2 + v.gamma) * 1.0 - v.c * 1.0) / denom
    assert abs(a - expected_mean) < 1e-12


@given(
    x1=st.floats(-10, 10), y1=st.floats(-10, 10),
    x2=st.floats(-10, 10), y2=st.floats(-10, 10),
    lam=st.floats(-5, 5),
)
@settings(max_examples=50)
def test_hat_alpha_joint_linearity(x1, y1, x2, y2, lam):
    coeffs = LinConvexCoeffs(b2=0.3, gamma=-0.2, q=1.1, qbar=0.4, r=-1.5, c=0.8)
    a1 = hat_alpha_lq(0.0, x1, y1, 0.5 * x1, 0.5 * y1, coeffs)
    a2 = hat_alpha_lq(0.0, x2, y2, 0.5 * x2, 0.5 * y2, coeffs)
    mix = hat_alpha_lq(
        0.0, x1 + lam * x2, y1 + lam * y2, 0.5 * (x1 + lam * x2), 0.5 * (y1 + lam * y2), coeffs
    )
    scale = 1 + abs(a1) + abs(a2) + abs(lam)
    assert abs(mix - (a1 + lam * a2)) < 1e-10 * scale


def _random_coeffs(stream, step):
    u = stream.uniforms(step, 6, 1).ravel()
    return LinConvexCoeffs(
        b2=4.0 * u[0] - 2.0,
        gamma=4.0 * u[1] - 2.0,
        q=0.1 + 3.0 * u[2],
        qbar=3.0 * u[3],
        r=6.0 * u[4] - 3.0,
        c=4.0 * u[5] - 2.0,
    )


def test_residual_nullity_100_draws():
    stream = SeededStream(123, "draws")
    worst = 0.0
    for k in range(100):
        coeffs = _random_coeffs(stream, 2 * k)
        size = 1 + int(stream.uniforms(2 * k + 1, 1, 1)[0, 0] * 64)
        xy = stream.normals(10_000 + k, size, 2) * 3.0
        xs, ys = xy[:, 0], xy[:, 1]
        a = hat_alpha_lq(0.0, xs, ys, xs.mean(), ys.mean(), coeffs)
        res = optimality_residual((xs, ys), 0.0, coeffs, a)
        scale = max(1.0, np.abs(xs).max(), np.abs(ys).max(), np.abs(a).max())
        worst = max(worst, np.abs(res).max() / scale)
    assert worst < 1e-12


def test_residual_constant_perturbation_shift():
    stream = SeededStream(5, "perturb")
    xy = stream.normals(0, 16, 2)
    xs, ys = xy[:, 0], xy[:, 1]
    a = hat_alpha_lq(0.0, xs, ys, xs.mean(), ys.mean(), EXAMPLE)
    v = EXAMPLE.at(0.0)
    denom = v.q + v.qbar * (v.r - 1.0) ** 2  # = 1 for the example coefficients
    delta = 0.1
    res0 = optimality_residual((xs, ys), 0.0, EXAMPLE, a)
    res1 = optimality_residual((xs, ys), 0.0, EXAMPLE, a + delta)
    assert np.allclose(res1 - res0, denom * delta, rtol=1e-12, atol=1e-14)
    assert np.allclose(res1 - res0, 0.1, rtol=1e-12, atol=1e-14)


def test_residual_zero_case_and_guards():
    assert optimality_residual([(0.0, 0.0)], 0.0, EXAMPLE, [0.0])[0] == 0.0
    with pytest.raises(ValueError):
        optimality_residual([], 0.0, EXAMPLE, [])
    with pytest.raises(ValueError):
        optimality_residual([(1.0, 2.0)], 0.0, EXAMPLE, [0.0, 0.0])


def test_residual_accepts_pair_list():
    pairs = [(1.0, 2.0), (-0.5, 0.3)]
    xs = np.array([1.0, -0.5])
    ys = np.array([2.0, 0.3])
    a = hat_alpha_lq(0.0, xs, ys, xs.mean(), ys.mean(), EXAMPLE)
    r1 = optimality_residual(pairs, 0.0, EXAMPLE, a)
    r2 = optimality_residual((xs, ys), 0.0, EXAMPLE, a)
    assert np.array_equal(r1, r2)


def test_time_dependent_coefficients():
    coeffs = LinConvexCoeffs(q=lambda t: 1.0 + t, qbar=0.5, r=2.0, c=lambda t: t)
    assert coeffs.at(0.5).q == 1.5
    assert coeffs.at(0.25).c == 0.25
    psi, zeta = psi_zeta(0.5, coeffs)
    assert psi == 0.0  # r = 2 kills the factor


# --- projection -----------------------------------------------------------


def test_projection_hand_example():
    fine, coarse = make_uniform_grid(0, 1, 4), make_uniform_grid(0, 1, 2)
    path = fine.nodes.copy()  # path(t) = t
    out = project_piecewise_constant(path, fine, coarse)
    assert np.array_equal(out, [0.0, 0.0, 0.5, 0.5, 0.5])


def test_projection_fixed_points():
    fine, coarse = make_uniform_grid(0, 1, 8), make_uniform_grid(0, 1, 4)
    const = np.full(9, 3.7)
    assert np.array_equal(project_piecewise_constant(const, fine, coarse), const)
    held = project_piecewise_constant(np.sin(fine.nodes), fine, coarse)
    again = project_piecewise_constant(held, fine, coarse)
    assert np.array_equal(held, again)


def test_projection_non_expansive_sup_norm():
    fine, coarse = make_uniform_grid(0, 1, 16), make_uniform_grid(0, 1, 4)
    path = SeededStream(9, "path").normals(0, 17, 1).ravel()
    out = project_piecewise_constant(path, fine, coarse)
    assert np.abs(out).max() <= np.abs(path).max()


def test_projection_vector_valued_path():
    fine, coarse = make_uniform_grid(0, 1, 4), make_uniform_grid(0, 1, 2)
    path = np.stack([fine.nodes, 2 * fine.nodes], axis=1)  # (5, 2)
    out = project_piecewise_constant(path, fine, coarse)
    assert out.shape == (5, 2)
    assert np.array_equal(out[:, 0], [0.0, 0.0, 0.5, 0.5, 0.5])


def test_projection_rejects_non_nested():
    with pytest.raises(ValueError):
        project_piecewise_constant(
            np.zeros(7), make_uniform_grid(0, 1, 6), make_uniform_grid(0, 1, 4)
        )
    with pytest.raises(ValueError):
        project_piecewise_constant(
            np.zeros(5), make_uniform_grid(0, 1, 4), make_uniform_grid(0, 2, 2)
        )
