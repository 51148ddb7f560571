import numpy as np
import pytest
from scipy.integrate import quad

from mfg.hamiltonian import HamiltonianPoint, saddle_point_n
from mfg.limit import (
    LimitPoint,
    eval_hbar_reduced,
    eval_hbar_u,
    gauss_hermite,
    hbar_u_batch,
    ubar,
    ubar_batch,
    vbar,
)
from mfg.model import ModelParams, Scenario


def _gauss_expect(fn, mean, var):
    """Independent oracle: adaptive quadrature of E[fn(X)], X ~ N(mean, var)."""
    if var == 0.0:
        return fn(mean)
    sd = np.sqrt(var)
    val, _ = quad(lambda g: fn(mean + sd * g) * np.exp(-0.5 * g * g) / np.sqrt(2 * np.pi),
                  -10, 10, limit=200)
    return val


def test_vbar_closed_forms():
    m = ModelParams(c_lin=0.0, beta=1.0, gamma=2.0)
    assert vbar(0.0, 0.0, 0.0, 0.0, 0.0, m) == 0.0
    assert vbar(0.3, -0.2, 0.1, 0.5, 0.4, m) == pytest.approx(-0.2, abs=1e-15)


def test_vbar_contraction_identity():
    m = ModelParams()
    rng = np.random.default_rng(0)
    u, u2 = rng.uniform(-3, 3, 2)
    gap = abs(vbar(0, 0, 0, 0, u, m) - vbar(0, 0, 0, 0, u2, m))
    assert gap == pytest.approx((m.mu_mod / m.gamma) * abs(u - u2), abs=1e-14)
    assert gap <= (m.mu_mod / m.lambda_mod) * abs(u - u2) + 1e-14


def test_hbar_u_at_start_time_is_degenerate_evaluation():
    s = Scenario()
    m = s.model
    pt = LimitPoint(s=s.t_start, x0=0.4, y=0.2, z0=-0.3)
    u = 0.7
    v = float(vbar(pt.x0, s.xbar_init, pt.y, pt.z0, u, m))
    expected = float(
        m.f(pt.x0, s.xbar_init, pt.y, pt.z0, 0.0, u, v)
        + m.b0(pt.x0, s.xbar_init, pt.z0) * pt.z0 * u
    )
    value, _ = eval_hbar_u(pt, u, s)
    assert value == pytest.approx(expected, abs=1e-12)


def test_hbar_u_state_independent_when_tanh_off():
    s = Scenario(model=ModelParams(kappa_g=0.0))
    m = s.model
    u = 0.6
    v = -(m.c_lin + m.beta * u) / m.gamma
    expected = (m.a_lin * u + m.c_lin * v - 0.5 * m.alpha * u**2
                + 0.5 * m.gamma * v**2 + m.beta * u * v)
    for x0, y in ((0.0, 0.0), (1.3, -0.8)):
        value, _ = eval_hbar_u(LimitPoint(s=0.3, x0=x0, y=y, z0=0.0), u, s)
        assert value == pytest.approx(expected, abs=1e-12)


def test_hbar_u_odd_tanh_integrand_vanishes():
    s = Scenario(t_start=0.0, t_end=1.0, model=ModelParams(a_lin=0.0, c_lin=0.0))
    # x0 + y + z0 = -xbar centres the integrand; E[tanh(X - xbar)] = 0 by symmetry
    pt = LimitPoint(s=1.0, x0=0.5, y=-0.3, z0=-0.2 - s.xbar_init)
    value, _ = eval_hbar_u(pt, 0.0, s)
    b0_term = 0.0  # u = 0 kills the b0 z0 u term
    assert value == pytest.approx(b0_term, abs=1e-10)


def test_hbar_u_matches_adaptive_quadrature_oracle():
    s = Scenario()
    m = s.model
    pt = LimitPoint(s=0.37, x0=0.45, y=0.21, z0=-0.64)
    u = 0.83
    var = pt.s - s.t_start
    v = -(m.c_lin + m.beta * u) / m.gamma
    f_part = _gauss_expect(
        lambda x1: float(m.f(pt.x0, x1, pt.y, pt.z0, 0.0, u, v)), s.xbar_init, var
    )
    b_part = _gauss_expect(
        lambda x1: float(m.b0(pt.x0, x1, pt.z0)), s.xbar_init, var
    ) * pt.z0 * u
    value, _ = eval_hbar_u(pt, u, s)
    assert value == pytest.approx(f_part + b_part, abs=1e-10)


def test_gradient_matches_central_differences_on_probes():
    s = Scenario()
    rng = np.random.default_rng(1)
    times = rng.uniform(s.t_start, s.t_end, 1000)
    x0 = rng.uniform(-2, 2, 1000)
    y = rng.uniform(-1, 1, 1000)
    z0 = rng.uniform(-1.5, 1.5, 1000)
    u = rng.uniform(-2, 2, 1000)
    step = 1e-4
    for i in range(0, 1000, 200):  # spot-check batched against scalar path
        pt = LimitPoint(s=times[i], x0=x0[i], y=y[i], z0=z0[i])
        v, g = eval_hbar_u(pt, u[i], s)
        vp, _ = eval_hbar_u(pt, u[i] + step, s)
        vm, _ = eval_hbar_u(pt, u[i] - step, s)
        fd = (vp - vm) / (2 * step)
        assert g == pytest.approx(fd, rel=1e-5, abs=1e-8)
    # full batch via the vectorised evaluator
    for t in np.unique(np.round(times[:20], 3)):
        mask = slice(0, 50)
        _, g = hbar_u_batch(t, x0[mask], y[mask], z0[mask], u[mask], s)
        vp, _ = hbar_u_batch(t, x0[mask], y[mask], z0[mask], u[mask] + step, s)
        vm, _ = hbar_u_batch(t, x0[mask], y[mask], z0[mask], u[mask] - step, s)
        fd = (vp - vm) / (2 * step)
        assert np.allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_strong_concavity_modulus():
    s = Scenario()
    m = s.model
    modulus = (m.lambda_mod**2 - m.mu_mod**2) / m.lambda_mod
    rng = np.random.default_rng(2)
    for _ in range(200):
        pt_args = (rng.uniform(s.t_start, s.t_end), rng.uniform(-2, 2),
                   rng.uniform(-1, 1), rng.uniform(-1.5, 1.5))
        u1, u2 = rng.uniform(-3, 3, 2)
        _, g1 = hbar_u_batch(pt_args[0], pt_args[1], pt_args[2], pt_args[3], u1, s)
        _, g2 = hbar_u_batch(pt_args[0], pt_args[1], pt_args[2], pt_args[3], u2, s)
        assert (g1 - g2) * (u1 - u2) <= -modulus * (u1 - u2) ** 2 + 1e-10


def test_ubar_closed_form_and_symmetry():
    s = Scenario(model=ModelParams(kappa_g=0.3, a_lin=1.0, c_lin=0.0, alpha=2.0, gamma=2.0, beta=1.0))
    pt = LimitPoint(s=0.25, x0=0.8, y=0.1, z0=0.0)
    assert ubar(pt, s, 1e-10) == pytest.approx(0.4, abs=1e-10)
    s0 = Scenario(model=ModelParams(a_lin=0.0, c_lin=0.0))
    assert ubar(LimitPoint(s=0.25, x0=0.8, y=0.1, z0=0.0), s0, 1e-10) == pytest.approx(0.0, abs=1e-10)


def test_ubar_bounded():
    s = Scenario()
    m = s.model
    curv = m.alpha + m.beta**2 / m.gamma
    bound = (abs(m.a_lin) + abs(m.beta) * abs(m.c_lin) / m.gamma + abs(m.kappa_b0)) / curv + 1e-9
    rng = np.random.default_rng(3)
    for _ in range(100):
        pt = LimitPoint(s=rng.uniform(s.t_start, s.t_end), x0=rng.uniform(-3, 3),
                        y=rng.uniform(-2, 2), z0=rng.uniform(-3, 3))
        assert abs(ubar(pt, s, 1e-10)) <= bound


def test_ubar_consistent_with_n_saddle_at_start():
    s = Scenario()
    n = 6
    x = np.concatenate([[0.7], np.full(n, s.xbar_init)])
    z = np.concatenate([[0.9], np.zeros(n)])
    sp = saddle_point_n(
        HamiltonianPoint(x=x, y=0.3, z=z, n_minor=n, eps=s.epsilon(n)), s.model
    )
    u_lim = ubar(LimitPoint(s=s.t_start, x0=0.7, y=0.3, z0=0.9), s, 1e-12)
    assert sp.u == pytest.approx(u_lim, abs=1e-8)


def test_reduced_hbar_examples():
    s1 = Scenario(model=ModelParams(kappa_g=0.0, a_lin=1.0, c_lin=0.0, alpha=2.0, gamma=2.0, beta=1.0))
    assert eval_hbar_reduced(LimitPoint(s=0.2, x0=0.5, y=0.0, z0=0.0), s1) == pytest.approx(0.2, abs=1e-10)
    s2 = Scenario(model=ModelParams(kappa_g=0.0, a_lin=0.0, c_lin=0.0))
    assert eval_hbar_reduced(LimitPoint(s=0.2, x0=0.5, y=0.0, z0=0.0), s2) == pytest.approx(0.0, abs=1e-12)


def test_reduced_hbar_lipschitz_on_probes():
    s = Scenario()
    m = s.model
    curv = m.alpha + m.beta**2 / m.gamma
    c_u = (abs(m.a_lin) + abs(m.beta) * abs(m.c_lin) / m.gamma + abs(m.kappa_b0)) / curv
    lip = abs(m.kappa_g) + abs(m.kappa_b0) * (1.0 + c_u)  # envelope bound per coordinate
    rng = np.random.default_rng(4)
    t = 0.3
    for _ in range(1000):
        a = rng.uniform(-2, 2, 3)
        b = a + rng.uniform(-0.5, 0.5, 3)
        va = eval_hbar_reduced(LimitPoint(s=t, x0=a[0], y=a[1], z0=a[2]), s)
        vb = eval_hbar_reduced(LimitPoint(s=t, x0=b[0], y=b[1], z0=b[2]), s)
        assert abs(va - vb) <= lip * np.abs(a - b).sum() + 1e-9


def test_quadrature_self_consistency_and_mc():
    base = Scenario()
    s20 = Scenario(quad_order=20)
    s40 = Scenario(quad_order=40)
    pt = LimitPoint(s=0.41, x0=0.3, y=-0.2, z0=0.7)
    v20, _ = eval_hbar_u(pt, 0.5, s20)
    v40, _ = eval_hbar_u(pt, 0.5, s40)
    assert abs(v20 - v40) <= 1e-8

    # nested Monte Carlo with 1e6 draws stays within 5 standard errors
    m = base.model
    rng = np.random.default_rng(5)
    var = pt.s - base.t_start
    x1 = base.xbar_init + np.sqrt(var) * rng.standard_normal(1_000_000)
    u = 0.5
    v = -(m.c_lin + m.beta * u) / m.gamma
    draws = m.f(pt.x0, x1, pt.y, pt.z0, 0.0, u, v) + m.b0(pt.x0, x1, pt.z0) * pt.z0 * u
    se = draws.std(ddof=1) / np.sqrt(draws.size)
    assert abs(draws.mean() - v40) <= 5 * se


def test_ubar_batch_matches_scalar():
    s = Scenario()
    rng = np.random.default_rng(6)
    x0 = rng.uniform(-2, 2, 30)
    y = rng.uniform(-1, 1, 30)
    z0 = rng.uniform(-1, 1, 30)
    u_b = ubar_batch(0.33, x0, y, z0, s)
    for k in range(0, 30, 7):
        assert u_b[k] == pytest.approx(
            ubar(LimitPoint(s=0.33, x0=x0[k], y=y[k], z0=z0[k]), s), abs=1e-9
        )


def test_gauss_hermite_normalisation():
    zeta, w = gauss_hermite(40)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert (zeta * w).sum() == pytest.approx(0.0, abs=1e-12)
    assert (zeta**2 * w).sum() == pytest.approx(1.0, abs=1e-10)


def test_time_before_start_rejected():
    s = Scenario()
    with pytest.raises(ValueError):
        eval_hbar_u(LimitPoint(s=s.t_start - 0.1, x0=0.0, y=0.0, z0=0.0), 0.0, s)
