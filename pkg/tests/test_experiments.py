import numpy as np
import pytest

from mfg.experiments import (
    ConvergenceReport,
    RatePoint,
    _piecewise_eta,
    fit_rate,
    run_bsde_convergence,
    run_empirical_average_convergence,
    run_forward_convergence,
    run_saddle_convergence,
    verify_saddle_and_uniqueness,
)
from mfg.model import ConfigError, ModelParams, RandomStream, Scenario


# --------------------------------------------------------------------------
# fit_rate
# --------------------------------------------------------------------------


def test_fit_rate_exact_power_law():
    slope, ci = fit_rate([(n, 1.0 / n, 0.0) for n in (8, 16, 32)])
    assert slope == pytest.approx(-1.0, abs=1e-12)
    assert ci[0] <= -1.0 <= ci[1]


def test_fit_rate_constant():
    slope, _ = fit_rate([(n, 0.37, 0.0) for n in (8, 16, 32, 64)])
    assert slope == pytest.approx(0.0, abs=1e-12)


def test_fit_rate_noisy_power_law_resamples():
    rng = np.random.default_rng(42)
    for _ in range(20):
        pts = [(n, (1.0 / n) * (1 + 0.05 * rng.standard_normal()), 0.05 / n) for n in (8, 16, 32, 64)]
        slope, _ = fit_rate(pts)
        assert -1.1 <= slope <= -0.9


def test_fit_rate_floor_exclusion():
    pts = [(8, 1.0, 0.0), (16, 0.5, 0.0), (32, 0.25, 0.0), (64, 1e-9, 0.0)]
    slope, _ = fit_rate(pts, floor=1e-6)  # the 64-point sits below the floor
    assert slope == pytest.approx(-1.0, abs=1e-12)
    with pytest.raises(ValueError, match="3 distinct"):
        fit_rate(pts[:2])
    with pytest.raises(ValueError, match="3 distinct"):
        fit_rate(pts, floor=0.3)


# --------------------------------------------------------------------------
# studies at smoke scale
# --------------------------------------------------------------------------


def test_forward_study_smoke_and_determinism():
    s = Scenario(n_steps=8, model=ModelParams(sigma_mode="tanh"))
    rep1 = run_forward_convergence(s, [4, 8, 16], 80)
    rep2 = run_forward_convergence(s, [4, 8, 16], 80)
    assert rep1.slope < 0
    assert [p.err_mean for p in rep1.per_n] == [p.err_mean for p in rep2.per_n]
    assert rep1.to_csv_rows() == rep2.to_csv_rows()
    assert rep1.per_n[0].n_reps == 80


def test_forward_study_degenerate_config_switches_sigma():
    s = Scenario(n_steps=6, model=ModelParams(kappa_b0=0.0, kappa_b1=0.0, sigma_mode="const"))
    rep = run_forward_convergence(s, [4, 8, 16], 60)
    assert rep.extra.get("degenerate_config_switched")
    assert all(p.err_mean > 0 for p in rep.per_n)


def test_empirical_average_study_smoke():
    s = Scenario(n_steps=8, model=ModelParams(sigma_mode="tanh"))
    rep = run_empirical_average_convergence(s, [4, 8, 16], 100)
    assert rep.study == "empirical"
    assert rep.slope < -0.3


def test_empirical_average_rate_in_band():
    # bounded-Lipschitz empirical averages vs the conditional-cloud average,
    # h = tanh(x0 + x1), cloud at least 16 N
    s = Scenario(n_steps=10, model=ModelParams(sigma_mode="tanh"))
    rep = run_empirical_average_convergence(s, [8, 16, 32], 400)
    assert -1.35 <= rep.slope <= -0.65


def test_threaded_execution_is_deterministic(monkeypatch):
    s = Scenario(n_steps=8)
    serial = run_saddle_convergence(s, [4, 8, 16], 96, n_replicates=4)
    monkeypatch.setenv("MFG_THREADS", "4")
    threaded = run_saddle_convergence(s, [4, 8, 16], 96, n_replicates=4)
    assert serial.to_csv_rows() == threaded.to_csv_rows()
    assert serial.slope == threaded.slope


def test_bsde_study_smoke():
    s = Scenario(n_steps=8, model=ModelParams(sigma_mode="tanh"), mc_cloud=64)
    rep = run_bsde_convergence(s, [4, 8, 16], 80)
    assert rep.slope < 0
    assert len(rep.extra["z_minor_means"]) == 3


def test_saddle_study_requires_conforming_eps():
    s = Scenario(eps_exponent=0.5, allow_nonconforming_eps=True)
    with pytest.raises(ConfigError, match="conforming"):
        run_saddle_convergence(s, [4, 8, 16], 64)


def test_saddle_study_smoke():
    s = Scenario(n_steps=8)
    rep = run_saddle_convergence(s, [4, 8, 16], 96, n_replicates=4)
    assert rep.study == "saddle"
    assert len(rep.per_n) == 3
    assert "z_minor_means" in rep.extra


def test_report_serialisation_round_trip():
    rep = ConvergenceReport(
        study="demo", n_list=[8, 16, 32],
        per_n=[RatePoint(8, 0.1, 0.01, 5), RatePoint(16, 0.05, 0.005, 5), RatePoint(32, 0.024, 0.002, 5)],
        slope=-1.02, slope_ci=(-1.2, -0.8), passed=True, runtime_s=1.5,
        extra={"arr": np.array([1.0, 2.0])},
    )
    d = rep.to_json_dict(seed=7, digest="abc")
    assert d["pass"] is True
    assert d["seed"] == 7 and d["config_digest"] == "abc"
    assert d["extra"]["arr"] == [1.0, 2.0]
    rows = rep.to_csv_rows()
    assert rows[0] == "study,N,reps,err_mean,err_std,excluded"
    assert rows[1].startswith("demo,8,5,0.1,")
    import json

    json.dumps(d)  # must be JSON-serialisable


# --------------------------------------------------------------------------
# saddle verification
# --------------------------------------------------------------------------


def test_piecewise_eta_shape_and_range():
    rng = RandomStream(1, "eta").generator()
    eta = _piecewise_eta(rng, 12, n_blocks=4)
    assert eta.shape == (12,)
    assert np.all(np.abs(eta) <= 1.0)
    assert len(np.unique(eta)) <= 4
    eta2 = _piecewise_eta(rng, 12, shape=(3,))
    assert eta2.shape == (3, 12)


def test_verify_tiny_delta_has_no_violations_and_tiny_margins():
    s = Scenario(n_steps=8, mc_outer=128)
    res = verify_saddle_and_uniqueness(s, n_minor=4, n_perturb=3, magnitude=(1e-6,))
    assert res.ok
    for key in ("n_game_u", "n_game_v"):
        margins = np.asarray(res.margins[key])
        assert np.max(np.abs(margins)) <= res.tol_n_game + 1e-9


def test_verify_closed_form_quadratic_drop():
    """With the no-coupling quadratic family and the minors responding
    optimally, a constant u-shift of size delta drops the payoff by exactly
    (alpha + beta^2/gamma)/2 * delta^2 * (T - t)."""
    from mfg.bsde import solve_controlled_bsde, solve_saddle_bsde
    from mfg.forward import TimeGrid, sample_brownian_bundle

    s = Scenario(t_end=0.5, n_steps=10,
                 model=ModelParams(a_lin=1.0, c_lin=0.0, alpha=2.0, gamma=2.0, beta=1.0,
                                   kappa_g=0.0, kappa_phi=0.0, kappa_b0=0.0, kappa_b1=0.0))
    n = 4
    b = sample_brownian_bundle(TimeGrid.from_scenario(s), n, 64, RandomStream(2, "cf"))
    sad = solve_saddle_bsde(s, n, b)
    delta = 0.5
    u_pert = sad.controls_u + delta
    v_resp = -(s.model.beta * u_pert[:, None, :]) / s.model.gamma * np.ones((1, n, 1))
    y_pert = solve_controlled_bsde(s, n, b, u_pert, v_resp).y_t
    drop = sad.y_t - y_pert
    expected = (s.model.alpha + s.model.beta**2 / s.model.gamma) / 2 * delta**2 * s.horizon
    assert drop == pytest.approx(expected, abs=1e-8)


def test_verify_small_scale_full_run():
    s = Scenario(n_steps=10, mc_outer=128)
    res = verify_saddle_and_uniqueness(s, n_minor=4, n_perturb=4, magnitude=(0.1, 0.5))
    assert res.ok, res.violations
    assert np.all(np.asarray(res.margins["n_game_u"]) <= res.tol_n_game)
    assert np.all(np.asarray(res.margins["n_game_v"]) >= -res.tol_n_game)
    # strictness: the responding-minors drop exceeds its quadratic lower bound
    assert np.all(np.asarray(res.margins["n_game_u_strict"]) >= -res.tol_n_game)


def test_verify_rejects_bad_arguments():
    s = Scenario(n_steps=6, mc_outer=64)
    with pytest.raises(ValueError):
        verify_saddle_and_uniqueness(s, 4, n_perturb=0)
    with pytest.raises(ValueError):
        verify_saddle_and_uniqueness(s, 4, n_perturb=1, magnitude=(-0.1,))
