import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfg.forward import (
    PathBundle,
    TimeGrid,
    _cloud_mean_tanh_interp,
    sample_brownian_bundle,
    simulate_conditional_mkv,
    simulate_n_system,
    wasserstein2_1d,
)
from mfg.limit import gauss_hermite
from mfg.model import ModelParams, RandomStream, Scenario


def _null_scenario(**kw):
    """Decoupled dynamics: b = 0, sigma = 1."""
    return Scenario(model=ModelParams(kappa_b0=0.0, kappa_b1=0.0, sigma_mode="const"), **kw)


def test_bundle_moments_match_gaussian():
    grid = TimeGrid(0.0, 1.0, 1)
    b = sample_brownian_bundle(grid, 0, 100_000, RandomStream(1, "m"))
    inc = b.increments[:, 0, 0]
    assert abs(inc.mean()) < 5.0 / np.sqrt(inc.size)          # 5 sigma/sqrt(n), h = 1
    assert abs(inc.var() - 1.0) < 5.0 * np.sqrt(2.0 / inc.size)


def test_bundle_determinism():
    grid = TimeGrid(0.0, 0.5, 4)
    a = sample_brownian_bundle(grid, 3, 10, RandomStream(2, "d"))
    b = sample_brownian_bundle(grid, 3, 10, RandomStream(2, "d"))
    assert np.array_equal(a.increments, b.increments)


def test_bundle_major_only():
    grid = TimeGrid(0.0, 0.5, 4)
    b = sample_brownian_bundle(grid, 0, 7, RandomStream(3, "z"))
    assert b.increments.shape == (7, 1, 4)


def test_grid_times():
    g = TimeGrid(0.25, 1.25, 4)
    assert np.allclose(g.times, [0.25, 0.5, 0.75, 1.0, 1.25])
    assert g.h == 0.25


def test_n_system_pure_brownian_is_exact():
    s = _null_scenario()
    grid = TimeGrid.from_scenario(s)
    b = sample_brownian_bundle(grid, 4, 6, RandomStream(5, "pb"))
    vals = simulate_n_system(s, 4, b).values
    inits = np.concatenate([[s.x0_init], s.minor_init_values(4)])
    expected = np.empty_like(vals)
    expected[:, :, 0] = inits
    for i in range(grid.n_steps):  # same accumulation order as the scheme
        expected[:, :, i + 1] = expected[:, :, i] + b.increments[:, :, i]
    assert np.array_equal(vals, expected)


def test_n_system_minor_permutation_is_exact():
    s = Scenario(model=ModelParams(sigma_mode="tanh"))
    grid = TimeGrid.from_scenario(s)
    b = sample_brownian_bundle(grid, 5, 4, RandomStream(6, "perm"))
    base = simulate_n_system(s, 5, b).values
    perm = np.array([0, 3, 1, 5, 4, 2])  # identity on the major player
    b2 = PathBundle(grid=grid, n_minor=5, n_samples=4, increments=b.increments[:, perm, :])
    permuted = simulate_n_system(s, 5, b2).values
    assert np.array_equal(permuted[:, 0, :], base[:, 0, :])
    assert np.array_equal(permuted, base[:, perm, :])


def test_n_system_single_step_drift_oracle():
    s = Scenario(t_end=0.5, n_steps=1)
    m = s.model
    grid = TimeGrid.from_scenario(s)
    b = sample_brownian_bundle(grid, 8, 3, RandomStream(7, "drift"))
    vals = simulate_n_system(s, 8, b).values
    x0 = s.x0_init
    xm = s.minor_init_values(8)
    drift0 = m.kappa_b0 * np.mean(np.tanh(x0 + xm))
    expected0 = x0 + grid.h * drift0 + b.increments[:, 0, 0]
    assert np.allclose(vals[:, 0, 1], expected0, atol=1e-14)
    drift1 = m.kappa_b1 * np.mean(np.tanh(x0 + xm[0] + xm))
    expected1 = xm[0] + grid.h * drift1 + b.increments[:, 1, 0]
    assert np.allclose(vals[:, 1, 1], expected1, atol=1e-14)


def test_n_system_requires_two_minors_and_matching_bundle():
    s = Scenario()
    grid = TimeGrid.from_scenario(s)
    b = sample_brownian_bundle(grid, 4, 3, RandomStream(8, "e"))
    with pytest.raises(ValueError):
        simulate_n_system(s, 1, sample_brownian_bundle(grid, 1, 3, RandomStream(8, "e")))
    with pytest.raises(ValueError):
        simulate_n_system(s, 5, b)


def test_mkv_decoupled_paths_are_exact():
    s = _null_scenario()
    grid = TimeGrid.from_scenario(s)
    b = sample_brownian_bundle(grid, 2, 5, RandomStream(9, "mkv"))
    stream = RandomStream(9, "cloud")
    cc = simulate_conditional_mkv(
        s, b.increments[:, 0, :], 2, 8, stream, tagged_increments=b.increments[:, 1:, :]
    )
    expected_x0 = s.x0_init + np.cumsum(b.increments[:, 0, :], axis=1)
    assert np.allclose(cc.x0_path[:, 1:], expected_x0, atol=1e-14)
    # cloud members are plain Brownian paths from xbar driven by the stream
    rng = stream.generator()
    cloud_inc = rng.standard_normal((5, 8, grid.n_steps)) * np.sqrt(grid.h)
    assert np.allclose(cc.cloud[:, :, 1:], s.xbar_init + np.cumsum(cloud_inc, axis=2), atol=1e-14)
    # tagged particles reuse the supplied increments
    assert np.allclose(
        cc.tagged[:, :, 1:], s.xbar_init + np.cumsum(b.increments[:, 1:, :], axis=2), atol=1e-14
    )


def test_mkv_cloud_average_matches_quadrature():
    s = _null_scenario(t_end=1.0, n_steps=10)
    m_cloud = 4096
    cc = simulate_conditional_mkv(
        s, np.zeros((1, 10)), 0, m_cloud, RandomStream(10, "quad")
    )
    got = np.tanh(cc.cloud[0, :, -1]).mean()
    zeta, w = gauss_hermite(60)
    expected = np.tanh(s.xbar_init + np.sqrt(s.horizon) * zeta) @ w
    assert abs(got - expected) < 5.0 / np.sqrt(m_cloud)


def test_mkv_doubling_cloud_clt_scaling():
    s = _null_scenario(t_end=1.0, n_steps=8)
    w0 = sample_brownian_bundle(TimeGrid.from_scenario(s), 0, 1, RandomStream(11, "w0")).increments[:, 0, :]
    m = 512
    a = simulate_conditional_mkv(s, w0, 0, m, RandomStream(11, "cl").child("a"))
    b = simulate_conditional_mkv(s, w0, 0, 2 * m, RandomStream(11, "cl").child("b"))
    ga = np.tanh(a.cloud[0, :, -1]).mean()
    gb = np.tanh(b.cloud[0, :, -1]).mean()
    spread = np.tanh(a.cloud[0, :, -1]).std(ddof=1)
    assert abs(ga - gb) < 5.0 * spread * np.sqrt(1.0 / m + 1.0 / (2 * m))


def test_mkv_with_interaction_matches_exact_pairwise_reference():
    # Hermite-grid coefficient evaluation against the O(M^2) direct average
    s = Scenario(model=ModelParams(sigma_mode="tanh"), n_steps=6)
    grid = TimeGrid.from_scenario(s)
    m_cloud = 64
    stream = RandomStream(12, "ref")
    w0 = sample_brownian_bundle(grid, 0, 3, stream.child("w0")).increments[:, 0, :]
    cc = simulate_conditional_mkv(s, w0, 0, m_cloud, stream.child("cloud"))

    # re-simulate with exact pairwise sums, reusing the identical increments
    rng = stream.child("cloud").generator()
    cloud_inc = rng.standard_normal((3, m_cloud, grid.n_steps)) * np.sqrt(grid.h)
    x0 = np.full(3, s.x0_init)
    cloud = np.full((3, m_cloud), s.xbar_init)
    h = grid.h
    for i in range(grid.n_steps):
        g_major = np.tanh(x0[:, None] + cloud).mean(axis=1)
        x0_new = x0 + h * s.model.kappa_b0 * g_major + (1 + 0.5 * g_major) * w0[:, i]
        pair = np.tanh(x0[:, None, None] + cloud[:, :, None] + cloud[:, None, :]).mean(axis=2)
        cloud = cloud + h * s.model.kappa_b1 * pair + (1 + 0.5 * pair) * cloud_inc[:, :, i]
        x0 = x0_new
    assert np.allclose(cc.x0_path[:, -1], x0, atol=1e-5)
    assert np.allclose(cc.cloud[:, :, -1], cloud, atol=1e-5)


def test_cloud_interp_accuracy():
    rng = np.random.default_rng(0)
    cloud = rng.normal(0.0, 1.0, size=(4, 200))
    targets = rng.uniform(-3, 3, size=(4, 50))
    exact = np.tanh(targets[:, :, None] + cloud[:, None, :]).mean(axis=2)
    approx = _cloud_mean_tanh_interp(cloud, targets, 48)
    assert np.max(np.abs(exact - approx)) < 1e-6


def test_wasserstein_examples():
    assert wasserstein2_1d([0, 1], [0, 1]) == 0.0
    assert wasserstein2_1d([0, 0], [1, 1]) == 1.0
    # enumerate both couplings of {0,2} vs {1,3}: monotone pairing wins
    costs = [np.sqrt(((0 - 1) ** 2 + (2 - 3) ** 2) / 2), np.sqrt(((0 - 3) ** 2 + (2 - 1) ** 2) / 2)]
    assert wasserstein2_1d([0, 2], [1, 3]) == pytest.approx(min(costs), abs=1e-15)


def test_wasserstein_errors():
    with pytest.raises(ValueError):
        wasserstein2_1d([], [])
    with pytest.raises(ValueError):
        wasserstein2_1d([1.0], [1.0, 2.0])


_samples = st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=30)


@given(_samples, st.data())
@settings(max_examples=100, deadline=None)
def test_wasserstein_metric_properties(a, data):
    n = len(a)
    b = data.draw(st.lists(st.floats(-100, 100, allow_nan=False), min_size=n, max_size=n))
    c = data.draw(st.lists(st.floats(-100, 100, allow_nan=False), min_size=n, max_size=n))
    dab = wasserstein2_1d(a, b)
    assert dab >= 0.0
    assert wasserstein2_1d(a, a) == 0.0
    assert dab == pytest.approx(wasserstein2_1d(b, a), abs=1e-12)
    assert dab <= wasserstein2_1d(a, c) + wasserstein2_1d(c, b) + 1e-9
