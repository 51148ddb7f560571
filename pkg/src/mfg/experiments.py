"""Convergence studies, saddle verification and rate fitting.

Every study couples the N-system and its limit on identical Brownian
bundles, so reported errors are N-errors on shared randomness plus a solver
floor, never raw Monte-Carlo differences of independent runs.  Across N the
bundles are nested (the N-bundle is a slice of the N_max-bundle), which
correlates the per-N errors and steadies the fitted slope.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bsde import (
    solve_controlled_bsde,
    solve_limit_bsde,
    solve_limit_game_bsde,
    solve_saddle_bsde,
    solve_uncontrolled_pair,
    saddle_u_ctrl,
    saddle_v_ctrl,
)
from .forward import PathBundle, TimeGrid, sample_brownian_bundle, simulate_conditional_mkv, simulate_n_system
from .limit import gauss_hermite, ubar_batch, vbar
from .model import ConfigError, RandomStream, Scenario
from .numutil import sorted_mean, sorted_sum

__all__ = [
    "ConvergenceReport",
    "RatePoint",
    "fit_rate",
    "run_forward_convergence",
    "run_empirical_average_convergence",
    "run_bsde_convergence",
    "run_saddle_convergence",
    "run_control_convergence",
    "verify_saddle_and_uniqueness",
    "SaddleVerification",
    "STUDY_BANDS",
]

STUDY_BANDS = {
    "forward": (-1.35, -0.65),
    "empirical": (-1.35, -0.65),
    "bsde": (-1.35, -0.65),
    "saddle": (-1.4, -0.6),
    "control": (-1.4, -0.6),
}


@dataclass(frozen=True)
class RatePoint:
    n: int
    err_mean: float
    err_std: float
    n_reps: int
    excluded: bool = False


@dataclass
class ConvergenceReport:
    study: str
    n_list: list[int]
    per_n: list[RatePoint]
    slope: float
    slope_ci: tuple[float, float]
    passed: bool
    runtime_s: float
    extra: dict = field(default_factory=dict)

    def to_json_dict(self, seed=None, digest=None) -> dict:
        out = {
            "study": self.study,
            "n_list": list(self.n_list),
            "points": [
                {
                    "N": p.n,
                    "reps": p.n_reps,
                    "err_mean": p.err_mean,
                    "err_std": p.err_std,
                    "excluded": p.excluded,
                }
                for p in self.per_n
            ],
            "slope": self.slope,
            "ci": list(self.slope_ci),
            "pass": self.passed,
            "runtime_s": self.runtime_s,
        }
        if seed is not None:
            out["seed"] = seed
        if digest is not None:
            out["config_digest"] = digest
        out["extra"] = _json_safe(self.extra)
        return out

    def to_csv_rows(self) -> list[str]:
        rows = ["study,N,reps,err_mean,err_std,excluded"]
        for p in self.per_n:
            rows.append(
                f"{self.study},{p.n},{p.n_reps},{p.err_mean!r},{p.err_std!r},{str(p.excluded).lower()}"
            )
        return rows


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _workers() -> int:
    return max(1, int(os.environ.get("MFG_THREADS", "1")))


def _map_indexed(fn, args_list):
    """Run fn over args, preserving order; threads only when MFG_THREADS > 1."""
    w = _workers()
    if w == 1 or len(args_list) <= 1:
        return [fn(a) for a in args_list]
    with ThreadPoolExecutor(max_workers=w) as ex:
        return list(ex.map(fn, args_list))


# --------------------------------------------------------------------------
# rate fitting
# --------------------------------------------------------------------------


def fit_rate(per_n, floor: float = 0.0):
    """Least-squares slope of log(err) against log(N) with a confidence band.

    ``per_n`` is a sequence of (N, err_mean, err_std) with err_std the
    standard error of err_mean.  Points at or below ``floor`` (the solver
    noise floor) are excluded; at least 3 usable points must remain.  The
    half-width of the returned interval combines the residual-based slope
    standard error with the per-point uncertainty propagated through the
    least-squares weights.
    """
    rows = [(int(n), float(m), float(sd)) for n, m, sd in per_n]
    usable = [(n, m, sd) for n, m, sd in rows if m > floor]
    if len({n for n, _, _ in usable}) < 3:
        raise ValueError(
            f"fit_rate needs >= 3 distinct usable N values above the floor, got {len(usable)}"
        )
    x = np.log([n for n, _, _ in usable])
    ymean = np.array([m for _, m, _ in usable])
    y = np.log(ymean)
    sigma_y = np.array([sd for _, _, sd in usable]) / ymean  # delta method

    xbar = x.mean()
    sxx = float(np.sum((x - xbar) ** 2))
    a = (x - xbar) / sxx
    slope = float(a @ y)
    intercept = float(y.mean() - slope * xbar)
    resid = y - (intercept + slope * x)
    dof = max(len(x) - 2, 1)
    se_resid_sq = float(resid @ resid) / dof / sxx
    se_prop_sq = float(np.sum(a**2 * sigma_y**2))
    half = float(1.96 * np.sqrt(se_resid_sq + se_prop_sq))
    return slope, (slope - half, slope + half)


def _summaries(values: np.ndarray) -> tuple[float, float]:
    """(mean, standard error of the mean) of a statistic sample."""
    values = np.asarray(values, dtype=float)
    n = values.size
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0


# --------------------------------------------------------------------------
# forward chaos study
# --------------------------------------------------------------------------


def _coupled_forward(s: Scenario, n_minor: int, bundle_full: PathBundle, m_cloud: int):
    """Simulate the N-system and the coupled limit on a slice of the bundle."""
    grid = bundle_full.grid
    bundle = PathBundle(
        grid=grid,
        n_minor=n_minor,
        n_samples=bundle_full.n_samples,
        increments=bundle_full.increments[:, : n_minor + 1, :],
    )
    n_paths = simulate_n_system(s, n_minor, bundle)
    cloud = simulate_conditional_mkv(
        s,
        bundle.increments[:, 0, :],
        n_tagged=n_minor,
        m_cloud=m_cloud,
        stream=RandomStream(s.seed, f"cloud/N{n_minor}"),
        tagged_increments=bundle.increments[:, 1:, :],
    )
    return n_paths, cloud


def run_forward_convergence(
    s: Scenario, n_list, reps: int, stream: RandomStream | None = None
) -> ConvergenceReport:
    """Pathwise propagation-of-chaos rate of the coupled forward systems.

    Statistic per outer sample: max over grid times of
    |X^{0,N} - Xbar^0|^2 + (1/N) sum_l |X^{l,N} - Xbar^l|^2.
    """
    t0 = time.perf_counter()
    n_list = sorted(int(n) for n in n_list)
    if reps < 2:
        raise ValueError("reps must be >= 2")
    if stream is None:
        stream = RandomStream(s.seed, "forward-study")
    grid = TimeGrid.from_scenario(s)
    bundle_full = sample_brownian_bundle(grid, max(n_list), reps, stream)

    extra: dict = {}
    scenario = s
    points = []
    for idx, n_minor in enumerate(n_list):
        m_cloud = max(s.mc_cloud, 16 * n_minor)
        n_paths, cloud = _coupled_forward(scenario, n_minor, bundle_full, m_cloud)
        stat = _forward_statistic(n_paths.values, cloud)
        if idx == 0 and float(stat.max()) < 1e-28:
            # fully decoupled configuration (b = 0, sigma = 1): the coupled
            # paths coincide; switch to the state-dependent diffusion mode
            extra["degenerate_config_switched"] = True
            scenario = s.with_overrides(sigma_mode="tanh")
            n_paths, cloud = _coupled_forward(scenario, n_minor, bundle_full, m_cloud)
            stat = _forward_statistic(n_paths.values, cloud)
        mean, se = _summaries(stat)
        points.append(RatePoint(n_minor, mean, se, reps))

    slope, ci = fit_rate([(p.n, p.err_mean, p.err_std) for p in points])
    lo, hi = STUDY_BANDS["forward"]
    return ConvergenceReport(
        study="forward",
        n_list=n_list,
        per_n=points,
        slope=slope,
        slope_ci=ci,
        passed=lo <= slope <= hi,
        runtime_s=time.perf_counter() - t0,
        extra=extra,
    )


def _forward_statistic(values: np.ndarray, cloud) -> np.ndarray:
    diff0_sq = (values[:, 0, :] - cloud.x0_path) ** 2           # [n, steps+1]
    diffm_sq = sorted_mean((values[:, 1:, :] - cloud.tagged) ** 2, axis=1)
    return np.max(diff0_sq + diffm_sq, axis=1)


def run_empirical_average_convergence(
    s: Scenario, n_list, reps: int, stream: RandomStream | None = None
) -> ConvergenceReport:
    """Empirical-average rate: (1/N) sum_l h(X^{0,N}, X^{l,N}) against the
    cloud average of h(Xbar^0, Xbar^1) for h = tanh(x0 + x1), measured at the
    grid time with the largest mean squared gap."""
    t0 = time.perf_counter()
    n_list = sorted(int(n) for n in n_list)
    if stream is None:
        stream = RandomStream(s.seed, "empirical-study")
    grid = TimeGrid.from_scenario(s)
    bundle_full = sample_brownian_bundle(grid, max(n_list), reps, stream)

    points = []
    for n_minor in n_list:
        m_cloud = max(s.mc_cloud, 16 * n_minor)
        n_paths, cloud = _coupled_forward(s, n_minor, bundle_full, m_cloud)
        v = n_paths.values
        emp = sorted_mean(np.tanh(v[:, 0:1, :] + v[:, 1:, :]), axis=1)          # [n, steps+1]
        lim = np.tanh(cloud.x0_path[:, None, :] + cloud.cloud).mean(axis=1)     # [n, steps+1]
        gap_sq = (emp - lim) ** 2
        worst = int(np.argmax(gap_sq.mean(axis=0)))
        mean, se = _summaries(gap_sq[:, worst])
        points.append(RatePoint(n_minor, mean, se, reps))

    slope, ci = fit_rate([(p.n, p.err_mean, p.err_std) for p in points])
    lo, hi = STUDY_BANDS["empirical"]
    return ConvergenceReport(
        study="empirical",
        n_list=n_list,
        per_n=points,
        slope=slope,
        slope_ci=ci,
        passed=lo <= slope <= hi,
        runtime_s=time.perf_counter() - t0,
    )


# --------------------------------------------------------------------------
# uncontrolled BSDE study
# --------------------------------------------------------------------------


def run_bsde_convergence(
    s: Scenario, n_list, reps: int, stream: RandomStream | None = None
) -> ConvergenceReport:
    """Rate of the uncontrolled BSDE pair: per-sample statistic
    sup_s |Y^N - Ybar|^2 + int |Z^{0,N} - Zbar^0|^2 + sum_l int |Z^{l,N}|^2."""
    t0 = time.perf_counter()
    n_list = sorted(int(n) for n in n_list)
    if stream is None:
        stream = RandomStream(s.seed, "bsde-study")
    grid = TimeGrid.from_scenario(s)
    bundle_full = sample_brownian_bundle(grid, max(n_list), reps, stream)

    points = []
    z_minor_means = []
    for n_minor in n_list:
        bundle = PathBundle(
            grid=grid,
            n_minor=n_minor,
            n_samples=reps,
            increments=bundle_full.increments[:, : n_minor + 1, :],
        )
        res = solve_uncontrolled_pair(s, n_minor, bundle)
        mean, se = _summaries(res.z_diag["statistic"])
        points.append(RatePoint(n_minor, mean, se, reps))
        z_minor_means.append(float(np.mean(res.z_diag["int_z_minor_sq"])))

    slope, ci = fit_rate([(p.n, p.err_mean, p.err_std) for p in points])
    lo, hi = STUDY_BANDS["bsde"]
    return ConvergenceReport(
        study="bsde",
        n_list=n_list,
        per_n=points,
        slope=slope,
        slope_ci=ci,
        passed=lo <= slope <= hi,
        runtime_s=time.perf_counter() - t0,
        extra={"z_minor_means": z_minor_means},
    )


# --------------------------------------------------------------------------
# saddle BSDE study (controlled game vs limit BSDE)
# --------------------------------------------------------------------------


def _replicate_plan(reps: int, n_replicates: int = 16, sample_divisor: int = 1):
    """Replicate solves per N: the fitted statistic needs several independent
    initial-value estimates, so the sample budget ``reps`` is spent on
    ``n_replicates`` solves of ``reps // sample_divisor`` samples each."""
    n_rep = max(3, n_replicates)
    return n_rep, max(64, reps // sample_divisor)


def _require_conforming_eps(s: Scenario):
    if s.eps_exponent != 0.75:
        raise ConfigError(
            f"study requires the conforming eps schedule N^-3/4, got exponent {s.eps_exponent}"
        )


def run_saddle_convergence(
    s: Scenario, n_list, reps: int, stream: RandomStream | None = None,
    n_replicates: int = 24,
) -> ConvergenceReport:
    """Convergence of the saddle-point game BSDE to the limit BSDE.

    statistic1 (rate-fitted): |Ybar^N_t - Ybar_t|^2 per replicate solve;
    statistic2 (logged, monotonicity-checked): per-sample
    int |Zbar^{0,N} - Zbar^0|^2 + sum_l int |Zbar^{l,N}|^2.
    """
    t0 = time.perf_counter()
    _require_conforming_eps(s)
    n_list = sorted(int(n) for n in n_list)
    if stream is None:
        stream = RandomStream(s.seed, "saddle-study")
    n_rep, n_samples = _replicate_plan(reps, n_replicates, sample_divisor=2)
    grid = TimeGrid.from_scenario(s)
    limit = solve_limit_bsde(s)
    y_bar_t = limit.y_t

    def one(task):
        n_minor, rep = task
        bundle = sample_brownian_bundle(
            grid, n_minor, n_samples, stream.child(f"N{n_minor}", rep)
        )
        sol = solve_saddle_bsde(s, n_minor, bundle)
        stat1 = (sol.y_t - y_bar_t) ** 2
        x0_paths = s.x0_init + np.concatenate(
            [np.zeros((n_samples, 1)), np.cumsum(bundle.increments[:, 0, :], axis=1)], axis=1
        )
        z_lim = np.stack(
            [limit.z_at(i, x0_paths[:, i]) for i in range(grid.n_steps)], axis=1
        )
        y_lim = np.stack(
            [limit.y_at(i, x0_paths[:, i]) for i in range(grid.n_steps + 1)], axis=1
        )
        int_z0 = grid.h * np.sum((sol.z[:, 0, :] - z_lim) ** 2, axis=1)
        int_zm = grid.h * sorted_sum(np.sum(sol.z[:, 1:, :] ** 2, axis=2), axis=1)
        sup_y = np.max((sol.y - y_lim) ** 2, axis=1)
        return stat1, int_z0 + int_zm, float(np.mean(int_zm)), float(np.mean(sup_y)), sol.diagnostics

    points = []
    z_stat_means = []
    z_minor_means = []
    sup_y_means = []
    picard_info = []
    for n_minor in n_list:
        results = _map_indexed(one, [(n_minor, r) for r in range(n_rep)])
        stat1 = np.array([r[0] for r in results])
        z_stats = np.concatenate([r[1] for r in results])
        mean, se = _summaries(stat1)
        points.append(RatePoint(n_minor, mean, se, n_rep))
        z_stat_means.append(float(z_stats.mean()))
        z_minor_means.append(float(np.mean([r[2] for r in results])))
        sup_y_means.append(float(np.mean([r[3] for r in results])))
        picard_info.append(results[0][4].get("sweeps"))

    slope, ci = fit_rate([(p.n, p.err_mean, p.err_std) for p in points])
    try:
        z_slope, _ = fit_rate([(n, m, 0.0) for n, m in zip(n_list, z_stat_means)])
    except ValueError:  # all-zero statistics (null family at the noise floor)
        z_slope = None
    z_minor_decreasing = all(
        b < a for a, b in zip(z_minor_means, z_minor_means[1:])
    )
    lo, hi = STUDY_BANDS["saddle"]
    return ConvergenceReport(
        study="saddle",
        n_list=n_list,
        per_n=points,
        slope=slope,
        slope_ci=ci,
        passed=(lo <= slope <= hi) and z_minor_decreasing,
        runtime_s=time.perf_counter() - t0,
        extra={
            "y_bar_t": y_bar_t,
            "z_statistic_means": z_stat_means,
            "z_statistic_slope": z_slope,
            "z_minor_means": z_minor_means,
            "z_minor_strictly_decreasing": z_minor_decreasing,
            "sup_y_pathwise_means": sup_y_means,
            "picard_sweeps": picard_info,
            "samples_per_replicate": n_samples,
        },
    )


# --------------------------------------------------------------------------
# control convergence study
# --------------------------------------------------------------------------


def run_control_convergence(
    s: Scenario, n_list, reps: int, stream: RandomStream | None = None,
    n_replicates: int = 8,
) -> ConvergenceReport:
    """Convergence of the realized saddle controls to the limit controls.

    statistic i (rate-fitted): mean over minors j of
    int (|u^N_s - u_s| + |v^{(j,N)}_s - v^j_s|)^2 ds per sample;
    statistic ii: int |(1/N) sum_l psi(v^{l,N}_s) - E[psi(v_s)|W^0]|^2 ds
    with psi = tanh, the conditional expectation by quadrature.
    """
    t0 = time.perf_counter()
    _require_conforming_eps(s)
    n_list = sorted(int(n) for n in n_list)
    if stream is None:
        stream = RandomStream(s.seed, "control-study")
    n_rep, n_samples = _replicate_plan(reps, n_replicates)
    grid = TimeGrid.from_scenario(s)
    limit = solve_limit_bsde(s)
    zeta, wq = gauss_hermite(s.quad_order)

    def one(task):
        n_minor, rep = task
        bundle = sample_brownian_bundle(
            grid, n_minor, n_samples, stream.child(f"N{n_minor}", rep)
        )
        sol = solve_saddle_bsde(s, n_minor, bundle)
        inits = np.concatenate([[s.x0_init], s.minor_init_values(n_minor)])
        paths = bundle.brownian_paths(inits)
        stat_i = np.zeros(n_samples)
        stat_ii = np.zeros(n_samples)
        for i in range(grid.n_steps):
            x0 = paths[:, 0, i]
            y_l = limit.y_at(i, x0)
            z_l = limit.z_at(i, x0)
            u_lim = ubar_batch(grid.times[i], x0, y_l, z_l, s)
            v_lim = vbar(x0[:, None], paths[:, 1:, i], y_l[:, None], z_l[:, None],
                         u_lim[:, None], s.model)
            v_lim = np.broadcast_to(np.asarray(v_lim), (n_samples, n_minor))
            du = np.abs(sol.controls_u[:, i] - u_lim)
            dv = np.abs(sol.controls_v[:, :, i] - v_lim)
            stat_i += grid.h * sorted_mean((du[:, None] + dv) ** 2, axis=1)
            # weak empirical-measure statistic, psi = tanh
            emp = sorted_mean(np.tanh(sol.controls_v[:, :, i]), axis=1)
            var = max(grid.times[i] - s.t_start, 0.0)
            x1_q = s.xbar_init + np.sqrt(var) * zeta
            v_q = vbar(x0[:, None], x1_q[None, :], y_l[:, None], z_l[:, None],
                       u_lim[:, None], s.model)
            v_q = np.broadcast_to(np.asarray(v_q), (n_samples, zeta.size))
            lim_mean = np.tanh(v_q) @ wq
            stat_ii += grid.h * (emp - lim_mean) ** 2
        return stat_i, stat_ii

    points = []
    weak_means = []
    weak_ses = []
    for n_minor in n_list:
        results = _map_indexed(one, [(n_minor, r) for r in range(n_rep)])
        stat_i = np.concatenate([r[0] for r in results])
        stat_ii = np.concatenate([r[1] for r in results])
        mean, se = _summaries(stat_i)
        points.append(RatePoint(n_minor, mean, se, n_rep * n_samples))
        wm, ws = _summaries(stat_ii)
        weak_means.append(wm)
        weak_ses.append(ws)

    slope, ci = fit_rate([(p.n, p.err_mean, p.err_std) for p in points])
    weak_slope, weak_ci = fit_rate(
        [(n, m, sd) for n, m, sd in zip(n_list, weak_means, weak_ses)]
    )
    lo, hi = STUDY_BANDS["control"]
    passed = (lo <= slope <= hi) and (lo <= weak_slope <= hi)
    return ConvergenceReport(
        study="control",
        n_list=n_list,
        per_n=points,
        slope=slope,
        slope_ci=ci,
        passed=passed,
        runtime_s=time.perf_counter() - t0,
        extra={
            "weak_statistic_means": weak_means,
            "weak_statistic_slope": weak_slope,
            "weak_statistic_ci": list(weak_ci),
        },
    )


# --------------------------------------------------------------------------
# saddle inequality and uniqueness verification
# --------------------------------------------------------------------------


@dataclass
class SaddleVerification:
    n_minor: int
    deltas: list[float]
    n_perturb: int
    tol_n_game: float
    tol_limit_game: float
    violations: list[dict]
    margins: dict
    y_saddle_t: float
    y_limit_t: float

    @property
    def ok(self) -> bool:
        return not self.violations


def _piecewise_eta(rng, n_steps: int, n_blocks: int = 8, shape=()):
    """Piecewise-constant-in-time values in [-1, 1]; deterministic in state."""
    blocks = rng.uniform(-1.0, 1.0, size=shape + (n_blocks,))
    idx = np.minimum(
        (np.arange(n_steps) * n_blocks) // n_steps, n_blocks - 1
    )
    return blocks[..., idx]  # shape + (n_steps,)


def verify_saddle_and_uniqueness(
    s: Scenario,
    n_minor: int,
    n_perturb: int = 50,
    magnitude=(0.1, 0.5),
    stream: RandomStream | None = None,
    n_samples: int | None = None,
) -> SaddleVerification:
    """Verify the two-sided saddle inequalities and strictness by random
    control perturbations, for the N-game and for the limit game.

    For each perturbation eta (piecewise-constant in time, values in [-1,1])
    and each delta:
      * N-game:  Y^{u_bar+delta eta, v_bar} <= Y_saddle + tol and
                 Y^{u_bar, v_bar+delta eta} >= Y_saddle - tol;
      * strictness (uniqueness probe): with the minors responding optimally
        to the perturbed u the payoff drops by at least
        (c_u/2) delta^2 int eta^2 - tol, c_u = (lambda^2-mu^2)/lambda, and
        symmetrically the v-perturbation raises it by (lambda/2) delta^2
        (1/N) sum_l int eta_l^2 - tol;
      * limit game: the same inequalities around (u_bar, v_bar) via the
        limit-game solver, with v-perturbations depending on W^1 resolved by
        sub-sampling.
    """
    if n_perturb < 1:
        raise ValueError("n_perturb must be >= 1")
    deltas = [float(d) for d in np.atleast_1d(magnitude)]
    if any(d <= 0 for d in deltas):
        raise ValueError("magnitude must be positive")
    if stream is None:
        stream = RandomStream(s.seed, "verify")
    if n_samples is None:
        n_samples = min(s.mc_outer, 256)
    grid = TimeGrid.from_scenario(s)
    h = grid.h
    model = s.model
    lam, mu = model.lambda_mod, model.mu_mod
    c_u = (lam**2 - mu**2) / lam
    c_v = lam

    bundle = sample_brownian_bundle(grid, n_minor, n_samples, stream.child("bundle"))
    saddle = solve_saddle_bsde(s, n_minor, bundle)
    y_sad = saddle.y_t

    # Monte-Carlo error of the Y_t estimate from quarter-bundle re-solves
    quarters = []
    q = n_samples // 4
    for k in range(4):
        sub = PathBundle(
            grid=grid, n_minor=n_minor, n_samples=q,
            increments=bundle.increments[k * q : (k + 1) * q, :, :],
        )
        quarters.append(solve_saddle_bsde(s, n_minor, sub).y_t)
    mc_std = float(np.std(quarters, ddof=1)) / 2.0
    picard_resid = float(saddle.diagnostics["picard_residuals"][-1])
    tol_n = 3.0 * (mc_std + picard_resid)

    eps = s.epsilon(n_minor)
    inits = np.concatenate([[s.x0_init], s.minor_init_values(n_minor)])
    paths = bundle.brownian_paths(inits)

    # follower response to a perturbed u along the saddle solution's (X, Z)
    def minor_response(u_path):
        v = np.empty((n_samples, n_minor, grid.n_steps))
        for i in range(grid.n_steps):
            x0 = paths[:, 0:1, i]
            xm = paths[:, 1:, i]
            zm = saddle.z[:, 1:, i]
            z_weight = sorted_sum(zm / (1.0 + np.abs(zm)), axis=1)[:, None]
            b_l = eps * model.kappa_b1 * np.tanh(x0 + xm) * z_weight
            v[:, :, i] = -(model.c_lin + model.beta * u_path[:, i][:, None] + b_l) / model.gamma
        return v

    violations: list[dict] = []
    margins = {"n_game_u": [], "n_game_v": [], "n_game_u_strict": [], "n_game_v_strict": [],
               "limit_u": [], "limit_v": []}
    rng = stream.child("eta").generator()

    for k in range(n_perturb):
        eta_u = _piecewise_eta(rng, grid.n_steps)                     # [steps]
        eta_v = _piecewise_eta(rng, grid.n_steps, shape=(n_minor,))   # [N, steps]
        for delta in deltas:
            u_pert = saddle.controls_u + delta * eta_u[None, :]
            # (i) saddle inequality, u side (v frozen at the saddle controls)
            y_u = solve_controlled_bsde(s, n_minor, bundle, u_pert, saddle.controls_v).y_t
            margins["n_game_u"].append(y_u - y_sad)
            if y_u > y_sad + tol_n:
                violations.append(
                    {"game": "N", "side": "u", "perturbation": k, "delta": delta,
                     "margin": y_u - y_sad, "tol": tol_n}
                )
            # (ii) strictness with the minors responding optimally
            y_u_resp = solve_controlled_bsde(
                s, n_minor, bundle, u_pert, minor_response(u_pert)
            ).y_t
            drop_required = 0.5 * c_u * delta**2 * h * float(np.sum(eta_u**2))
            margins["n_game_u_strict"].append((y_sad - y_u_resp) - drop_required)
            if y_sad - y_u_resp < drop_required - tol_n:
                violations.append(
                    {"game": "N", "side": "u-strict", "perturbation": k, "delta": delta,
                     "margin": (y_sad - y_u_resp) - drop_required, "tol": tol_n}
                )
            # (iii) saddle inequality and strictness, v side (u frozen)
            v_pert = saddle.controls_v + delta * eta_v[None, :, :]
            y_v = solve_controlled_bsde(s, n_minor, bundle, saddle.controls_u, v_pert).y_t
            margins["n_game_v"].append(y_v - y_sad)
            if y_v < y_sad - tol_n:
                violations.append(
                    {"game": "N", "side": "v", "perturbation": k, "delta": delta,
                     "margin": y_v - y_sad, "tol": tol_n}
                )
            rise_required = 0.5 * c_v * delta**2 * h * float(np.mean(np.sum(eta_v**2, axis=1)))
            margins["n_game_v_strict"].append((y_v - y_sad) - rise_required)
            if y_v - y_sad < rise_required - tol_n:
                violations.append(
                    {"game": "N", "side": "v-strict", "perturbation": k, "delta": delta,
                     "margin": (y_v - y_sad) - rise_required, "tol": tol_n}
                )

    # ---- limit game ---------------------------------------------------------
    lbundle = sample_brownian_bundle(grid, 1, n_samples, stream.child("limit-bundle"))
    base = solve_limit_game_bsde(s, saddle_u_ctrl(s), saddle_v_ctrl(s), lbundle)
    y_lim = base.y_t
    lim_quarters = []
    for k in range(4):
        sub = PathBundle(
            grid=grid, n_minor=1, n_samples=q,
            increments=lbundle.increments[k * q : (k + 1) * q, :, :],
        )
        lim_quarters.append(
            solve_limit_game_bsde(s, saddle_u_ctrl(s), saddle_v_ctrl(s), sub).y_t
        )
    lim_mc_std = float(np.std(lim_quarters, ddof=1)) / 2.0
    tol_lim = 3.0 * (lim_mc_std + 2.0 * h)

    rng_lim = stream.child("limit-eta").generator()
    for k in range(n_perturb):
        eta_u = _piecewise_eta(rng_lim, grid.n_steps)
        eta_v = _piecewise_eta(rng_lim, grid.n_steps)
        for delta in deltas:
            u_base = saddle_u_ctrl(s)

            def u_pert_ctrl(i, t_i, x0, y, z0, _eta=eta_u, _d=delta):
                return u_base(i, t_i, x0, y, z0) + _d * _eta[i]

            y_u = solve_limit_game_bsde(s, u_pert_ctrl, saddle_v_ctrl(s), lbundle).y_t
            margins["limit_u"].append(y_u - y_lim)
            if y_u > y_lim + tol_lim:
                violations.append(
                    {"game": "limit", "side": "u", "perturbation": k, "delta": delta,
                     "margin": y_u - y_lim, "tol": tol_lim}
                )

            # v-perturbation depending on W^1 through tanh(X^1): sub-sampled
            def v_pert_ctrl(i, t_i, x0, x1, y, z0, u, _eta=eta_v, _d=delta):
                return vbar(x0, x1, y, z0, u, s.model) + _d * _eta[i] * np.tanh(x1)

            y_v = solve_limit_game_bsde(
                s, saddle_u_ctrl(s), v_pert_ctrl, lbundle, mode="subsample",
                stream=stream.child("sub", k),
            ).y_t
            margins["limit_v"].append(y_v - y_lim)
            if y_v < y_lim - tol_lim:
                violations.append(
                    {"game": "limit", "side": "v", "perturbation": k, "delta": delta,
                     "margin": y_v - y_lim, "tol": tol_lim}
                )

    return SaddleVerification(
        n_minor=n_minor,
        deltas=deltas,
        n_perturb=n_perturb,
        tol_n_game=tol_n,
        tol_limit_game=tol_lim,
        violations=violations,
        margins={k: np.asarray(v).tolist() for k, v in margins.items()},
        y_saddle_t=y_sad,
        y_limit_t=y_lim,
    )


STUDIES = {
    "forward": run_forward_convergence,
    "empirical": run_empirical_average_convergence,
    "bsde": run_bsde_convergence,
    "saddle": run_saddle_convergence,
    "control": run_control_convergence,
}
