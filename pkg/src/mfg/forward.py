"""Forward particle systems: Brownian bundles, the uncontrolled N+1 system
and its conditional McKean-Vlasov limit, plus 1-d Wasserstein-2 distance.

The limit system replaces the empirical average over minors by an average
over an M-particle conditional cloud that shares the major player's noise
W^0.  Tagged limit particles reuse the Brownian increments of the N-system
minors so that pathwise errors can be measured on coupled realisations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams, RandomStream, Scenario
from .numutil import sorted_mean

__all__ = [
    "TimeGrid",
    "PathBundle",
    "ParticlePaths",
    "ConditionalCloud",
    "sample_brownian_bundle",
    "simulate_n_system",
    "simulate_conditional_mkv",
    "wasserstein2_1d",
]


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not self.t_start < self.t_end:
            raise ValueError("t_start must be < t_end")

    @property
    def h(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t_start + self.h * np.arange(self.n_steps + 1)

    @classmethod
    def from_scenario(cls, s: Scenario) -> "TimeGrid":
        return cls(s.t_start, s.t_end, s.n_steps)


@dataclass(frozen=True)
class PathBundle:
    """Brownian increments dW^0..dW^N for a batch of outer samples.

    increments has shape [n_samples, n_minor+1, n_steps]; each entry is a
    centred Gaussian with variance h.
    """

    grid: TimeGrid
    n_minor: int
    n_samples: int
    increments: np.ndarray

    def __post_init__(self):
        expected = (self.n_samples, self.n_minor + 1, self.grid.n_steps)
        if self.increments.shape != expected:
            raise ValueError(f"increments shape {self.increments.shape} != {expected}")

    def w0(self) -> np.ndarray:
        return self.increments[:, 0, :]

    def brownian_paths(self, inits: np.ndarray) -> np.ndarray:
        """x_j + W^j_s - W^j_t on the grid; shape [n_samples, n_minor+1, n_steps+1]."""
        paths = np.empty((self.n_samples, self.n_minor + 1, self.grid.n_steps + 1))
        paths[:, :, 0] = inits
        np.cumsum(self.increments, axis=2, out=paths[:, :, 1:])
        paths[:, :, 1:] += inits[None, :, None]
        return paths


@dataclass(frozen=True)
class ParticlePaths:
    grid: TimeGrid
    values: np.ndarray  # [n_samples, n_minor+1, n_steps+1]


@dataclass(frozen=True)
class ConditionalCloud:
    """Conditional McKean-Vlasov simulation for one W^0 realisation per sample.

    ``cloud`` members all share the sample's W^0 path and are exchangeable;
    ``tagged`` particles follow the same dynamics but are driven by
    externally supplied increments (the N-system minors' noises when
    coupling is wanted).
    """

    grid: TimeGrid
    w0_path: np.ndarray   # [n_samples, n_steps] increments of W^0
    x0_path: np.ndarray   # [n_samples, n_steps+1]
    cloud: np.ndarray     # [n_samples, m_cloud, n_steps+1]
    tagged: np.ndarray    # [n_samples, n_tagged, n_steps+1]


def sample_brownian_bundle(
    grid: TimeGrid, n_minor: int, n_samples: int, stream: RandomStream
) -> PathBundle:
    """Draw sqrt(h)-scaled Gaussian increments for W^0..W^N."""
    if n_minor < 0:
        raise ValueError("n_minor must be >= 0")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = stream.generator()
    inc = rng.standard_normal((n_samples, n_minor + 1, grid.n_steps)) * np.sqrt(grid.h)
    return PathBundle(grid=grid, n_minor=n_minor, n_samples=n_samples, increments=inc)


# --------------------------------------------------------------------------
# N+1 uncontrolled particle system
# --------------------------------------------------------------------------


def simulate_n_system(s: Scenario, n_minor: int, bundle: PathBundle) -> ParticlePaths:
    """Euler-Maruyama for the coupled N+1 system with (1/N)-averaged coefficients.

    X^0 step:  X^0 + h * mean_l b0(X^0, X^l) + mean_l sigma0(X^0, X^l) * dW^0
    X^j step:  X^j + h * mean_l b1(X^0, X^j, X^l) + mean_l sigma1(X^0, X^j, X^l) * dW^j
    """
    if n_minor < 2:
        raise ValueError("n_minor must be >= 2")
    if bundle.n_minor != n_minor:
        raise ValueError(f"bundle carries {bundle.n_minor} minors, expected {n_minor}")
    m = s.model
    grid = bundle.grid
    h = grid.h
    n = bundle.n_samples
    values = np.empty((n, n_minor + 1, grid.n_steps + 1))
    values[:, 0, 0] = s.x0_init
    values[:, 1:, 0] = s.minor_init_values(n_minor)[None, :]

    sigma_const = m.sigma_mode != "tanh"
    for i in range(grid.n_steps):
        x0 = values[:, 0, i]             # [n]
        xm = values[:, 1:, i]            # [n, N]
        dw = bundle.increments[:, :, i]  # [n, N+1]

        t0 = sorted_mean(np.tanh(x0[:, None] + xm), axis=1)  # [n], mean over l of tanh(x0+xl)
        drift0 = m.kappa_b0 * t0
        diff0 = 1.0 if sigma_const else 1.0 + 0.5 * t0
        values[:, 0, i + 1] = x0 + h * drift0 + diff0 * dw[:, 0]

        tj = sorted_mean(
            np.tanh(x0[:, None, None] + xm[:, :, None] + xm[:, None, :]), axis=2
        )  # [n, N(j)], mean over l of tanh(x0+xj+xl)
        driftj = m.kappa_b1 * tj
        diffj = 1.0 if sigma_const else 1.0 + 0.5 * tj
        values[:, 1:, i + 1] = xm + h * driftj + diffj * dw[:, 1:]
    return ParticlePaths(grid=grid, values=values)


# --------------------------------------------------------------------------
# conditional McKean-Vlasov limit
# --------------------------------------------------------------------------


def _cloud_mean_tanh_interp(cloud_row: np.ndarray, targets: np.ndarray, n_nodes: int):
    """mean_m tanh(w + cloud_m) evaluated at targets via cubic Hermite nodes.

    cloud_row: [n, M]; targets: [n, P].  Returns [n, P].  Node values and the
    exact derivative mean_m sech^2 are computed on a per-sample linear grid,
    then interpolated; the grid is a pure evaluation device, its O(h^4) error
    sits far below the cloud's O(M^{-1/2}) statistical error.
    """
    lo = targets.min(axis=1)
    hi = targets.max(axis=1)
    span = np.maximum(hi - lo, 1e-9)
    lo = lo - 1e-6 * span
    hi = hi + 1e-6 * span
    step = (hi - lo) / (n_nodes - 1)
    nodes = lo[:, None] + step[:, None] * np.arange(n_nodes)[None, :]      # [n, G]
    th = np.tanh(nodes[:, :, None] + cloud_row[:, None, :])                # [n, G, M]
    gv = th.mean(axis=2)                                                   # [n, G]
    gd = (1.0 - th**2).mean(axis=2)                                        # [n, G]

    # cubic Hermite on the containing cell
    idx = np.clip(
        ((targets - lo[:, None]) / step[:, None]).astype(int), 0, n_nodes - 2
    )
    xl = np.take_along_axis(nodes, idx, axis=1)
    yl = np.take_along_axis(gv, idx, axis=1)
    yr = np.take_along_axis(gv, idx + 1, axis=1)
    dl = np.take_along_axis(gd, idx, axis=1)
    dr = np.take_along_axis(gd, idx + 1, axis=1)
    hcell = step[:, None]
    tt = (targets - xl) / hcell
    t2 = tt * tt
    t3 = t2 * tt
    h00 = 2 * t3 - 3 * t2 + 1
    h10 = t3 - 2 * t2 + tt
    h01 = -2 * t3 + 3 * t2
    h11 = t3 - t2
    return h00 * yl + h10 * hcell * dl + h01 * yr + h11 * hcell * dr


_HERMITE_NODES = 48


def simulate_conditional_mkv(
    s: Scenario,
    w0_increments: np.ndarray,
    n_tagged: int,
    m_cloud: int,
    stream: RandomStream,
    tagged_increments: np.ndarray | None = None,
    n_steps: int | None = None,
) -> ConditionalCloud:
    """Simulate the conditional McKean-Vlasov limit along given W^0 increments.

    The conditional law given W^0 is approximated by ``m_cloud`` exchangeable
    copies of the representative minor, all sharing the sample's W^0; the
    major path and every cloud/tagged particle use coefficients averaged over
    the cloud.  ``tagged_increments`` (shape [n_samples, n_tagged, n_steps])
    lets the caller couple the tagged particles to the increments that drive
    the N-system minors; when omitted the tagged noises are drawn from
    ``stream``.
    """
    if m_cloud < 2:
        raise ValueError("m_cloud must be >= 2")
    w0 = np.atleast_2d(np.asarray(w0_increments, dtype=float))
    n_samples, steps = w0.shape
    if n_steps is not None and n_steps != steps:
        raise ValueError("n_steps inconsistent with w0_increments")
    grid = TimeGrid(s.t_start, s.t_end, steps)
    h = grid.h
    m = s.model

    rng = stream.generator()
    cloud_inc = rng.standard_normal((n_samples, m_cloud, steps)) * np.sqrt(h)
    if tagged_increments is None:
        tag_inc = rng.standard_normal((n_samples, n_tagged, steps)) * np.sqrt(h)
    else:
        tag_inc = np.asarray(tagged_increments, dtype=float)
        if tag_inc.ndim == 2 and n_samples == 1:
            tag_inc = tag_inc[None, :, :]
        if tag_inc.shape != (n_samples, n_tagged, steps):
            raise ValueError(
                f"tagged_increments shape {tag_inc.shape} != {(n_samples, n_tagged, steps)}"
            )

    x0 = np.full(n_samples, s.x0_init)
    cloud = np.full((n_samples, m_cloud), s.xbar_init)
    tagged = np.full((n_samples, n_tagged), s.xbar_init) if n_tagged else np.empty((n_samples, 0))

    x0_path = np.empty((n_samples, steps + 1))
    cloud_path = np.empty((n_samples, m_cloud, steps + 1))
    tagged_path = np.empty((n_samples, n_tagged, steps + 1))
    x0_path[:, 0] = x0
    cloud_path[:, :, 0] = cloud
    tagged_path[:, :, 0] = tagged

    sigma_const = m.sigma_mode != "tanh"
    for i in range(steps):
        # major: cloud-average of b0/sigma0 at the single point x0
        g_major = np.tanh(x0[:, None] + cloud).mean(axis=1)  # [n]
        drift0 = m.kappa_b0 * g_major
        diff0 = 1.0 if sigma_const else 1.0 + 0.5 * g_major
        x0_new = x0 + h * drift0 + diff0 * w0[:, i]

        # minors (cloud members and tagged): cloud-average of tanh(x0+x_j+.)
        targets = np.concatenate([x0[:, None] + cloud, x0[:, None] + tagged], axis=1)
        g_all = _cloud_mean_tanh_interp(cloud, targets, _HERMITE_NODES)
        g_cloud, g_tag = g_all[:, :m_cloud], g_all[:, m_cloud:]

        diff_c = 1.0 if sigma_const else 1.0 + 0.5 * g_cloud
        cloud = cloud + h * m.kappa_b1 * g_cloud + diff_c * cloud_inc[:, :, i]
        if n_tagged:
            diff_t = 1.0 if sigma_const else 1.0 + 0.5 * g_tag
            tagged = tagged + h * m.kappa_b1 * g_tag + diff_t * tag_inc[:, :, i]
        x0 = x0_new

        x0_path[:, i + 1] = x0
        cloud_path[:, :, i + 1] = cloud
        tagged_path[:, :, i + 1] = tagged

    return ConditionalCloud(
        grid=grid, w0_path=w0, x0_path=x0_path, cloud=cloud_path, tagged=tagged_path
    )


# --------------------------------------------------------------------------
# Wasserstein-2 in one dimension
# --------------------------------------------------------------------------


def wasserstein2_1d(samples_a, samples_b) -> float:
    """Wasserstein-2 distance of two equal-size empirical measures.

    Sorting realises the quantile coupling, which is optimal in d = 1:
    d_2 = sqrt((1/n) * sum_i (a_(i) - b_(i))^2).
    """
    a = np.sort(np.asarray(samples_a, dtype=float))
    b = np.sort(np.asarray(samples_b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample set")
    if a.size != b.size:
        raise ValueError(f"sample sizes differ: {a.size} vs {b.size}")
    return float(np.sqrt(np.mean((a - b) ** 2)))
