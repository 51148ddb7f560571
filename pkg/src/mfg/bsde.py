"""Backward solvers: regression Monte Carlo for multi-Brownian BSDEs, the
controlled and saddle-point game BSDEs, the uncontrolled pair of Section-2
type, the limit BSDE on a 1-d Markov grid and the limit-game BSDE.

Two regression flavours are used:

* For the weak-formulation game BSDEs the forward states are plain Brownian
  motions, so basis functions carry analytic one-step transition operators:
  Y_{i+1} is projected onto the basis at t_{i+1} and both E_i[Y_{i+1}] and
  Z^j_i = E_i[Y_{i+1} dW^j]/h follow from the fitted coefficients in closed
  form.  Responses that lie exactly in the basis span therefore propagate
  exactly (constant drivers, martingale representation), and every minor's
  Z inherits the 1/N scaling of the symmetric basis instead of picking up
  per-minor regression noise.

* For the simulated (non-Brownian) uncontrolled system the classical
  per-step least-squares estimates are used, with the minors' Z pooled into
  a single exchangeable regression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .forward import PathBundle, TimeGrid, sample_brownian_bundle, simulate_conditional_mkv, simulate_n_system
from .hamiltonian import hbar_n_batch, saddle_point_batch
from .limit import gauss_hermite, hbar_reduced_batch, ubar_batch, vbar
from .model import RandomStream, Scenario
from .numutil import sorted_mean, sorted_sum

__all__ = [
    "BsdeSolution",
    "LimitBsdeSolution",
    "UncontrolledPairResult",
    "Const",
    "CoordPower",
    "MinorMoment",
    "MajorMinorCross",
    "symmetric_game_basis",
    "major_poly_basis",
    "solve_bsde_regression",
    "solve_controlled_bsde",
    "solve_saddle_bsde",
    "solve_uncontrolled_pair",
    "solve_limit_bsde",
    "solve_limit_game_bsde",
    "PicardDivergence",
]

RIDGE_PENALTY = 1e-8
PICARD_TOL = 1e-6
MAX_SWEEPS = 10


class PicardDivergence(RuntimeError):
    """Raised when the saddle-BSDE Picard residuals grow repeatedly."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# --------------------------------------------------------------------------
# martingale basis functions (Brownian coordinates, variance h per step)
# --------------------------------------------------------------------------


def _gauss_moment(r: int, h: float) -> float:
    """E[dW^r] for dW ~ N(0, h)."""
    if r % 2:
        return 0.0
    return float(math.prod(range(1, r, 2))) * h ** (r // 2)


def _shift_moment(x: np.ndarray, p: int, h: float) -> np.ndarray:
    """E[(x + dW)^p]."""
    out = np.zeros_like(x)
    for k in range(0, p + 1, 2):
        out = out + math.comb(p, k) * _gauss_moment(k, h) * x ** (p - k)
    return out


def _shift_moment_dw(x: np.ndarray, p: int, h: float) -> np.ndarray:
    """E[(x + dW)^p dW] / h."""
    out = np.zeros_like(x)
    for k in range(1, p + 1, 2):
        out = out + math.comb(p, k) * (_gauss_moment(k + 1, h) / h) * x ** (p - k)
    return out


class Const:
    def value(self, x):
        return np.ones(x.shape[0])

    def cond_exp(self, x, h):
        return np.ones(x.shape[0])

    def cond_exp_dw(self, x, h, j):
        return None


class CoordPower:
    """x_c^p on coordinate c."""

    def __init__(self, coord: int, power: int):
        self.coord = coord
        self.power = power

    def value(self, x):
        return x[:, self.coord] ** self.power

    def cond_exp(self, x, h):
        return _shift_moment(x[:, self.coord], self.power, h)

    def cond_exp_dw(self, x, h, j):
        if j != self.coord:
            return None
        return _shift_moment_dw(x[:, self.coord], self.power, h)


class MinorMoment:
    """(1/N) sum_{l>=1} x_l^p over the minor coordinates."""

    def __init__(self, power: int):
        self.power = power

    def value(self, x):
        return sorted_mean(x[:, 1:] ** self.power, axis=1)

    def cond_exp(self, x, h):
        return sorted_mean(_shift_moment(x[:, 1:], self.power, h), axis=1)

    def cond_exp_dw(self, x, h, j):
        if j == 0:
            return None
        n_minor = x.shape[1] - 1
        return _shift_moment_dw(x[:, j], self.power, h) / n_minor

    def dw_minors(self, x, h):
        n_minor = x.shape[1] - 1
        return _shift_moment_dw(x[:, 1:], self.power, h) / n_minor


class MajorMinorCross:
    """x_0 * (1/N) sum_{l>=1} x_l."""

    def value(self, x):
        return x[:, 0] * sorted_mean(x[:, 1:], axis=1)

    def cond_exp(self, x, h):
        return x[:, 0] * sorted_mean(x[:, 1:], axis=1)

    def cond_exp_dw(self, x, h, j):
        if j == 0:
            return sorted_mean(x[:, 1:], axis=1)
        n_minor = x.shape[1] - 1
        return x[:, 0] / n_minor

    def dw_minors(self, x, h):
        n_minor = x.shape[1] - 1
        return np.broadcast_to((x[:, 0] / n_minor)[:, None], x[:, 1:].shape)


class MinorMeanSquared:
    """((1/N) sum_{l>=1} x_l)^2; E-step picks up the h/N Ito term."""

    def value(self, x):
        return sorted_mean(x[:, 1:], axis=1) ** 2

    def cond_exp(self, x, h):
        n_minor = x.shape[1] - 1
        return sorted_mean(x[:, 1:], axis=1) ** 2 + h / n_minor

    def cond_exp_dw(self, x, h, j):
        if j == 0:
            return None
        n_minor = x.shape[1] - 1
        return 2.0 * sorted_mean(x[:, 1:], axis=1) / n_minor

    def dw_minors(self, x, h):
        n_minor = x.shape[1] - 1
        m1 = sorted_mean(x[:, 1:], axis=1)
        return np.broadcast_to((2.0 * m1 / n_minor)[:, None], x[:, 1:].shape)


def symmetric_game_basis():
    """Exchangeable basis {1, x0, x0^2, x0^3, m1, m2, m1^2, x0*m1}.

    The minor coordinates enter only through symmetric statistics, so the
    basis size is N-independent and every Z^l inherits the 1/N weights of
    the analytic dW maps."""
    return [
        Const(),
        CoordPower(0, 1),
        CoordPower(0, 2),
        CoordPower(0, 3),
        MinorMoment(1),
        MinorMoment(2),
        MinorMeanSquared(),
        MajorMinorCross(),
    ]


def major_poly_basis(degree: int = 3):
    """Monomials of x0 up to ``degree`` (single-coordinate BSDEs)."""
    return [Const()] + [CoordPower(0, p) for p in range(1, degree + 1)]


def _design(basis, x):
    return np.column_stack([fn.value(x) for fn in basis])


def _fit(psi, target, diagnostics=None):
    """Least squares with rank-deficiency ridge fallback."""
    coeffs, _, rank, sv = np.linalg.lstsq(psi, target, rcond=None)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
    if rank < psi.shape[1]:
        gram = psi.T @ psi + RIDGE_PENALTY * np.eye(psi.shape[1])
        coeffs = np.linalg.solve(gram, psi.T @ target)
        if diagnostics is not None:
            diagnostics.setdefault("ridge_steps", 0)
            diagnostics["ridge_steps"] += 1
    if diagnostics is not None:
        diagnostics.setdefault("max_cond", 0.0)
        diagnostics["max_cond"] = max(diagnostics["max_cond"], cond)
    return coeffs


def _z_from_coeffs(basis, x, h, coeffs):
    """All Z^j from the fitted coefficients via the analytic dW maps."""
    n, n_coords = x.shape
    z = np.zeros((n, n_coords))
    for fn, c in zip(basis, coeffs):
        if c == 0.0:
            continue
        dwm = getattr(fn, "dw_minors", None)
        if dwm is not None:
            z[:, 1:] += c * dwm(x, h)
            g0 = fn.cond_exp_dw(x, h, 0)
            if g0 is not None:
                z[:, 0] += c * g0
            continue
        for j in range(n_coords):
            g = fn.cond_exp_dw(x, h, j)
            if g is not None:
                z[:, j] += c * g
    return z


# --------------------------------------------------------------------------
# solutions
# --------------------------------------------------------------------------


@dataclass
class BsdeSolution:
    grid: TimeGrid
    y: np.ndarray                      # [n, n_steps+1]
    z: np.ndarray                      # [n, n_coords, n_steps]
    controls_u: np.ndarray | None = None   # [n, n_steps]
    controls_v: np.ndarray | None = None   # [n, n_minor, n_steps]
    diagnostics: dict = field(default_factory=dict)

    @property
    def y_t(self) -> float:
        return float(self.y[:, 0].mean())


@dataclass
class LimitBsdeSolution:
    """Limit BSDE solution as functions of (s, x) on a spatial grid."""

    grid: TimeGrid
    x0_nodes: np.ndarray               # [n_nodes]
    y_grid: np.ndarray                 # [n_steps+1, n_nodes]
    z_grid: np.ndarray                 # [n_steps, n_nodes]
    u_grid: np.ndarray                 # [n_steps, n_nodes]
    diagnostics: dict = field(default_factory=dict)

    def _interp(self, row, x):
        x = np.clip(np.asarray(x, dtype=float), self.x0_nodes[0], self.x0_nodes[-1])
        return CubicSpline(self.x0_nodes, row)(x)

    def y_at(self, step: int, x):
        return self._interp(self.y_grid[step], x)

    def z_at(self, step: int, x):
        i = min(step, self.grid.n_steps - 1)
        return self._interp(self.z_grid[i], x)

    def u_at(self, step: int, x):
        i = min(step, self.grid.n_steps - 1)
        return self._interp(self.u_grid[i], x)

    @property
    def y_t(self) -> float:
        return float(self.y_at(0, self._x_init))

    # set by solve_limit_bsde
    _x_init: float = 0.0


@dataclass
class UncontrolledPairResult:
    y_n_t: float
    y_bar_t: float
    z_diag: dict


# --------------------------------------------------------------------------
# core regression solver (Brownian forward states)
# --------------------------------------------------------------------------


def solve_bsde_regression(
    driver,
    terminal,
    bundle: PathBundle,
    basis,
    picard_iters: int = 2,
    initial_values: np.ndarray | None = None,
    driver_array: np.ndarray | None = None,
) -> BsdeSolution:
    """Backward regression scheme on Brownian forward states.

    driver(i, states_i [n,C], y [n], z [n,C]) -> [n]; terminal(paths
    [n,C,steps+1]) -> [n].  Each sweep runs the full backward recursion;
    the driver's y-argument comes from the previous sweep (first sweep:
    the regression predictor), which is the Picard iteration on the
    y-implicitness.  ``driver_array`` ([n, steps]) bypasses the driver
    callable for linear sweeps with a frozen driver path.
    """
    if picard_iters < 1:
        raise ValueError("picard_iters must be >= 1")
    if not any(isinstance(fn, Const) for fn in basis):
        raise ValueError("basis must include the constant function")
    grid = bundle.grid
    h = grid.h
    n = bundle.n_samples
    n_coords = bundle.n_minor + 1
    inits = np.zeros(n_coords) if initial_values is None else np.asarray(initial_values, dtype=float)
    paths = bundle.brownian_paths(inits)

    term = np.asarray(terminal(paths), dtype=float)
    if term.shape != (n,):
        raise ValueError(f"terminal must return shape ({n},), got {term.shape}")

    y = np.empty((n, grid.n_steps + 1))
    y[:, -1] = term
    z = np.zeros((n, n_coords, grid.n_steps))
    diagnostics: dict = {"scheme": "martingale-basis"}
    y_prev = None

    sweeps = 1 if driver_array is not None else picard_iters
    for sweep in range(sweeps):
        for i in range(grid.n_steps - 1, -1, -1):
            x_next = paths[:, :, i + 1]
            x_here = paths[:, :, i]
            psi = _design(basis, x_next)
            coeffs = _fit(psi, y[:, i + 1], diagnostics)
            ey = _design_cexp(basis, x_here, h) @ coeffs
            zi = _z_from_coeffs(basis, x_here, h, coeffs)
            if driver_array is not None:
                drv = driver_array[:, i]
            else:
                y_hat = ey if y_prev is None else y_prev[:, i]
                drv = np.asarray(driver(i, x_here, y_hat, zi), dtype=float)
                if not np.all(np.isfinite(drv)):
                    raise FloatingPointError(f"non-finite driver output at step {i}")
            y[:, i] = ey + h * drv
            z[:, :, i] = zi
        y_prev = y.copy()
    return BsdeSolution(grid=grid, y=y, z=z, diagnostics=diagnostics)


def _design_cexp(basis, x, h):
    return np.column_stack([fn.cond_exp(x, h) for fn in basis])


# --------------------------------------------------------------------------
# controlled game BSDE (weak formulation)
# --------------------------------------------------------------------------


def _control_values(ctrl, i, states_i, shape):
    if callable(ctrl):
        vals = np.asarray(ctrl(i, states_i), dtype=float)
    else:
        vals = np.asarray(ctrl, dtype=float)[..., i]
    return np.broadcast_to(vals, shape)


def game_driver(scen: Scenario, n_minor: int, eps: float, x, y, z, u, v):
    """Driving coefficient of the controlled game BSDE at given controls.

    mean_l f(x0,x_l,y,z0,z_l,u,v_l) + (mean_l b0(x0,x_l,z0) u) z0
    + eps * sum_i (mean_l b1(x0,x_l,z_i) v_l) z_i; the tanh family makes
    the double sum factor into O(N) work.
    """
    m = scen.model
    x0 = x[:, 0:1]
    xm = x[:, 1:]
    z0 = z[:, 0]
    zm = z[:, 1:]
    tanh_pair = np.tanh(x0 + xm)
    f_vals = m.f(x0, xm, y[:, None], z0[:, None], zm, u[:, None], v)
    term_b0 = m.kappa_b0 * sorted_mean(tanh_pair, axis=1) * u * z0 / (1.0 + np.abs(z0))
    z_weight = sorted_sum(zm / (1.0 + np.abs(zm)), axis=1)
    term_b1 = eps * m.kappa_b1 * sorted_mean(tanh_pair * v, axis=1) * z_weight
    return sorted_mean(f_vals, axis=1) + term_b0 + term_b1


def terminal_mean_phi(scen: Scenario, paths):
    m = scen.model
    return sorted_mean(m.phi(paths[:, 0:1, -1], paths[:, 1:, -1]), axis=1)


def solve_controlled_bsde(
    s: Scenario,
    n_minor: int,
    bundle: PathBundle,
    u_ctrl,
    v_ctrl,
    picard_iters: int = 2,
) -> BsdeSolution:
    """Game BSDE for given open-loop controls on Brownian forward states.

    Controls are arrays ([n, steps] for u, [n, N, steps] for v) or callables
    (i, states_i) -> values; both must be adapted and bounded.
    """
    if bundle.n_minor != n_minor:
        raise ValueError("bundle/minor count mismatch")
    eps = s.epsilon(n_minor)
    n = bundle.n_samples

    u_all = np.empty((n, bundle.grid.n_steps))
    v_all = np.empty((n, n_minor, bundle.grid.n_steps))

    def driver(i, x, y, z):
        u = _control_values(u_ctrl, i, x, (n,))
        v = _control_values(v_ctrl, i, x, (n, n_minor))
        u_all[:, i] = u
        v_all[:, :, i] = v
        return game_driver(s, n_minor, eps, x, y, z, u, v)

    inits = np.concatenate([[s.x0_init], s.minor_init_values(n_minor)])
    sol = solve_bsde_regression(
        driver,
        lambda paths: terminal_mean_phi(s, paths),
        bundle,
        symmetric_game_basis(),
        picard_iters=picard_iters,
        initial_values=inits,
    )
    sol.controls_u = u_all
    sol.controls_v = v_all
    h = bundle.grid.h
    sol.diagnostics["h_driver_scale"] = h * float(
        np.max(np.abs(sol.z[:, 0, :])) + 1.0
    )
    return sol


# --------------------------------------------------------------------------
# saddle-point game BSDE
# --------------------------------------------------------------------------


def solve_saddle_bsde(
    s: Scenario,
    n_minor: int,
    bundle: PathBundle,
    picard_tol: float = PICARD_TOL,
    max_sweeps: int = MAX_SWEEPS,
) -> BsdeSolution:
    """BSDE driven by the saddle Hamiltonian, solved by Picard-over-regression.

    Each sweep freezes the driver path at the previous sweep's (Y, Z),
    evaluates the saddle Hamiltonian at every (sample, step) and runs one
    linear regression pass.  Sweeps stop when the initial value moves less
    than ``picard_tol``; growing residuals for three consecutive sweeps
    abort with diagnostics.
    """
    model = s.model
    if not model.mu_mod < model.lambda_mod:
        raise ValueError("saddle BSDE requires mu < lambda")
    if bundle.n_minor != n_minor:
        raise ValueError("bundle/minor count mismatch")
    eps = s.epsilon(n_minor)
    grid = bundle.grid
    n = bundle.n_samples
    inits = np.concatenate([[s.x0_init], s.minor_init_values(n_minor)])
    paths = bundle.brownian_paths(inits)

    y_prev = np.zeros((n, grid.n_steps + 1))
    z_prev = np.zeros((n, n_minor + 1, grid.n_steps))
    residuals: list[float] = []
    path_residuals: list[float] = []
    sol = None
    grow_streak = 0
    for sweep in range(max_sweeps):
        driver_array = np.empty((n, grid.n_steps))
        for i in range(grid.n_steps):
            hbar, _, _ = hbar_n_batch(
                paths[:, :, i], y_prev[:, i], z_prev[:, :, i], eps, model
            )
            driver_array[:, i] = hbar
        sol = solve_bsde_regression(
            None,
            lambda p: terminal_mean_phi(s, p),
            bundle,
            symmetric_game_basis(),
            initial_values=inits,
            driver_array=driver_array,
        )
        resid = abs(sol.y_t - float(y_prev[:, 0].mean()))
        path_resid = float(np.max(np.abs(sol.y - y_prev)))
        residuals.append(resid)
        path_residuals.append(path_resid)
        if sweep >= 1 and path_residuals[-1] > path_residuals[-2]:
            grow_streak += 1
            if grow_streak >= 3:
                raise PicardDivergence(
                    f"saddle BSDE Picard diverging: path residuals {path_residuals}",
                    {"residuals": residuals, "path_residuals": path_residuals},
                )
        else:
            grow_streak = 0
        y_prev, z_prev = sol.y, sol.z
        if resid < picard_tol and sweep >= 1:
            break

    converged = residuals[-1] < picard_tol
    # realized saddle controls from the final (Y, Z)
    u_all = np.empty((n, grid.n_steps))
    v_all = np.empty((n, n_minor, grid.n_steps))
    for i in range(grid.n_steps):
        u_i, v_i = saddle_point_batch(paths[:, :, i], sol.y[:, i], sol.z[:, :, i], eps, model)
        u_all[:, i] = u_i
        v_all[:, :, i] = v_i
    sol.controls_u = u_all
    sol.controls_v = v_all
    sol.diagnostics.update(
        {
            "picard_residuals": residuals,
            "picard_path_residuals": path_residuals,
            "picard_converged": converged,
            "sweeps": len(residuals),
        }
    )
    if len(path_residuals) >= 2 and path_residuals[-2] > 0:
        # crude Lipschitz proxy of the driver in (y, z) between the last sweeps
        c_n = path_residuals[-1] / (path_residuals[-2] * grid.h * grid.n_steps)
        sol.diagnostics["h_times_cn"] = grid.h * c_n
        sol.diagnostics["stability_flag"] = grid.h * c_n > 0.5
    if not converged:
        sol.diagnostics["picard_warning"] = (
            f"residual {residuals[-1]:.2e} above {picard_tol} after {len(residuals)} sweeps"
        )
    return sol


# --------------------------------------------------------------------------
# uncontrolled pair (simulated forward system + conditional cloud)
# --------------------------------------------------------------------------


def _fit_values(psi, target, diagnostics=None):
    return psi @ _fit(psi, target, diagnostics)


def solve_uncontrolled_pair(
    s: Scenario,
    n_minor: int,
    bundle: PathBundle,
    m_cloud: int | None = None,
    picard_iters: int = 2,
) -> UncontrolledPairResult:
    """Solve the uncontrolled N-BSDE and its conditional McKean-Vlasov limit
    BSDE on coupled noise, and collect the pathwise difference statistics.

    The N-side runs on the simulated particle system; the limit side runs
    along the conditional cloud (same W^0, tagged particles reusing the
    minors' increments).  Because the simulated states are not Brownian the
    conditional expectations are estimated by per-step least squares; the
    minors' Z share one pooled exchangeable regression.
    """
    if m_cloud is None:
        m_cloud = max(s.mc_cloud, 16 * n_minor)
    grid = bundle.grid
    h = grid.h
    n = bundle.n_samples
    m = s.model

    n_paths = simulate_n_system(s, n_minor, bundle).values  # [n, N+1, steps+1]
    cloud = simulate_conditional_mkv(
        s,
        bundle.increments[:, 0, :],
        n_tagged=n_minor,
        m_cloud=m_cloud,
        stream=RandomStream(s.seed, "pair-cloud"),
        tagged_increments=bundle.increments[:, 1:, :],
    )

    diagnostics: dict = {"m_cloud": m_cloud}

    # ---- N-side: regression on the simulated states -----------------------
    x0 = n_paths[:, 0, :]          # [n, steps+1]
    xm = n_paths[:, 1:, :]         # [n, N, steps+1]
    y_n = np.empty((n, grid.n_steps + 1))
    y_n[:, -1] = sorted_mean(m.phi(x0[:, None, -1], xm[:, :, -1]), axis=1)
    z0_n = np.zeros((n, grid.n_steps))
    zm_n = np.zeros((n, n_minor, grid.n_steps))

    def psi_n(i):
        if i == 0:
            return np.ones((n, 1))
        a = x0[:, i]
        m1 = sorted_mean(xm[:, :, i], axis=1)
        m2 = sorted_mean(xm[:, :, i] ** 2, axis=1)
        # the tanh feature tracks the terminal/driver shape of the family and
        # cuts the projection residual (simulated states need no transition maps)
        return np.column_stack([np.ones(n), a, a**2, m1, m2, a * m1, np.tanh(a + m1)])

    y_sweep_prev = None
    for sweep in range(picard_iters):
        for i in range(grid.n_steps - 1, -1, -1):
            psi = psi_n(i)
            dw = bundle.increments[:, :, i]
            ey = _fit_values(psi, y_n[:, i + 1], diagnostics)
            # centred Delta-W responses: same conditional mean, far less variance
            y_c = y_n[:, i + 1] - ey
            z0i = _fit_values(psi, y_c * dw[:, 0] / h, diagnostics)
            # pooled minor regression: one exchangeable map (x0, x_l, m1, x_l^2)
            # -> Z^l; the fitted Z^0 dW^0 term is removed as a control variate
            # (zero conditional mean against dW^l, large variance otherwise)
            y_cm = y_c - z0i * dw[:, 0]
            resp = (y_cm[:, None] * dw[:, 1:] / h).reshape(-1)
            if i == 0:
                zmi = np.full((n, n_minor), np.sort(resp).mean())
            else:
                a = np.repeat(x0[:, i], n_minor)
                xl = xm[:, :, i].reshape(-1)
                m1 = np.repeat(sorted_mean(xm[:, :, i], axis=1), n_minor)
                psi_z = np.column_stack([np.ones(n * n_minor), a, xl, m1, xl**2])
                # canonical row order keeps the fit bit-identical under
                # any relabelling of the minors
                order = np.lexsort((resp, xl, a))
                fitted = np.empty_like(resp)
                fitted[order] = _fit_values(psi_z[order], resp[order], diagnostics)
                zmi = fitted.reshape(n, n_minor)
            # symmetric reduction for Z^0: strip the fitted minor dW terms
            y_c0 = y_c - sorted_sum(zmi * dw[:, 1:], axis=1)
            z0i = _fit_values(psi, y_c0 * dw[:, 0] / h, diagnostics)

            y_hat = ey if y_sweep_prev is None else y_sweep_prev[:, i]
            drv = sorted_mean(
                m.f_unc(x0[:, i, None], xm[:, :, i], y_hat[:, None], z0i[:, None], zmi),
                axis=1,
            )
            y_n[:, i] = ey + h * drv
            z0_n[:, i] = z0i
            zm_n[:, :, i] = zmi
        y_sweep_prev = y_n.copy()

    # ---- limit side: regression over W^0 along the conditional cloud ------
    xb0 = cloud.x0_path            # [n, steps+1]
    cl = cloud.cloud               # [n, M, steps+1]
    y_b = np.empty((n, grid.n_steps + 1))
    y_b[:, -1] = sorted_mean(m.phi(xb0[:, None, -1], cl[:, :, -1]), axis=1)
    z0_b = np.zeros((n, grid.n_steps))

    def psi_b(i):
        if i == 0:
            return np.ones((n, 1))
        a = xb0[:, i]
        mu1 = sorted_mean(cl[:, :, i], axis=1)
        mu2 = sorted_mean(cl[:, :, i] ** 2, axis=1)
        return np.column_stack([np.ones(n), a, a**2, mu1, mu2, a * mu1, np.tanh(a + mu1)])

    y_sweep_prev = None
    for sweep in range(picard_iters):
        for i in range(grid.n_steps - 1, -1, -1):
            psi = psi_b(i)
            dw0 = bundle.increments[:, 0, i]
            ey = _fit_values(psi, y_b[:, i + 1], diagnostics)
            z0i = _fit_values(psi, (y_b[:, i + 1] - ey) * dw0 / h, diagnostics)
            y_hat = ey if y_sweep_prev is None else y_sweep_prev[:, i]
            # E[f(X0, X^l, y, z0, 0) | W^0] via the cloud average
            drv = sorted_mean(
                m.f_unc(xb0[:, i, None], cl[:, :, i], y_hat[:, None], z0i[:, None], 0.0),
                axis=1,
            )
            y_b[:, i] = ey + h * drv
            z0_b[:, i] = z0i
        y_sweep_prev = y_b.copy()

    # ---- coupled difference statistics ------------------------------------
    sup_y_sq = np.max((y_n - y_b) ** 2, axis=1)                     # [n]
    int_z0_sq = h * np.sum((z0_n - z0_b) ** 2, axis=1)              # [n]
    int_zm_sq = h * sorted_sum(np.sum(zm_n**2, axis=2), axis=1)     # [n]
    z_diag = {
        "sup_y_sq": sup_y_sq,
        "int_z0_diff_sq": int_z0_sq,
        "int_z_minor_sq": int_zm_sq,
        "statistic": sup_y_sq + int_z0_sq + int_zm_sq,
        "y_n_paths": y_n,
        "y_bar_paths": y_b,
        "diagnostics": diagnostics,
    }
    return UncontrolledPairResult(
        y_n_t=float(y_n[:, 0].mean()),
        y_bar_t=float(y_b[:, 0].mean()),
        z_diag=z_diag,
    )


# --------------------------------------------------------------------------
# limit BSDE on a 1-d Markov grid
# --------------------------------------------------------------------------


def solve_limit_bsde(
    s: Scenario,
    n_nodes: int = 201,
    n_steps: int | None = None,
) -> LimitBsdeSolution:
    """Backward solve of the limit BSDE on a spatial grid for X^0.

    X^0 is a Brownian motion and the reduced driver is deterministic, so
    (Y, Z^0) are functions of (s, x).  One step:
        Z_i(x) = sum_q w_q Y_{i+1}(x + sqrt(h) zeta_q) zeta_q / sqrt(h)
        Y_i(x) = sum_q w_q Y_{i+1}(x + sqrt(h) zeta_q) + h Hbar(t_i, x, ., Z_i)
    with cubic-spline evaluation between nodes (clamped outside, counted in
    diagnostics) and one predictor-corrector pass for the y-argument.
    """
    steps = s.n_steps if n_steps is None else n_steps
    grid = TimeGrid(s.t_start, s.t_end, steps)
    h = grid.h
    span = 6.0 * math.sqrt(s.horizon)
    lo = min(s.x0_init, s.xbar_init) - span
    hi = max(s.x0_init, s.xbar_init) + span
    nodes = np.linspace(lo, hi, n_nodes)

    zeta, w = gauss_hermite(s.quad_order)
    pts_T, w_T = _terminal_nodes(s)
    y_grid = np.empty((steps + 1, n_nodes))
    y_grid[-1] = (np.asarray(s.model.phi(nodes[:, None], pts_T)) @ w_T)
    z_grid = np.empty((steps, n_nodes))
    u_grid = np.empty((steps, n_nodes))
    clamped = 0

    for i in range(steps - 1, -1, -1):
        spline = CubicSpline(nodes, y_grid[i + 1])
        shifted = nodes[:, None] + math.sqrt(h) * zeta[None, :]
        clamped += int(np.sum((shifted < lo) | (shifted > hi)))
        vals = spline(np.clip(shifted, lo, hi))
        ey = vals @ w
        z_i = (vals * zeta[None, :]) @ w / math.sqrt(h)
        t_i = grid.times[i]
        hbar_pred, _ = hbar_reduced_batch(t_i, nodes, ey, z_i, s)
        y_pred = ey + h * hbar_pred
        hbar, u_i = hbar_reduced_batch(t_i, nodes, y_pred, z_i, s)
        y_grid[i] = ey + h * hbar
        z_grid[i] = z_i
        u_grid[i] = u_i

    sol = LimitBsdeSolution(
        grid=grid,
        x0_nodes=nodes,
        y_grid=y_grid,
        z_grid=z_grid,
        u_grid=u_grid,
        diagnostics={"clamped_evaluations": clamped},
    )
    sol._x_init = s.x0_init
    if clamped:
        sol.diagnostics["clamp_warning"] = f"{clamped} off-grid evaluations clamped"
    return sol


def _terminal_nodes(s: Scenario):
    zeta, w = gauss_hermite(s.quad_order)
    pts = s.xbar_init + math.sqrt(s.horizon) * zeta
    return pts, w


# --------------------------------------------------------------------------
# limit-game BSDE (4-th section game with open-loop/closed-loop controls)
# --------------------------------------------------------------------------


def limit_game_driver_f(scen: Scenario, x0, x1, y, z0, u, v):
    """F(x0, x1, y, z0, u, v) = f(x0, x1, y, z0, 0, u, v) + b0(x0, x1, z0) z0 u."""
    m = scen.model
    return m.f(x0, x1, y, z0, 0.0, u, v) + m.b0(x0, x1, z0) * z0 * u


def solve_limit_game_bsde(
    s: Scenario,
    u_ctrl,
    v_ctrl,
    bundle: PathBundle,
    mode: str = "closed_loop",
    stream: RandomStream | None = None,
    picard_iters: int = 2,
    basis_degree: int = 3,
) -> BsdeSolution:
    """Limit 2-person game BSDE for admissible controls (u, v).

    The solution is F^{W^0}-adapted, so the regression runs over the W^0
    paths only.  The driver's conditional expectation over the representative
    minor X^1_s (and over v's W^1-dependence) is computed

    * exactly by Gauss-Hermite quadrature when ``mode="closed_loop"`` and
      v_ctrl is a feedback map v(t, x0, x1, y, z0, u), or
    * by sub-sampling ``mc_cloud`` independent W^1 copies per W^0 path when
      ``mode="subsample"`` (v_ctrl(i, t, x0, x1_copies, y, z0, u) -> [n, M]).

    u_ctrl is an array [n, steps] or a map (i, t, x0, y, z0) -> [n].
    """
    if mode not in ("closed_loop", "subsample"):
        raise ValueError(f"unknown mode {mode!r}")
    if bundle.n_minor > 1:
        raise ValueError("bundle must be restricted to (W^0, W^1)")
    grid = bundle.grid
    h = grid.h
    n = bundle.n_samples

    w0_bundle = PathBundle(
        grid=grid, n_minor=0, n_samples=n, increments=bundle.increments[:, :1, :]
    )
    zeta, wq = gauss_hermite(s.quad_order)
    pts_T, w_T = _terminal_nodes(s)

    if mode == "subsample":
        if stream is None:
            stream = RandomStream(s.seed, "limit-game-sub")
        sub_inc = stream.generator().standard_normal((n, s.mc_cloud, grid.n_steps)) * math.sqrt(h)
        x1_sub = np.empty((n, s.mc_cloud, grid.n_steps + 1))
        x1_sub[:, :, 0] = s.xbar_init
        np.cumsum(sub_inc, axis=2, out=x1_sub[:, :, 1:])
        x1_sub[:, :, 1:] += s.xbar_init

    u_real = np.empty((n, grid.n_steps))

    def driver(i, x, y, z):
        t_i = grid.times[i]
        x0 = x[:, 0]
        z0 = z[:, 0]
        if callable(u_ctrl):
            u = np.broadcast_to(np.asarray(u_ctrl(i, t_i, x0, y, z0), dtype=float), (n,))
        else:
            u = np.broadcast_to(np.asarray(u_ctrl, dtype=float)[..., i], (n,))
        u_real[:, i] = u
        if mode == "closed_loop":
            var = max(t_i - s.t_start, 0.0)
            x1 = s.xbar_init + math.sqrt(var) * zeta          # [Q]
            v = v_ctrl(t_i, x0[:, None], x1[None, :], y[:, None], z0[:, None], u[:, None])
            f_vals = limit_game_driver_f(
                s, x0[:, None], x1[None, :], y[:, None], z0[:, None], u[:, None],
                np.broadcast_to(np.asarray(v, dtype=float), (n, zeta.size)),
            )
            return f_vals @ wq
        x1 = x1_sub[:, :, i]                                   # [n, M]
        v = v_ctrl(i, t_i, x0[:, None], x1, y[:, None], z0[:, None], u[:, None])
        f_vals = limit_game_driver_f(
            s, x0[:, None], x1, y[:, None], z0[:, None], u[:, None],
            np.broadcast_to(np.asarray(v, dtype=float), x1.shape),
        )
        return sorted_mean(f_vals, axis=1)

    def terminal(paths):
        return np.asarray(s.model.phi(paths[:, 0, -1][:, None], pts_T)) @ w_T

    sol = solve_bsde_regression(
        driver,
        terminal,
        w0_bundle,
        major_poly_basis(basis_degree),
        picard_iters=picard_iters,
        initial_values=np.array([s.x0_init]),
    )
    sol.controls_u = u_real
    sol.diagnostics["mode"] = mode
    return sol


def saddle_u_ctrl(s: Scenario):
    """Closed-loop saddle u for the limit game: u = ubar(t, x0, y, z0)."""

    def ctrl(i, t_i, x0, y, z0):
        return ubar_batch(t_i, x0, y, z0, s)

    return ctrl


def saddle_v_ctrl(s: Scenario):
    """Closed-loop saddle v for the limit game: v = vbar(x0, x1, y, z0, u)."""

    def ctrl(t_i, x0, x1, y, z0, u):
        return vbar(x0, x1, y, z0, u, s.model)

    return ctrl
