"""Limit (mean-field) Hamiltonian: inner minimiser, reduced driver,
maximiser and the fully reduced driver of the limit BSDE.

In the weak formulation the representative minor is X^1_s = xbar + W^1_s -
W^1_t, independent of W^0, so conditioning on W^0 reduces every expectation
to a deterministic Gaussian integral with mean xbar and variance s - t.
These integrals are computed with Gauss-Hermite quadrature; tanh integrands
against a Gaussian converge superalgebraically, and the default order 40
reaches 1e-10 self-consistency.  (A genuinely random conditional law only
occurs for the uncontrolled dynamics of the forward module, which uses the
conditional cloud instead.)
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .hamiltonian import _newton_scalar
from .model import ModelParams, Scenario

__all__ = [
    "LimitPoint",
    "gauss_hermite",
    "vbar",
    "eval_hbar_u",
    "ubar",
    "eval_hbar_reduced",
    "ubar_batch",
    "hbar_u_batch",
    "hbar_reduced_batch",
    "gaussian_mean_tanh",
]

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100


@dataclass(frozen=True)
class LimitPoint:
    """Time and reduced state (x0, y, z0) of the limit Hamiltonian."""

    s: float
    x0: float
    y: float
    z0: float


@lru_cache(maxsize=16)
def gauss_hermite(order: int):
    """Nodes/weights for E[g(G)], G standard normal: sum_q w_q g(zeta_q)."""
    x, w = np.polynomial.hermite.hermgauss(order)
    return x * np.sqrt(2.0), w / np.sqrt(np.pi)


def _minor_nodes(s_time: float, scen: Scenario):
    """Quadrature points of X^1_s ~ N(xbar, s - t) and their weights."""
    var = s_time - scen.t_start
    if var < -1e-12:
        raise ValueError(f"time s={s_time} before t_start={scen.t_start}")
    zeta, w = gauss_hermite(scen.quad_order)
    pts = scen.xbar_init + np.sqrt(max(var, 0.0)) * zeta
    return pts, w


def gaussian_mean_tanh(shift, s_time: float, scen: Scenario):
    """E[tanh(shift + X^1_s)] by quadrature; shift may be an array."""
    pts, w = _minor_nodes(s_time, scen)
    shift = np.asarray(shift, dtype=float)
    return np.tanh(shift[..., None] + pts) @ w


def vbar(x0, x1, y, z0, u, model: ModelParams):
    """Minimiser of v -> f(x0, x1, y, z0, 0, u, v).

    Closed form -(c + beta*u)/gamma for the quadratic family; satisfies
    |vbar| <= C + (mu/lambda)|u| and is (mu/lambda)-Lipschitz in u because
    lambda = min(alpha, gamma) <= gamma.
    """
    del x0, x1, y, z0
    return -(model.c_lin + model.beta * np.asarray(u, dtype=float)) / model.gamma


def hbar_u_batch(s_time, x0, y, z0, u, scen: Scenario):
    """Value and u-gradient of the limit Hamiltonian, vectorised over points.

    value = E[f(x0, X^1_s, y, z0, 0, u, vbar(u))] + E[b0(x0, X^1_s, z0)] z0 u
    grad  = E[D_u f(..., u, vbar(u))] + E[b0(...)] z0   (envelope identity:
    the D_v term vanishes at the inner optimum).
    """
    m = scen.model
    x0 = np.asarray(x0, dtype=float)
    y = np.asarray(y, dtype=float)
    z0 = np.asarray(z0, dtype=float)
    u = np.asarray(u, dtype=float)
    pts, w = _minor_nodes(s_time, scen)
    X0, Y, Z0, U = x0[..., None], y[..., None], z0[..., None], u[..., None]

    v = vbar(X0, pts, Y, Z0, U, m)
    f_vals = m.f(X0, pts, Y, Z0, 0.0, U, v)
    b0_mean = m.b0(X0, pts, Z0) @ w
    value = f_vals @ w + b0_mean * z0 * u

    dfu = np.broadcast_to(
        np.asarray(m.df_du(X0, pts, Y, Z0, 0.0, U, v), dtype=float), f_vals.shape
    )
    grad = dfu @ w + b0_mean * z0
    return value, grad


def eval_hbar_u(pt: LimitPoint, u: float, s: Scenario):
    """Limit Hamiltonian and its u-gradient at one point."""
    value, grad = hbar_u_batch(pt.s, pt.x0, pt.y, pt.z0, u, s)
    return float(value), float(grad)


def _curvature(model: ModelParams) -> float:
    # reduced map curvature alpha + beta^2/gamma; at least (lambda^2-mu^2)/lambda
    return model.alpha + model.beta**2 / model.gamma


def ubar(pt: LimitPoint, s: Scenario, tol: float = DEFAULT_TOL) -> float:
    """Maximiser of u -> Hbar(s, xi, u); Newton on the envelope gradient.

    Uniqueness comes from strong concavity with modulus
    (lambda^2 - mu^2)/lambda > 0; the iteration starts at 0.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")

    def grad(u):
        return eval_hbar_u(pt, u, s)[1]

    u = 0.0
    curv = _curvature(s.model)
    for _ in range(DEFAULT_MAX_ITER):
        g = grad(u)
        if abs(g) <= tol:
            return float(u)
        u = u + g / curv
    u = _newton_scalar(grad, curv, u, tol, DEFAULT_MAX_ITER, minimize=False)
    if abs(grad(u)) > tol:
        raise RuntimeError(f"ubar Newton failed: residual {abs(grad(u)):.3e} > {tol}")
    return float(u)


def ubar_batch(s_time, x0, y, z0, scen: Scenario, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER):
    """Vectorised maximiser; damped Newton with the exact family curvature."""
    x0 = np.asarray(x0, dtype=float)
    u = np.zeros_like(x0)
    curv = _curvature(scen.model)
    for _ in range(max_iter):
        _, g = hbar_u_batch(s_time, x0, y, z0, u, scen)
        if np.max(np.abs(g)) <= tol:
            return u
        u = u + g / curv
    raise RuntimeError("ubar_batch did not converge")


def hbar_reduced_batch(s_time, x0, y, z0, scen: Scenario):
    """Fully reduced limit driver Hbar(s, xi) = Hbar(s, xi, ubar(s, xi))."""
    u = ubar_batch(s_time, x0, y, z0, scen)
    value, _ = hbar_u_batch(s_time, x0, y, z0, u, scen)
    return value, u


def eval_hbar_reduced(pt: LimitPoint, s: Scenario) -> float:
    value, _ = hbar_reduced_batch(pt.s, np.asarray(pt.x0), np.asarray(pt.y), np.asarray(pt.z0), s)
    return float(value)
