"""N-player Hamiltonian and its unique concave-convex saddle point.

The Hamiltonian of the weak-formulation game reads

    H_N(xi, u, v) = mean_l f(x0, x_l, y, z0, z_l, u, v_l)
                    + (mean_l b0(x0, x_l, z0) * u) * z0
                    + eps * sum_i (mean_l b1(x0, x_l, z_i) * v_l) * z_i,

with the i-sum over the minor components z_1..z_N.  Grouping by minor,
the coupling enters each v_l only through the aggregate
B_l = eps * sum_i b1(x0, x_l, z_i) * z_i, and u through
D = mean_l b0(x0, x_l, z0) * z0.

The saddle is computed by the Stackelberg decomposition: the follower's
best response minimises v -> f(xi_l, u, v) + v * B_l (strictly convex,
modulus gamma), then the leader maximises the reduced map whose envelope
derivative is mean_l D_u f(xi_l, u, v_l(u)) + D.  For the quadratic family
both problems have closed forms; a safeguarded Newton handles the general
extension point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams
from .numutil import sorted_mean, sorted_sum

__all__ = [
    "HamiltonianPoint",
    "SaddlePoint",
    "eval_hamiltonian_n",
    "inner_min_v",
    "saddle_point_n",
    "eval_hbar_n",
    "saddle_point_batch",
    "hbar_n_batch",
]

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100


@dataclass(frozen=True)
class HamiltonianPoint:
    """Argument (x^(N), y, z^(N)) of H_N together with N and eps."""

    x: np.ndarray  # [N+1]
    y: float
    z: np.ndarray  # [N+1]
    n_minor: int
    eps: float

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float))
        if self.x.shape != (self.n_minor + 1,) or self.z.shape != (self.n_minor + 1,):
            raise ValueError(
                f"x/z must have length n_minor+1={self.n_minor + 1}, "
                f"got {self.x.shape} and {self.z.shape}"
            )


@dataclass(frozen=True)
class SaddlePoint:
    u: float
    v: np.ndarray  # [N]
    residual_u: float
    residual_v: float
    iterations: int


def _aggregates(p: HamiltonianPoint, model: ModelParams):
    """B_l (per minor) and D for the tanh family; both O(N) via factorisation."""
    x0 = p.x[0]
    xm = p.x[1:]
    z0 = p.z[0]
    zm = p.z[1:]
    # b1(x0, x_l, z_i) * z_i = kb1 * tanh(x0+x_l) * z_i/(1+|z_i|)
    z_weight = float(sorted_sum(zm / (1.0 + np.abs(zm))))
    b_l = p.eps * model.kappa_b1 * np.tanh(x0 + xm) * z_weight
    d_bar = float(model.kappa_b0 * sorted_mean(np.tanh(x0 + xm)) * z0 / (1.0 + abs(z0)))
    return b_l, d_bar


def eval_hamiltonian_n(
    p: HamiltonianPoint, u: float, v: np.ndarray, model: ModelParams
) -> float:
    """Evaluate H_N(xi, u, v) for the configured family."""
    v = np.asarray(v, dtype=float)
    if v.shape != (p.n_minor,):
        raise ValueError(f"v must have length {p.n_minor}, got {v.shape}")
    x0 = p.x[0]
    xm = p.x[1:]
    z0 = p.z[0]
    zm = p.z[1:]
    f_vals = model.f(x0, xm, p.y, z0, zm, u, v)
    b_l, d_bar = _aggregates(p, model)
    return float(sorted_mean(f_vals + v * b_l) + d_bar * u)


def _inner_closed_form(u, b_l, model: ModelParams):
    return -(model.c_lin + model.beta * u + b_l) / model.gamma


def inner_min_v(
    p: HamiltonianPoint,
    ell: int,
    u: float,
    model: ModelParams,
    tol: float = DEFAULT_TOL,
) -> float:
    """Best response of minor ``ell``: minimiser of f(xi_l, u, .) + v * B_l.

    Closed form for the quadratic family; a safeguarded Newton on the
    stationarity equation backs the general extension point and must agree
    with the closed form to ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not (1 <= ell <= p.n_minor):
        raise ValueError(f"minor index {ell} out of range 1..{p.n_minor}")
    if not np.isfinite(u):
        raise ValueError("non-finite control input")
    b_l, _ = _aggregates(p, model)
    b = float(b_l[ell - 1])
    v = float(_inner_closed_form(u, b, model))

    # stationarity residual: d/dv [f + v*B_l] = c + gamma*v + beta*u + B_l
    def grad(vv):
        return model.c_lin + model.gamma * vv + model.beta * u + b

    if abs(grad(v)) > tol:
        v = _newton_scalar(grad, model.gamma, v, tol, DEFAULT_MAX_ITER, minimize=True)
    return v


def _newton_scalar(grad, curvature, x0, tol, max_iter, minimize):
    """Safeguarded Newton for a strictly monotone scalar gradient.

    ``curvature`` is a positive lower bound on |grad'|; the bracket is grown
    geometrically until the gradient changes sign, then Newton steps are
    clipped to the bracket (bisection fallback).
    """
    sign = 1.0 if minimize else -1.0  # grad increasing for convex minimisation
    lo, hi = x0 - 1.0, x0 + 1.0
    width = 1.0
    for _ in range(200):
        if sign * grad(lo) < 0 and sign * grad(hi) > 0:
            break
        width *= 2.0
        lo, hi = x0 - width, x0 + width
    x = float(np.clip(x0, lo, hi))
    for _ in range(max_iter):
        g = grad(x)
        if abs(g) <= tol:
            return x
        if sign * g > 0:
            hi = x
        else:
            lo = x
        step = -g / (sign * curvature)
        x_new = x + step
        if not (lo < x_new < hi):
            x_new = 0.5 * (lo + hi)
        x = x_new
    return x


def saddle_point_n(
    p: HamiltonianPoint,
    model: ModelParams,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> SaddlePoint:
    """Unique saddle point of H_N(xi, ., .) via the Stackelberg decomposition.

    The outer problem maximises u -> H_N(xi, u, v(u)) whose envelope
    derivative drops the D_v term at the inner optimum; strong concavity
    with modulus >= lambda - mu^2/lambda makes the Newton iteration safe.
    """
    if not model.mu_mod < model.lambda_mod:
        raise ValueError(
            f"saddle requires mu < lambda, got mu={model.mu_mod}, lambda={model.lambda_mod}"
        )
    b_l, d_bar = _aggregates(p, model)
    b_bar = float(sorted_mean(b_l))
    a, c = model.a_lin, model.c_lin
    alpha, beta, gamma = model.alpha, model.beta, model.gamma

    # envelope derivative: mean_l D_u f(xi_l, u, v_l(u)) + D
    #   = a - beta*c/gamma - (beta/gamma)*B_bar + D - (alpha + beta^2/gamma) u
    curvature = alpha + beta**2 / gamma
    u = (a - beta * c / gamma - (beta / gamma) * b_bar + d_bar) / curvature
    iterations = 1

    def env_grad(uu):
        v = _inner_closed_form(uu, b_l, model)
        return float(sorted_mean(model.df_du(p.x[0], p.x[1:], p.y, p.z[0], p.z[1:], uu, v)) + d_bar)

    if abs(env_grad(u)) > tol:
        u = _newton_scalar(env_grad, curvature, u, tol, max_iter, minimize=False)
        iterations = max_iter

    v = _inner_closed_form(u, b_l, model)
    residual_u = abs(env_grad(u))
    residual_v = float(np.max(np.abs(c + gamma * v + beta * u + b_l)))
    return SaddlePoint(
        u=float(u), v=v, residual_u=residual_u, residual_v=residual_v, iterations=iterations
    )


def eval_hbar_n(p: HamiltonianPoint, model: ModelParams) -> float:
    """H_N evaluated at its saddle point (the saddle-BSDE driver)."""
    sp = saddle_point_n(p, model)
    return eval_hamiltonian_n(p, sp.u, sp.v, model)


# --------------------------------------------------------------------------
# batched versions used by the BSDE sweeps
# --------------------------------------------------------------------------


def saddle_point_batch(
    x: np.ndarray, y: np.ndarray, z: np.ndarray, eps: float, model: ModelParams
):
    """Saddle controls for a batch of Hamiltonian points.

    x, z: [n, N+1]; y: [n].  Returns (u [n], v [n, N]).  Uses the family's
    closed forms; the scalar solver provides the cross-check in tests.
    """
    x0 = x[:, 0:1]
    xm = x[:, 1:]
    zm = z[:, 1:]
    z0 = z[:, 0]
    z_weight = sorted_sum(zm / (1.0 + np.abs(zm)), axis=1)[:, None]
    b_l = eps * model.kappa_b1 * np.tanh(x0 + xm) * z_weight        # [n, N]
    d_bar = model.kappa_b0 * sorted_mean(np.tanh(x0 + xm), axis=1) * z0 / (1.0 + np.abs(z0))
    b_bar = sorted_mean(b_l, axis=1)
    curvature = model.alpha + model.beta**2 / model.gamma
    u = (
        model.a_lin
        - model.beta * model.c_lin / model.gamma
        - (model.beta / model.gamma) * b_bar
        + d_bar
    ) / curvature
    v = -(model.c_lin + model.beta * u[:, None] + b_l) / model.gamma
    return u, v


def hbar_n_batch(
    x: np.ndarray, y: np.ndarray, z: np.ndarray, eps: float, model: ModelParams
):
    """H_N at the saddle for a batch of points; returns (hbar [n], u [n], v [n, N])."""
    u, v = saddle_point_batch(x, y, z, eps, model)
    x0 = x[:, 0:1]
    xm = x[:, 1:]
    z0 = z[:, 0:1]
    zm = z[:, 1:]
    f_vals = model.f(x0, xm, y[:, None], z0, zm, u[:, None], v)
    z_weight = sorted_sum(zm / (1.0 + np.abs(zm)), axis=1)[:, None]
    b_l = eps * model.kappa_b1 * np.tanh(x0 + xm) * z_weight
    d_bar = model.kappa_b0 * sorted_mean(np.tanh(x0 + xm), axis=1) * z[:, 0] / (1.0 + np.abs(z[:, 0]))
    hbar = sorted_mean(f_vals + v * b_l, axis=1) + d_bar * u
    return hbar, u, v
