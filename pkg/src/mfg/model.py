"""Model family, scenario configuration and deterministic random streams.

The game is parameterised by a single closed-form coefficient family
(quadratic controls plus bounded tanh couplings) so that every solver in the
package has an exact oracle:

    f(x0, x1, y, z0, z1, u, v) = kg*tanh(x0+x1+y+z0+z1)
                                 + a*u + c*v - (alpha/2)*u^2 + (gamma/2)*v^2
                                 + beta*u*v
    b_i(x0, x1, z)             = kappa_i * tanh(x0+x1) / (1+|z|)
    Phi(x0, x1)                = kappa_phi * tanh(x0+x1)

f is strictly concave in u (modulus alpha), strictly convex in v (modulus
gamma) and has cross-derivative coupling |f_uv| = |beta|, so the
concavity-convexity requirement holds with lambda = min(alpha, gamma) and
mu = |beta| as long as |beta| < min(alpha, gamma).

Dimensions are fixed to scalar state and scalar controls; higher dimensions
are rejected at configuration load.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "ModelParams",
    "Scenario",
    "RandomStream",
    "ValidationReport",
    "ConfigError",
    "load_scenario",
    "scenario_from_dict",
    "validate_assumptions",
    "epsilon_n",
    "DEFAULTS",
    "config_digest",
]


class ConfigError(ValueError):
    """Raised for malformed or out-of-range configuration input."""


# --------------------------------------------------------------------------
# model family
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelParams:
    """Coefficients of the quadratic-tanh family.

    ``lambda_mod``/``mu_mod`` are the concavity/cross moduli derived from the
    quadratic part.  The constructor never raises on ``mu_mod >= lambda_mod``;
    configuration loading and the saddle solvers enforce that separately, so
    the numerical assumption validator can also be pointed at broken families.
    """

    alpha: float = 2.0
    gamma: float = 2.0
    beta: float = 1.0
    a_lin: float = 1.0
    c_lin: float = 0.5
    kappa_g: float = 0.5
    kappa_b0: float = 0.5
    kappa_b1: float = 0.5
    kappa_phi: float = 1.0
    sigma_mode: str = "const"  # "const" (sigma = 1) or "tanh" (1 + tanh/2), uncontrolled runs only

    @property
    def lambda_mod(self) -> float:
        return min(self.alpha, self.gamma)

    @property
    def mu_mod(self) -> float:
        return abs(self.beta)

    # -- driver f and its control derivatives (vectorised in every argument) --

    def f(self, x0, x1, y, z0, z1, u, v):
        quad = (
            self.a_lin * u
            + self.c_lin * v
            - 0.5 * self.alpha * u**2
            + 0.5 * self.gamma * v**2
            + self.beta * u * v
        )
        return self.kappa_g * np.tanh(x0 + x1 + y + z0 + z1) + quad

    def df_du(self, x0, x1, y, z0, z1, u, v):
        del x0, x1, y, z0, z1
        return self.a_lin - self.alpha * u + self.beta * v

    def df_dv(self, x0, x1, y, z0, z1, u, v):
        del x0, x1, y, z0, z1
        return self.c_lin + self.gamma * v + self.beta * u

    # -- couplings --

    def b0(self, x0, x1, z):
        return self.kappa_b0 * np.tanh(x0 + x1) / (1.0 + np.abs(z))

    def b1(self, x0, x1, z):
        return self.kappa_b1 * np.tanh(x0 + x1) / (1.0 + np.abs(z))

    def phi(self, x0, x1):
        return self.kappa_phi * np.tanh(x0 + x1)

    # -- uncontrolled-system coefficients (two/three state arguments, no z) --

    def b0_unc(self, x0, x1):
        return self.kappa_b0 * np.tanh(x0 + x1)

    def b1_unc(self, x0, xj, xm):
        return self.kappa_b1 * np.tanh(x0 + xj + xm)

    def sigma0_unc(self, x0, x1):
        if self.sigma_mode == "tanh":
            return 1.0 + 0.5 * np.tanh(x0 + x1)
        return np.ones(np.broadcast(np.asarray(x0), np.asarray(x1)).shape)

    def sigma1_unc(self, x0, xj, xm):
        if self.sigma_mode == "tanh":
            return 1.0 + 0.5 * np.tanh(x0 + xj + xm)
        return np.ones(np.broadcast(np.asarray(x0), np.asarray(xj), np.asarray(xm)).shape)

    def f_unc(self, x0, x1, y, z0, z1):
        """Driver of the uncontrolled game: f with the controls frozen at 0."""
        return self.kappa_g * np.tanh(x0 + x1 + y + z0 + z1)


# --------------------------------------------------------------------------
# scenario
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    t_start: float = 0.0
    t_end: float = 0.5
    n_steps: int = 20
    x0_init: float = 0.3
    xbar_init: float = 0.1
    minor_inits: tuple[float, ...] | None = None
    model: ModelParams = field(default_factory=ModelParams)
    eps_coeff: float = 1.0
    eps_exponent: float = 0.75
    allow_nonconforming_eps: bool = False
    mc_outer: int = 500
    mc_cloud: int = 256
    quad_order: int = 40
    seed: int = 20240817

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ConfigError(f"t_start={self.t_start} must be < t_end={self.t_end}")
        if self.n_steps < 1:
            raise ConfigError(f"n_steps={self.n_steps} out of range (>= 1)")
        if self.mc_outer < 2:
            raise ConfigError(f"mc_outer={self.mc_outer} out of range (>= 2)")
        if self.mc_cloud < 2:
            raise ConfigError(f"mc_cloud={self.mc_cloud} out of range (>= 2)")
        if self.quad_order < 2:
            raise ConfigError(f"quad_order={self.quad_order} out of range (>= 2)")
        if self.eps_coeff <= 0:
            raise ConfigError(f"eps_coeff={self.eps_coeff} must be positive")
        if self.seed < 0 or self.seed > 0xFFFFFFFFFFFFFFFF:
            raise ConfigError("seed must fit in 64 unsigned bits")
        if self.eps_exponent != 0.75 and not self.allow_nonconforming_eps:
            raise ConfigError(
                "eps_exponent != 0.75 requires allow_nonconforming_eps=true"
            )

    @property
    def horizon(self) -> float:
        return self.t_end - self.t_start

    def minor_init_values(self, n_minor: int) -> np.ndarray:
        """Initial positions of the N minor agents (defaults to xbar_init)."""
        if self.minor_inits is None:
            return np.full(n_minor, self.xbar_init)
        if len(self.minor_inits) != n_minor:
            raise ValueError(
                f"minor_inits has length {len(self.minor_inits)}, expected {n_minor}"
            )
        return np.asarray(self.minor_inits, dtype=float)

    def epsilon(self, n_minor: int) -> float:
        return self.eps_coeff * float(n_minor) ** (-self.eps_exponent)

    def with_overrides(self, **kwargs) -> "Scenario":
        model_keys = {k: v for k, v in kwargs.items() if k in ModelParams.__dataclass_fields__}
        scen_keys = {k: v for k, v in kwargs.items() if k not in model_keys}
        model = replace(self.model, **model_keys) if model_keys else self.model
        return replace(self, model=model, **scen_keys)


def epsilon_n(n_minor: int, eps_coeff: float) -> float:
    """Minor-drift scale eps_coeff * N^{-3/4} used by the limit theorem."""
    if n_minor < 1:
        raise ValueError("n_minor must be >= 1")
    return eps_coeff * float(n_minor) ** -0.75


# --------------------------------------------------------------------------
# deterministic random streams
# --------------------------------------------------------------------------


def _stream_key(seed: int, label: str, index: int) -> list[int]:
    """Two 64-bit Philox key words derived from (seed, label, index)."""
    payload = (
        (seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
        + (index & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
        + label.encode("utf-8")
    )
    digest = hashlib.blake2b(payload, digest_size=16).digest()
    return [int.from_bytes(digest[:8], "little"), int.from_bytes(digest[8:], "little")]


@dataclass(frozen=True)
class RandomStream:
    """Counter-based random stream keyed by (seed, label, index).

    Identical keys yield the identical value sequence on every platform
    and regardless of what other streams were consumed; substreams are
    derived by label/index, never by drawing.
    """

    seed: int
    label: str = "main"
    index: int = 0

    def generator(self) -> np.random.Generator:
        key = _stream_key(self.seed, self.label, self.index)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, label: str | None = None, index: int | None = None) -> "RandomStream":
        return RandomStream(
            seed=self.seed,
            label=self.label if label is None else f"{self.label}/{label}",
            index=self.index if index is None else index,
        )


# --------------------------------------------------------------------------
# assumption validation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[tuple[str, str], ...]
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ok != (len(self.violations) == 0):
            raise ValueError("ok flag inconsistent with recorded violations")


_PROBE_BOX = 5.0  # tanh saturates well inside [-5, 5]
_EXACT_SLACK = 1e-9


def validate_assumptions(
    s: Scenario, n_probe: int = 1000, stream: RandomStream | None = None
) -> ValidationReport:
    """Numerically probe the concavity-convexity and boundedness assumptions.

    Draws ``n_probe`` random argument pairs in the probe box and checks
    (i) strong monotonicity of the control gradients with modulus
    lambda = min(alpha, gamma), (ii) the cross-Lipschitz bound mu = |beta|,
    (iii) boundedness of b_i(x0,x1,z)*z, and (iv) an empirical Lipschitz
    constant for Phi.  Empirical constants are reported, not asserted
    against fixed values.
    """
    if n_probe < 10:
        raise ValueError("n_probe must be >= 10")
    if stream is None:
        stream = RandomStream(s.seed, "validate")
    rng = stream.generator()
    m = s.model
    lam = m.lambda_mod
    mu = m.mu_mod

    def draw(n):
        return rng.uniform(-_PROBE_BOX, _PROBE_BOX, size=n)

    x0, x1, y, z0, z1 = (draw(n_probe) for _ in range(5))
    u, u2, v, v2 = (draw(n_probe) for _ in range(4))

    violations: list[tuple[str, str]] = []

    # (i) Ai monotonicity; exact (not approximate) for the quadratic family
    lhs_u = (m.df_du(x0, x1, y, z0, z1, u, v) - m.df_du(x0, x1, y, z0, z1, u2, v)) * (u - u2)
    bad = lhs_u > -lam * (u - u2) ** 2 + _EXACT_SLACK
    if lam <= 0:
        violations.append(("Ai u-monotonicity", f"lambda={lam} not positive"))
    elif np.any(bad):
        i = int(np.argmax(bad))
        violations.append(("Ai u-monotonicity", f"probe {i}: {lhs_u[i]:.3e} > -lambda*du^2"))

    lhs_v = (m.df_dv(x0, x1, y, z0, z1, u, v) - m.df_dv(x0, x1, y, z0, z1, u, v2)) * (v - v2)
    bad = lhs_v < lam * (v - v2) ** 2 - _EXACT_SLACK
    if lam > 0 and np.any(bad):
        i = int(np.argmax(bad))
        violations.append(("Ai v-monotonicity", f"probe {i}: {lhs_v[i]:.3e} < lambda*dv^2"))

    # (ii) Aii cross bound
    cross_u = np.abs(m.df_du(x0, x1, y, z0, z1, u, v) - m.df_du(x0, x1, y, z0, z1, u, v2))
    bad = cross_u > mu * np.abs(v - v2) + _EXACT_SLACK
    if np.any(bad):
        i = int(np.argmax(bad))
        violations.append(("Aii u-cross", f"probe {i}: |df_du gap| {cross_u[i]:.3e} > mu*|dv|"))
    cross_v = np.abs(m.df_dv(x0, x1, y, z0, z1, u, v) - m.df_dv(x0, x1, y, z0, z1, u2, v))
    bad = cross_v > mu * np.abs(u - u2) + _EXACT_SLACK
    if np.any(bad):
        i = int(np.argmax(bad))
        violations.append(("Aii v-cross", f"probe {i}: |df_dv gap| {cross_v[i]:.3e} > mu*|du|"))

    if not mu < lam:
        violations.append(("mu < lambda", f"mu={mu} >= lambda={lam}"))

    # (iii) boundedness of b_i * z
    z = draw(n_probe)
    b0z = np.abs(m.b0(x0, x1, z) * z)
    b1z = np.abs(m.b1(x0, x1, z) * z)
    if np.any(b0z > abs(m.kappa_b0) + _EXACT_SLACK):
        violations.append(("b0*z bounded", f"max |b0*z| = {b0z.max():.3e}"))
    if np.any(b1z > abs(m.kappa_b1) + _EXACT_SLACK):
        violations.append(("b1*z bounded", f"max |b1*z| = {b1z.max():.3e}"))

    # (iv) empirical Phi Lipschitz constant
    dphi = np.abs(m.phi(x0, x1) - m.phi(x1, y))
    dist = np.abs(x0 - x1) + np.abs(x1 - y)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(dist > 1e-12, dphi / dist, 0.0)
    phi_lip = float(ratios.max())

    constants = {
        "lambda": lam,
        "mu": mu,
        "b0z_max": float(b0z.max()),
        "b1z_max": float(b1z.max()),
        "phi_lipschitz": phi_lip,
        "f_at_zero_max": float(np.abs(m.f(x0, x1, y, z0, z1, 0.0, 0.0)).max()),
        "n_probe": n_probe,
    }
    return ValidationReport(ok=not violations, violations=tuple(violations), constants=constants)


# --------------------------------------------------------------------------
# configuration parsing
# --------------------------------------------------------------------------

_SECTIONS = {
    "time": ("t_start", "t_end", "n_steps"),
    "init": ("x0_init", "xbar_init", "minor_inits"),
    "model": (
        "alpha", "gamma", "beta", "a_lin", "c_lin",
        "kappa_g", "kappa_b0", "kappa_b1", "kappa_phi", "sigma_mode",
        "eps_coeff", "eps_exponent", "allow_nonconforming_eps",
    ),
    "mc": ("mc_outer", "mc_cloud", "quad_order"),
    "seed": ("seed",),
}

_MODEL_FIELDS = set(ModelParams.__dataclass_fields__)
_INT_KEYS = {"n_steps", "mc_outer", "mc_cloud", "quad_order", "seed"}
_BOOL_KEYS = {"allow_nonconforming_eps"}
_STR_KEYS = {"sigma_mode"}

DEFAULTS: dict[str, object] = {}
for _sec, _keys in _SECTIONS.items():
    for _k in _keys:
        if _k == "minor_inits":
            DEFAULTS[_k] = None
        elif _k in _MODEL_FIELDS:
            DEFAULTS[_k] = getattr(ModelParams(), _k)
        else:
            DEFAULTS[_k] = getattr(Scenario(), _k)

_KEY_SECTION = {k: sec for sec, keys in _SECTIONS.items() for k in keys}


def _parse_value(key: str, raw: str, where: str):
    raw = raw.strip()
    try:
        if key == "minor_inits":
            if raw.lower() in ("", "none"):
                return None
            return tuple(float(p) for p in raw.replace(",", " ").split())
        if key in _BOOL_KEYS:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if key in _STR_KEYS:
            if key == "sigma_mode" and raw not in ("const", "tanh"):
                raise ValueError(f"sigma_mode must be 'const' or 'tanh', got {raw!r}")
            return raw
        if key in _INT_KEYS:
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: invalid value for {key!r}: {exc}") from None


def parse_config_text(config_text: str) -> dict[str, object]:
    """Parse the sectioned key=value format into a flat key->value dict."""
    values: dict[str, object] = {}
    section = None
    for lineno, line in enumerate(config_text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        where = f"line {lineno}"
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected key=value, got {stripped!r}")
        key, raw = (p.strip() for p in stripped.split("=", 1))
        if key in ("d", "k", "m", "dim", "dimension"):
            raise ConfigError(f"{where}: dimensions are fixed to 1; key {key!r} rejected")
        if key not in _KEY_SECTION:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if section is not None and key not in _SECTIONS[section]:
            raise ConfigError(f"{where}: key {key!r} does not belong to section [{section}]")
        if key in values:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, where)
    return values


def scenario_from_dict(values: dict) -> Scenario:
    """Build a Scenario from a flat key->value dict, applying defaults."""
    unknown = set(values) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    merged = dict(DEFAULTS)
    merged.update(values)
    model = ModelParams(**{k: merged[k] for k in _MODEL_FIELDS})
    if not model.mu_mod < model.lambda_mod:
        raise ConfigError(
            f"mu >= lambda: |beta|={model.mu_mod} must be < min(alpha,gamma)={model.lambda_mod}"
        )
    if model.alpha <= 0 or model.gamma <= 0:
        raise ConfigError("alpha and gamma must be strictly positive")
    scen_kwargs = {
        k: merged[k]
        for k in Scenario.__dataclass_fields__
        if k not in ("model",)
    }
    mi = scen_kwargs.get("minor_inits")
    if mi is not None:
        scen_kwargs["minor_inits"] = tuple(float(x) for x in mi)
    return Scenario(model=model, **scen_kwargs)


def load_scenario(config_text: str) -> Scenario:
    """Parse config text and return a fully populated Scenario.

    Pure function of its input: identical text yields a structurally
    identical Scenario.
    """
    return scenario_from_dict(parse_config_text(config_text))


def config_digest(config_text: str, overrides: list[str] | None = None) -> str:
    payload = config_text + "\x00" + "\x00".join(overrides or [])
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]
