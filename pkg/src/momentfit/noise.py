"""Parametric noise models and their scalar moments.

Only the symmetric uniform family U[-u, u] ships; the moment evaluators are
the quantities the compensation plan consumes: E[eps^k], E[eps^k cos(a*eps)]
and E[eps^k sin(a*eps)] for one noise coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType

from scipy import integrate

from .errors import ConfigError, NumericalError

UNIFORM = "uniform"

_TRIGS = ("none", "cos", "sin")


@dataclass(frozen=True)
class MomentKey:
    """Identifies one scalar moment: power k, trig kind, frequency a = q*omega."""

    power: int
    trig: str = "none"
    freq: float = 0.0

    def __post_init__(self):
        if self.power < 0:
            raise ConfigError("moment power must be non-negative")
        if self.trig not in _TRIGS:
            raise ConfigError(f"unknown trig kind {self.trig!r}")
        if self.freq < 0:
            raise ConfigError("moment frequency must be non-negative")
        if (self.freq == 0.0) != (self.trig == "none"):
            raise ConfigError("frequency must be zero exactly when trig is none")


@dataclass(frozen=True)
class NoiseModel:
    """Noise density family with parameter vector theta (a single bound u here)."""

    family: str = UNIFORM
    theta: float = 0.0

    def __post_init__(self):
        if self.family != UNIFORM:
            raise ConfigError(f"unsupported noise family {self.family!r}")
        if not (self.theta >= 0.0):
            raise ConfigError("uniform noise bound must be >= 0")

    def to_dict(self) -> dict:
        return {"family": self.family, "theta": self.theta}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        try:
            return cls(family=d.get("family", UNIFORM), theta=float(d["theta"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid noise model payload: {exc}") from exc


def _series_trig(k: int, u: float, a: float, sin_kind: bool) -> float:
    """(1/u) * int_0^u t^k trig(a t) dt via the alternating power series.

    Accurate (no cancellation) for a*u <= 1; terms decay at least like 1/(2m)!.
    """
    x = a * u
    total = 0.0
    if sin_kind:
        term = x / (k + 2)  # m = 0
        m = 0
        while True:
            total += term
            m += 1
            nxt = term * (-(x * x) / ((2 * m) * (2 * m + 1))) * ((k + 2 * m) / (k + 2 * m + 2))
            if abs(nxt) < 1e-18 * max(abs(total), 1e-300):
                break
            term = nxt
    else:
        term = 1.0 / (k + 1)
        m = 0
        while True:
            total += term
            m += 1
            nxt = term * (-(x * x) / ((2 * m - 1) * (2 * m))) * ((k + 2 * m - 1) / (k + 2 * m + 1))
            if abs(nxt) < 1e-18 * max(abs(total), 1e-300):
                break
            term = nxt
    return (u ** k) * total


def _recurrence_trig(k: int, u: float, a: float, sin_kind: bool) -> float:
    """(1/u) * int_0^u t^k trig(a t) dt via integration-by-parts recurrences."""
    sin_au, cos_au = math.sin(a * u), math.cos(a * u)
    ic = sin_au / a                # int_0^u cos(a t) dt
    is_ = (1.0 - cos_au) / a       # int_0^u sin(a t) dt
    for m in range(1, k + 1):
        um = u ** m
        ic, is_ = (um * sin_au - m * is_) / a, (-um * cos_au + m * ic) / a
    return (is_ if sin_kind else ic) / u


def moment(model: NoiseModel, key: MomentKey) -> float:
    """Closed-form moment E[eps^k * trig(freq * eps)] for one noise coordinate.

    Odd-symmetric integrands return exactly 0.0; the u -> 0 limit returns the
    degenerate point-mass values.
    """
    if model.family != UNIFORM:
        raise ConfigError(f"unsupported noise family {model.family!r}")
    k, u, a = key.power, model.theta, key.freq
    if key.trig == "sin":
        if k % 2 == 0:
            return 0.0
        if u == 0.0 or a == 0.0:
            return 0.0
        if a * u <= 1.0:
            return _series_trig(k, u, a, sin_kind=True)
        return _recurrence_trig(k, u, a, sin_kind=True)
    # trig none or cos: even integrand in eps only when k is even
    if k % 2 == 1:
        return 0.0
    if u == 0.0:
        return 1.0 if k == 0 else 0.0
    if key.trig == "none" or a == 0.0:
        return (u ** k) / (k + 1)
    if a * u <= 1.0:
        return _series_trig(k, u, a, sin_kind=False)
    return _recurrence_trig(k, u, a, sin_kind=False)


def quadrature_moment(model: NoiseModel, key: MomentKey, tol: float = 1e-12) -> float:
    """Adaptive-quadrature oracle for `moment`; tests only, not the fast path."""
    if tol <= 0:
        raise ConfigError("quadrature tolerance must be positive")
    u = model.theta
    if u == 0.0:
        return moment(model, key)
    k, a = key.power, key.freq

    def integrand(t):
        v = t ** k
        if key.trig == "cos":
            v *= math.cos(a * t)
        elif key.trig == "sin":
            v *= math.sin(a * t)
        return v / (2.0 * u)

    value, err = integrate.quad(integrand, -u, u, epsabs=tol, epsrel=1e-13, limit=500)
    if err > max(tol, 1e-10) * 50:
        raise NumericalError(f"quadrature failed to converge: estimated error {err:g}")
    return value


class MomentTable:
    """Immutable map from MomentKey to its closed-form value at a fixed theta."""

    def __init__(self, model: NoiseModel, values: dict):
        self.model = model
        self._values = MappingProxyType(dict(values))

    def __getitem__(self, key: MomentKey) -> float:
        return self._values[key]

    def __contains__(self, key) -> bool:
        return key in self._values

    def __len__(self) -> int:
        return len(self._values)

    def items(self):
        return self._values.items()


def build_moment_table(model: NoiseModel, keys) -> MomentTable:
    """Evaluate the closed forms for every requested key."""
    values = {}
    for key in keys:
        v = moment(model, key)
        if not math.isfinite(v):
            raise NumericalError(f"non-finite moment for {key}")
        values[key] = v
    return MomentTable(model, values)
