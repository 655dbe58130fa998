"""Concave mobilities, the ratio theta = m(rho)/rho, and action densities.

All mobilities are immutable. Vectorised evaluators (``m``, ``theta``,
``dtheta``) skip domain checks and are meant for inner loops; the module
level helpers ``theta_of`` and ``ActionDensity.phi`` implement the checked,
convention-complete versions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError

CONCAVITY_TOL = 1e-12


class Mobility:
    """Base class; subclasses provide ``m``, ``theta`` and ``dtheta``."""

    kind: str = "abstract"
    max_density: float

    def m(self, rho):
        raise NotImplementedError

    def theta(self, rho):
        raise NotImplementedError

    def dtheta(self, rho):
        """Derivative of theta (one-sided from the right at kinks)."""
        raise NotImplementedError

    def d2theta(self, rho):
        return np.zeros_like(np.asarray(rho, dtype=float))

    @property
    def theta0(self) -> float:
        return float(self.theta(np.array([0.0]))[0])

    @property
    def sup_theta(self) -> float:
        # theta is nonincreasing, so its sup is attained at 0
        return self.theta0

    @property
    def degenerate_at_max(self) -> bool:
        """True when theta(M) vanishes, i.e. transport stops at full density."""
        return float(self.theta(np.array([self.max_density]))[0]) <= 0.0

    def probe_grid(self, n: int = 1001) -> np.ndarray:
        return np.linspace(0.0, self.max_density, n)

    def to_spec(self) -> dict:
        raise NotImplementedError

    def __call__(self, rho):
        return self.m(rho)


@dataclass(frozen=True)
class Linear(Mobility):
    """m(rho) = rho on [0, M]; recovers the classical Wasserstein distance."""

    max_density: float = 1.0
    kind: str = field(default="linear", init=False)

    def __post_init__(self):
        _check_max(self.max_density)

    def m(self, rho):
        return np.asarray(rho, dtype=float) * 1.0

    def theta(self, rho):
        return np.ones_like(np.asarray(rho, dtype=float))

    def dtheta(self, rho):
        return np.zeros_like(np.asarray(rho, dtype=float))

    def to_spec(self):
        return {"kind": "linear", "M": self.max_density}


@dataclass(frozen=True)
class Logistic(Mobility):
    """m(rho) = rho (1 - rho/M): congestion, transport stops at rho = M."""

    max_density: float = 1.0
    kind: str = field(default="logistic", init=False)

    def __post_init__(self):
        _check_max(self.max_density)

    def m(self, rho):
        rho = np.asarray(rho, dtype=float)
        return rho * (1.0 - rho / self.max_density)

    def theta(self, rho):
        return 1.0 - np.asarray(rho, dtype=float) / self.max_density

    def dtheta(self, rho):
        return np.full_like(np.asarray(rho, dtype=float), -1.0 / self.max_density)

    def to_spec(self):
        return {"kind": "logistic", "M": self.max_density}


class TableMobility(Mobility):
    """Piecewise-linear interpolation of sampled (rho, m) pairs.

    The table must start at (0, 0), end at rho = M and be concave; this is
    checked here rather than assumed. theta(0) is the slope of the first cell.
    """

    kind = "table"

    def __init__(self, rho, m, max_density=None):
        rho = np.asarray(rho, dtype=float)
        m = np.asarray(m, dtype=float)
        if rho.ndim != 1 or rho.shape != m.shape or rho.size < 2:
            raise DomainError("rho and m must be 1-d arrays of equal length >= 2")
        if rho[0] != 0.0 or m[0] != 0.0:
            raise DomainError("table must start at (0, 0)")
        if np.any(np.diff(rho) <= 0):
            raise DomainError("rho samples must be strictly increasing")
        if np.any(m < 0):
            raise DomainError("mobility must be nonnegative")
        if max_density is None:
            max_density = rho[-1]
        if not np.isclose(rho[-1], max_density, rtol=0, atol=1e-12 * max(1.0, max_density)):
            raise DomainError("last rho sample must equal M")
        slopes = np.diff(m) / np.diff(rho)
        scale = max(1.0, float(np.max(np.abs(slopes))))
        if np.any(np.diff(slopes) > CONCAVITY_TOL * scale):
            raise DomainError("tabulated mobility is not concave")
        self.max_density = float(max_density)
        self._rho = rho
        self._m = m
        self._slopes = slopes
        self._intercepts = m[:-1] - slopes * rho[:-1]

    @property
    def samples(self):
        return self._rho.copy(), self._m.copy()

    def _cell(self, rho):
        idx = np.searchsorted(self._rho, rho, side="right") - 1
        return np.clip(idx, 0, self._slopes.size - 1)

    def m(self, rho):
        return np.interp(np.asarray(rho, dtype=float), self._rho, self._m)

    def theta(self, rho):
        rho = np.asarray(rho, dtype=float)
        out = np.empty_like(rho)
        pos = rho > 0
        out[pos] = self.m(rho[pos]) / rho[pos]
        # forward difference over the first cell
        out[~pos] = self._slopes[0]
        return out

    def dtheta(self, rho):
        rho = np.asarray(rho, dtype=float)
        a = self._intercepts[self._cell(rho)]
        out = np.zeros_like(rho)
        pos = rho > 0
        out[pos] = -a[pos] / rho[pos] ** 2
        return out

    def d2theta(self, rho):
        rho = np.asarray(rho, dtype=float)
        a = self._intercepts[self._cell(rho)]
        out = np.zeros_like(rho)
        pos = rho > 0
        out[pos] = 2 * a[pos] / rho[pos] ** 3
        return out

    def to_spec(self):
        return {"kind": "table", "M": self.max_density,
                "rho": self._rho.tolist(), "m": self._m.tolist()}

    def __eq__(self, other):
        return (isinstance(other, TableMobility)
                and np.array_equal(self._rho, other._rho)
                and np.array_equal(self._m, other._m))

    def __hash__(self):
        return hash((self._rho.tobytes(), self._m.tobytes()))

    def __repr__(self):
        return f"TableMobility(M={self.max_density}, cells={self._slopes.size})"


def _check_max(M):
    if not (np.isfinite(M) and M > 0):
        raise DomainError(f"max density must be a positive finite number, got {M}")


def theta_of(mobility: Mobility, rho: float) -> float:
    """theta(rho) = m(rho)/rho, with its right limit at rho = 0."""
    if not (0.0 <= rho <= mobility.max_density):
        raise DomainError(f"rho={rho} outside [0, {mobility.max_density}]")
    return float(mobility.theta(np.array([float(rho)]))[0])


def dilate(mobility: Mobility, lam: float) -> Mobility:
    """Relaxed mobility rho -> lam * m(rho / lam) with maximal density lam*M.

    Every supported kind is closed under this operation, so the result has
    the same kind as the input.
    """
    if not lam > 1.0:
        raise DomainError(f"dilation factor must exceed 1, got {lam}")
    if isinstance(mobility, Linear):
        return Linear(lam * mobility.max_density)
    if isinstance(mobility, Logistic):
        return Logistic(lam * mobility.max_density)
    if isinstance(mobility, TableMobility):
        rho, m = mobility.samples
        return TableMobility(lam * rho, lam * m, lam * mobility.max_density)
    raise TypeError(f"cannot dilate {type(mobility).__name__}")


@dataclass(frozen=True)
class ActionDensity:
    """phi(rho, j) = |j|^p / m(rho)^(p-1), with the singular conventions."""

    p: float
    mobility: Mobility

    def __post_init__(self):
        if not self.p > 1:
            raise DomainError(f"exponent p must exceed 1, got {self.p}")

    def phi(self, rho, j):
        rho = np.asarray(rho, dtype=float)
        j = np.asarray(j, dtype=float)
        rho, j = np.broadcast_arrays(rho, j)
        inside = (rho >= 0) & (rho <= self.mobility.max_density)
        mv = np.where(inside, self.mobility.m(np.where(inside, rho, 0.0)), 0.0)
        out = np.full(rho.shape, np.inf)
        finite = inside & (mv > 0)
        out[finite] = np.abs(j[finite]) ** self.p / mv[finite] ** (self.p - 1)
        out[inside & (mv <= 0) & (j == 0)] = 0.0
        return out if out.ndim else float(out)

    def phi_theta_form(self, rho, j):
        """The same quantity written as |j|^p theta^(1-p) rho^(1-p)."""
        rho = np.asarray(rho, dtype=float)
        j = np.asarray(j, dtype=float)
        th = self.mobility.theta(rho)
        with np.errstate(divide="ignore"):
            return np.abs(j) ** self.p * th ** (1 - self.p) * rho ** (1 - self.p)


def mobility_from_spec(spec: dict) -> Mobility:
    if not isinstance(spec, dict):
        raise ConfigError("mobility", "expected an object")
    kind = spec.get("kind")
    try:
        M = float(spec.get("M", 1.0))
        if kind == "linear":
            return Linear(M)
        if kind == "logistic":
            return Logistic(M)
        if kind == "table":
            if "rho" not in spec or "m" not in spec:
                raise ConfigError("mobility.rho", "table mobility needs 'rho' and 'm'")
            return TableMobility(spec["rho"], spec["m"], M)
    except DomainError as exc:
        raise ConfigError("mobility", str(exc)) from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("mobility.M", str(exc)) from exc
    raise ConfigError("mobility.kind", f"unknown mobility kind {kind!r}")
