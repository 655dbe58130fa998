"""Probability measures on the line, stored through their quantile functions.

Distances between measures are computed in quantile space: on the line the
p-Wasserstein distance is the L^p(0,1) distance between quantile functions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ConfigError, DomainError

DEFAULT_QUAD = 4096
MASS_TOL = 1e-12


class Measure1D:
    """Base class. ``quantile`` is right-continuous and nondecreasing on (0, 1)."""

    atomic = False

    def quantile(self, z):
        raise NotImplementedError

    def cdf(self, x):
        """mu(-inf, x]."""
        raise NotImplementedError

    def shift(self, c: float) -> "Measure1D":
        raise NotImplementedError

    def reflect(self) -> "Measure1D":
        """Image measure under x -> -x."""
        raise NotImplementedError

    def moment(self, p: float, quad_points: int = DEFAULT_QUAD) -> float:
        z = _midpoints(quad_points)
        return float(np.mean(np.abs(self.quantile(z)) ** p))


def _midpoints(n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    return lo + (hi - lo) * (np.arange(n) + 0.5) / n


@dataclass(frozen=True)
class Uniform(Measure1D):
    a: float
    b: float

    def __post_init__(self):
        if not self.b > self.a:
            raise DomainError("Uniform needs a < b")

    def quantile(self, z):
        return self.a + (self.b - self.a) * np.asarray(z, dtype=float)

    def cdf(self, x):
        return np.clip((np.asarray(x, dtype=float) - self.a) / (self.b - self.a), 0.0, 1.0)

    def density(self, x):
        x = np.asarray(x, dtype=float)
        return np.where((x >= self.a) & (x <= self.b), 1.0 / (self.b - self.a), 0.0)

    def moment(self, p, quad_points=DEFAULT_QUAD):
        if self.a >= 0 or self.b <= 0:
            lo, hi = sorted((abs(self.a), abs(self.b)))
            return (hi ** (p + 1) - lo ** (p + 1)) / ((p + 1) * (self.b - self.a))
        return (abs(self.a) ** (p + 1) + self.b ** (p + 1)) / ((p + 1) * (self.b - self.a))

    def shift(self, c):
        return Uniform(self.a + c, self.b + c)

    def reflect(self):
        return Uniform(-self.b, -self.a)


@dataclass(frozen=True)
class Gaussian(Measure1D):
    """Normal law, optionally truncated to [lo, hi]."""

    mean: float = 0.0
    sd: float = 1.0
    lo: float = -np.inf
    hi: float = np.inf

    def __post_init__(self):
        if not self.sd > 0 or not self.hi > self.lo:
            raise DomainError("Gaussian needs sd > 0 and lo < hi")

    def _dist(self):
        a = (self.lo - self.mean) / self.sd
        b = (self.hi - self.mean) / self.sd
        return stats.truncnorm(a, b, loc=self.mean, scale=self.sd)

    def quantile(self, z):
        return self._dist().ppf(np.asarray(z, dtype=float))

    def cdf(self, x):
        return self._dist().cdf(np.asarray(x, dtype=float))

    def density(self, x):
        return self._dist().pdf(np.asarray(x, dtype=float))

    def shift(self, c):
        return Gaussian(self.mean + c, self.sd, self.lo + c, self.hi + c)

    def reflect(self):
        return Gaussian(-self.mean, self.sd, -self.hi, -self.lo)


class Empirical(Measure1D):
    """K equal atoms; ``values[k]`` is the quantile at z_k = (k + 1/2)/K."""

    atomic = True

    def __init__(self, values):
        values = np.sort(np.asarray(values, dtype=float).ravel())
        if values.size == 0:
            raise DomainError("empirical measure needs at least one atom")
        self.values = values
        self.values.setflags(write=False)

    @property
    def size(self) -> int:
        return self.values.size

    def quantile(self, z):
        z = np.asarray(z, dtype=float)
        k = np.floor(z * self.size).astype(int)
        return self.values[np.clip(k, 0, self.size - 1)]

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.searchsorted(self.values, x, side="right") / self.size

    def moment(self, p, quad_points=DEFAULT_QUAD):
        return float(np.mean(np.abs(self.values) ** p))

    def shift(self, c):
        return Empirical(self.values + c)

    def reflect(self):
        return Empirical(-self.values)

    def __eq__(self, other):
        return isinstance(other, Empirical) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())

    def __repr__(self):
        return f"Empirical(K={self.size})"


class PiecewiseConstant(Measure1D):
    """Density ``heights[k]`` on [breaks[k], breaks[k+1]]."""

    def __init__(self, breaks, heights):
        breaks = np.asarray(breaks, dtype=float)
        heights = np.asarray(heights, dtype=float)
        if breaks.ndim != 1 or heights.shape != (breaks.size - 1,) or heights.size == 0:
            raise DomainError("need len(breaks) == len(heights) + 1 >= 2")
        if np.any(np.diff(breaks) <= 0):
            raise DomainError("breaks must be strictly increasing")
        if np.any(heights < 0):
            raise DomainError("heights must be nonnegative")
        masses = heights * np.diff(breaks)
        total = float(masses.sum())
        if abs(total - 1.0) > MASS_TOL * max(1, heights.size):
            raise DomainError(f"total mass {total!r} differs from 1")
        self.breaks = breaks
        self.heights = heights
        self._cum = np.concatenate([[0.0], np.cumsum(masses)])
        for arr in (self.breaks, self.heights, self._cum):
            arr.setflags(write=False)

    @property
    def cell_masses(self) -> np.ndarray:
        return np.diff(self._cum)

    @property
    def total_mass(self) -> float:
        return float(self._cum[-1])

    def quantile(self, z):
        z = np.asarray(z, dtype=float)
        # zero-mass cells have equal cumulative endpoints and are skipped
        k = np.searchsorted(self._cum, z, side="right") - 1
        k = np.clip(k, 0, self.heights.size - 1)
        h = self.heights[k]
        with np.errstate(divide="ignore", invalid="ignore"):
            x = self.breaks[k] + np.where(h > 0, (z - self._cum[k]) / h, 0.0)
        return np.minimum(x, self.breaks[k + 1])

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.interp(x, self.breaks, self._cum, left=0.0, right=self._cum[-1])

    def density(self, x):
        x = np.asarray(x, dtype=float)
        k = np.searchsorted(self.breaks, x, side="right") - 1
        inside = (k >= 0) & (k < self.heights.size)
        return np.where(inside, self.heights[np.clip(k, 0, self.heights.size - 1)], 0.0)

    def moment(self, p, quad_points=DEFAULT_QUAD):
        # exact cellwise integral of |x|^p
        a, b, h = self.breaks[:-1], self.breaks[1:], self.heights
        prim = lambda t: np.sign(t) * np.abs(t) ** (p + 1) / (p + 1)  # noqa: E731
        return float(np.sum(h * (prim(b) - prim(a))))

    def shift(self, c):
        return PiecewiseConstant(self.breaks + c, self.heights)

    def reflect(self):
        return PiecewiseConstant(-self.breaks[::-1], self.heights[::-1])

    def __repr__(self):
        return f"PiecewiseConstant(cells={self.heights.size})"


@dataclass(frozen=True)
class TailReport:
    eps: float
    interval: tuple
    tail_p_moment: float


def quantile_at(mu: Measure1D, z: float) -> float:
    if not 0.0 < z < 1.0:
        raise DomainError(f"quantile level {z} outside (0, 1)")
    return float(mu.quantile(np.array([z]))[0])


def _atomic_wasserstein_p(mu: Empirical, nu: Empirical, p: float) -> float:
    # both quantiles are step functions; integrate exactly on the merged grid
    edges = np.union1d(np.arange(mu.size + 1) / mu.size, np.arange(nu.size + 1) / nu.size)
    widths = np.diff(edges)
    mids = 0.5 * (edges[1:] + edges[:-1])
    diff = np.abs(mu.quantile(mids) - nu.quantile(mids))
    return float(np.sum(widths * diff ** p)) ** (1.0 / p)


def wasserstein_p(mu: Measure1D, nu: Measure1D, p: float = 2.0,
                  quad_points: int = DEFAULT_QUAD) -> float:
    """W_p as the L^p(0,1) norm of the quantile difference.

    Midpoint rule in general; exact when both measures are atomic.
    """
    if p < 1:
        raise DomainError(f"p must be >= 1, got {p}")
    if quad_points < 1:
        raise DomainError("quad_points must be positive")
    if isinstance(mu, Empirical) and isinstance(nu, Empirical):
        return _atomic_wasserstein_p(mu, nu, p)
    z = _midpoints(quad_points)
    diff = np.abs(mu.quantile(z) - nu.quantile(z))
    return float(np.mean(diff ** p)) ** (1.0 / p)


def _require_atomless(mu, eps):
    if mu.atomic:
        raise DomainError("operation requires an atomless measure")
    if not 0.0 < eps < 0.5:
        raise DomainError(f"eps must lie in (0, 1/2), got {eps}")


def central_interval(mu: Measure1D, eps: float) -> tuple:
    return (quantile_at(mu, eps), quantile_at(mu, 1.0 - eps))


def compactify(mu: Measure1D, eps: float) -> Measure1D:
    """Restrict mu to [X(eps), X(1-eps)] and renormalise by 1/(1-2 eps)."""
    _require_atomless(mu, eps)
    lo, hi = central_interval(mu, eps)
    if isinstance(mu, Uniform):
        return Uniform(lo, hi)
    if isinstance(mu, Gaussian):
        return Gaussian(mu.mean, mu.sd, lo, hi)
    if isinstance(mu, PiecewiseConstant):
        inner = mu.breaks[(mu.breaks > lo) & (mu.breaks < hi)]
        breaks = np.concatenate([[lo], inner, [hi]])
        mids = 0.5 * (breaks[1:] + breaks[:-1])
        heights = mu.density(mids) / (1.0 - 2.0 * eps)
        # absorb round-off in the interval endpoints into the mass
        heights = heights / np.sum(heights * np.diff(breaks))
        return PiecewiseConstant(breaks, heights)
    raise DomainError(f"compactify not available for {type(mu).__name__}")


def tail_moment(mu: Measure1D, eps: float, p: float, quad_points: int = DEFAULT_QUAD,
                center: float = 0.0) -> TailReport:
    """Mass-weighted |x - center|^p over the complement of the central interval."""
    _require_atomless(mu, eps)
    left = _midpoints(quad_points, 0.0, eps)
    right = _midpoints(quad_points, 1.0 - eps, 1.0)
    vals = np.abs(np.concatenate([mu.quantile(left), mu.quantile(right)]) - center) ** p
    tail = float(np.sum(vals) * eps / quad_points)
    return TailReport(eps, central_interval(mu, eps), tail)


def compactification_error_check(mu: Measure1D, eps: float, p: float, q: float,
                                 quad_points: int = DEFAULT_QUAD) -> bool:
    """diam(I)^(p-q) W_q(mu, C_eps mu)^q <= C * tail of |x - median|^p.

    C = 1 for q = p and 2^p otherwise.
    """
    if q > p:
        raise DomainError("need q <= p")
    lo, hi = central_interval(mu, eps)
    median = quantile_at(mu, 0.5)
    lhs = (hi - lo) ** (p - q) * wasserstein_p(mu, compactify(mu, eps), q, quad_points) ** q
    const = 1.0 if q == p else 2.0 ** p
    rhs = const * tail_moment(mu, eps, p, quad_points, center=median).tail_p_moment
    return bool(lhs <= rhs * (1 + 1e-12) + 1e-15)


def measure_from_spec(spec: dict, where: str = "measure") -> Measure1D:
    if not isinstance(spec, dict):
        raise ConfigError(where, "expected an object")
    kind = spec.get("kind")
    try:
        if kind == "uniform":
            return Uniform(float(spec["a"]), float(spec["b"]))
        if kind == "pcd":
            return PiecewiseConstant(spec["breaks"], spec["heights"])
        if kind == "quantiles":
            return Empirical(spec["values"])
        if kind == "gaussian":
            return Gaussian(float(spec.get("mean", 0.0)), float(spec.get("sd", 1.0)),
                            float(spec.get("lo", -np.inf)), float(spec.get("hi", np.inf)))
    except KeyError as exc:
        raise ConfigError(f"{where}.{exc.args[0]}", "missing field") from exc
    except (DomainError, TypeError, ValueError) as exc:
        raise ConfigError(where, str(exc)) from exc
    raise ConfigError(f"{where}.kind", f"unknown measure kind {kind!r}")
