"""Ordered particle configurations with a minimal gap, and their embeddings.

A configuration x_0 < ... < x_N lives in the cone K_N when every gap is at
least 1/(N M); the reconstructed density 1/(N gap) then never exceeds M.
"""
from __future__ import annotations

from enum import Enum
from functools import lru_cache

import numpy as np

from .errors import ConeViolation, DomainError
from .measures import Empirical, Measure1D, PiecewiseConstant
from .mobility import Mobility

CONE_RTOL = 1e-14
ARGMAX_DELTA = 1e-6
ARGMAX_GRID = 1001


class ParticleConfig:
    """N+1 particle positions with the maximal density M of the cone."""

    __slots__ = ("x", "max_density")

    def __init__(self, x, max_density: float, validate: bool = True):
        x = np.array(x, dtype=float).ravel()
        if x.size < 2:
            raise DomainError("a configuration needs at least two particles")
        if not max_density > 0:
            raise DomainError("max density must be positive")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "max_density", float(max_density))
        if validate:
            check_cone(x, max_density)

    def __setattr__(self, name, value):
        raise AttributeError("ParticleConfig is immutable")

    @property
    def n(self) -> int:
        return self.x.size - 1

    @property
    def gaps(self) -> np.ndarray:
        return np.diff(self.x)

    @property
    def min_gap(self) -> float:
        return 1.0 / (self.n * self.max_density)

    def in_cone(self) -> bool:
        return cone_slack(self.x, self.max_density) >= 0

    def shifted(self, c: float) -> "ParticleConfig":
        return ParticleConfig(self.x + c, self.max_density)

    def to_list(self) -> list:
        return self.x.tolist()

    def __eq__(self, other):
        return (isinstance(other, ParticleConfig) and self.max_density == other.max_density
                and np.array_equal(self.x, other.x))

    def __hash__(self):
        return hash((self.x.tobytes(), self.max_density))

    def __repr__(self):
        return f"ParticleConfig(N={self.n}, M={self.max_density})"


def cone_slack(x, max_density: float) -> float:
    """Smallest gap excess over 1/(NM), with the floating-point allowance added."""
    x = np.asarray(x, dtype=float)
    n = x.size - 1
    scale = max(1.0, float(np.max(np.abs(x))))
    return float(np.min(np.diff(x)) - 1.0 / (n * max_density) + CONE_RTOL * scale)


def check_cone(x, max_density: float) -> None:
    slack = cone_slack(x, max_density)
    if not slack >= 0:
        raise ConeViolation(f"gap below 1/(NM) by {-slack:.3e}")


class RhoStarRule(str, Enum):
    """How the density seen by the last particle is chosen."""

    CONST_ARGMAX_THETA = "const_argmax_theta"
    LOOK_BACK = "look_back"


@lru_cache(maxsize=64)
def argmax_theta(mobility: Mobility, delta: float = ARGMAX_DELTA, grid: int = ARGMAX_GRID) -> float:
    """Smallest grid maximiser of theta on [0, (1-delta) M]."""
    rho = np.linspace(0.0, (1.0 - delta) * mobility.max_density, grid)
    th = mobility.theta(rho)
    return float(rho[np.argmax(th >= th.max() - 1e-12)])


def interior_densities(x) -> np.ndarray:
    """R_i = 1/(N (x_{i+1} - x_i)) for i < N; works on stacked configurations."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1] - 1
    return 1.0 / (n * np.diff(x, axis=-1))


def leader_density(rule: RhoStarRule, r_interior, mobility: Mobility | None):
    r_interior = np.asarray(r_interior, dtype=float)
    if RhoStarRule(rule) is RhoStarRule.LOOK_BACK:
        return r_interior[..., -1]
    star = 0.0 if mobility is None else argmax_theta(mobility)
    return np.full(r_interior.shape[:-1], star)


def reconstruct_density(cfg: ParticleConfig, rule: RhoStarRule = RhoStarRule.CONST_ARGMAX_THETA,
                        mobility: Mobility | None = None) -> np.ndarray:
    """Densities R_0..R_N; the last entry follows ``rule``.

    Without a mobility the constant rule uses theta = const, whose smallest
    maximiser is 0.
    """
    check_cone(cfg.x, cfg.max_density)
    r = interior_densities(cfg.x)
    return np.append(r, leader_density(rule, r, mobility))


def embed_piecewise(cfg: ParticleConfig) -> PiecewiseConstant:
    """Density R_i on [x_i, x_{i+1}]; each cell carries mass 1/N."""
    check_cone(cfg.x, cfg.max_density)
    return PiecewiseConstant(cfg.x, interior_densities(cfg.x))


def embed_empirical(cfg: ParticleConfig) -> Empirical:
    """N+1 equal atoms at the particle positions."""
    check_cone(cfg.x, cfg.max_density)
    return Empirical(cfg.x)


def sample_from_quantile(mu: Measure1D, n: int, max_density, endpoints: str = "clip",
                         validate: bool = True) -> ParticleConfig:
    """x_i = X_mu(i/n) for 0 < i < n.

    ``endpoints="clip"`` evaluates the end particles at z = 1/(2n) and
    1 - 1/(2n), which keeps them finite for unbounded support. ``"exact"``
    uses the limits X(0+) and X(1-) and needs compact support.
    ``max_density`` may be a number or a Mobility.
    """
    if mu.atomic:
        raise DomainError("sampling requires an atomless measure")
    if n < 1:
        raise DomainError("n must be positive")
    M = max_density.max_density if isinstance(max_density, Mobility) else float(max_density)
    z = np.arange(n + 1) / n
    if endpoints == "clip":
        zeta = 1.0 / (2 * n)
        z[0], z[-1] = zeta, 1.0 - zeta
    elif endpoints != "exact":
        raise DomainError(f"unknown endpoint mode {endpoints!r}")
    x = np.asarray(mu.quantile(z), dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("quantile endpoints are infinite; use endpoints='clip'")
    return ParticleConfig(x, M, validate=validate)


def _abs_power_integral(u_a, u_b, width, p):
    """Exact integral of |u|^p over an interval where u is affine from u_a to u_b."""
    slope = (u_b - u_a) / np.where(width > 0, width, 1.0)
    prim = lambda u: np.sign(u) * np.abs(u) ** (p + 1) / (p + 1)  # noqa: E731
    flat = np.abs(slope) < 1e-300
    with np.errstate(divide="ignore", invalid="ignore"):
        sloped = (prim(u_b) - prim(u_a)) / slope
    return np.where(flat, np.abs(u_a) ** p * width, sloped)


def check_embedding_consistency(cfg: ParticleConfig, p: float = 1.0) -> float:
    """W_p between the empirical and piecewise-constant images, computed exactly.

    Both quantile functions are piecewise affine on the merged grid of
    breakpoints {k/(N+1)} and {i/N}, so each cell integrates in closed form.
    """
    check_cone(cfg.x, cfg.max_density)
    n = cfg.n
    edges = np.union1d(np.arange(n + 2) / (n + 1), np.arange(n + 1) / n)
    a, b = edges[:-1], edges[1:]
    mid = 0.5 * (a + b)
    atom = cfg.x[np.minimum(np.floor(mid * (n + 1)).astype(int), n)]
    cell = np.minimum(np.floor(mid * n).astype(int), n - 1)
    gap = np.diff(cfg.x)[cell]

    def pc(z):
        return cfg.x[cell] + (z - cell / n) * n * gap

    total = _abs_power_integral(atom - pc(a), atom - pc(b), b - a, p)
    return float(np.sum(total)) ** (1.0 / p)
