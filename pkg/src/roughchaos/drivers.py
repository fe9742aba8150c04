"""Gaussian driver sampling on uniform grids.

Brownian motion and fractional Brownian motion (Hurst index in (1/3, 1]) are
sampled exactly at grid points.  Every path is addressed by a pair
``(seed, index)`` which keys a Philox counter-based generator, so ensembles can
be generated in any order or in parallel and still be bit-identical.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

__all__ = [
    "GridSpec",
    "DriverKind",
    "GridPath",
    "CovarianceError",
    "generator_for",
    "sample_path",
    "sample_ensemble",
    "coarsen",
    "covariance_two_d_variation",
]

# Fixed regularization applied once when the covariance factorization fails.
_JITTER = 1e-12


class CovarianceError(ValueError):
    """Raised when the fBm covariance cannot be factorized even after regularization."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid ``t_k = k T / K`` on ``[0, T]`` for an ``m``-dimensional driver."""

    horizon: float
    steps: int
    dim: int = 1

    def __post_init__(self):
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim}")

    @property
    def mesh(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.mesh


@dataclass(frozen=True)
class DriverKind:
    """Either ``brownian`` or ``fbm`` with Hurst index ``hurst``."""

    name: str = "brownian"
    hurst: float = 0.5

    def __post_init__(self):
        if self.name not in ("brownian", "fbm"):
            raise ValueError(f"unknown driver kind {self.name!r}")
        if self.name == "brownian" and self.hurst != 0.5:
            raise ValueError("brownian driver has hurst = 1/2")
        if not (1.0 / 3.0 < self.hurst <= 1.0):
            raise ValueError(
                f"hurst must lie in (1/3, 1] for a level-2 lift, got {self.hurst}"
            )

    @classmethod
    def brownian(cls) -> "DriverKind":
        return cls("brownian", 0.5)

    @classmethod
    def fbm(cls, hurst: float) -> "DriverKind":
        return cls("fbm", float(hurst))

    def covariance(self, s, t):
        """R(s, t) = (s^2H + t^2H - |t - s|^2H) / 2, broadcasting over arrays."""
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        h2 = 2.0 * self.hurst
        return 0.5 * (s**h2 + t**h2 - np.abs(t - s) ** h2)


@dataclass(frozen=True, eq=False)
class GridPath:
    """One sampled driver trajectory, ``values`` has shape ``(K + 1, m)``."""

    spec: GridSpec
    values: np.ndarray
    seed_tag: tuple = field(default=())

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape != (self.spec.steps + 1, self.spec.dim):
            raise ValueError(
                f"values shape {values.shape} does not match grid "
                f"{(self.spec.steps + 1, self.spec.dim)}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("path values must be finite")
        if np.any(values[0] != 0.0):
            raise ValueError("driver paths start at the origin")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)


def generator_for(seed: int, index: int) -> np.random.Generator:
    """Philox generator keyed by ``(seed, index)``; both must fit in 64 bits."""
    seed = int(seed)
    index = int(index)
    if not (0 <= seed < 2**64 and 0 <= index < 2**64):
        raise ValueError("seed and index must be unsigned 64-bit integers")
    return np.random.Generator(np.random.Philox(key=seed | (index << 64)))


@functools.lru_cache(maxsize=32)
def _fbm_factor(horizon: float, steps: int, hurst: float) -> np.ndarray:
    times = np.arange(1, steps + 1) * (horizon / steps)
    cov = DriverKind.fbm(hurst).covariance(times[:, None], times[None, :])
    try:
        factor = linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        cov = cov + _JITTER * np.max(np.diag(cov)) * np.eye(steps)
        try:
            factor = linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError as exc:
            raise CovarianceError(
                f"fBm covariance not positive definite at K={steps}, H={hurst}"
            ) from exc
    factor.setflags(write=False)
    return factor


def sample_path(kind: DriverKind, spec: GridSpec, seed: int, index: int) -> GridPath:
    """Sample path number ``index`` of the stream ``seed``.

    Each of the ``m`` components is an independent centred Gaussian path.
    Brownian increments are i.i.d. N(0, h); fBm values are the lower
    Cholesky factor of R(t_k, t_l) applied to standard normals.
    """
    rng = generator_for(seed, index)
    z = rng.standard_normal((spec.steps, spec.dim))
    values = np.zeros((spec.steps + 1, spec.dim))
    if kind.name == "brownian":
        values[1:] = np.cumsum(z * np.sqrt(spec.mesh), axis=0)
    else:
        values[1:] = _fbm_factor(spec.horizon, spec.steps, kind.hurst) @ z
    return GridPath(spec, values, (int(seed), int(index)))


def sample_ensemble(kind: DriverKind, spec: GridSpec, seed: int, n: int) -> list[GridPath]:
    """``n`` i.i.d. paths; path ``i`` is ``sample_path(kind, spec, seed, i)``."""
    if n < 1:
        raise ValueError("ensemble size must be positive")
    return [sample_path(kind, spec, seed, i) for i in range(n)]


def coarsen(path: GridPath, factor: int) -> GridPath:
    """Restrict a path to every ``factor``-th grid point."""
    if path.spec.steps % factor:
        raise ValueError(f"{factor} does not divide {path.spec.steps} steps")
    spec = GridSpec(path.spec.horizon, path.spec.steps // factor, path.spec.dim)
    return GridPath(spec, path.values[::factor], path.seed_tag)


def _best_partner(cov, part, rho):
    """Optimal grid partition of the second axis for a fixed first-axis partition.

    Returns (value, partition) where value = max_Q sum_{I in part, J in Q} |R(I x J)|^rho.
    """
    length = cov.shape[0]
    starts = np.asarray(part[:-1])
    ends = np.asarray(part[1:])
    rows = cov[ends] - cov[starts]  # rows[I, x] = R(t_end, x) - R(t_start, x)
    cost = np.abs(rows[:, None, :] - rows[:, :, None]) ** rho  # [I, a, b]
    cost = cost.sum(axis=0)
    best = np.full(length, -np.inf)
    best[0] = 0.0
    prev = np.zeros(length, dtype=int)
    for b in range(1, length):
        cand = best[:b] + cost[:b, b]
        a = int(np.argmax(cand))
        best[b] = cand[a]
        prev[b] = a
    path = [length - 1]
    while path[-1] != 0:
        path.append(int(prev[path[-1]]))
    return best[-1], path[::-1]


def covariance_two_d_variation(
    kind: DriverKind,
    spec: GridSpec,
    k_from: int,
    k_to: int,
    rho: float,
    exact_limit: int = 13,
) -> float:
    """Grid-restricted 2-D rho-variation (its rho-th power) of the covariance on ``[t_from, t_to]^2``.

    The value is ``sup_{P, Q} sum |R(I x J)|^rho`` over pairs of grid
    sub-partitions, with ``R(I x J)`` the covariance of the increments over
    ``I`` and ``J``.  Windows with at most ``exact_limit`` points are solved
    exactly (enumerate P, dynamic programming over Q).  Longer windows use
    alternating maximization from several starting partitions, which yields
    a lower bound of the grid supremum.
    """
    if rho < 1:
        raise ValueError("rho must be >= 1")
    if not (0 <= k_from <= k_to <= spec.steps):
        raise ValueError("window out of range")
    if k_to == k_from:
        return 0.0
    times = spec.times[k_from : k_to + 1]
    cov = kind.covariance(times[:, None], times[None, :])
    length = len(times)
    if length <= exact_limit:
        inner = range(1, length - 1)
        best = 0.0
        for r in range(length - 1):
            for cut in itertools.combinations(inner, r):
                part = [0, *cut, length - 1]
                value, _ = _best_partner(cov, part, rho)
                best = max(best, value)
        return float(best)

    starts = [
        list(range(length)),
        [0, length - 1],
        list(range(0, length, 2)) + ([length - 1] if (length - 1) % 2 else []),
    ]
    best = 0.0
    for part in starts:
        value = -np.inf
        for _ in range(50):
            _, other = _best_partner(cov, part, rho)
            # covariance is symmetric, so the same routine optimizes either axis
            new_value, part = _best_partner(cov, other, rho)
            if new_value <= value * (1 + 1e-14):
                break
            value = new_value
        best = max(best, value)
    return float(best)
