"""Empirical measures, Wasserstein distances and log-log rate fits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, special, stats

__all__ = [
    "EmpiricalMeasure",
    "ReferenceLaw",
    "RateFit",
    "atoms_of",
    "wasserstein_1d",
    "wasserstein_assignment",
    "wasserstein",
    "w1_to_law",
    "w1_to_reference",
    "fit_rate",
    "normal_law",
    "uniform_law",
]


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Uniform empirical measure on the rows of ``atoms`` (shape ``(n, d)``)."""

    atoms: np.ndarray

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        if atoms.ndim != 2 or atoms.shape[0] < 1:
            raise ValueError("an empirical measure needs at least one atom")
        if not np.all(np.isfinite(atoms)):
            raise ValueError("atoms must be finite")
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)

    @property
    def n(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def mean(self) -> np.ndarray:
        return self.atoms.mean(axis=0)


def atoms_of(mu) -> np.ndarray:
    """Atoms of an ``EmpiricalMeasure`` or of a raw ``(n, d)`` / ``(n,)`` array."""
    atoms = mu.atoms if isinstance(mu, EmpiricalMeasure) else np.asarray(mu, dtype=float)
    if atoms.ndim == 1:
        atoms = atoms[:, None]
    if atoms.shape[0] < 1:
        raise ValueError("empty measure")
    return atoms


def wasserstein_1d(a, b, r: float = 1.0) -> float:
    """d_r between two one-dimensional empirical measures.

    Uses the monotone (quantile) coupling, integrated exactly over the merged
    grid of quantile levels ``{i/n} U {j/m}``.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    x = atoms_of(a)
    y = atoms_of(b)
    if x.shape[1] != 1 or y.shape[1] != 1:
        raise ValueError("wasserstein_1d needs one-dimensional atoms")
    x = np.sort(x[:, 0])
    y = np.sort(y[:, 0])
    if x.size == y.size:
        return float(np.mean(np.abs(x - y) ** r) ** (1.0 / r))
    levels = np.union1d(np.arange(x.size + 1) / x.size, np.arange(y.size + 1) / y.size)
    widths = np.diff(levels)
    mids = 0.5 * (levels[:-1] + levels[1:])
    xi = np.minimum((mids * x.size).astype(int), x.size - 1)
    yi = np.minimum((mids * y.size).astype(int), y.size - 1)
    return float(np.sum(widths * np.abs(x[xi] - y[yi]) ** r) ** (1.0 / r))


def wasserstein_assignment(a, b, r: float = 1.0) -> float:
    """d_r between equal-size clouds by exact optimal assignment on ``|x - y|^r``."""
    if r < 1:
        raise ValueError("r must be >= 1")
    x = atoms_of(a)
    y = atoms_of(b)
    if x.shape != y.shape:
        raise ValueError(f"assignment needs equal shapes, got {x.shape} and {y.shape}")
    cost = np.sqrt(np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1)) ** r
    rows, cols = optimize.linear_sum_assignment(cost)
    return float(np.mean(cost[rows, cols]) ** (1.0 / r))


def wasserstein(a, b, r: float = 1.0) -> float:
    """d_r using the exact 1-D formula when possible, assignment otherwise."""
    x = atoms_of(a)
    if x.shape[1] == 1:
        return wasserstein_1d(a, b, r)
    return wasserstein_assignment(a, b, r)


@dataclass(frozen=True)
class ReferenceLaw:
    """One-dimensional law given by its CDF, quantile function and partial mean.

    ``partial_mean(lo, hi)`` returns ``int_lo^hi y dF(y)``.
    """

    name: str
    cdf: object
    quantile: object
    partial_mean: object
    sampler: object = None


def normal_law(loc: float = 0.0, scale: float = 1.0) -> ReferenceLaw:
    def partial_mean(lo, hi):
        zl = (np.asarray(lo) - loc) / scale
        zh = (np.asarray(hi) - loc) / scale
        mass = special.ndtr(zh) - special.ndtr(zl)
        return loc * mass + scale * (stats.norm.pdf(zl) - stats.norm.pdf(zh))

    return ReferenceLaw(
        f"normal({loc:g},{scale:g})",
        lambda x: special.ndtr((np.asarray(x) - loc) / scale),
        lambda u: loc + scale * special.ndtri(u),
        partial_mean,
        lambda rng, size: rng.normal(loc, scale, size),
    )


def uniform_law(lo: float = 0.0, hi: float = 1.0) -> ReferenceLaw:
    width = hi - lo

    def clip(x):
        return np.clip(np.asarray(x, dtype=float), lo, hi)

    return ReferenceLaw(
        f"uniform({lo:g},{hi:g})",
        lambda x: (clip(x) - lo) / width,
        lambda u: lo + width * np.asarray(u),
        lambda a, b: (clip(b) ** 2 - clip(a) ** 2) / (2 * width),
        lambda rng, size: rng.uniform(lo, hi, size),
    )


def w1_to_law(a, law: ReferenceLaw) -> float:
    """d_1 between a 1-D empirical measure and a continuous law.

    Integrates ``|Q_n(u) - Q(u)|`` exactly on each quantile cell
    ``[(i-1)/n, i/n]`` by splitting at ``F(x_(i))``.
    """
    x = atoms_of(a)
    if x.shape[1] != 1:
        raise ValueError("w1_to_law needs one-dimensional atoms")
    x = np.sort(x[:, 0])
    n = x.size
    u0 = np.arange(n) / n
    u1 = np.arange(1, n + 1) / n
    ustar = np.clip(law.cdf(x), u0, u1)
    q0, qs, q1 = law.quantile(u0), law.quantile(ustar), law.quantile(u1)
    below = x * (ustar - u0) - law.partial_mean(q0, qs)
    above = law.partial_mean(qs, q1) - x * (u1 - ustar)
    return float(np.sum(below + above))


def w1_to_reference(a, reference, max_chunks: int = 64) -> float:
    """d_1 between a cloud and a (larger) reference cloud.

    In one dimension the exact quantile coupling is used.  In higher
    dimension the reference is cut into disjoint chunks of the cloud's size
    and the equal-size assignment distances are averaged (at most
    ``max_chunks`` chunks).
    """
    x = atoms_of(a)
    ref = atoms_of(reference)
    if x.shape[1] == 1:
        return wasserstein_1d(x, ref, 1.0)
    n = x.shape[0]
    chunks = min(max_chunks, ref.shape[0] // n)
    if chunks < 1:
        raise ValueError("reference cloud smaller than the sample")
    return float(np.mean([wasserstein_assignment(x, ref[c * n:(c + 1) * n]) for c in range(chunks)]))


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    points: tuple

    def predict(self, n) -> np.ndarray:
        return np.exp(self.intercept + self.slope * np.log(np.asarray(n, dtype=float)))


def fit_rate(ns, errors, log_correction: bool = False) -> RateFit:
    """Least-squares slope of ``log error`` against ``log n`` (natural logs).

    With ``log_correction`` the errors are first divided by ``ln(1 + n)``.
    """
    ns = np.asarray(ns, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if ns.shape != errors.shape or ns.ndim != 1:
        raise ValueError("ns and errors must be matching 1-D sequences")
    if ns.size < 3:
        raise ValueError(f"a rate fit needs at least 3 points, got {ns.size}")
    if np.any(~np.isfinite(errors)) or np.any(errors <= 0):
        raise ValueError("errors must be finite and positive")
    if np.any(ns <= 0):
        raise ValueError("ns must be positive")
    if log_correction:
        errors = errors / np.log1p(ns)
    x = np.log(ns)
    y = np.log(errors)
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx == 0:
        raise ValueError("need at least two distinct n values")
    slope = np.sum((x - xm) * (y - ym)) / sxx
    intercept = ym - slope * xm
    ss_tot = np.sum((y - ym) ** 2)
    ss_res = np.sum((y - intercept - slope * x) ** 2)
    r2 = 1.0 if ss_tot == 0 else max(0.0, 1.0 - ss_res / ss_tot)
    return RateFit(float(slope), float(intercept), float(r2), tuple(zip(x.tolist(), y.tolist())))
