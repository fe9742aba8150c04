"""p-variation, Hölder norms, empirical controls and local accumulation.

All suprema over partitions and intervals are taken over grid points.  Two-index
functions are stored as dense upper-triangular ``(L, L)`` matrices indexed by
grid position inside a window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lift import EmpiricalRoughSetup, level2_all_pairs

__all__ = [
    "TwoIndexFn",
    "Control",
    "ControlledNorms",
    "ControlError",
    "pvar_matrix",
    "pvar_all_windows",
    "p_variation",
    "holder_norm",
    "increment_norms",
    "empirical_control",
    "EmpiricalControls",
    "level2_row_norms",
    "greedy_times",
    "local_accumulation",
    "controlled_norm_report",
]

# Relative slack when comparing a control with a threshold, absorbs grid-time rounding.
_RTOL = 1e-12


class ControlError(ValueError):
    """A two-index function violates the monotonicity required of a control."""


@dataclass(frozen=True, eq=False)
class TwoIndexFn:
    """Non-negative function of grid index pairs ``k_from <= k_to``."""

    values: np.ndarray
    tag: str = ""

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim != 2 or vals.shape[0] != vals.shape[1]:
            raise ValueError("two-index function must be a square matrix")
        vals = np.triu(vals)
        if not np.all(np.isfinite(vals)):
            raise ValueError("two-index function must be finite")
        if np.any(np.diag(vals) != 0.0):
            raise ValueError("two-index function must vanish on the diagonal")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_function(cls, fn, size: int, tag: str = "") -> "TwoIndexFn":
        vals = np.zeros((size, size))
        for a in range(size):
            for b in range(a + 1, size):
                vals[a, b] = fn(a, b)
        return cls(vals, tag)

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def __call__(self, k_from: int, k_to: int) -> float:
        if k_from > k_to:
            raise IndexError("k_from must not exceed k_to")
        return float(self.values[k_from, k_to])

    def __add__(self, other: "TwoIndexFn") -> "TwoIndexFn":
        return TwoIndexFn(self.values + other.values, f"{self.tag}+{other.tag}")

    def power(self, exponent: float) -> "TwoIndexFn":
        return TwoIndexFn(self.values**exponent, f"({self.tag})^{exponent:g}")

    def is_monotone(self, atol: float = 0.0) -> bool:
        """Non-decreasing under interval inclusion (rows up in t, columns down in s)."""
        v = self.values
        upper = np.triu(np.ones_like(v, dtype=bool))
        rows = np.diff(v, axis=1)[upper[:, 1:]]
        cols = np.diff(v, axis=0)[upper[1:, :]]
        scale = atol + _RTOL * max(1.0, float(np.max(np.abs(v))))
        return bool(np.all(rows >= -scale) and np.all(cols <= scale))

    def superadditivity_violations(self, triples=None, rtol: float = 1e-10) -> int:
        """Count grid triples ``r <= s <= t`` with ``w(r,t) < w(r,s) + w(s,t)``."""
        v = self.values
        if triples is None:
            count = 0
            for mid in range(self.size):
                lhs = v[: mid + 1, mid:]
                rhs = v[: mid + 1, mid, None] + v[None, mid, mid:]
                count += int(np.sum(lhs < rhs - rtol * np.maximum(1.0, np.abs(rhs))))
            return count
        triples = np.asarray(triples)
        lhs = v[triples[:, 0], triples[:, 2]]
        rhs = v[triples[:, 0], triples[:, 1]] + v[triples[:, 1], triples[:, 2]]
        return int(np.sum(lhs < rhs - rtol * np.maximum(1.0, np.abs(rhs))))


@dataclass(frozen=True, eq=False)
class Control:
    base: TwoIndexFn
    p: float
    q: float = 8.0

    def __post_init__(self):
        if not (2.0 <= self.p < 3.0):
            raise ValueError(f"p must lie in [2, 3), got {self.p}")
        if self.q < 8.0:
            raise ValueError(f"q must be at least 8, got {self.q}")

    def __call__(self, k_from: int, k_to: int) -> float:
        return self.base(k_from, k_to)


def pvar_matrix(dist: np.ndarray, p: float) -> float:
    """``sup_partition sum dist[t_{i-1}, t_i]^p`` over sub-partitions of the full window.

    Returns the p-th power of the p-variation.  ``dist`` is ``(L, L)``;
    only the upper triangle is read.
    """
    dist = np.asarray(dist, dtype=float)
    length = dist.shape[0]
    if length <= 1:
        return 0.0
    powered = dist**p
    best = np.zeros(length)
    for b in range(1, length):
        best[b] = np.max(best[:b] + powered[:b, b])
    return float(best[-1])


def pvar_all_windows(dist: np.ndarray, p: float) -> np.ndarray:
    """p-th power of the p-variation on every sub-window ``[a, b]``.

    Dynamic programming run for all window starts at once; O(L^3) work,
    O(L^2) memory.
    """
    dist = np.asarray(dist, dtype=float)
    length = dist.shape[0]
    powered = np.triu(dist**p, k=1)
    best = np.zeros((length, length))
    # best[s, b] = max over s <= a < b of best[s, a] + powered[a, b]
    lower = np.tril(np.ones((length, length), dtype=bool), k=-1)
    for b in range(1, length):
        cand = best[:b, :b] + powered[None, :b, b]
        cand[lower[:b, :b]] = -np.inf
        best[:b, b] = np.max(cand, axis=1)
    return best


def increment_norms(values: np.ndarray) -> np.ndarray:
    """Euclidean norms of all increments ``|x_b - x_a|`` of a path, shape ``(L, L)``."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    diff = values[None, :, :] - values[:, None, :]
    return np.triu(np.sqrt(np.sum(diff**2, axis=-1)), k=1)


def p_variation(values, p: float, window=None) -> float:
    """p-variation of a path given by its grid values (scalar or vector valued).

    ``window`` is an inclusive index pair ``(k_a, k_b)``; default is the whole path.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    values = np.asarray(values, dtype=float)
    if window is not None:
        k_a, k_b = window
        if k_b < k_a:
            return 0.0
        values = values[k_a : k_b + 1]
    if len(values) <= 1:
        return 0.0
    return pvar_matrix(increment_norms(values), p) ** (1.0 / p)


def holder_norm(path, alpha: float, window=None, times=None, level: int = 1,
                increments=None) -> float:
    """Grid Hölder semi-norm of level 1 or level 2.

    Level 1: ``max |x_t - x_s| / (t - s)^alpha``; ``path`` is a value array
    or a ``GridPath``.  Level 2: ``max |W_{s,t}| / (t - s)^(2 alpha)`` where
    ``path`` is a block array or ``Level2Blocks`` and ``increments`` holds the
    pair ``(increments_i, increments_j)``.
    """
    if not (0 < alpha <= 1):
        raise ValueError("alpha must lie in (0, 1]")
    spec = getattr(path, "spec", None)
    if times is None:
        if spec is None:
            raise ValueError("times are required for raw arrays")
        times = spec.times
    times = np.asarray(times, dtype=float)
    if level == 1:
        values = np.asarray(getattr(path, "values", path), dtype=float)
        k_a, k_b = window if window is not None else (0, len(values) - 1)
        norms = increment_norms(values[k_a : k_b + 1])
        exponent = alpha
    elif level == 2:
        if increments is None:
            raise ValueError("level 2 needs the pair of increments")
        blocks = np.asarray(getattr(path, "blocks", path), dtype=float)
        k_a, k_b = window if window is not None else (0, blocks.shape[0])
        w2 = level2_all_pairs(blocks, increments[0], increments[1], k_a, k_b)
        norms = np.sqrt(np.sum(w2**2, axis=(-2, -1)))
        exponent = 2.0 * alpha
    else:
        raise ValueError("level must be 1 or 2")
    t = times[k_a : k_b + 1]
    if len(t) <= 1:
        return 0.0
    gaps = t[None, :] - t[:, None]
    upper = np.triu(np.ones_like(gaps, dtype=bool), k=1)
    return float(np.max(norms[upper] / gaps[upper] ** exponent))


def level2_row_norms(setup: EmpiricalRoughSetup, i: int, k_a: int = 0, k_b: int | None = None) -> np.ndarray:
    """Frobenius norms of ``W^{i,j}`` on every window of ``[k_a, k_b]``, for all ``j``.

    Same all-pairs formula as :func:`level2_all_pairs`, batched over ``j``;
    shape ``(n, L, L)`` with zeros below the diagonal.
    """
    if k_b is None:
        k_b = setup.spec.steps
    inc = setup.increments[:, k_a:k_b]  # (n, S, m)
    a = inc[i]
    n, _, m = inc.shape
    length = k_b - k_a + 1
    x = np.zeros((length, m))
    x[1:] = np.cumsum(a, axis=0)
    y = np.zeros((n, length, m))
    y[:, 1:] = np.cumsum(inc, axis=1)
    if setup.materialized:
        blocks = np.array(setup.cross_blocks[i, :, k_a:k_b])
    else:
        blocks = 0.5 * a[None, :, :, None] * inc[:, :, None, :]
    blocks[i] = setup.self_array[i, k_a:k_b]
    s = np.zeros((n, length, m, m))
    s[:, 1:] = np.cumsum(blocks + x[None, :-1, :, None] * inc[:, :, None, :], axis=1)
    out = s[:, None, :] - s[:, :, None]
    out -= x[None, :, None, :, None] * (y[:, None, :, None, :] - y[:, :, None, None, :])
    norms = np.sqrt(np.sum(out**2, axis=(-2, -1)))
    return np.triu(norms)


def _power(x: np.ndarray, q: float) -> np.ndarray:
    # repeated squaring for integer exponents, much faster than a float pow
    if q != int(q) or q < 1:
        return x**q
    k = int(q)
    out, base = None, x
    while k:
        if k & 1:
            out = base if out is None else out * base
        k >>= 1
        if k:
            base = base * base
    return out


def _lq_mean(stack_q_sum: np.ndarray, count: int, q: float) -> np.ndarray:
    return (stack_q_sum / count) ** (1.0 / q)


class EmpiricalControls:
    """Variation functions and controls of the empirical rough set-up.

    Builds, for every particle ``i``, the matrix ``v_p^{i,n}(s, t)`` on all
    grid windows (sum of six p-variation terms taken with empirical
    ``l^q`` means over particle indices) and the control
    ``w^{i,n}(s,t) = v^{i,n}(s,t) + 1-var of the l^q mean of v^{., n} + (t - s)``.
    """

    def __init__(self, setup: EmpiricalRoughSetup, p: float, q: float = 8.0,
                 window=None, add_time: bool = True):
        if not (2.0 <= p < 3.0):
            raise ValueError(f"p must lie in [2, 3), got {p}")
        self.setup = setup
        self.p = float(p)
        self.q = float(q)
        steps = setup.spec.steps
        self.window = (0, steps) if window is None else tuple(window)
        self.add_time = add_time
        self._v = None
        self._envelope = None

    def _compute(self):
        setup, p, q = self.setup, self.p, self.q
        k_a, k_b = self.window
        n = setup.n
        inc = setup.increments
        values = np.stack([pth.values for pth in setup.paths])[:, k_a : k_b + 1]
        length = k_b - k_a + 1

        lvl1 = np.stack([increment_norms(values[j]) for j in range(n)])  # (n, L, L)

        self_norm = np.zeros((n, length, length))
        row_q = np.zeros((n, length, length))   # sum_j |W^{i,j}|^q
        col_q = np.zeros((n, length, length))   # sum_j |W^{j,i}|^q
        for i in range(n):
            norms = level2_row_norms(setup, i, k_a, k_b)  # (n, L, L), entry j is |W^{i,j}|
            self_norm[i] = norms[i]
            nq = _power(norms, q)
            row_q[i] = nq.sum(axis=0)
            col_q += nq
        all_q = row_q.sum(axis=0)

        shared = pvar_all_windows(_lq_mean(np.sum(_power(lvl1, q), axis=0), n, q), p)
        shared += pvar_all_windows(_lq_mean(all_q, n * n, q), p / 2)
        v = np.empty((n, length, length))
        for i in range(n):
            v[i] = (
                pvar_all_windows(lvl1[i], p)
                + shared
                + pvar_all_windows(self_norm[i], p / 2)
                + pvar_all_windows(_lq_mean(row_q[i], n, q), p / 2)
                + pvar_all_windows(_lq_mean(col_q[i], n, q), p / 2)
            )
        envelope = pvar_all_windows(_lq_mean(np.sum(_power(v, q), axis=0), n, q), 1.0)
        self._v = v
        self._envelope = envelope

    def v(self, i: int) -> TwoIndexFn:
        if self._v is None:
            self._compute()
        return TwoIndexFn(self._v[i], f"v[{i}]")

    def control(self, i: int) -> Control:
        if not (0 <= i < self.setup.n):
            raise IndexError(f"particle {i} out of range")
        if self._v is None:
            self._compute()
        w = self._v[i] + self._envelope
        if self.add_time:
            k_a, k_b = self.window
            t = self.setup.spec.times[k_a : k_b + 1]
            w = w + np.triu(t[None, :] - t[:, None])
        return Control(TwoIndexFn(w, f"w[{i}]"), self.p, self.q)


def empirical_control(setup: EmpiricalRoughSetup, i: int, p: float, q: float = 8.0) -> Control:
    """Control ``w^{i,n}`` of particle ``i`` on the whole grid."""
    return EmpiricalControls(setup, p, q).control(i)


def _as_matrix(varpi) -> np.ndarray:
    if isinstance(varpi, Control):
        varpi = varpi.base
    if isinstance(varpi, TwoIndexFn):
        return varpi.values
    return np.asarray(varpi, dtype=float)


def greedy_times(varpi, alpha: float, start: int, end: int, check: bool = True) -> list[int]:
    """Greedy grid times: each next time is the first grid point ``u`` with
    ``varpi(tau, u) >= alpha``; stops when no such point exists up to ``end``.
    """
    if alpha <= 0:
        raise ValueError("threshold must be positive")
    vals = _as_matrix(varpi)
    if not (0 <= start <= end < vals.shape[0]):
        raise IndexError("window outside the two-index function")
    if check and not TwoIndexFn(vals[start : end + 1, start : end + 1]).is_monotone():
        raise ControlError("two-index function is not monotone under interval inclusion")
    level = alpha * (1.0 - _RTOL)
    times = [start]
    tau = start
    while tau < end:
        row = vals[tau, tau + 1 : end + 1]
        hits = np.nonzero(row >= level)[0]
        if hits.size == 0:
            break
        tau = tau + 1 + int(hits[0])
        times.append(tau)
    return times


def local_accumulation(varpi, alpha: float, window, check: bool = True) -> int:
    """Number of greedy times after the start that land inside ``window``."""
    start, end = window
    return len(greedy_times(varpi, alpha, start, end, check=check)) - 1


@dataclass(frozen=True)
class ControlledNorms:
    path_norm: float
    derivative_norm: float
    remainder_norm: float
    infinite: bool = field(default=False)


def controlled_norm_report(trajectory, derivative, driver, control, p: float) -> ControlledNorms:
    """Controlled-path norms of a trajectory on the grid.

    ``trajectory`` is ``(L, d)``, ``derivative`` the Gubinelli derivative
    ``(L, d, m)``, ``driver`` the driver values ``(L, m)``.  The remainder is
    ``R_{s,t} = X_{s,t} - dX_s W_{s,t}``.  Ratios with a vanishing control
    and non-zero numerator set ``infinite``.
    """
    x = np.asarray(trajectory, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    dx = np.asarray(derivative, dtype=float)
    if dx.ndim == 1:
        dx = dx[:, None, None]
    w_path = np.asarray(getattr(driver, "values", driver), dtype=float)
    if w_path.ndim == 1:
        w_path = w_path[:, None]
    w = _as_matrix(control)
    length = x.shape[0]
    upper = np.triu(np.ones((length, length), dtype=bool), k=1)

    x_inc = x[None, :, :] - x[:, None, :]
    dx_inc = dx[None, :, :, :] - dx[:, None, :, :]
    w_inc = w_path[None, :, :] - w_path[:, None, :]
    remainder = x_inc - np.einsum("sdm,stm->std", dx, w_inc)

    x_num = np.sqrt(np.sum(x_inc**2, axis=-1))[upper]
    dx_num = np.sqrt(np.sum(dx_inc**2, axis=(-2, -1)))[upper]
    r_num = np.sqrt(np.sum(remainder**2, axis=-1))[upper]
    den = w[upper]

    infinite = False

    def ratio(num, power):
        nonlocal infinite
        scale = den ** (power / p)
        zero = scale == 0
        tiny = 1e-14 * max(1.0, float(np.max(num, initial=0.0)))
        if np.any(zero & (num > tiny)):
            infinite = True
        out = np.where(zero, 0.0, num / np.where(zero, 1.0, scale))
        return float(np.max(out, initial=0.0))

    return ControlledNorms(ratio(x_num, 1.0), ratio(dx_num, 1.0), ratio(r_num, 2.0), infinite)
