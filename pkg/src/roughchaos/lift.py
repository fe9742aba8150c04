"""Level-2 iterated integrals of grid paths and the empirical rough set-up.

The cross-iterated integral of two grid paths is taken as the exact iterated
integral of their piecewise-linear interpolants.  On one grid step with
increments ``a`` and ``b`` this is ``a (x) b / 2``; coarser intervals are
assembled from unit steps with Chen's relation, which is exact for this lift.

Binary dump layout (little endian)::

    magic    4 bytes   b"RCSU"
    version  uint32    1
    n        uint64    number of paths
    K        uint64    grid steps
    m        uint64    driver dimension
    T        float64   horizon
    H        float64   Hurst index (0.5 for Brownian)
    flags    uint64    bit 0: cross blocks materialized
    seeds    n x 2 uint64   (seed, index) of every path
    paths    n x (K+1) x m float64
    self     n x K x m x m float64
    cross    n x n x K x m x m float64   (only if flag bit 0)

All arrays are row-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .drivers import GridPath, GridSpec

__all__ = [
    "Level2Blocks",
    "EmpiricalRoughSetup",
    "lift_cross",
    "chen_eval",
    "level2_all_pairs",
    "build_empirical_setup",
    "restrict_setup",
    "chen_residual",
    "ibp_residual",
    "dump_setup",
    "load_setup",
]

_MAGIC = b"RCSU"
_VERSION = 1
_HEADER = struct.Struct("<4sIQQQddQ")


@dataclass(frozen=True, eq=False)
class Level2Blocks:
    """Unit-step iterated integrals for the ordered pair ``(i, j)``.

    ``blocks[k]`` is the ``m x m`` matrix of the iterated integral of path
    ``j`` against the increments of path ``i`` over ``[t_k, t_{k+1}]``.
    """

    spec: GridSpec
    pair: tuple
    blocks: np.ndarray

    def __post_init__(self):
        blocks = np.asarray(self.blocks, dtype=float)
        m = self.spec.dim
        if blocks.shape != (self.spec.steps, m, m):
            raise ValueError(f"blocks shape {blocks.shape} does not match grid")
        if not np.all(np.isfinite(blocks)):
            raise ValueError("level-2 blocks must be finite")
        blocks.setflags(write=False)
        object.__setattr__(self, "blocks", blocks)


def _rank_one(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 0.5 * a[:, :, None] * b[:, None, :]


def lift_cross(path_i: GridPath, path_j: GridPath, pair: tuple = (0, 1)) -> Level2Blocks:
    """Piecewise-linear iterated integral of ``path_j`` against ``path_i``."""
    if path_i.spec != path_j.spec:
        raise ValueError("paths live on different grids")
    return Level2Blocks(path_i.spec, tuple(pair), _rank_one(path_i.increments, path_j.increments))


def chen_eval(
    blocks: Level2Blocks | np.ndarray,
    increments_i: np.ndarray,
    increments_j: np.ndarray,
    k_from: int,
    k_to: int,
) -> np.ndarray:
    """Iterated integral over ``[t_{k_from}, t_{k_to}]`` assembled by Chen's relation.

    Sums the unit blocks plus ``W^i_{t_from, t_k} (x) W^j_{t_k, t_{k+1}}``
    for every step ``k`` in the window.
    """
    arr = blocks.blocks if isinstance(blocks, Level2Blocks) else np.asarray(blocks)
    steps, m = arr.shape[0], arr.shape[1]
    if not (0 <= k_from <= k_to <= steps):
        raise IndexError(f"window [{k_from}, {k_to}] outside 0..{steps}")
    if k_from == k_to:
        return np.zeros((m, m))
    a = np.asarray(increments_i)[k_from:k_to]
    b = np.asarray(increments_j)[k_from:k_to]
    # running position of path i relative to t_from, taken before each step
    pos = np.cumsum(a, axis=0) - a
    return arr[k_from:k_to].sum(axis=0) + pos.T @ b


def level2_all_pairs(blocks, increments_i, increments_j, k_from=0, k_to=None) -> np.ndarray:
    """Iterated integrals for every grid pair of a window, shape ``(L, L, m, m)``.

    Entry ``[a, b]`` is the integral over ``[t_{k_from+a}, t_{k_from+b}]`` for
    ``a <= b`` and zero below the diagonal.
    """
    arr = blocks.blocks if isinstance(blocks, Level2Blocks) else np.asarray(blocks)
    if k_to is None:
        k_to = arr.shape[0]
    a = np.asarray(increments_i)[k_from:k_to]
    b = np.asarray(increments_j)[k_from:k_to]
    m = arr.shape[1]
    length = k_to - k_from + 1
    x = np.zeros((length, m))
    y = np.zeros((length, m))
    x[1:] = np.cumsum(a, axis=0)
    y[1:] = np.cumsum(b, axis=0)
    s = np.zeros((length, m, m))
    pos = x[:-1]
    s[1:] = np.cumsum(arr[k_from:k_to] + pos[:, :, None] * b[:, None, :], axis=0)
    out = s[None, :, :, :] - s[:, None, :, :]
    out -= x[:, None, :, None] * (y[None, :, None, :] - y[:, None, None, :])
    mask = np.tril(np.ones((length, length), dtype=bool), k=-1)
    out[mask] = 0.0
    return out


def _positions(increments, k_from, k_to):
    inc = np.asarray(increments)[k_from:k_to]
    out = np.zeros((k_to - k_from + 1, inc.shape[1]))
    out[1:] = np.cumsum(inc, axis=0)
    return out


def chen_residual(blocks, increments_i, increments_j, k_from=0, k_to=None) -> float:
    """Largest relative defect of Chen's relation over all grid triples of a window.

    Checks ``WW_{a,c} = WW_{a,b} + WW_{b,c} + W^i_{a,b} (x) W^j_{b,c}`` for
    ``a <= b <= c`` on the all-pairs table, and the table's full-window entry
    against the direct sum of :func:`chen_eval`.
    """
    arr = blocks.blocks if isinstance(blocks, Level2Blocks) else np.asarray(blocks)
    if k_to is None:
        k_to = arr.shape[0]
    table = level2_all_pairs(arr, increments_i, increments_j, k_from, k_to)
    x = _positions(increments_i, k_from, k_to)
    y = _positions(increments_j, k_from, k_to)
    length = table.shape[0]
    worst, scale = 0.0, 0.0
    for b in range(length):
        left = table[: b + 1, b]  # [a, b]
        right = table[b, b:]  # [b, c]
        cross = (x[b] - x[: b + 1])[:, None, :, None] * (y[b:] - y[b])[None, :, None, :]
        lhs = table[: b + 1, b:]
        rhs = left[:, None] + right[None, :] + cross
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
        scale = max(scale, float(np.max(np.abs(lhs))), float(np.max(np.abs(cross))))
    direct = chen_eval(arr, increments_i, increments_j, k_from, k_to)
    worst = max(worst, float(np.max(np.abs(direct - table[0, -1]))))
    return worst / scale if scale > 0 else worst


def ibp_residual(blocks_ij, blocks_ji, increments_i, increments_j, k_from=0, k_to=None) -> float:
    """Largest relative defect of ``WW^{ij} + (WW^{ji})^T = W^i (x) W^j`` over all windows."""
    a = blocks_ij.blocks if isinstance(blocks_ij, Level2Blocks) else np.asarray(blocks_ij)
    b = blocks_ji.blocks if isinstance(blocks_ji, Level2Blocks) else np.asarray(blocks_ji)
    if k_to is None:
        k_to = a.shape[0]
    t_ij = level2_all_pairs(a, increments_i, increments_j, k_from, k_to)
    t_ji = level2_all_pairs(b, increments_j, increments_i, k_from, k_to)
    x = _positions(increments_i, k_from, k_to)
    y = _positions(increments_j, k_from, k_to)
    dx = x[None, :, :] - x[:, None, :]
    dy = y[None, :, :] - y[:, None, :]
    outer = np.triu(np.ones(t_ij.shape[:2]))[:, :, None, None] * dx[..., :, None] * dy[..., None, :]
    defect = t_ij + np.swapaxes(t_ji, -1, -2) - outer
    scale = max(float(np.max(np.abs(t_ij))), float(np.max(np.abs(outer))))
    worst = float(np.max(np.abs(defect)))
    return worst / scale if scale > 0 else worst


@dataclass(frozen=True, eq=False)
class EmpiricalRoughSetup:
    """``n`` grid paths with their self lifts and cross lifts.

    Cross blocks are computed on demand unless ``cross_blocks`` holds the
    materialized ``(n, n, K, m, m)`` array.
    """

    paths: tuple
    self_blocks: tuple
    cross_blocks: np.ndarray | None = field(default=None)

    @property
    def n(self) -> int:
        return len(self.paths)

    @property
    def spec(self) -> GridSpec:
        return self.paths[0].spec

    @property
    def increments(self) -> np.ndarray:
        """Stacked increments, shape ``(n, K, m)``."""
        cached = self.__dict__.get("_increments")
        if cached is None:
            cached = np.stack([p.increments for p in self.paths])
            cached.setflags(write=False)
            object.__setattr__(self, "_increments", cached)
        return cached

    @property
    def self_array(self) -> np.ndarray:
        """Stacked self blocks, shape ``(n, K, m, m)``."""
        cached = self.__dict__.get("_self_array")
        if cached is None:
            cached = np.stack([b.blocks for b in self.self_blocks])
            cached.setflags(write=False)
            object.__setattr__(self, "_self_array", cached)
        return cached

    @property
    def materialized(self) -> bool:
        return self.cross_blocks is not None

    def cross(self, i: int, j: int) -> Level2Blocks:
        if i == j:
            return self.self_blocks[i]
        if self.cross_blocks is not None:
            return Level2Blocks(self.spec, (i, j), self.cross_blocks[i, j])
        return lift_cross(self.paths[i], self.paths[j], (i, j))

    def chen(self, i: int, j: int, k_from: int, k_to: int) -> np.ndarray:
        inc = self.increments
        return chen_eval(self.cross(i, j), inc[i], inc[j], k_from, k_to)


def build_empirical_setup(paths, materialize_cross: bool = False) -> EmpiricalRoughSetup:
    """Assemble the empirical rough set-up over ``paths``."""
    paths = tuple(paths)
    if not paths:
        raise ValueError("need at least one path")
    spec = paths[0].spec
    if any(p.spec != spec for p in paths):
        raise ValueError("paths live on different grids")
    self_blocks = tuple(lift_cross(p, p, (i, i)) for i, p in enumerate(paths))
    cross = None
    if materialize_cross:
        inc = np.stack([p.increments for p in paths])
        cross = 0.5 * inc[:, None, :, :, None] * inc[None, :, :, None, :]
        cross.setflags(write=False)
    return EmpiricalRoughSetup(paths, self_blocks, cross)


def restrict_setup(setup: EmpiricalRoughSetup, factor: int) -> EmpiricalRoughSetup:
    """The same rough set-up seen on every ``factor``-th grid point.

    Level-2 blocks of the coarse steps are composed from the fine blocks
    with Chen's relation, so they carry the fine-grid areas.  Cross blocks are
    always materialized.
    """
    spec = setup.spec
    if factor < 1 or spec.steps % factor:
        raise ValueError(f"{factor} does not divide {spec.steps} steps")
    coarse = GridSpec(spec.horizon, spec.steps // factor, spec.dim)
    n, m = setup.n, spec.dim
    inc = setup.increments.reshape(n, coarse.steps, factor, m)
    # position of each fine step relative to the start of its coarse step
    pos = np.cumsum(inc, axis=2) - inc
    paths = tuple(GridPath(coarse, p.values[::factor], p.seed_tag) for p in setup.paths)
    if setup.materialized:
        fine = setup.cross_blocks.reshape(n, n, coarse.steps, factor, m, m)
    else:
        fine = 0.5 * inc[:, None, :, :, :, None] * inc[None, :, :, :, None, :]
    cross = fine.sum(axis=3) + np.einsum("icfa,jcfb->ijcab", pos, inc)
    self_blocks = tuple(Level2Blocks(coarse, (i, i), cross[i, i]) for i in range(n))
    cross.setflags(write=False)
    return EmpiricalRoughSetup(paths, self_blocks, cross)


def dump_setup(setup: EmpiricalRoughSetup, path, hurst: float = 0.5) -> None:
    spec = setup.spec
    flags = 1 if setup.materialized else 0
    seeds = np.array(
        [p.seed_tag if len(p.seed_tag) == 2 else (0, 0) for p in setup.paths], dtype="<u8"
    )
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, setup.n, spec.steps, spec.dim,
                              spec.horizon, hurst, flags))
        fh.write(seeds.tobytes(order="C"))
        values = np.stack([p.values for p in setup.paths]).astype("<f8")
        fh.write(values.tobytes(order="C"))
        fh.write(setup.self_array.astype("<f8").tobytes(order="C"))
        if flags & 1:
            fh.write(np.asarray(setup.cross_blocks, dtype="<f8").tobytes(order="C"))


def load_setup(path) -> tuple[EmpiricalRoughSetup, float]:
    """Read a dump written by :func:`dump_setup`; returns ``(setup, hurst)``."""
    raw = Path(path).read_bytes()
    magic, version, n, steps, m, horizon, hurst, flags = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError("not a rough set-up dump")
    offset = _HEADER.size
    spec = GridSpec(horizon, steps, m)

    def take(count, dtype, shape):
        nonlocal offset
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape)
        offset += arr.nbytes
        return arr

    seeds = take(n * 2, "<u8", (n, 2))
    values = take(n * (steps + 1) * m, "<f8", (n, steps + 1, m))
    selfs = take(n * steps * m * m, "<f8", (n, steps, m, m))
    cross = None
    if flags & 1:
        cross = take(n * n * steps * m * m, "<f8", (n, n, steps, m, m)).astype(float)
        cross.setflags(write=False)
    if offset != len(raw):
        raise ValueError("trailing bytes in set-up dump")
    paths = tuple(
        GridPath(spec, values[i], (int(seeds[i, 0]), int(seeds[i, 1]))) for i in range(n)
    )
    self_blocks = tuple(Level2Blocks(spec, (i, i), selfs[i]) for i in range(n))
    return EmpiricalRoughSetup(paths, self_blocks, cross), hurst
