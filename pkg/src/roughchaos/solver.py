"""Compensated Riemann-sum solver for the n-particle mean-field rough system.

One step of the compensated scheme for particle ``i`` reads::

    X^i += F(X^i, mu^n) W^i_{k,k+1}
         + dxF(X^i, mu^n) F(X^i, mu^n) WW^i_{k,k+1}
         + (1/n) sum_j D_mu F(X^i, mu^n)(X^j) F(X^j, mu^n) WW^{j,i}_{k,k+1}

with all coefficients frozen at ``t_k``.  Tensor contractions:
``(dxF F WW)_ι = sum_{ℓ,k,a} dxF[ι,a,ℓ] F[ℓ,k] WW[k,a]`` and the same for the
Lions term.  For grid-lifted set-ups every cross block is ``a^j (x) a^i / 2``,
so the j-sum collapses to one call of ``coeff.mean_interaction``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coefficients import MeanFieldCoefficient
from .drivers import GridPath, GridSpec
from .lift import EmpiricalRoughSetup, Level2Blocks
from .measures import EmpiricalMeasure, wasserstein

__all__ = [
    "SCHEMES",
    "BlowUpError",
    "TrajectorySet",
    "MeasureFlow",
    "CouplingErrors",
    "step_compensated",
    "step_euler",
    "solve_particle_system",
    "solve_frozen_measure",
    "solve_frozen_measure_batch",
    "coupling_errors",
    "gubinelli_derivative",
]

SCHEMES = ("euler", "compensated")


class BlowUpError(FloatingPointError):
    """A state became non-finite; ``step`` is the index of the failing step."""

    def __init__(self, step: int):
        super().__init__(f"non-finite state produced at step {step}")
        self.step = step


@dataclass(frozen=True, eq=False)
class TrajectorySet:
    """Particle states on the grid, ``states`` has shape ``(K + 1, n, d)``."""

    spec: GridSpec
    states: np.ndarray
    scheme: str = "compensated"
    seed_tag: tuple = field(default=())

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 3 or states.shape[0] != self.spec.steps + 1:
            raise ValueError(f"states shape {states.shape} does not match grid")
        states.setflags(write=False)
        object.__setattr__(self, "states", states)

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def d(self) -> int:
        return self.states.shape[2]

    def measure(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states[k])


@dataclass(frozen=True, eq=False)
class MeasureFlow:
    """Frozen measure flow: atoms of ``mu_{t_k}`` for every grid index ``k``."""

    states: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 3:
            raise ValueError("flow states must have shape (K + 1, n_ref, d)")
        states.setflags(write=False)
        object.__setattr__(self, "states", states)

    @classmethod
    def from_trajectories(cls, traj: TrajectorySet) -> "MeasureFlow":
        return cls(traj.states)

    @classmethod
    def constant(cls, atoms, steps: int) -> "MeasureFlow":
        atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        return cls(np.broadcast_to(atoms, (steps + 1,) + atoms.shape))

    @property
    def steps(self) -> int:
        return self.states.shape[0] - 1

    def at(self, k: int) -> np.ndarray:
        return self.states[k]


def _level2_term(dxF, F, blocks):
    # sum_{ℓ,k,a} dxF[i,ι,a,ℓ] F[i,ℓ,k] blocks[i,k,a]
    return np.einsum("niaL,nLk,nka->ni", dxF, F, blocks)


def step_euler(states, setup: EmpiricalRoughSetup, coeff: MeanFieldCoefficient, k: int) -> np.ndarray:
    x = np.asarray(states, dtype=float)
    a = setup.increments[:, k, :]
    F = coeff.F_batch(x, x)
    out = x + np.einsum("nim,nm->ni", F, a)
    if not np.all(np.isfinite(out)):
        raise BlowUpError(k)
    return out


def step_compensated(states, setup: EmpiricalRoughSetup, coeff: MeanFieldCoefficient, k: int) -> np.ndarray:
    """Advance all particles from ``t_k`` to ``t_{k+1}``."""
    if not (0 <= k < setup.spec.steps):
        raise IndexError(f"step {k} outside 0..{setup.spec.steps - 1}")
    x = np.asarray(states, dtype=float)
    n = x.shape[0]
    a = setup.increments[:, k, :]  # (n, m)
    F = coeff.F_batch(x, x)  # (n, d, m)
    dxF = coeff.dxF_batch(x, x)  # (n, d, m, d)
    pushed = np.einsum("nim,nm->ni", F, a)  # F(X^j) a^j
    out = x + pushed + _level2_term(dxF, F, setup.self_array[:, k])
    if setup.materialized:
        # general blocks: lions[i] = sum_j DmuF(X^i)(X^j)[ι,a,ℓ] F(X^j)[ℓ,c] WW^{j,i}[c,a]
        cross = setup.cross_blocks[:, :, k]  # [j, i, c, a]
        grad = coeff.dmuF_pairs(x)  # [i, j, ι, a, ℓ]
        lions = np.einsum("ijsaL,jLc,jica->is", grad, F, cross)
        out = out + lions / n
    else:
        interaction = coeff.mean_interaction(x, pushed)  # (n, d, m)
        out = out + 0.5 * np.einsum("nia,na->ni", interaction, a)
    if not np.all(np.isfinite(out)):
        raise BlowUpError(k)
    return out


def solve_particle_system(setup: EmpiricalRoughSetup, coeff: MeanFieldCoefficient, x0,
                          scheme: str = "compensated") -> TrajectorySet:
    """Iterate the chosen scheme over the whole grid from the initial states ``x0``."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    x = np.array(x0, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape != (setup.n, coeff.d):
        raise ValueError(f"initial states shape {x.shape} != {(setup.n, coeff.d)}")
    if not np.all(np.isfinite(x)):
        raise ValueError("initial states must be finite")
    step = step_compensated if scheme == "compensated" else step_euler
    steps = setup.spec.steps
    states = np.empty((steps + 1,) + x.shape)
    states[0] = x
    for k in range(steps):
        x = step(x, setup, coeff, k)
        states[k + 1] = x
    tag = tuple(p.seed_tag for p in setup.paths[:1])
    return TrajectorySet(setup.spec, states, scheme, tag)


def solve_frozen_measure_batch(increments, self_blocks, coeff: MeanFieldCoefficient,
                               flow: MeasureFlow, x0) -> np.ndarray:
    """Companion trajectories in a frozen measure flow, one per noise.

    ``increments`` is ``(n, K, m)``, ``self_blocks`` ``(n, K, m, m)`` and
    ``x0`` ``(n, d)``.  Per step:
    ``x += F(x, mu_k) a + dxF(x, mu_k) F(x, mu_k) WW``.  Returns ``(K + 1, n, d)``.
    """
    inc = np.asarray(increments, dtype=float)
    blocks = np.asarray(self_blocks, dtype=float)
    x = np.array(x0, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    steps = inc.shape[1]
    if flow.steps != steps:
        raise ValueError(f"flow has {flow.steps} steps, noise has {steps}")
    states = np.empty((steps + 1,) + x.shape)
    states[0] = x
    for k in range(steps):
        atoms = flow.at(k)
        F = coeff.F_batch(x, atoms)
        dxF = coeff.dxF_batch(x, atoms)
        x = x + np.einsum("nim,nm->ni", F, inc[:, k]) + _level2_term(dxF, F, blocks[:, k])
        if not np.all(np.isfinite(x)):
            raise BlowUpError(k)
        states[k + 1] = x
    return states


def solve_frozen_measure(path: GridPath, self_blocks: Level2Blocks, coeff: MeanFieldCoefficient,
                         flow: MeasureFlow, x0) -> np.ndarray:
    """Single companion trajectory, shape ``(K + 1, d)``."""
    if self_blocks.spec != path.spec:
        raise ValueError("blocks and path live on different grids")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    out = solve_frozen_measure_batch(
        path.increments[None], self_blocks.blocks[None], coeff, flow, x0[None]
    )
    return out[:, 0]


@dataclass(frozen=True)
class CouplingErrors:
    per_particle: np.ndarray  # sup_t |companion^i - X^i|
    sup_particle_gap: float
    mean_particle_gap: float
    sup_t_w1_gap: float


def coupling_errors(coupled, companions) -> CouplingErrors:
    """Grid maxima of the particle-wise and measure-wise coupling gaps."""
    x = np.asarray(getattr(coupled, "states", coupled), dtype=float)
    y = np.asarray(getattr(companions, "states", companions), dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    gaps = np.sqrt(np.sum((x - y) ** 2, axis=-1))  # (K + 1, n)
    per_particle = gaps.max(axis=0)
    w1 = max(wasserstein(x[k], y[k], 1.0) for k in range(x.shape[0]))
    return CouplingErrors(per_particle, float(per_particle.max()), float(per_particle.mean()), float(w1))


def gubinelli_derivative(traj: TrajectorySet, coeff: MeanFieldCoefficient, i: int) -> np.ndarray:
    """``F(X^i_t, mu^n_t)`` along the grid, the x-derivative of particle ``i``; ``(K+1, d, m)``."""
    states = traj.states
    return np.stack([coeff.F(states[k, i], states[k]) for k in range(states.shape[0])])
