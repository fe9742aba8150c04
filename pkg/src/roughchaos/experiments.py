"""Batch experiments: seeding, replications, the four runners and a scheme-order study.

A replication is the unit of work and of parallelism.  Inside one replication
every configured ``n`` is processed, so the chaos-rate and coupling runs share
a single reference flow across ``n`` (computed once at ``n_ref``).  Every
random stream is keyed by ``(seed, experiment, n, replication)``, so results do
not depend on the worker count or on how many replications are requested.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .drivers import DriverKind, GridSpec, generator_for, sample_ensemble
from .lift import build_empirical_setup, chen_residual, ibp_residual, restrict_setup
from .measures import RateFit, fit_rate, normal_law, uniform_law, w1_to_law, w1_to_reference, wasserstein
from .solver import BlowUpError, MeasureFlow, coupling_errors, solve_frozen_measure_batch, solve_particle_system
from .variation import EmpiricalControls, local_accumulation

__all__ = [
    "EXPERIMENT_CODES",
    "ResultRow",
    "FitRecord",
    "ExperimentResult",
    "replication_seed",
    "initial_states",
    "run_diagnose",
    "run_iid_rate",
    "run_chaos_rate",
    "run_coupling",
    "run_experiment",
    "summarize",
    "fit_metrics",
    "OrderStudy",
    "scheme_order_study",
]

EXPERIMENT_CODES = {"diagnose": 1, "iid-rate": 2, "chaos-rate": 3, "coupling": 4}
ABORT_LIMIT = 0.05

# stream index reserved for initial conditions; driver paths use 0..n-1
_X0_STREAM = 2**63

# metrics that receive a log-log rate fit
FIT_METRICS = {
    "diagnose": (),
    "iid-rate": ("w1",),
    "chaos-rate": ("sup_w1_reference",),
    "coupling": ("mean_particle_gap", "max_particle_gap", "sup_w1_companions"),
}


@dataclass(frozen=True)
class ResultRow:
    experiment_id: str
    n: int
    replication: int
    seed: int
    metric: str
    value: float
    runtime_ms: float = 0.0
    aborted: bool = False

    def __post_init__(self):
        if not self.aborted and not math.isfinite(self.value):
            raise ValueError(f"non-finite value for {self.metric} in a non-aborted row")


@dataclass(frozen=True)
class FitRecord:
    metric: str
    slope: float
    intercept: float
    r_squared: float
    points: int
    status: str = "ok"


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list
    fits: list = field(default_factory=list)

    @property
    def units(self) -> dict:
        """Aborted flag per ``(n, replication)`` unit."""
        out = {}
        for row in self.rows:
            key = (row.n, row.replication)
            out[key] = out.get(key, False) or row.aborted
        return out

    @property
    def aborted_fraction(self) -> float:
        units = self.units
        return sum(units.values()) / len(units) if units else 0.0

    @property
    def failed(self) -> bool:
        return self.aborted_fraction > ABORT_LIMIT

    def fit(self, metric: str) -> FitRecord:
        for rec in self.fits:
            if rec.metric == metric:
                return rec
        raise KeyError(metric)


def replication_seed(seed: int, experiment: str, n: int, replication: int) -> int:
    """64-bit stream seed for one ``(experiment, n, replication)`` unit; ``n = 0`` tags references."""
    seq = np.random.SeedSequence([int(seed), EXPERIMENT_CODES[experiment], int(n), int(replication)])
    return int(seq.generate_state(1, np.uint64)[0])


def initial_states(config: ExperimentConfig, seed: int, n: int) -> np.ndarray:
    """i.i.d. initial conditions, shape ``(n, d)``."""
    gen = generator_for(seed, _X0_STREAM)
    shape = (n, config.state_dim)
    if config.init_law == "normal":
        return config.init_loc + config.init_scale * gen.standard_normal(shape)
    return config.init_loc + config.init_scale * gen.uniform(-1.0, 1.0, shape)


def _simulate(config: ExperimentConfig, coeff, seed: int, n: int):
    paths = sample_ensemble(config.driver, config.grid, seed, n)
    setup = build_empirical_setup(paths)
    x0 = initial_states(config, seed, n)
    return setup, solve_particle_system(setup, coeff, x0), x0


def _sup_w1(states, reference) -> float:
    d = states.shape[-1]
    if d == 1:
        return max(wasserstein(states[k], reference[k]) for k in range(states.shape[0]))
    return max(w1_to_reference(states[k], reference[k]) for k in range(states.shape[0]))


def _rows(config, n, rep, seed, metrics, elapsed, aborted=False):
    return [
        ResultRow(config.experiment, n, rep, seed, name, float(value), elapsed, aborted)
        for name, value in metrics
    ]


def _aborted_rows(config, n, rep, seed, elapsed):
    return _rows(config, n, rep, seed, [(m, math.nan) for m in FIT_METRICS[config.experiment]], elapsed, True)


def _ms(start):
    return round((time.perf_counter() - start) * 1000.0, 3)


# one replication of each experiment


def _diagnose_replication(config: ExperimentConfig, rep: int) -> list:
    rows = []
    for n in config.ns:
        start = time.perf_counter()
        seed = replication_seed(config.seed, config.experiment, n, rep)
        setup = build_empirical_setup(sample_ensemble(config.driver, config.grid, seed, n))
        inc = setup.increments
        k_to = min(config.window, config.grid.steps)
        watched = range(min(n, config.particles))
        chen = max(chen_residual(setup.cross(i, j), inc[i], inc[j], 0, k_to) for i in watched for j in watched)
        self_ibp = max(ibp_residual(setup.cross(i, i), setup.cross(i, i), inc[i], inc[i], 0, k_to) for i in watched)
        metrics = [("chen_residual", chen), ("ibp_self_residual", self_ibp)]
        if n > 1:
            cross_ibp = max(
                ibp_residual(setup.cross(i, j), setup.cross(j, i), inc[i], inc[j], 0, k_to)
                for i in watched for j in watched if i < j
            )
            metrics.append(("ibp_cross_residual", cross_ibp))

        controls = EmpiricalControls(setup, config.p, config.q, window=(0, k_to))
        counts, violations = [], 0
        for i in watched:
            w = controls.control(i).base
            violations += w.superadditivity_violations()
            varpi = w.values ** (1.0 / config.p)
            counts.append(local_accumulation(varpi, config.alpha, (0, k_to)))
        metrics.append(("superadditivity_violations", violations))
        metrics.append(("accumulation_mean", float(np.mean(counts))))
        metrics.append(("accumulation_max", max(counts)))
        hist = np.bincount(counts, minlength=k_to + 1)  # N never exceeds the step count
        metrics.extend((f"accumulation_count_{k}", int(c)) for k, c in enumerate(hist))
        rows.extend(_rows(config, n, rep, seed, metrics, _ms(start)))
    return rows


def _law(config):
    return normal_law() if config.iid_law == "normal" else uniform_law()


def _iid_sample(config, gen, n):
    if config.iid_law == "normal":
        return gen.standard_normal((n, config.iid_dim))
    return gen.uniform(0.0, 1.0, (n, config.iid_dim))


def _iid_replication(config: ExperimentConfig, rep: int) -> list:
    rows = []
    reference = None
    if config.iid_dim > 1:
        ref_seed = replication_seed(config.seed, config.experiment, 0, rep)
        reference = _iid_sample(config, generator_for(ref_seed, 0), config.n_ref)
    for n in config.ns:
        start = time.perf_counter()
        seed = replication_seed(config.seed, config.experiment, n, rep)
        cloud = _iid_sample(config, generator_for(seed, 0), n)
        if reference is None:
            value = w1_to_law(cloud, _law(config))
        else:
            value = w1_to_reference(cloud, reference)
        rows.extend(_rows(config, n, rep, seed, [("w1", value)], _ms(start)))
    return rows


def _particle_replication(config: ExperimentConfig, rep: int) -> list:
    coeff = config.build_coefficient()
    coupling = config.experiment == "coupling"
    rows = []
    ref_start = time.perf_counter()
    ref_seed = replication_seed(config.seed, config.experiment, 0, rep)
    try:
        _, ref_traj, _ = _simulate(config, coeff, ref_seed, config.n_ref)
    except BlowUpError:
        ref_ms = _ms(ref_start)
        for n in config.ns:
            seed = replication_seed(config.seed, config.experiment, n, rep)
            rows.extend(_aborted_rows(config, n, rep, seed, ref_ms))
        return rows
    flow = MeasureFlow.from_trajectories(ref_traj)
    for n in config.ns:
        start = time.perf_counter()
        seed = replication_seed(config.seed, config.experiment, n, rep)
        try:
            setup, traj, x0 = _simulate(config, coeff, seed, n)
            if coupling:
                companions = solve_frozen_measure_batch(setup.increments, setup.self_array, coeff, flow, x0)
                err = coupling_errors(traj, companions)
                metrics = [
                    ("mean_particle_gap", err.mean_particle_gap),
                    ("max_particle_gap", err.sup_particle_gap),
                    ("sup_w1_companions", err.sup_t_w1_gap),
                ]
            else:
                metrics = [("sup_w1_reference", _sup_w1(traj.states, flow.states))]
        except BlowUpError:
            rows.extend(_aborted_rows(config, n, rep, seed, _ms(start)))
            continue
        rows.extend(_rows(config, n, rep, seed, metrics, _ms(start)))
    return rows


_REPLICATION = {
    "diagnose": _diagnose_replication,
    "iid-rate": _iid_replication,
    "chaos-rate": _particle_replication,
    "coupling": _particle_replication,
}


def _replication_task(args):
    config, rep = args
    return _REPLICATION[config.experiment](config, rep)


# aggregation


def summarize(rows) -> list[dict]:
    """Per ``(metric, n)`` mean and standard error over non-aborted rows."""
    groups: dict = {}
    for row in rows:
        entry = groups.setdefault((row.metric, row.n), {"values": [], "aborted": 0})
        if row.aborted:
            entry["aborted"] += 1
        else:
            entry["values"].append(row.value)
    out = []
    for (metric, n), entry in groups.items():
        vals = np.asarray(entry["values"], dtype=float)
        count = vals.size
        mean = float(vals.mean()) if count else math.nan
        stderr = float(vals.std(ddof=1) / math.sqrt(count)) if count > 1 else math.nan
        log_mean = math.log(mean) if count and mean > 0 else math.nan
        out.append({
            "metric": metric, "n": n, "count": count, "aborted": entry["aborted"],
            "mean": mean, "stderr": stderr, "log_n": math.log(n), "log_mean": log_mean,
        })
    return out


def fit_metrics(summary, metrics, log_correction: bool = False) -> list[FitRecord]:
    records = []
    for metric in metrics:
        pts = sorted((s["n"], s["mean"]) for s in summary if s["metric"] == metric and s["count"] > 0)
        try:
            fit: RateFit = fit_rate([p[0] for p in pts], [p[1] for p in pts], log_correction)
        except ValueError as exc:
            records.append(FitRecord(metric, math.nan, math.nan, math.nan, len(pts), f"refused: {exc}"))
            continue
        records.append(FitRecord(metric, fit.slope, fit.intercept, fit.r_squared, len(pts)))
    return records


def run_experiment(config: ExperimentConfig, workers: int | None = None) -> ExperimentResult:
    """Run every replication of ``config`` and fit the rate metrics."""
    workers = config.workers if workers is None else int(workers)
    tasks = [(config, rep) for rep in range(config.replications)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            chunks = list(pool.map(_replication_task, tasks))
    else:
        chunks = [_replication_task(t) for t in tasks]
    rows = [row for chunk in chunks for row in chunk]
    rows.sort(key=lambda r: (r.n, r.replication))
    log_correction = config.experiment == "iid-rate" and config.log_correction
    fits = fit_metrics(summarize(rows), FIT_METRICS[config.experiment], log_correction)
    return ExperimentResult(config, rows, fits)


def _checked(config: ExperimentConfig, name: str) -> ExperimentConfig:
    if config.experiment != name:
        raise ValueError(f"config is for {config.experiment!r}, not {name!r}")
    return config


def run_diagnose(config: ExperimentConfig, workers: int | None = None) -> ExperimentResult:
    return run_experiment(_checked(config, "diagnose"), workers)


def run_iid_rate(config: ExperimentConfig, workers: int | None = None) -> ExperimentResult:
    return run_experiment(_checked(config, "iid-rate"), workers)


def run_chaos_rate(config: ExperimentConfig, workers: int | None = None) -> ExperimentResult:
    return run_experiment(_checked(config, "chaos-rate"), workers)


def run_coupling(config: ExperimentConfig, workers: int | None = None) -> ExperimentResult:
    return run_experiment(_checked(config, "coupling"), workers)


# scheme order


@dataclass(frozen=True)
class OrderStudy:
    scheme: str
    steps: tuple
    errors: tuple
    slope: float  # log2 slope of error against K


def scheme_order_study(coeff, n: int = 8, steps=(64, 128, 256, 512), fine_steps: int = 4096,
                       replications: int = 32, seed: int = 0, horizon: float = 1.0,
                       kind: DriverKind | None = None, schemes=("compensated", "euler")) -> dict:
    """Self-refinement errors ``mean |X_T(K) - X_T(2K)|`` on one common fine path.

    Every coarse set-up is the fine-grid set-up restricted to the coarse grid,
    with level-2 blocks composed by Chen's relation.  Cross-particle areas of
    the fine path are therefore kept; without them the interacting scheme is
    limited to order one half.
    """
    kind = kind or DriverKind.brownian()
    steps = tuple(int(k) for k in steps)
    levels = sorted(set(steps) | {2 * k for k in steps})
    if any(fine_steps % k for k in levels):
        raise ValueError("every K and 2K must divide fine_steps")
    spec = GridSpec(horizon, fine_steps, coeff.m)
    errs = {s: {k: [] for k in steps} for s in schemes}
    for rep in range(replications):
        rep_seed = int(np.random.SeedSequence([seed, 99, n, rep]).generate_state(1, np.uint64)[0])
        fine = build_empirical_setup(sample_ensemble(kind, spec, rep_seed, n))
        x0 = generator_for(rep_seed, _X0_STREAM).standard_normal((n, coeff.d))
        coarse = {k: restrict_setup(fine, fine_steps // k) for k in levels}
        for scheme in schemes:
            final = {k: solve_particle_system(coarse[k], coeff, x0, scheme).states[-1] for k in levels}
            for k in steps:
                errs[scheme][k].append(float(np.mean(np.abs(final[k] - final[2 * k]))))
    out = {}
    for scheme in schemes:
        means = tuple(float(np.mean(errs[scheme][k])) for k in steps)
        slope = float(np.polyfit(np.log2(steps), np.log2(means), 1)[0])
        out[scheme] = OrderStudy(scheme, steps, means, slope)
    return out
