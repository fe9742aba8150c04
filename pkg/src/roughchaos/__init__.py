"""Simulation and diagnostics for mean-field rough differential equations."""

from .coefficients import (
    MeanFieldCoefficient,
    conv_tanh,
    empirical_projection_grad,
    from_name,
    make_convolution,
    make_moment,
    moment_tanh,
)
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .drivers import DriverKind, GridPath, GridSpec, sample_ensemble, sample_path
from .experiments import ExperimentResult, ResultRow, run_experiment, scheme_order_study
from .lift import EmpiricalRoughSetup, Level2Blocks, build_empirical_setup, chen_eval, lift_cross, restrict_setup
from .measures import EmpiricalMeasure, RateFit, fit_rate, w1_to_law, wasserstein, wasserstein_1d, wasserstein_assignment
from .solver import (
    MeasureFlow,
    TrajectorySet,
    coupling_errors,
    solve_frozen_measure,
    solve_particle_system,
    step_euler,
    step_compensated,
)
from .variation import (
    Control,
    TwoIndexFn,
    empirical_control,
    greedy_times,
    holder_norm,
    local_accumulation,
    p_variation,
)

__version__ = "0.1.0"
