import numpy as np
import pytest
import sympy as sp

from roughchaos.coefficients import conv_tanh, make_convolution, make_moment, moment_tanh, zero_coefficient
from roughchaos.drivers import DriverKind, GridPath, GridSpec, coarsen, sample_ensemble
from roughchaos.lift import build_empirical_setup, restrict_setup
from roughchaos.solver import (
    BlowUpError,
    MeasureFlow,
    TrajectorySet,
    coupling_errors,
    gubinelli_derivative,
    solve_frozen_measure,
    solve_frozen_measure_batch,
    solve_particle_system,
    step_compensated,
    step_euler,
)
from roughchaos.variation import controlled_norm_report, empirical_control


def setup_for(kind, steps, seed, n, m=1, horizon=1.0, materialize=False):
    return build_empirical_setup(sample_ensemble(kind, GridSpec(horizon, steps, m), seed, n), materialize)


def constant_coefficient(c):
    c = np.asarray(c, dtype=float)
    d, m = c.shape
    return make_moment(
        lambda x, mean: np.broadcast_to(c, np.shape(x)[:-1] + (d, m)),
        lambda x, mean: np.zeros(np.shape(x)[:-1] + (d, m, d)),
        lambda x, mean: np.zeros(np.shape(x)[:-1] + (d, m, d)),
        d, m,
    )


# trivial reductions


def test_zero_coefficient_keeps_states():
    setup = setup_for(DriverKind.brownian(), 16, 0, 4, m=2)
    x0 = np.arange(8.0).reshape(4, 2)
    traj = solve_particle_system(setup, zero_coefficient(2, 2), x0)
    assert np.all(traj.states == x0)
    assert np.all(step_compensated(x0, setup, zero_coefficient(2, 2), 3) == x0)


@pytest.mark.parametrize("materialize", [False, True])
def test_constant_coefficient_is_additive_noise(materialize):
    c = np.array([[1.0, -0.5], [0.25, 2.0], [0.0, 1.0]])
    setup = setup_for(DriverKind.fbm(0.4), 32, 1, 5, m=2, materialize=materialize)
    x0 = np.random.default_rng(0).normal(size=(5, 3))
    traj = solve_particle_system(setup, constant_coefficient(c), x0)
    driver = np.stack([p.values for p in setup.paths], axis=1)  # (K+1, n, m)
    expected = x0[None] + np.einsum("dm,kim->kid", c, driver)
    np.testing.assert_allclose(traj.states, expected, atol=1e-13)
    assert np.all(traj.states[0] == x0)


def test_hand_expansion_two_particles():
    amp = 0.8
    x = sp.symbols("x0 x1")
    y = sp.Symbol("y")
    z = sp.Symbol("z")
    f = amp * sp.tanh(z - y)
    F = [sum(f.subs({z: xi, y: xj}) for xj in x) / 2 for xi in x]
    dxF = [sum(sp.diff(f, z).subs({z: xi, y: xj}) for xj in x) / 2 for xi in x]
    dmu = [[sp.diff(f, y).subs({z: xi, y: xj}) for xj in x] for xi in x]
    a = (sp.Rational(1, 10), sp.Rational(-1, 5))
    # grid lift: WW^{j,i} = a^j a^i / 2 on one step, self blocks a^i a^i / 2
    new = [
        x[i]
        + F[i] * a[i]
        + dxF[i] * F[i] * a[i] ** 2 / 2
        + sum(dmu[i][j] * F[j] * a[j] * a[i] / 2 for j in range(2)) / 2
        for i in range(2)
    ]
    start = {x[0]: sp.Rational(3, 10), x[1]: sp.Rational(-7, 10)}
    expected = np.array([float(sp.N(e.subs(start), 30)) for e in new])

    spec = GridSpec(1.0, 1, 1)
    paths = [GridPath(spec, np.array([[0.0], [0.1]])), GridPath(spec, np.array([[0.0], [-0.2]]))]
    coeff = conv_tanh(amp)
    states = np.array([[0.3], [-0.7]])
    for materialize in (False, True):
        got = step_compensated(states, build_empirical_setup(paths, materialize), coeff, 0)[:, 0]
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


def test_step_rejects_bad_index_and_flags_blow_up():
    setup = setup_for(DriverKind.brownian(), 4, 2, 2)
    with pytest.raises(IndexError):
        step_compensated(np.zeros((2, 1)), setup, conv_tanh(), 4)
    explode = make_moment(
        lambda x, mean: np.full(np.shape(x) + (1,), np.inf),
        lambda x, mean: np.zeros(np.shape(x) + (1, 1)),
        lambda x, mean: np.zeros(np.shape(x) + (1, 1)),
        1, 1,
    )
    with pytest.raises(BlowUpError) as info:
        solve_particle_system(setup, explode, np.ones((2, 1)))
    assert info.value.step == 0
    with pytest.raises(ValueError):
        solve_particle_system(setup, conv_tanh(), np.array([[np.nan], [0.0]]))
    with pytest.raises(ValueError):
        solve_particle_system(setup, conv_tanh(), np.zeros((2, 1)), scheme="rk4")


# structural properties


@pytest.mark.parametrize("scheme", ["compensated", "euler"])
def test_determinism(scheme):
    a = solve_particle_system(setup_for(DriverKind.fbm(0.4), 32, 5, 6, 2), conv_tanh(1.0, 2, 2), np.ones((6, 2)), scheme)
    b = solve_particle_system(setup_for(DriverKind.fbm(0.4), 32, 5, 6, 2), conv_tanh(1.0, 2, 2), np.ones((6, 2)), scheme)
    assert np.array_equal(a.states, b.states)
    assert a.scheme == scheme


@pytest.mark.parametrize("coeff", [conv_tanh(1.0, 2, 2), moment_tanh(0.5, 0.7, 2, 2)])
def test_exchangeability(coeff):
    paths = sample_ensemble(DriverKind.brownian(), GridSpec(1.0, 24, 2), 6, 5)
    x0 = np.random.default_rng(1).normal(size=(5, 2))
    perm = np.array([3, 0, 4, 1, 2])
    base = solve_particle_system(build_empirical_setup(paths), coeff, x0)
    moved = solve_particle_system(build_empirical_setup([paths[i] for i in perm]), coeff, x0[perm])
    np.testing.assert_allclose(moved.states, base.states[:, perm], rtol=0, atol=1e-14)


def test_no_interaction_reduction():
    # f(x, y) independent of y: D_mu F = 0 and each particle follows its own noise
    coeff = make_convolution(
        lambda x, y: np.sin(x + 0 * y)[..., None],
        lambda x, y: (np.cos(x + 0 * y))[..., None, None],
        lambda x, y: np.zeros(np.broadcast_shapes(x.shape, y.shape) + (1, 1)),
        1, 1,
    )
    paths = list(sample_ensemble(DriverKind.brownian(), GridSpec(1.0, 32, 1), 9, 4))
    x0 = np.array([[0.1], [0.2], [0.3], [0.4]])
    base = solve_particle_system(build_empirical_setup(paths), coeff, x0).states[:, 0]
    others = sample_ensemble(DriverKind.brownian(), GridSpec(1.0, 32, 1), 99, 4)
    ablated = [paths[0], *others[1:]]
    again = solve_particle_system(build_empirical_setup(ablated, True), coeff, x0).states[:, 0]
    alone = solve_particle_system(build_empirical_setup(paths[:1]), coeff, x0[:1]).states[:, 0]
    np.testing.assert_allclose(again, base, atol=1e-14)
    np.testing.assert_allclose(alone, base, atol=1e-14)


def test_materialized_general_path_matches_lazy():
    setup_lazy = setup_for(DriverKind.fbm(0.45), 20, 3, 6, m=2)
    setup_full = setup_for(DriverKind.fbm(0.45), 20, 3, 6, m=2, materialize=True)
    x0 = np.random.default_rng(3).normal(size=(6, 2))
    for coeff in (conv_tanh(0.9, 2, 2), moment_tanh(0.4, 0.6, 2, 2)):
        lazy = solve_particle_system(setup_lazy, coeff, x0)
        full = solve_particle_system(setup_full, coeff, x0)
        np.testing.assert_allclose(full.states, lazy.states, rtol=0, atol=1e-12)


def test_euler_drops_level_two_terms():
    setup = setup_for(DriverKind.brownian(), 8, 4, 3)
    coeff = conv_tanh(0.5)
    x = np.array([[0.1], [0.5], [-0.3]])
    expected = x + np.einsum("nim,nm->ni", coeff.F_batch(x, x), setup.increments[:, 2])
    np.testing.assert_allclose(step_euler(x, setup, coeff, 2), expected, atol=1e-15)


# refinement behaviour


def common_fine_gap(kind, n, fine, coarse_steps, reps, coeff):
    """Mean terminal |euler - compensated| at each coarse resolution, from shared fine paths."""
    gaps = np.zeros(len(coarse_steps))
    for r in range(reps):
        paths = sample_ensemble(kind, GridSpec(1.0, fine, 1), 100 + r, n)
        x0 = np.linspace(-1.0, 1.0, n)[:, None]
        for c, steps in enumerate(coarse_steps):
            setup = build_empirical_setup([coarsen(p, fine // steps) for p in paths])
            comp = solve_particle_system(setup, coeff, x0).states[-1]
            eul = solve_particle_system(setup, coeff, x0, "euler").states[-1]
            gaps[c] += np.mean(np.abs(comp - eul)) / reps
    return gaps


def test_euler_and_compensated_agree_for_smooth_driver():
    steps = (32, 64, 128, 256, 512)
    gaps = common_fine_gap(DriverKind.fbm(0.75), 4, 512, steps, 8, moment_tanh(0.8, 0.5))
    slope = np.polyfit(np.log2(steps), np.log2(gaps), 1)[0]
    assert slope < -0.4


def test_euler_and_compensated_keep_a_gap_for_brownian_driver():
    # Euler converges to the Ito solution, the compensated sums to the Stratonovich one
    steps = (32, 128, 512)
    gaps = common_fine_gap(DriverKind.brownian(), 4, 512, steps, 8, moment_tanh(0.8, 0.5))
    assert gaps[-1] > 0.5 * gaps[0]
    assert gaps[-1] > 0.05


def test_solver_order_on_common_fine_path():
    from roughchaos.experiments import scheme_order_study

    study = scheme_order_study(conv_tanh(1.0), n=4, steps=(32, 64, 128), fine_steps=1024, replications=8, seed=3)
    comp = study["compensated"]
    assert comp.slope < -0.8
    assert len(comp.errors) == 3


# frozen-measure companions


def test_frozen_measure_trivial_flow():
    coeff = make_moment(
        lambda x, mean: np.tanh(mean)[..., None],
        lambda x, mean: np.zeros(np.shape(x) + (1, 1)),
        lambda x, mean: (1 / np.cosh(mean) ** 2)[..., None, None],
        1, 1,
    )
    path = sample_ensemble(DriverKind.brownian(), GridSpec(1.0, 16, 1), 4, 1)[0]
    setup = build_empirical_setup([path])
    flow = MeasureFlow.constant([[0.0]], 16)
    traj = solve_frozen_measure(path, setup.self_blocks[0], coeff, flow, [0.7])
    assert np.all(traj == 0.7)
    with pytest.raises(ValueError):
        solve_frozen_measure(path, setup.self_blocks[0], coeff, MeasureFlow.constant([[0.0]], 8), [0.7])


def test_frozen_measure_single_particle_step_bound():
    coeff = conv_tanh(0.9)
    lam = coeff.lipschitz_bound
    setup = setup_for(DriverKind.fbm(0.4), 64, 5, 1)
    traj = solve_particle_system(setup, coeff, np.array([[0.2]]))
    flow = MeasureFlow.from_trajectories(traj)
    blocks = setup.self_array
    for k in range(64):
        x = traj.states[k]
        one_step = MeasureFlow(flow.states[k : k + 2])
        frozen = solve_frozen_measure_batch(setup.increments[:, k : k + 1], blocks[:, k : k + 1], coeff, one_step, x)[-1]
        gap = np.abs(frozen - traj.states[k + 1]).max()
        assert gap <= lam**2 * np.abs(blocks[0, k]).max() + 1e-15


def test_frozen_measure_refinement_is_stable():
    fine = setup_for(DriverKind.brownian(), 512, 8, 1)
    flow_atoms = np.linspace(-1, 1, 16)[:, None]
    coeff = conv_tanh(0.7)
    ends = []
    for factor in (4, 2, 1):
        setup = restrict_setup(fine, factor) if factor > 1 else fine
        flow = MeasureFlow.constant(flow_atoms, setup.spec.steps)
        ends.append(solve_frozen_measure(setup.paths[0], setup.self_blocks[0], coeff, flow, [0.3])[-1, 0])
    d1, d2 = abs(ends[0] - ends[1]), abs(ends[1] - ends[2])
    assert d1 < 0.05 and d2 < 0.05
    assert d2 < d1 or d2 < 1e-3


# coupling errors


def test_coupling_errors_examples():
    rng = np.random.default_rng(0)
    states = rng.normal(size=(9, 6, 1))
    spec = GridSpec(1.0, 8, 1)
    traj = TrajectorySet(spec, states)
    same = coupling_errors(traj, states)
    assert same.sup_particle_gap == 0.0 and same.sup_t_w1_gap == 0.0
    shifted = coupling_errors(traj, states + 0.37)
    assert shifted.sup_t_w1_gap == pytest.approx(0.37)
    assert shifted.mean_particle_gap == pytest.approx(0.37)
    other = states + rng.normal(scale=0.1, size=states.shape)
    base = coupling_errors(states, other)
    perm = rng.permutation(6)
    moved = coupling_errors(states[:, perm], other[:, perm])
    np.testing.assert_allclose(moved.per_particle, base.per_particle[perm])
    assert moved.sup_t_w1_gap == pytest.approx(base.sup_t_w1_gap, abs=1e-15)
    with pytest.raises(ValueError):
        coupling_errors(states, states[:, :3])


# controlled-path diagnostics of solver output


def test_remainder_norm_stable_under_refinement():
    fine = setup_for(DriverKind.brownian(), 256, 12, 3)
    coeff = conv_tanh(1.0)
    x0 = np.array([[0.0], [0.5], [-0.5]])
    norms = []
    for setup in (restrict_setup(fine, 2), fine):
        traj = solve_particle_system(setup, coeff, x0)
        w = empirical_control(setup, 0, 2.5)
        deriv = gubinelli_derivative(traj, coeff, 0)
        rep = controlled_norm_report(traj.states[:, 0], deriv, setup.paths[0], w, 2.5)
        assert not rep.infinite and np.isfinite(rep.remainder_norm)
        norms.append(rep.remainder_norm)
    assert 0.5 <= norms[1] / norms[0] <= 2.0
