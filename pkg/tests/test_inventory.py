import dataclasses
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from ctmdp import inventory as inv
from ctmdp.engine import ValueTable
from ctmdp.inventory import InventoryParams, RateSchedule
from oracles import monte_carlo_deviation, quad_stage_objective

# stage objective with v(x) = |x - theta| on an unbounded lattice (40-digit
# quadrature and double sums); the test window is wide enough that clamping
# is invisible at this precision
STAGE_ORACLE = [
    ((1.5, 3.0, 6), 19.743897381499970356),
    ((0.0, 2.0, 16), 58.705442986181929859),
    ((5.0, 12.0, -5), 434.57043956031275331),
]


def test_params_validation_lists_problems():
    with pytest.raises(ValueError, match="beta.*\n?.*|beta") as info:
        InventoryParams(beta=1.0, T_min=3.0, T_max=2.0)
    assert "beta" in str(info.value) and "T_min" in str(info.value)


def test_window_and_observation_reward():
    p = InventoryParams()
    assert p.window == (-22, 38)
    assert p.observation_cost(4.0) == -20.0


@pytest.mark.parametrize("args, expected", STAGE_ORACLE)
def test_stage_objective_frozen(args, expected, abs_values):
    p = InventoryParams(window_margin=120, eps_kernel=1e-14)
    assert inv.stage_objective_const(*args, abs_values(p), p) == pytest.approx(expected, rel=1e-12)


@given(
    a=st.floats(0.0, 5.0),
    T=st.floats(2.0, 12.0),
    x=st.integers(-10, 26),
)
@settings(max_examples=60, deadline=None)
def test_stage_objective_matches_quadrature(a, T, x):
    p = InventoryParams(window_margin=18, eps_kernel=1e-13)
    lo, hi = p.window
    values = np.sqrt(1.0 + (np.arange(lo, hi + 1) - p.theta) ** 2)
    v = ValueTable(p.window, values)
    ref = quad_stage_objective(a, T, x, values, p.window, p)
    assert inv.stage_objective_const(a, T, x, v, p) == pytest.approx(ref, abs=1e-9)


def test_stage_objective_rejects_out_of_bounds(abs_values):
    p = InventoryParams()
    with pytest.raises(ValueError):
        inv.stage_objective_const(6.0, 3.0, 8, abs_values(p), p)
    with pytest.raises(ValueError):
        inv.stage_objective_const(1.0, 1.0, 8, abs_values(p), p)


@pytest.mark.parametrize("x, a, t", [(8, 0.0, 1.0), (2, 5.0, 3.0), (16, 1.3, 7.5)])
def test_deviation_cost_monte_carlo(x, a, t):
    p = InventoryParams()
    mean, se = monte_carlo_deviation(x, a, t, p, 200_000, np.random.default_rng(17))
    assert abs(inv.deviation_cost(x, t, a, p) - mean) <= 4 * se


def test_deviation_cost_schedule_equals_constant():
    p = InventoryParams()
    sched = RateSchedule.constant(2.5, 6.0)
    assert inv.deviation_cost(3, 4.0, sched, p) == inv.deviation_cost(3, 4.0, 2.5, p)


def test_schedule_running_cost_matches_quadrature():
    p = InventoryParams()
    sched = RateSchedule.from_switches(5.0, 0.0, [1.25, 3.5], 6.0)
    x = 1

    def integrand(t):
        return p.beta**t * (inv.deviation_cost(x, t, sched, p) + p.nu * sched.rate(t))

    ref = sum(
        integrate.quad(integrand, a, b, epsabs=1e-13, epsrel=1e-13)[0]
        for a, b in zip(sched.breakpoints, sched.breakpoints[1:])
    )
    assert inv.schedule_running_cost(x, sched, p) == pytest.approx(ref, rel=1e-11)


def test_constant_schedule_objective_equals_stage_objective(abs_values):
    p = InventoryParams()
    v = abs_values(p)
    sched = RateSchedule.constant(1.7, 4.4)
    assert inv.schedule_objective(5, sched, v, p) == pytest.approx(
        inv.stage_objective_const(1.7, 4.4, 5, v, p), rel=1e-12
    )


def test_rate_schedule_bookkeeping():
    s = RateSchedule.from_switches(0.0, 5.0, [1.0, 1.0, 2.0], 4.0)
    # the zero-length piece vanishes and equal neighbours merge
    assert s.levels == (0.0, 5.0) and s.breakpoints == (0.0, 2.0, 4.0)
    assert s.cumulative(3.0) == 5.0
    assert s.rate(1.99) == 0.0 and s.rate(2.0) == 5.0
    with pytest.raises(ValueError):
        RateSchedule((0.0, 1.0), (-1.0,))


@pytest.mark.parametrize("x, mass, T", [(4, 0.0, 3.0), (8, 7.5, 3.0), (14, 2.0, 9.0), (-20, 40.0, 10.0)])
def test_terminal_gradient_matches_finite_difference(reference_solution, x, mass, T):
    _, v, _ = reference_solution
    p = InventoryParams()
    exact = inv.terminal_gradient(x, mass, T, v, p)
    fd = inv.terminal_gradient_fd(x, mass, T, v, p)
    assert exact == pytest.approx(fd, rel=1e-6, abs=1e-7)


@pytest.mark.parametrize("first, sign", [(5.0, 1.0), (0.0, -1.0)])
def test_switch_time_derivative_equals_switching_function(reference_solution, first, sign):
    # moving a switch out of a_max later extends full throttle: dJ/dtau = +a_max * phi(tau);
    # moving a switch into a_max later shortens it: dJ/dtau = -a_max * phi(tau)
    _, v, _ = reference_solution
    p = InventoryParams()
    other = p.a_max - first
    x, T, tau, h = 3, 6.0, 2.2, 1e-5
    J = lambda s: inv.schedule_objective(x, RateSchedule.from_switches(first, other, [s], T), v, p)  # noqa: E731
    dJ = (J(tau + h) - J(tau - h)) / (2 * h)
    sched = RateSchedule.from_switches(first, other, [tau], T)
    traj = inv.costate_backward(x, sched, T, v, p, n_steps=4000)
    phi = np.interp(tau, traj.times, traj.switching)
    assert dJ == pytest.approx(sign * p.a_max * phi, rel=1e-5, abs=1e-7)


def test_costate_terminal_methods_agree(reference_solution):
    _, v, _ = reference_solution
    p = InventoryParams()
    sched = RateSchedule.from_switches(0.0, 5.0, [2.0], 5.0)
    a = inv.costate_backward(10, sched, 5.0, v, p, terminal="analytic")
    b = inv.costate_backward(10, sched, 5.0, v, p, terminal="fd")
    assert np.max(np.abs(a.costate - b.costate)) < 1e-6
    with pytest.raises(ValueError):
        inv.costate_backward(10, sched, 4.0, v, p)


def test_singular_level_value():
    p = InventoryParams()
    assert inv.singular_level(p) == pytest.approx((2 * math.log(0.8) - 1) / 2)


@pytest.mark.parametrize("x, T", [(-14, 7.0), (5, 4.75), (11, 3.3), (30, 5.0), (-12, 3.0)])
def test_bang_bang_switches_are_stationary(reference_solution, x, T):
    _, v, _ = reference_solution
    p = InventoryParams()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = inv.solve_bang_bang(x, T, v, p)
    # no constant rate does better than the best schedule found
    for a in (0.0, p.mu, p.a_max):
        assert res.objective <= inv.schedule_objective(x, RateSchedule.constant(a, T), v, p) + 1e-9
    # interior switches sit where the switching function vanishes
    for s in res.schedule.switch_times:
        phi = np.interp(s, res.costate.times, res.costate.switching)
        assert abs(phi) < 1e-4


@pytest.mark.parametrize("x, T", [(30, 5.0), (-12, 3.0), (30, 9.0), (-20, 5.5)])
def test_bang_bang_obeys_sign_rule_away_from_singular_arc(reference_solution, x, T):
    _, v, _ = reference_solution
    p = InventoryParams()
    assert inv.clear_of_singular_arc(x, T, p)
    res = inv.solve_bang_bang(x, T, v, p)
    assert res.satisfies_necessary_conditions
    assert len(res.costate.times) >= 1000


def test_bang_bang_warns_near_singular_arc(reference_solution):
    _, v, _ = reference_solution
    p = InventoryParams()
    assert not inv.clear_of_singular_arc(5, 4.75, p)
    with pytest.warns(RuntimeWarning, match="sign rule"):
        res = inv.solve_bang_bang(5, 4.75, v, p)
    assert res.violations > 0 and res.warnings


def test_switching_law_flags_wrong_schedule(reference_solution):
    _, v, _ = reference_solution
    p = InventoryParams()
    sched = RateSchedule.constant(p.a_max, 5.0)  # far above target: rate should be 0
    traj = inv.costate_backward(30, sched, 5.0, v, p)
    violations, _ = inv.switching_law_violations(sched, traj, p)
    assert violations == len(traj.times)


def test_grid_objectives_match_pointwise(small_params, abs_values):
    model = inv.InventoryModel(small_params)
    v = abs_values(small_params).values
    grid = model.grid_objectives(v)
    lo = small_params.window[0]
    for k in (0, 7, len(model.states) - 1):
        x = lo + k
        for j in (0, 5, grid.shape[0] - 1):
            a, T = model.grid_points[j]
            assert grid[j, k] == pytest.approx(model.objective(a, T, x, v), rel=1e-12)


def test_optimize_stage_beats_grid_and_respects_bounds(small_params, abs_values):
    v = abs_values(small_params)
    model = inv.InventoryModel(small_params)
    for x in (-4, 2, 8, 14, 20):
        a, T, val = inv.optimize_stage(x, v, small_params)
        assert 0.0 <= a <= small_params.a_max and small_params.T_min <= T <= small_params.T_max
        assert val == pytest.approx(model.objective(a, T, x, v.values), rel=1e-12)
        grid = model.grid_objectives(v.values)[:, x - small_params.window[0]]
        assert val <= grid.min() + 1e-12


def test_reference_policy_shape(reference_solution):
    _, v, policy = reference_solution
    p = InventoryParams()
    a = dict(zip(policy.states, policy.actions))
    T = dict(zip(policy.states, policy.intervals))
    assert all(a[x] == p.a_max for x in range(-22, 3))
    assert all(a[x] == 0.0 for x in range(14, 39))
    assert T[8] == p.T_min
    # rates decrease through the target region
    seq = [a[x] for x in range(0, 14)]
    assert all(s >= t - 1e-9 for s, t in zip(seq, seq[1:]))
    assert v.iteration_count < 100


def test_small_solve_is_monotone_in_distance(small_solution):
    _, v, _ = small_solution
    # value far from target exceeds value at target on both sides
    assert v[v.window[0]] > v[8] and v[v.window[1]] > v[8]


def test_escape_mass_is_tail_beyond_window(small_params):
    model = inv.InventoryModel(small_params)
    from ctmdp.engine import StageChoice

    from scipy.stats import skellam

    lo, hi = small_params.window
    exact = skellam.cdf(lo - 1 - 8, 4.0, 4.0) + skellam.sf(hi - 8, 4.0, 4.0)
    # the row drops at most eps_kernel of mass, some of it from the tails
    assert model.escape_mass(8, StageChoice(2.0, 2.0, 0.0)) == pytest.approx(exact, abs=small_params.eps_kernel)
    assert model.escape_mass(small_params.window[1], StageChoice(5.0, 12.0, 0.0)) > 0.5


def test_params_roundtrip_dict():
    p = InventoryParams(kappa=3.0)
    assert InventoryParams(**p.to_dict()) == p
    assert dataclasses.replace(p, theta=5).window == (-25, 35)
