import csv
import io
import json
import math

import numpy as np
import pytest
from scipy import stats

from ctmdp import simulator
from ctmdp.engine import StagePolicy
from ctmdp.inventory import InventoryParams, RateSchedule


def constant_policy(p, a, T):
    lo, hi = p.window
    n = hi - lo + 1
    return StagePolicy(p.window, [a] * n, np.full(n, T), np.zeros(n))


def test_deterministic_path_cost_is_exact():
    # no arrivals, no demand: the state never moves
    p = InventoryParams(mu=0.0, window_margin=5)
    pol = constant_policy(p, 0.0, 2.5)
    tr = simulator.simulate_inventory(12, pol, 10.0, 0, p)
    lb = math.log(p.beta)
    running = 16.0 * (p.beta**10 - 1) / lb
    obs = sum(p.beta ** (2.5 * k) * (-p.kappa * 2.5) for k in range(4))
    assert tr.discounted_cost == pytest.approx(running + obs, rel=1e-13)
    assert len(tr.event_times) == 0
    assert [o.time for o in tr.observations] == [0.0, 2.5, 5.0, 7.5]


def test_acceleration_cost_is_charged():
    p = InventoryParams(mu=0.0, window_margin=400)
    pol = constant_policy(p, 3.0, 4.0)
    tr = simulator.simulate_inventory(8, pol, 8.0, 1, p)
    lb = math.log(p.beta)
    assert tr.running_cost >= p.nu * 3.0 * (p.beta**8 - 1) / lb
    assert tr.mean_rate_fraction == pytest.approx(3.0 / 5.0)


def test_thinning_follows_schedule():
    # rate a_max on the first unit of every 3-unit stage, zero afterwards
    p = InventoryParams(mu=0.0, window_margin=2000)
    sched = RateSchedule.from_switches(p.a_max, 0.0, [1.0], 3.0)
    lo, hi = p.window
    n = hi - lo + 1
    pol = StagePolicy(p.window, [sched] * n, np.full(n, 3.0), np.zeros(n))
    tr = simulator.simulate_inventory(8, pol, 600.0, 4, p)
    phase = np.mod(tr.event_times, 3.0)
    assert np.all(phase < 1.0)
    assert np.all(tr.event_kinds == 1)
    # arrival phases uniform on [0, 1); count Poisson(a_max * 200)
    assert stats.kstest(phase, "uniform").pvalue > 1e-3
    assert abs(len(phase) - 1000) < 5 * math.sqrt(1000)
    assert tr.accepted == len(phase) and tr.candidates > tr.accepted


def test_departures_are_poisson():
    p = InventoryParams(window_margin=4000)
    pol = constant_policy(p, 0.0, 12.0)
    tr = simulator.simulate_inventory(0, pol, 1200.0, 8, p)
    gaps = np.diff(np.concatenate([[0.0], tr.event_times]))
    assert np.all(tr.event_kinds == -1)
    assert stats.kstest(gaps, "expon", args=(0, 1 / p.mu)).pvalue > 1e-3
    assert np.array_equal(tr.event_states, -np.arange(1, len(gaps) + 1))


def test_same_seed_same_trace(small_solution, small_params):
    _, _, pol = small_solution
    a = simulator.simulate_inventory(14, pol, 30.0, 11, small_params)
    b = simulator.simulate_inventory(14, pol, 30.0, 11, small_params)
    assert a.to_csv() == b.to_csv()
    c = simulator.simulate_inventory(14, pol, 30.0, 12, small_params)
    assert a.to_csv() != c.to_csv()


def test_rollout_streams_are_stable_under_more_rollouts():
    first = simulator.rollout_rng(5, 3).random(4)
    again = simulator.rollout_rng(5, 3).random(4)
    other = simulator.rollout_rng(5, 4).random(4)
    assert np.array_equal(first, again) and not np.array_equal(first, other)


def test_trace_csv_round_trip(small_solution, small_params):
    _, _, pol = small_solution
    tr = simulator.simulate_inventory(3, pol, 20.0, 2, small_params)
    rows = list(csv.DictReader(io.StringIO(tr.to_csv())))
    assert rows[0]["kind"] == "observation"
    times = [float(r["time"]) for r in rows]
    assert times == sorted(times)
    jumps = [r for r in rows if r["kind"] != "observation"]
    assert np.array_equal([float(r["time"]) for r in jumps], tr.event_times)
    assert [int(r["state"]) for r in jumps] == tr.event_states.tolist()
    obs = [r for r in rows if r["kind"] == "observation"]
    assert [float(r["interval"]) for r in obs] == [o.interval for o in tr.observations]


def test_trace_from_sixteen_starts_idle(reference_solution, reference_params):
    _, _, pol = reference_solution
    tr = simulator.simulate_inventory(16, pol, 60.0, 2024, reference_params)
    first = tr.observations[0]
    assert first.action == 0.0
    assert first.interval == pytest.approx(4.13, abs=1.0)
    assert tr.observations[1].time == pytest.approx(first.interval)


def test_rejects_bad_horizon(small_solution, small_params):
    _, _, pol = small_solution
    with pytest.raises(ValueError):
        simulator.simulate_inventory(0, pol, 0.0, 1, small_params)
    with pytest.raises(ValueError):
        simulator.estimate_value(0, pol, 1, 10.0, 1, small_params)


def test_estimate_close_to_value(reference_solution, reference_params):
    _, v, pol = reference_solution
    est = simulator.estimate_value(10, pol, 2000, 60.0, 99, reference_params)
    assert abs(est.mean - v[10]) <= 3 * est.std_error + est.truncation_bound
    doc = json.loads(est.to_json())
    assert doc["n_rollouts"] == 2000 and doc["x0"] == 10
    assert 0 < est.truncation_bound < 0.1
