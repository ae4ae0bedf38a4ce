"""Monte-Carlo rollouts of the inventory process under a solved policy.

Demand departures are homogeneous Poisson(``mu``). Arrivals are generated by
thinning: candidates at the bound rate ``a_max`` are kept with probability
``a(t) / a_max``. Between jumps the state is constant, so the discounted
deviation cost is integrated exactly piece by piece.

Random streams: rollout ``i`` of a run seeded with ``seed`` draws from
``numpy.random.SeedSequence(seed, spawn_key=(i,))``. The derivation hashes
the index, so adding rollouts never changes earlier ones.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import StagePolicy
from .inventory import InventoryParams, RateSchedule, running_coefficients
from . import kernels

ARRIVAL, DEPARTURE, OBSERVATION = "arrival", "departure", "observation"


@dataclass
class Observation:
    time: float
    state: int
    action: object
    interval: float


@dataclass
class SimTrace:
    """One simulated path.

    ``event_times``/``event_kinds``/``event_states`` list jumps in time order
    (kind +1 arrival, -1 departure) with the state just after each jump.
    """

    x0: int
    seed: int
    horizon: float
    observations: list[Observation] = field(default_factory=list)
    event_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    event_kinds: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    event_states: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    discounted_cost: float = 0.0
    running_cost: float = 0.0
    observation_cost: float = 0.0
    candidates: int = 0
    accepted: int = 0
    mean_rate_fraction: float = 0.0  # time average of a(t) / a_max

    def rows(self):
        """Merged event and observation rows ``(time, kind, state, action, interval)``."""
        out = []
        for ob in self.observations:
            out.append((ob.time, OBSERVATION, ob.state, _rate_label(ob.action), ob.interval))
        obs_times = np.array([ob.time for ob in self.observations])
        for t, k, s in zip(self.event_times, self.event_kinds, self.event_states):
            i = int(np.searchsorted(obs_times, t, side="right")) - 1
            ob = self.observations[i]
            rate = _rate_at(ob.action, t - ob.time)
            out.append((float(t), ARRIVAL if k > 0 else DEPARTURE, int(s), rate, ""))
        # observations sort before jumps at equal times
        out.sort(key=lambda r: (r[0], r[1] != OBSERVATION))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "kind", "state", "action", "interval"])
        for t, kind, state, action, interval in self.rows():
            w.writerow([repr(float(t)), kind, state, _fmt(action), _fmt(interval)])
        return buf.getvalue()


def _fmt(v):
    if v == "" or v is None:
        return ""
    return repr(float(v))


def _rate_label(action) -> float:
    return _rate_at(action, 0.0)


def _rate_at(action, s: float) -> float:
    if isinstance(action, RateSchedule):
        return action.rate(s)
    if isinstance(action, dict):
        return RateSchedule(tuple(action["breakpoints"]), tuple(action["levels"])).rate(s)
    return float(action)


def _as_schedule(action, T: float) -> RateSchedule:
    if isinstance(action, RateSchedule):
        return action
    if isinstance(action, dict):
        return RateSchedule(tuple(action["breakpoints"]), tuple(action["levels"]))
    return RateSchedule.constant(float(action), T)


def rollout_rng(seed: int, index: int | None = None) -> np.random.Generator:
    if index is None:
        return np.random.default_rng(np.random.SeedSequence(seed))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _discounted_span(t0, t1, log_b):
    """Integral of ``beta**t`` over each ``[t0, t1]`` (arrays allowed)."""
    return np.exp(t0 * log_b) * np.expm1((t1 - t0) * log_b) / log_b


def simulate_inventory(
    x0: int,
    policy: StagePolicy,
    horizon: float,
    seed: int,
    p: InventoryParams,
    rng: np.random.Generator | None = None,
    record_events: bool = True,
) -> SimTrace:
    """Simulate one path on ``[0, horizon]`` following ``policy`` at each observation."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    rng = rollout_rng(seed) if rng is None else rng
    log_b = math.log(p.beta)
    trace = SimTrace(x0=int(x0), seed=int(seed), horizon=float(horizon))
    times_acc, kinds_acc, states_acc = [], [], []
    t, x = 0.0, int(x0)
    running = obs_cost = 0.0
    rate_time = 0.0
    while t < horizon:
        action, T = policy.lookup(x)
        trace.observations.append(Observation(t, x, action, T))
        obs_cost += p.beta**t * p.observation_cost(T)
        end = min(t + T, horizon)
        L = end - t
        sched = _as_schedule(action, T)
        # acceleration cost, exact per constant-rate piece (absolute time t + s)
        for s0, s1, level, _ in sched.segments():
            s1 = min(s1, L)
            if s1 <= s0 or level == 0.0:
                continue
            running += p.nu * level * float(_discounted_span(t + s0, t + s1, log_b))
            rate_time += level * (s1 - s0)
        # arrivals by thinning against a_max
        n_cand = rng.poisson(p.a_max * L)
        cand = np.sort(rng.uniform(0.0, L, n_cand))
        u = rng.uniform(0.0, 1.0, n_cand)
        rates = np.array([sched.rate(s) for s in cand]) if len(sched.levels) > 1 else np.full(n_cand, sched.levels[0])
        arr = cand[u * p.a_max < rates]
        trace.candidates += int(n_cand)
        trace.accepted += len(arr)
        dep = rng.uniform(0.0, L, rng.poisson(p.mu * L))
        ev_t = np.concatenate([arr, dep])
        ev_k = np.concatenate([np.ones(len(arr), dtype=int), -np.ones(len(dep), dtype=int)])
        order = np.argsort(ev_t, kind="stable")
        ev_t, ev_k = ev_t[order], ev_k[order]
        states = x + np.cumsum(ev_k)
        # piecewise-constant state between jumps
        edges = np.concatenate([[0.0], ev_t, [L]]) + t
        levels = np.concatenate([[x], states]) - p.theta
        running += float(np.sum(levels.astype(float) ** 2 * _discounted_span(edges[:-1], edges[1:], log_b)))
        if record_events:
            times_acc.append(ev_t + t)
            kinds_acc.append(ev_k)
            states_acc.append(states)
        if len(states):
            x = int(states[-1])
        t = t + T
    if record_events and times_acc:
        trace.event_times = np.concatenate(times_acc)
        trace.event_kinds = np.concatenate(kinds_acc)
        trace.event_states = np.concatenate(states_acc)
    trace.running_cost = running
    trace.observation_cost = obs_cost
    trace.discounted_cost = running + obs_cost
    trace.mean_rate_fraction = rate_time / (p.a_max * horizon)
    return trace


@dataclass
class RolloutEstimate:
    mean: float
    std_error: float
    n_rollouts: int
    horizon: float
    truncation_bound: float
    x0: int | None = None
    seed: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def stage_cost_bound(policy: StagePolicy, p: InventoryParams) -> float:
    """Largest absolute one-stage cost over the policy's window."""
    worst = 0.0
    for x, action, T in zip(policy.states, policy.actions, policy.intervals):
        sched = _as_schedule(action, T)
        if len(sched.levels) == 1:
            dk = kernels.discount_integrals(T, p.beta)
            c0, c1, c2 = running_coefficients(sched.levels[0], float(x), p)
            run = c0 * dk.dK0 + c1 * dk.dK1 + c2 * dk.dK2
        else:
            from .inventory import schedule_running_cost

            run = schedule_running_cost(int(x), sched, p)
        worst = max(worst, abs(run) + abs(p.observation_cost(T)))
    return worst


def estimate_value(
    x0: int,
    policy: StagePolicy,
    n_rollouts: int,
    horizon: float,
    seed: int,
    p: InventoryParams,
) -> RolloutEstimate:
    """Mean and standard error of the discounted rollout cost from ``x0``.

    ``truncation_bound`` bounds the cost beyond ``horizon``:
    ``beta**horizon * B / (1 - beta**T_min)`` with ``B`` the largest one-stage
    cost magnitude over the policy window.
    """
    if n_rollouts < 2:
        raise ValueError("need at least two rollouts")
    costs = np.array(
        [
            simulate_inventory(x0, policy, horizon, seed, p, rng=rollout_rng(seed, i), record_events=False).discounted_cost
            for i in range(n_rollouts)
        ]
    )
    mean = float(np.sum(costs) / n_rollouts)
    se = float(np.std(costs, ddof=1) / math.sqrt(n_rollouts))
    bound = p.beta**horizon * stage_cost_bound(policy, p) / (1.0 - p.beta**p.T_min)
    return RolloutEstimate(mean, se, n_rollouts, float(horizon), bound, int(x0), int(seed))
