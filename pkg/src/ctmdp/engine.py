"""Value iteration for MDPs whose decision is (action, time to next observation).

A model supplies a working window of integer states and a per-state inner
optimizer ``stage_value(x, values)`` returning the best action, interval and
stage objective for the current value estimate. The engine iterates that map
to a fixed point and extracts the greedy policy.
"""

from __future__ import annotations

import abc
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MINIMIZE = "minimize"
MAXIMIZE = "maximize"


class ConvergenceError(RuntimeError):
    """Value iteration hit ``max_iter`` before the residual dropped below ``eps``."""

    def __init__(self, message: str, last_residual: float, values: "ValueTable"):
        super().__init__(message)
        self.last_residual = last_residual
        self.values = values


class StageOptimizationError(RuntimeError):
    """The inner (action, interval) optimizer failed at a state."""

    def __init__(self, state: int, reason: str):
        super().__init__(f"stage optimization failed at state {state}: {reason}")
        self.state = state


@dataclass(frozen=True)
class StageChoice:
    action: Any
    interval: float
    value: float


class ObservationMDP(abc.ABC):
    """Interface every observation-controlled model implements.

    Attributes:
        window: inclusive ``(lo, hi)`` range of working states.
        beta: discount base per unit time, in (0, 1).
        min_interval: smallest allowed time between observations.
        direction: ``"minimize"`` or ``"maximize"``.
    """

    window: tuple[int, int]
    beta: float
    min_interval: float
    direction: str = MINIMIZE
    kernel_eps: float = 0.0

    @abc.abstractmethod
    def stage_value(self, x: int, values: np.ndarray) -> StageChoice:
        """Optimize the stage objective at ``x`` given values on the window."""

    def escape_mass(self, x: int, choice: StageChoice) -> float:
        """Mass of the transition row from ``x`` that lands outside the window."""
        return 0.0

    def initial_values(self) -> np.ndarray:
        return np.zeros(self.n_states)

    @property
    def states(self) -> np.ndarray:
        lo, hi = self.window
        return np.arange(lo, hi + 1)

    @property
    def n_states(self) -> int:
        lo, hi = self.window
        return hi - lo + 1

    @property
    def contraction_factor(self) -> float:
        return self.beta**self.min_interval

    def validate(self) -> None:
        lo, hi = self.window
        if hi < lo:
            raise ValueError(f"empty state window {self.window}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"discount base must lie in (0, 1), got {self.beta}")
        if not self.min_interval > 0:
            raise ValueError("min_interval must be positive")
        if self.direction not in (MINIMIZE, MAXIMIZE):
            raise ValueError(f"unknown direction {self.direction!r}")


@dataclass
class ValueTable:
    window: tuple[int, int]
    values: np.ndarray
    iteration_count: int = 0
    residual_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        lo, hi = self.window
        if len(self.values) != hi - lo + 1:
            raise ValueError(
                f"window {self.window} holds {hi - lo + 1} states, got {len(self.values)} values"
            )

    def __getitem__(self, x: int) -> float:
        return float(self.values[x - self.window[0]])

    @property
    def states(self) -> np.ndarray:
        return np.arange(self.window[0], self.window[1] + 1)

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values))) if len(self.values) else 0.0

    @classmethod
    def zeros(cls, window: tuple[int, int]) -> "ValueTable":
        return cls(window, np.zeros(window[1] - window[0] + 1))


@dataclass
class StagePolicy:
    """Per-state greedy decision: ``actions[i]``, ``intervals[i]`` for ``window[0] + i``."""

    window: tuple[int, int]
    actions: list
    intervals: np.ndarray
    objectives: np.ndarray
    tie_break: str = "smallest T, then smallest a"

    def __post_init__(self):
        self.intervals = np.asarray(self.intervals, dtype=float)
        self.objectives = np.asarray(self.objectives, dtype=float)

    @property
    def states(self) -> np.ndarray:
        return np.arange(self.window[0], self.window[1] + 1)

    def lookup(self, x: int) -> tuple[Any, float]:
        """Decision for ``x``; states outside the window use the nearest edge."""
        i = min(max(x, self.window[0]), self.window[1]) - self.window[0]
        return self.actions[i], float(self.intervals[i])

    def covers(self, x: int) -> bool:
        return self.window[0] <= x <= self.window[1]


def to_json(v: ValueTable, policy: StagePolicy | None = None) -> dict:
    """Serialize to ``{"window": [lo, hi], "values": [...], "policy": [...]}``."""
    out = {
        "window": [int(v.window[0]), int(v.window[1])],
        "values": [float(x) for x in v.values],
        "iteration_count": int(v.iteration_count),
        "residual_history": [float(r) for r in v.residual_history],
    }
    if policy is not None:
        out["policy"] = [
            {"x": int(x), "a": _action_to_json(a), "T": float(t)}
            for x, a, t in zip(policy.states, policy.actions, policy.intervals)
        ]
    return out


def _action_to_json(a):
    if hasattr(a, "to_json"):
        return a.to_json()
    return float(a)


def from_json(data: dict) -> tuple[ValueTable, StagePolicy | None]:
    window = (int(data["window"][0]), int(data["window"][1]))
    table = ValueTable(
        window,
        np.array(data["values"], dtype=float),
        int(data.get("iteration_count", 0)),
        list(data.get("residual_history", [])),
    )
    policy = None
    if "policy" in data:
        rows = sorted(data["policy"], key=lambda r: r["x"])
        if [r["x"] for r in rows] != list(range(window[0], window[1] + 1)):
            raise ValueError("policy rows must cover the value window exactly")
        policy = StagePolicy(
            window,
            [r["a"] for r in rows],
            [r["T"] for r in rows],
            np.array(data["values"], dtype=float),
        )
    return table, policy


def dumps(v: ValueTable, policy: StagePolicy | None = None) -> str:
    return json.dumps(to_json(v, policy), indent=1)


def _stage_choices(
    model: ObservationMDP, values: np.ndarray, threads: int = 1
) -> list[StageChoice]:
    states = [int(x) for x in model.states]

    def solve(x):
        try:
            choice = model.stage_value(x, values)
        except StageOptimizationError:
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the state attached
            raise StageOptimizationError(x, repr(exc)) from exc
        if not math.isfinite(choice.value):
            raise StageOptimizationError(x, f"non-finite stage value {choice.value}")
        return choice

    if threads > 1:
        # map() preserves input order, so assembly is independent of scheduling
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(solve, states))
    return [solve(x) for x in states]


def bellman_update(model: ObservationMDP, v: ValueTable, threads: int = 1) -> ValueTable:
    """One application of the DP operator on the model's window."""
    if tuple(v.window) != tuple(model.window):
        raise ValueError(f"value window {v.window} does not match model window {model.window}")
    choices = _stage_choices(model, v.values, threads)
    return ValueTable(model.window, np.array([c.value for c in choices]))


def extract_policy(model: ObservationMDP, v_star: ValueTable, threads: int = 1) -> StagePolicy:
    choices = _stage_choices(model, v_star.values, threads)
    return StagePolicy(
        model.window,
        [c.action for c in choices],
        [c.interval for c in choices],
        [c.value for c in choices],
    )


def value_iteration(
    model: ObservationMDP,
    v0: ValueTable | None = None,
    eps: float = 1e-6,
    max_iter: int = 1000,
    threads: int = 1,
) -> tuple[ValueTable, StagePolicy]:
    """Iterate the Bellman operator until the sup-norm step is at most ``eps``.

    Raises:
        ConvergenceError: after ``max_iter`` updates without convergence. The
            exception carries the last residual and the current table.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    model.validate()
    if v0 is None:
        v0 = ValueTable(model.window, model.initial_values())
    values = np.array(v0.values, dtype=float)
    history: list[float] = []
    for k in range(1, max_iter + 1):
        choices = _stage_choices(model, values, threads)
        new = np.array([c.value for c in choices])
        residual = float(np.max(np.abs(new - values)))
        history.append(residual)
        values = new
        logger.debug("iteration %d residual %.3e", k, residual)
        if residual <= eps:
            table = ValueTable(model.window, values, k, history)
            return table, extract_policy(model, table, threads)
    table = ValueTable(model.window, values, max_iter, history)
    raise ConvergenceError(
        f"no convergence after {max_iter} iterations (residual {history[-1]:.3e})",
        history[-1],
        table,
    )


def residual_ratios(history: Sequence[float]) -> np.ndarray:
    h = np.asarray(history, dtype=float)
    if len(h) < 2:
        return np.array([])
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(h[:-1] > 0, h[1:] / h[:-1], 0.0)


def truncation_error_bound(model: ObservationMDP, v: ValueTable) -> float:
    """Bound on the value error caused by kernel truncation and window clamping.

    Per stage, dropped kernel mass costs at most ``eps * sup|v|`` and mass
    clamped to a window edge at most ``2 * sup|v|`` per unit of escaped mass
    (the clamping term assumes the true values off-window stay within
    ``sup|v|`` of the edge value's magnitude). Errors compound geometrically
    with ratio ``beta ** min_interval``.
    """
    sup = v.sup_norm()
    if sup == 0.0:
        return 0.0
    choices = _stage_choices(model, v.values)
    escape = max(model.escape_mass(int(x), c) for x, c in zip(model.states, choices))
    per_stage = model.kernel_eps * sup + 2.0 * escape * sup
    return per_stage / (1.0 - model.contraction_factor)


def geometric_bound(missing_mass: float, sup_value: float, contraction: float) -> float:
    """``missing_mass * sup_value / (1 - contraction)``."""
    return missing_mass * sup_value / (1.0 - contraction)
