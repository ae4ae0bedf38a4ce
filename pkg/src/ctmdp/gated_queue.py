"""Gated polling queue with controlled server speed and gate-opening times.

Customers arriving during an observation period wait in an outer room until
the gate opens; the ``x`` customers admitted at the previous opening are
served FCFS at speed ``a``. The per-period cost separates into a speed part
``(x**2 + x) / (2a) + eta * a`` and an interval part ``lam * T**2 / 2``, and
the next state is Poisson(``lam * T``) whatever the speed. Optimizing the
speed in closed form leaves a scalar fixed point for the interval.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import gammaincc

from . import kernels
from .engine import ObservationMDP, StageChoice
from .search import coordinate_golden, golden_section

G_INVERSE = "inverse"  # g(T) = g_coef / T
G_LINEAR = "linear"  # g(T) = -g_coef * T


@dataclass(frozen=True)
class QueueParams:
    lam: float = 1.0
    eta: float = 1.0
    beta: float = 0.8
    T_min: float = 0.5
    T_max: float = 5.0
    g_kind: str = G_INVERSE
    g_coef: float = 1.0
    n_trunc: int | None = None
    eps_trunc: float = 1e-10
    grid_T: int = 201
    refine_tol: float = 1e-9
    eps_fp: float = 1e-10
    max_iter: int = 2000

    def __post_init__(self):
        problems = []
        if not self.lam > 0:
            problems.append("lam must be > 0")
        if not self.eta > 0:
            problems.append("eta must be > 0")
        if not 0 < self.beta < 1:
            problems.append("beta must lie in (0, 1)")
        if not 0 < self.T_min <= self.T_max:
            problems.append("need 0 < T_min <= T_max")
        if self.g_kind not in (G_INVERSE, G_LINEAR):
            problems.append(f"g_kind must be {G_INVERSE!r} or {G_LINEAR!r}")
        if self.n_trunc is not None and self.n_trunc < 0:
            problems.append("n_trunc must be >= 0")
        if self.grid_T < 2:
            problems.append("grid_T must be >= 2")
        if problems:
            raise ValueError("; ".join(problems))

    def observation_cost(self, T: float) -> float:
        if self.g_kind == G_INVERSE:
            return self.g_coef / T
        return -self.g_coef * T

    def truncation(self, T: float) -> int:
        if self.n_trunc is not None:
            return self.n_trunc
        return kernels.poisson_cutoff(self.lam * T, self.eps_trunc)

    @property
    def state_bound(self) -> int:
        """Largest state with non-negligible probability after the longest interval."""
        return kernels.poisson_cutoff(self.lam * self.T_max, 1e-9) + 1

    def to_dict(self) -> dict:
        return asdict(self)


def optimal_speed(x: int, eta: float) -> float:
    """Server speed minimizing ``(x**2 + x) / (2a) + eta * a``."""
    if x < 0 or eta <= 0:
        raise ValueError("need x >= 0 and eta > 0")
    return math.sqrt(x * (x + 1) / (2.0 * eta))


def optimal_speed_cost(x: int, eta: float) -> float:
    """Minimal speed cost ``sqrt(2 eta x (x + 1))``."""
    if x < 0 or eta <= 0:
        raise ValueError("need x >= 0 and eta > 0")
    return math.sqrt(2.0 * eta * x * (x + 1))


def speed_cost(x: int, a: float, eta: float) -> float:
    """Inner-room waiting plus speed cost at speed ``a``."""
    if x == 0:
        return eta * a
    if a <= 0:
        return math.inf
    return (x * x + x) / (2.0 * a) + eta * a


def expected_cycle_waiting_cost(x: int, a: float, T: float, p: QueueParams) -> float:
    """Expected total waiting in one period: outer room plus inner room."""
    if x < 0 or T < 0:
        raise ValueError("need x >= 0 and T >= 0")
    if x > 0 and a <= 0:
        raise ValueError(f"speed must be positive with {x} customers waiting")
    inner = (x * x + x) / (2.0 * a) if x > 0 else 0.0
    return p.lam * T * T / 2.0 + inner


def epoch_objective(T: float, W: float, p: QueueParams) -> float:
    """Interval objective with next-state values ``r*(k) + W``."""
    K = p.truncation(T)
    pmf = kernels.poisson_pmf_vector(p.lam * T, K)
    r_star = np.sqrt(2.0 * p.eta * np.arange(K + 1) * np.arange(1, K + 2))
    future = float(pmf @ r_star) + W * float(pmf.sum())
    return p.lam * T * T / 2.0 + p.observation_cost(T) + p.beta**T * future


def _minimize_interval(f, p: QueueParams) -> tuple[float, float]:
    grid = np.linspace(p.T_min, p.T_max, p.grid_T)
    vals = np.array([f(T) for T in grid])
    j = int(np.argmin(vals))
    lo = grid[max(j - 1, 0)]
    hi = grid[min(j + 1, len(grid) - 1)]
    T, val = golden_section(f, lo, hi, tol=p.refine_tol)
    if vals[j] <= val:
        T, val = float(grid[j]), float(vals[j])
    return T, val


@dataclass
class EpochSolution:
    W: float
    T: float
    residuals: list[float] = field(default_factory=list)


class FixedPointError(RuntimeError):
    def __init__(self, message: str, last_residual: float, residuals: list[float] | None = None):
        super().__init__(message)
        self.last_residual = last_residual
        self.residuals = list(residuals or [])


def solve_epoch_fixed_point(p: QueueParams, eps: float | None = None, max_iter: int | None = None) -> EpochSolution:
    """Iterate ``W <- min_T epoch_objective(T, W)`` to its fixed point.

    The map is a contraction in ``W`` with factor at most ``beta ** T_min``.
    """
    eps = p.eps_fp if eps is None else eps
    max_iter = p.max_iter if max_iter is None else max_iter
    if eps <= 0:
        raise ValueError("eps must be positive")
    W, residuals = 0.0, []
    for _ in range(max_iter):
        T, W_new = _minimize_interval(lambda t: epoch_objective(t, W, p), p)
        residuals.append(abs(W_new - W))
        W = W_new
        if residuals[-1] <= eps:
            return EpochSolution(W, T, residuals)
    raise FixedPointError(f"no fixed point after {max_iter} iterations", residuals[-1], residuals)


def value(x: int, p: QueueParams, W_star: float) -> float:
    return optimal_speed_cost(x, p.eta) + W_star


def service_overrun_probability(x: int, p: QueueParams) -> float:
    """P(serving ``x`` customers at the optimal speed takes longer than ``T_min``).

    Uses exponential service times, so the total is Gamma(x, a*).
    """
    if x == 0:
        return 0.0
    return float(gammaincc(x, optimal_speed(x, p.eta) * p.T_min))


class GatedQueueModel(ObservationMDP):
    """The queue posed to the generic engine: joint search over speed and interval.

    Nothing here uses the separable structure; it exists to cross-check the
    closed forms and the scalar fixed point.
    """

    def __init__(
        self,
        p: QueueParams | None = None,
        n_states: int | None = None,
        a_max: float | None = None,
        grid_a: int = 41,
        search_tol: float = 1e-6,
    ):
        self.p = p or QueueParams()
        self.search_tol = search_tol
        n = n_states if n_states is not None else self.p.state_bound + 1
        self.window = (0, n - 1)
        self.beta = self.p.beta
        self.min_interval = self.p.T_min
        self.kernel_eps = self.p.eps_trunc
        self.a_max = a_max if a_max is not None else 1.5 * optimal_speed(n - 1, self.p.eta) + 1.0
        self.a_grid = np.linspace(0.0, self.a_max, grid_a)
        self.T_grid = np.linspace(self.p.T_min, self.p.T_max, self.p.grid_T)
        self._cache_key = None
        self._cache_h = None
        self.validate()

    def interval_part(self, T: float, values: np.ndarray) -> float:
        p = self.p
        K = p.truncation(T)
        pmf = kernels.poisson_pmf_vector(p.lam * T, K)
        idx = np.minimum(np.arange(K + 1), len(values) - 1)
        return p.lam * T * T / 2.0 + p.observation_cost(T) + p.beta**T * float(pmf @ values[idx])

    def objective(self, a: float, T: float, x: int, values: np.ndarray) -> float:
        return speed_cost(x, a, self.p.eta) + self.interval_part(T, values)

    def stage_value(self, x: int, values: np.ndarray) -> StageChoice:
        f = lambda a, T: self.objective(a, T, x, values)  # noqa: E731
        key = values.tobytes()
        if self._cache_key != key:
            self._cache_h = np.array([self.interval_part(T, values) for T in self.T_grid])
            self._cache_key = key
        # the objective is a sum of a speed term and an interval term, so the
        # grid is filled by broadcasting; the search below is still joint
        c = np.array([speed_cost(x, a, self.p.eta) for a in self.a_grid])
        grid = self._cache_h[:, None] + c[None, :]
        j, i = np.unravel_index(int(np.argmin(grid)), grid.shape)
        da = self.a_grid[1] - self.a_grid[0]
        dT = self.T_grid[1] - self.T_grid[0]
        a0, T0 = float(self.a_grid[i]), float(self.T_grid[j])
        box_a = (max(0.0, a0 - da), min(self.a_max, a0 + da))
        box_T = (max(self.p.T_min, T0 - dT), min(self.p.T_max, T0 + dT))
        a1, T1, val = coordinate_golden(f, (a0, T0), box_a, box_T, tol=self.search_tol)
        if grid[j, i] < val:
            a1, T1, val = a0, T0, float(grid[j, i])
        return StageChoice(a1, T1, val)

    def two_step_value(self, x: int, values: np.ndarray) -> tuple[float, float]:
        """Speed optimized in closed form, then the interval: ``(value, T)``."""
        T, h = _minimize_interval(lambda t: self.interval_part(t, values), self.p)
        return optimal_speed_cost(x, self.p.eta) + h, T

    def escape_mass(self, x: int, choice: StageChoice) -> float:
        mean = self.p.lam * choice.interval
        return float(1.0 - kernels.poisson_pmf_vector(mean, self.window[1]).sum())


def simulate_gated_cycles(x_prev: int, a: float, T: float, n: int, rng: np.random.Generator, p: QueueParams):
    """Simulate ``n`` independent periods; returns ``(waiting_sums, new_arrivals)``.

    New arrivals are Poisson(``lam * T``) with uniform arrival times and wait
    until the gate opens at ``T``. The ``x_prev`` admitted customers are served
    FCFS with exponential service of mean ``1 / a``; each waits for its own
    service and all earlier ones.
    """
    if x_prev > 0 and a <= 0:
        raise ValueError("speed must be positive when customers are waiting")
    counts = rng.poisson(p.lam * T, size=n)
    arrivals = rng.uniform(0.0, T, size=int(counts.sum()))
    owner = np.repeat(np.arange(n), counts)
    outer = np.bincount(owner, weights=T - arrivals, minlength=n)
    inner = np.zeros(n)
    if x_prev > 0:
        service = rng.exponential(1.0 / a, size=(n, x_prev))
        # customer i waits for services 1..i, so service j counts (x - j) times
        weights = np.arange(x_prev, 0, -1, dtype=float)
        inner = service @ weights
    return outer + inner, counts


def simulate_gated_cycle(x_prev: int, a: float, T: float, seed: int, p: QueueParams) -> tuple[float, int]:
    sums, counts = simulate_gated_cycles(x_prev, a, T, 1, np.random.default_rng(seed), p)
    return float(sums[0]), int(counts[0])
