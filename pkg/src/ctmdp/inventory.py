"""Inventory control with a controlled Poisson arrival rate and costly observations.

Inventory moves up with arrivals (rate ``a(t)`` chosen by the controller,
``0 <= a(t) <= a_max``) and down with Poisson(``mu``) demand, backlogging
freely below zero. Between observations the controller pays
``(X(t) - theta)**2 + nu * a(t)`` per unit time, discounted by ``beta**t``,
and each observation interval ``T`` earns ``g(T) = -kappa * T``.
"""

from __future__ import annotations

import itertools
import math
import threading
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .engine import ObservationMDP, StageChoice, StageOptimizationError, ValueTable
from .search import coordinate_golden, golden_section


@dataclass(frozen=True)
class InventoryParams:
    """Inventory case-study parameters; defaults are the reference experiment."""

    theta: int = 8
    mu: float = 2.0
    nu: float = 2.0
    kappa: float = 5.0
    beta: float = 0.8
    a_max: float = 5.0
    T_min: float = 2.0
    T_max: float = 12.0
    eps_kernel: float = 1e-9
    eps_vi: float = 1e-6
    window_margin: int = 30
    grid_a: int = 41
    grid_T: int = 41
    refine_tol: float = 1e-6

    def __post_init__(self):
        problems = []
        if self.mu < 0:
            problems.append("mu must be >= 0")
        if self.nu < 0:
            problems.append("nu must be >= 0")
        if self.kappa < 0:
            problems.append("kappa must be >= 0")
        if not 0 < self.beta < 1:
            problems.append("beta must lie in (0, 1)")
        if not 0 < self.T_min <= self.T_max:
            problems.append("need 0 < T_min <= T_max")
        if not self.a_max > 0:
            problems.append("a_max must be > 0")
        if not 0 < self.eps_kernel < 1:
            problems.append("eps_kernel must lie in (0, 1)")
        if not self.eps_vi > 0:
            problems.append("eps_vi must be > 0")
        if self.window_margin < 0:
            problems.append("window_margin must be >= 0")
        if self.grid_a < 2 or self.grid_T < 2:
            problems.append("grid sizes must be >= 2")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def window(self) -> tuple[int, int]:
        return (self.theta - self.window_margin, self.theta + self.window_margin)

    def observation_cost(self, T: float) -> float:
        return -self.kappa * T

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RateSchedule:
    """Piecewise-constant arrival rate on ``[0, breakpoints[-1]]``.

    ``levels[i]`` applies on ``[breakpoints[i], breakpoints[i+1])``.
    """

    breakpoints: tuple[float, ...]
    levels: tuple[float, ...]

    def __post_init__(self):
        if len(self.breakpoints) != len(self.levels) + 1:
            raise ValueError("need one more breakpoint than levels")
        if self.breakpoints[0] != 0.0:
            raise ValueError("schedule must start at t = 0")
        if any(b < a for a, b in zip(self.breakpoints, self.breakpoints[1:])):
            raise ValueError("breakpoints must be nondecreasing")
        if any(lv < 0 for lv in self.levels):
            raise ValueError("rates must be nonnegative")

    @classmethod
    def constant(cls, rate: float, horizon: float) -> "RateSchedule":
        return cls((0.0, float(horizon)), (float(rate),))

    @classmethod
    def from_switches(cls, first_level: float, other_level: float, switches, horizon: float):
        """Alternate between two levels, switching at the given times."""
        pts = [0.0] + [min(max(float(s), 0.0), horizon) for s in switches] + [float(horizon)]
        levels = [first_level if i % 2 == 0 else other_level for i in range(len(pts) - 1)]
        return cls(tuple(pts), tuple(levels)).simplified()

    @property
    def horizon(self) -> float:
        return self.breakpoints[-1]

    @property
    def switch_times(self) -> tuple[float, ...]:
        return self.breakpoints[1:-1]

    def simplified(self) -> "RateSchedule":
        """Drop zero-length pieces and merge equal neighbouring levels."""
        pts, lv = [0.0], []
        for a, b, level in zip(self.breakpoints, self.breakpoints[1:], self.levels):
            if b <= a:
                continue
            if lv and lv[-1] == level:
                pts[-1] = b
            else:
                lv.append(level)
                pts.append(b)
        if not lv:
            lv = [self.levels[0]]
            pts.append(self.horizon)
        return RateSchedule(tuple(pts), tuple(lv))

    def rate(self, t: float) -> float:
        i = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
        return self.levels[min(max(i, 0), len(self.levels) - 1)]

    def cumulative(self, t: float) -> float:
        """Integrated rate ``a_bar(t)`` (the arrival mass up to ``t``)."""
        total = 0.0
        for a, b, level in zip(self.breakpoints, self.breakpoints[1:], self.levels):
            if t <= a:
                break
            total += level * (min(t, b) - a)
        return total

    def segments(self):
        """Yield ``(t_start, t_end, level, cumulative at t_start)``."""
        y = 0.0
        for a, b, level in zip(self.breakpoints, self.breakpoints[1:], self.levels):
            yield a, b, level, y
            y += level * (b - a)

    def to_json(self) -> dict:
        return {"breakpoints": list(self.breakpoints), "levels": list(self.levels)}


def deviation_cost(x: int, t: float, sched, p: InventoryParams) -> float:
    """Expected ``(X(t) - theta)**2`` given ``X(0) = x``.

    ``sched`` is a :class:`RateSchedule` or a constant rate.
    """
    y = sched.cumulative(t) if isinstance(sched, RateSchedule) else float(sched) * t
    return (x - p.theta + y - p.mu * t) ** 2 + (y + p.mu * t)


def running_coefficients(a, x, p: InventoryParams):
    """Weights of ``dK0, dK1, dK2`` in the constant-rate running cost.

    Works elementwise on arrays of ``a`` and ``x``.
    """
    dev = x - p.theta
    c0 = dev**2 + p.nu * a
    c1 = 2.0 * dev * (a - p.mu) + a + p.mu
    c2 = (a - p.mu) ** 2
    return c0, c1, c2


def _expected_value(x: int, arrival_mass: float, departure_mass: float, values, lo: int, eps: float):
    off_lo, probs, retained = kernels.skellam_offsets(arrival_mass, departure_mass, eps)
    idx = np.clip(np.arange(len(probs)) + (x + off_lo - lo), 0, len(values) - 1)
    return float(probs @ values[idx])


def _stage_objective(a, T, x, values, lo, p: InventoryParams) -> float:
    dk = kernels.discount_integrals(T, p.beta)
    c0, c1, c2 = running_coefficients(a, x, p)
    running = c0 * dk.dK0 + c1 * dk.dK1 + c2 * dk.dK2
    future = _expected_value(x, a * T, p.mu * T, values, lo, p.eps_kernel)
    return running + p.beta**T * future + p.observation_cost(T)


def stage_objective_const(a: float, T: float, x: int, v: ValueTable, p: InventoryParams) -> float:
    """Stage objective for a constant rate ``a`` held for an interval ``T``.

    Running cost in closed form from the discount integrals, plus the
    discounted expected value at the next observation and ``g(T)``.
    """
    if not (0.0 <= a <= p.a_max and p.T_min <= T <= p.T_max):
        raise ValueError(f"(a={a}, T={T}) outside [0, {p.a_max}] x [{p.T_min}, {p.T_max}]")
    return _stage_objective(a, T, x, v.values, v.window[0], p)


class InventoryModel(ObservationMDP):
    """The inventory problem with a constant rate per observation interval."""

    def __init__(self, p: InventoryParams | None = None, window: tuple[int, int] | None = None):
        self.p = p or InventoryParams()
        self.window = tuple(window) if window is not None else self.p.window
        self.beta = self.p.beta
        self.min_interval = self.p.T_min
        self.kernel_eps = self.p.eps_kernel
        self.validate()
        self._build_grid()
        self._lock = threading.Lock()
        self._cache_key = None
        self._cache_grid = None

    def initial_values(self) -> np.ndarray:
        return np.abs(self.states - self.p.theta).astype(float)

    def _build_grid(self):
        p = self.p
        self.a_grid = np.linspace(0.0, p.a_max, p.grid_a)
        self.T_grid = np.linspace(p.T_min, p.T_max, p.grid_T)
        # T-major ordering so argmin's first hit is the smallest T, then smallest a
        TT, AA = np.meshgrid(self.T_grid, self.a_grid, indexing="ij")
        self._ga, self._gT = AA.ravel(), TT.ravel()
        dk = np.array([kernels.discount_integrals(T, p.beta).as_tuple() for T in self.T_grid])
        dk = np.repeat(dk, p.grid_a, axis=0)
        xs = self.states[None, :].astype(float)
        a = self._ga[:, None]
        c0, c1, c2 = running_coefficients(a, xs, p)
        self._running = c0 * dk[:, :1] + c1 * dk[:, 1:2] + c2 * dk[:, 2:3]
        self._running += (-p.kappa * self._gT)[:, None]
        self._disc = p.beta**self._gT
        rows = [kernels.skellam_offsets(a_ * T_, p.mu * T_, p.eps_kernel) for a_, T_ in zip(self._ga, self._gT)]
        self._off_lo = min(r[0] for r in rows)
        off_hi = max(r[0] + len(r[1]) - 1 for r in rows)
        P = np.zeros((len(rows), off_hi - self._off_lo + 1))
        for i, (lo, probs, _) in enumerate(rows):
            P[i, lo - self._off_lo : lo - self._off_lo + len(probs)] = probs
        self._P = P

    @property
    def grid_points(self) -> np.ndarray:
        """Coarse-grid ``(a, T)`` pairs in the row order of :meth:`grid_objectives`."""
        return np.column_stack([self._ga, self._gT])

    def grid_objectives(self, values: np.ndarray) -> np.ndarray:
        """Stage objective on the coarse grid, shape ``(n_grid, n_states)``."""
        pad_lo = -self._off_lo
        pad_hi = self._P.shape[1] - 1 - pad_lo
        ext = np.concatenate(
            [np.full(max(pad_lo, 0), values[0]), values, np.full(max(pad_hi, 0), values[-1])]
        )
        shifted = sliding_window_view(ext, self._P.shape[1])  # (n_states, n_off)
        future = self._P @ shifted.T
        return self._running + self._disc[:, None] * future

    def objective(self, a: float, T: float, x: int, values: np.ndarray) -> float:
        return _stage_objective(a, T, x, values, self.window[0], self.p)

    def optimize_stage(self, x: int, values: np.ndarray, grid_column=None) -> StageChoice:
        """Minimize the stage objective over ``[0, a_max] x [T_min, T_max]``.

        Coarse grid first, then coordinate golden-section inside the grid cells
        around the best grid point. Ties go to the smaller ``T``, then ``a``.
        """
        p = self.p
        if grid_column is None:
            grid_column = self.grid_objectives(values)[:, x - self.window[0]]
        if not np.all(np.isfinite(grid_column)):
            k = int(np.flatnonzero(~np.isfinite(grid_column))[0])
            raise StageOptimizationError(
                x, f"non-finite objective at a={self._ga[k]}, T={self._gT[k]}"
            )
        k = int(np.argmin(grid_column))
        a0, T0, best = float(self._ga[k]), float(self._gT[k]), float(grid_column[k])
        da = self.a_grid[1] - self.a_grid[0]
        dT = self.T_grid[1] - self.T_grid[0]
        box_a = (max(0.0, a0 - da), min(p.a_max, a0 + da))
        box_T = (max(p.T_min, T0 - dT), min(p.T_max, T0 + dT))
        f = lambda a, T: self.objective(a, T, x, values)  # noqa: E731
        a1, T1, val = coordinate_golden(f, (a0, T0), box_a, box_T, tol=p.refine_tol)
        if (val, T1, a1) < (best, T0, a0):
            a0, T0, best = a1, T1, val
        # snap near-boundary optima onto the boundary when it is no worse
        for a_s, T_s in _snaps(a0, T0, p):
            val = f(a_s, T_s)
            if val <= best:
                a0, T0, best = a_s, T_s, val
        return StageChoice(a0, T0, best)

    def stage_value(self, x: int, values: np.ndarray) -> StageChoice:
        key = values.tobytes()
        with self._lock:
            if self._cache_key != key:
                self._cache_grid = self.grid_objectives(values)
                self._cache_key = key
            grid = self._cache_grid
        return self.optimize_stage(x, values, grid[:, x - self.window[0]])

    def escape_mass(self, x: int, choice: StageChoice) -> float:
        lo, probs, _ = kernels.skellam_offsets(
            float(choice.action) * choice.interval, self.p.mu * choice.interval, self.p.eps_kernel
        )
        dest = x + lo + np.arange(len(probs))
        outside = (dest < self.window[0]) | (dest > self.window[1])
        return float(probs[outside].sum())


def _snaps(a, T, p: InventoryParams, tol: float | None = None):
    tol = 10 * p.refine_tol if tol is None else tol
    a_opts = {a}
    T_opts = {T}
    for bound in (0.0, p.a_max):
        if abs(a - bound) <= tol:
            a_opts.add(bound)
    for bound in (p.T_min, p.T_max):
        if abs(T - bound) <= tol:
            T_opts.add(bound)
    for T_s in sorted(T_opts):
        for a_s in sorted(a_opts):
            if (a_s, T_s) != (a, T):
                yield a_s, T_s


def solve_inventory(p: InventoryParams | None = None, v0: ValueTable | None = None, max_iter: int = 500, threads: int = 1):
    """Run value iteration from ``|x - theta|`` and extract the greedy policy."""
    from .engine import value_iteration

    model = InventoryModel(p)
    return model, *value_iteration(model, v0, eps=model.p.eps_vi, max_iter=max_iter, threads=threads)


def optimize_stage(x: int, v: ValueTable, p: InventoryParams) -> tuple[float, float, float]:
    """Best constant rate and interval at ``x``: ``(a_star, T_star, value)``."""
    model = InventoryModel(p, window=v.window)
    c = model.optimize_stage(x, v.values)
    return c.action, c.interval, c.value


# --- time-varying rates -------------------------------------------------------


def schedule_running_cost(x: int, sched: RateSchedule, p: InventoryParams) -> float:
    """Discounted running cost of ``sched`` over its horizon, in closed form.

    On each piece the cumulative rate is linear in ``t``, so the integrand is
    a quadratic in ``t`` times ``beta**t``.
    """
    total = 0.0
    dev = x - p.theta
    for t0, t1, level, y0 in sched.segments():
        if t1 <= t0:
            continue
        # y(t) = base + level * t on this piece
        base = y0 - level * t0
        alpha = dev + base
        gamma = level - p.mu
        c0 = alpha**2 + base + p.nu * level
        c1 = 2.0 * alpha * gamma + level + p.mu
        c2 = gamma**2
        k0, k1, k2 = kernels.segment_integrals(t0, t1, p.beta)
        total += c0 * k0 + c1 * k1 + c2 * k2
    return total


def terminal_cost(x: int, arrival_mass: float, T: float, v: ValueTable, p: InventoryParams) -> float:
    """``h(a_bar(T), T)``: discounted expected next value plus ``g(T)``."""
    future = _expected_value(x, arrival_mass, p.mu * T, v.values, v.window[0], p.eps_kernel)
    return p.beta**T * future + p.observation_cost(T)


def terminal_gradient(x: int, arrival_mass: float, T: float, v: ValueTable, p: InventoryParams) -> float:
    """Derivative of :func:`terminal_cost` in the arrival mass.

    The Poisson pmf satisfies ``d/dA p(k; A) = p(k-1; A) - p(k; A)``, so the
    derivative is the expected forward difference of ``v`` one step up.
    """
    off_lo, probs, _ = kernels.skellam_offsets(arrival_mass, p.mu * T, p.eps_kernel)
    n = len(v.values)
    idx = np.arange(len(probs)) + (x + off_lo - v.window[0])
    up = v.values[np.clip(idx + 1, 0, n - 1)]
    here = v.values[np.clip(idx, 0, n - 1)]
    return float(p.beta**T * (probs @ (up - here)))


def terminal_gradient_fd(
    x: int, arrival_mass: float, T: float, v: ValueTable, p: InventoryParams, step: float = 1e-4
) -> float:
    """Finite-difference version of :func:`terminal_gradient`.

    Central difference when ``arrival_mass >= step``, otherwise a second-order
    one-sided difference (the mass cannot go negative). All evaluations share
    one truncation so the kernel cutoff does not jump between them.
    """
    dep = p.mu * T
    top = arrival_mass + 2 * step
    ka = kernels.poisson_cutoff(top, p.eps_kernel * 1e-3) if top > 0 else 0
    kd = kernels.poisson_cutoff(dep, p.eps_kernel * 1e-3) if dep > 0 else 0
    pd = kernels.poisson_pmf_vector(dep, kd)
    idx = np.clip(np.arange(ka + kd + 1) + (x - kd - v.window[0]), 0, len(v.values) - 1)
    vals = v.values[idx]

    def h(a_mass):
        pa = kernels.poisson_pmf_vector(a_mass, ka)
        return p.beta**T * float(np.convolve(pa, pd[::-1]) @ vals)

    if arrival_mass >= step:
        return (h(arrival_mass + step) - h(arrival_mass - step)) / (2 * step)
    return (-3 * h(arrival_mass) + 4 * h(arrival_mass + step) - h(arrival_mass + 2 * step)) / (2 * step)


def schedule_objective(x: int, sched: RateSchedule, v: ValueTable, p: InventoryParams) -> float:
    return schedule_running_cost(x, sched, p) + terminal_cost(
        x, sched.cumulative(sched.horizon), sched.horizon, v, p
    )


def singular_level(p: InventoryParams) -> float:
    """Deviation ``x - theta + y(t) - mu t`` at which the switching function can stay at zero.

    Holding the sign rule's switching function at zero over an interval forces
    the deviation to ``(nu * ln(beta) - 1) / 2``, which the rate ``a = mu``
    maintains. Bang-bang schedules cannot follow such an arc, so the sign rule
    is only informative for trajectories that keep clear of this level.
    """
    return (p.nu * math.log(p.beta) - 1.0) / 2.0


def clear_of_singular_arc(x: int, T: float, p: InventoryParams, margin: float = 1.0) -> bool:
    """True when even full throttle (or zero rate) keeps the deviation ``margin`` away from the singular level.

    Below target: the deviation under ``a_max`` throughout stays at most
    ``singular_level - margin`` up to ``T``. Above target: the deviation under
    zero rate stays at least ``singular_level + margin``.
    """
    e = singular_level(p)
    d = x - p.theta
    if d < e:
        return d + (p.a_max - p.mu) * T <= e - margin
    return d - p.mu * T >= e + margin


@dataclass
class CostateTrajectory:
    times: np.ndarray
    costate: np.ndarray
    switching: np.ndarray  # beta**t * nu + costate
    terminal: float


def _costate_rhs(t, x, sched: RateSchedule, p: InventoryParams):
    y = np.array([sched.cumulative(s) for s in np.atleast_1d(t)])
    return -(p.beta ** np.asarray(t)) * (2.0 * (x - p.theta + y - p.mu * np.asarray(t)) + 1.0)


def costate_backward(
    x: int,
    sched: RateSchedule,
    T: float,
    v: ValueTable,
    p: InventoryParams,
    n_steps: int = 1000,
    terminal: str = "analytic",
) -> CostateTrajectory:
    """Integrate the costate equation backward from ``T`` with fixed-step RK4.

    Steps are laid out per schedule piece (proportionally to its length) so
    no step straddles a switch, where the right-hand side has a kink.
    """
    if abs(sched.horizon - T) > 1e-12:
        raise ValueError(f"schedule horizon {sched.horizon} differs from T={T}")
    y_T = sched.cumulative(T)
    if terminal == "analytic":
        lam_T = terminal_gradient(x, y_T, T, v, p)
    elif terminal == "fd":
        lam_T = terminal_gradient_fd(x, y_T, T, v, p)
    else:
        raise ValueError(f"unknown terminal derivative method {terminal!r}")
    pieces = [(a, b) for a, b, _, _ in sched.segments() if b > a]
    times = [np.array([T])]
    lams = [np.array([lam_T])]
    lam = lam_T
    for a, b in reversed(pieces):
        n = max(1, int(round(n_steps * (b - a) / T)))
        nodes = np.linspace(b, a, n + 1)
        h = (b - a) / n
        # the level is constant on the piece, so evaluate from its interior
        f_nodes = _piece_rhs(nodes, x, sched, p, a, b)
        f_mid = _piece_rhs(nodes[:-1] - h / 2, x, sched, p, a, b)
        k = (f_nodes[:-1] + 4.0 * f_mid + f_nodes[1:]) * (h / 6.0)
        seg = lam - np.cumsum(k)
        times.append(nodes[1:])
        lams.append(seg)
        lam = seg[-1]
    t = np.concatenate(times)[::-1]
    lam_arr = np.concatenate(lams)[::-1]
    return CostateTrajectory(t, lam_arr, p.beta**t * p.nu + lam_arr, lam_T)


def _piece_rhs(t, x, sched, p, a, b):
    level = sched.rate(0.5 * (a + b))
    y = sched.cumulative(a) + level * (t - a)
    return -(p.beta**t) * (2.0 * (x - p.theta + y - p.mu * t) + 1.0)


def switching_law_violations(
    sched: RateSchedule, traj: CostateTrajectory, p: InventoryParams, tol: float | None = None
) -> tuple[int, list[float]]:
    """Count sample times where the schedule disagrees with the sign rule.

    The rule: rate ``a_max`` where ``beta**t * nu + costate <= 0``, else 0.
    Disagreements within ``tol`` (default ``1e-3 * T``) of a sign change of
    the switching function are forgiven. Returns ``(violations, crossings)``.
    """
    T = sched.horizon
    tol = 1e-3 * T if tol is None else tol
    phi, t = traj.switching, traj.times
    neg = phi <= 0
    crossings = []
    for i in np.flatnonzero(neg[1:] != neg[:-1]):
        t0, t1, f0, f1 = t[i], t[i + 1], phi[i], phi[i + 1]
        crossings.append(float(t0 - f0 * (t1 - t0) / (f1 - f0)) if f1 != f0 else float(t0))
    cross = np.array(crossings)
    violations = 0
    for ti, want_max in zip(t, neg):
        # rate at a switch instant is ambiguous; use the piece containing ti from the left
        level = sched.rate(ti) if ti < T else sched.levels[-1]
        ok = (level == p.a_max) if want_max else (level == 0.0)
        if ok:
            continue
        if len(cross) and np.min(np.abs(cross - ti)) <= tol:
            continue
        violations += 1
    return violations, crossings


@dataclass
class BangBangResult:
    schedule: RateSchedule
    objective: float
    costate: CostateTrajectory
    violations: int
    crossings: list[float]
    warnings: list[str] = field(default_factory=list)

    @property
    def satisfies_necessary_conditions(self) -> bool:
        return self.violations == 0


def solve_bang_bang(
    x: int,
    T: float,
    v: ValueTable,
    p: InventoryParams,
    n_switch: int = 2,
    grid_points: int = 41,
    tol: float = 1e-7,
) -> BangBangResult:
    """Best schedule alternating between 0 and ``a_max`` with at most ``n_switch`` switches.

    A coarse grid over switch times (both starting levels) picks a start;
    nested golden-section searches then refine each switch time inside its
    grid cell. The result is checked against the costate sign rule; a
    disagreement becomes a warning, since the rule is only necessary.
    """
    if n_switch < 0:
        raise ValueError("n_switch must be >= 0")
    levels = (0.0, p.a_max)

    def cost(first, switches):
        other = p.a_max if first == 0.0 else 0.0
        return schedule_objective(x, RateSchedule.from_switches(first, other, switches, T), v, p)

    pts = np.linspace(0.0, T, grid_points)
    cell = T / (grid_points - 1)
    interior = range(1, grid_points - 1)

    def refine(first, combo, prefix, k):
        # minimize over switch k onward, each inside the grid cell around combo[k]
        if k == len(combo):
            return cost(first, prefix), list(prefix)
        centre = pts[combo[k]]
        lo = max(centre - cell, prefix[-1] if prefix else 0.0)
        hi = max(min(centre + cell, T), lo)
        memo = {}

        def f(s):
            if s not in memo:
                memo[s] = refine(first, combo, prefix + [s], k + 1)
            return memo[s][0]

        s_best, _ = golden_section(f, lo, hi, tol=tol)
        return memo[s_best]

    # one family per (starting level, switch count); switch times strictly inside (0, T)
    best = None
    for n in range(n_switch + 1):
        for first in levels:
            fam = None
            for combo in itertools.combinations(interior, n):
                val = cost(first, pts[list(combo)])
                if fam is None or val < fam[0]:
                    fam = (val, combo)
            if fam is None:
                continue
            val, switches = refine(first, fam[1], [], 0)
            if fam[0] < val:
                val, switches = fam[0], list(pts[list(fam[1])])
            if best is None or val < best[0]:
                best = (val, first, switches)
    _, first, switches = best
    other = p.a_max if first == 0.0 else 0.0
    sched = RateSchedule.from_switches(first, other, _snap_times(switches, T, tol * 10), T)
    objective = schedule_objective(x, sched, v, p)
    traj = costate_backward(x, sched, T, v, p)
    violations, crossings = switching_law_violations(sched, traj, p)
    notes = []
    if violations:
        msg = (
            f"schedule at x={x}, T={T:.4g} disagrees with the costate sign rule "
            f"at {violations} of {len(traj.times)} sample times"
        )
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return BangBangResult(sched, objective, traj, violations, crossings, notes)


def _snap_times(switches, T, tol):
    out = []
    for s in switches:
        if abs(s) <= tol:
            s = 0.0
        elif abs(s - T) <= tol:
            s = T
        out.append(float(s))
    return out
