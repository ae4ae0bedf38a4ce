"""Poisson and birth-death transition kernels plus discounted time integrals.

Everything here is a pure function of its arguments. Probabilities are
evaluated in log-space so large means do not overflow, and kernel rows are
truncated rather than renormalized: each row remembers how much mass it kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, pdtrc

DEFAULT_EPS = 1e-9

# |T ln(beta)| below this switches the discount integrals to a power series
_SERIES_CUTOFF = 0.5
_SERIES_TERMS = 40


def poisson_pmf(k: int, mean: float) -> float:
    """Probability that a Poisson(mean) count equals ``k``."""
    if mean < 0 or not math.isfinite(mean):
        raise ValueError(f"Poisson mean must be finite and nonnegative, got {mean}")
    if k < 0:
        return 0.0
    if mean == 0.0:
        return 1.0 if k == 0 else 0.0
    return math.exp(k * math.log(mean) - mean - math.lgamma(k + 1))


def poisson_pmf_vector(mean: float, kmax: int) -> np.ndarray:
    """Poisson(mean) probabilities for counts ``0..kmax``."""
    if mean < 0:
        raise ValueError(f"Poisson mean must be nonnegative, got {mean}")
    if mean == 0.0:
        out = np.zeros(kmax + 1)
        out[0] = 1.0
        return out
    k = np.arange(kmax + 1, dtype=float)
    return np.exp(k * math.log(mean) - mean - gammaln(k + 1.0))


def poisson_cutoff(mean: float, eps: float) -> int:
    """Smallest ``K`` with ``P(N > K) < eps`` for ``N ~ Poisson(mean)``."""
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    if mean < 0:
        raise ValueError(f"Poisson mean must be nonnegative, got {mean}")
    if mean == 0.0:
        return 0
    # Chernoff-style starting guess, then walk to the exact boundary.
    k = max(0, int(mean + math.sqrt(2.0 * mean * -math.log(eps))))
    while k > 0 and pdtrc(k - 1, mean) < eps:
        k -= 1
    while pdtrc(k, mean) >= eps:
        k += 1
    return k


def moment_cutoff(mean: float, eps: float) -> int:
    """Smallest-ish ``K`` with ``E[N**2; N > K] < eps`` for ``N ~ Poisson(mean)``.

    Uses ``E[N**2; N > K] = mean**2 P(N > K - 2) + mean P(N > K - 1)``, both
    bounded by ``(mean**2 + mean) P(N > K - 2)``. Never below
    :func:`poisson_cutoff` at the same ``eps``.
    """
    if mean == 0.0:
        return 0
    k = poisson_cutoff(mean, eps / (1.0 + mean) ** 2) + 2
    return max(k, poisson_cutoff(mean, eps))


def birth_death_kernel(
    x: int,
    x_prime: int,
    arrival_mass: float,
    departure_mass: float,
    eps: float = DEFAULT_EPS,
) -> float:
    """Probability of moving from ``x`` to ``x_prime`` under Poisson arrivals and departures.

    The net change is the difference of two independent Poisson counts with
    means ``arrival_mass`` and ``departure_mass``. The double sum runs over
    the count of the less constrained process and stops once the omitted tail
    is below ``eps``.
    """
    if arrival_mass < 0 or departure_mass < 0:
        raise ValueError("arrival and departure masses must be nonnegative")
    d = x_prime - x
    # d >= 0: departures j, arrivals j + d.  d < 0: arrivals j, departures j - d.
    if d >= 0:
        inner, outer = departure_mass, arrival_mass
    else:
        inner, outer = arrival_mass, departure_mass
        d = -d
    if inner == 0.0:
        return poisson_pmf(d, outer)
    if outer == 0.0:
        return poisson_pmf(0, inner) if d == 0 else 0.0
    jmax = poisson_cutoff(inner, eps)
    log_in, log_out = math.log(inner), math.log(outer)
    terms = [
        math.exp(
            j * log_in - inner - math.lgamma(j + 1)
            + (j + d) * log_out - outer - math.lgamma(j + d + 1)
        )
        for j in range(jmax + 1)
    ]
    return math.fsum(terms)


@dataclass(frozen=True)
class KernelRow:
    """Truncated transition row ``q(x, . ; arrival_mass, departure_mass)``.

    ``probs[i]`` is the probability of landing in ``lo + i``. The row is not
    renormalized; ``retained_mass`` is the probability it actually carries.
    """

    source_state: int
    lo: int
    probs: np.ndarray
    retained_mass: float
    truncation_eps: float

    @property
    def hi(self) -> int:
        return self.lo + len(self.probs) - 1

    @property
    def destinations(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1)

    @property
    def offsets(self) -> np.ndarray:
        return self.destinations - self.source_state

    def as_dict(self) -> dict[int, float]:
        return {int(s): float(p) for s, p in zip(self.destinations, self.probs)}

    def expectation(self, values: np.ndarray, window_lo: int) -> float:
        """Sum of ``q * v`` with destinations clamped into ``values``' window."""
        idx = np.clip(self.destinations - window_lo, 0, len(values) - 1)
        return float(self.probs @ values[idx])


def skellam_offsets(
    arrival_mass: float, departure_mass: float, eps: float = DEFAULT_EPS
) -> tuple[int, np.ndarray, float]:
    """Net-change distribution as ``(lowest offset, probs, retained mass)``.

    Each Poisson count is cut where its omitted tail second moment
    ``E[N**2; N > K]`` drops below ``eps / 2``. That keeps at least
    ``1 - eps`` of the mass and also the first two moments of the net change
    to within about ``eps``, which matters because values grow with the
    squared distance from the target.
    """
    if arrival_mass < 0 or departure_mass < 0:
        raise ValueError("arrival and departure masses must be nonnegative")
    ka = moment_cutoff(arrival_mass, eps / 2)
    kd = moment_cutoff(departure_mass, eps / 2)
    pa = poisson_pmf_vector(arrival_mass, ka)
    pd = poisson_pmf_vector(departure_mass, kd)
    # probs[n] = sum_j pa[j + (n - kd)] * pd[j]: the double sum over the common count
    probs = np.convolve(pa, pd[::-1])
    retained = float(pa.sum() * pd.sum())
    return -kd, probs, retained


def kernel_row(
    x: int, arrival_mass: float, departure_mass: float, eps: float = DEFAULT_EPS
) -> KernelRow:
    """Contiguous destination window around ``x`` carrying at least ``1 - eps`` mass."""
    lo, probs, retained = skellam_offsets(arrival_mass, departure_mass, eps)
    return KernelRow(x, x + lo, probs, retained, eps)


@dataclass(frozen=True)
class DiscountIntegrals:
    """``dK0, dK1, dK2`` = integral over [0, T] of ``t**i * beta**t``."""

    dK0: float
    dK1: float
    dK2: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.dK0, self.dK1, self.dK2)


def _check_beta(beta: float) -> float:
    if not 0.0 < beta < 1.0:
        raise ValueError(f"discount base must lie in (0, 1), got {beta}")
    return math.log(beta)


def antiderivatives(t: float, beta: float) -> tuple[float, float, float]:
    """The antiderivatives ``K0(t), K1(t), K2(t)`` of ``t**i * beta**t``."""
    log_b = _check_beta(beta)
    bt = beta**t
    k0 = bt / log_b
    k1 = t * bt / log_b - k0 / log_b
    k2 = t * t * bt / log_b - 2.0 * k1 / log_b
    return k0, k1, k2


def _series(T: float, log_b: float) -> tuple[float, float, float]:
    # sum_n L^n T^(n+i+1) / (n! (n+i+1))
    out = [0.0, 0.0, 0.0]
    term = 1.0  # (L T)^n / n!
    for n in range(_SERIES_TERMS):
        for i in range(3):
            out[i] += term * T ** (i + 1) / (n + i + 1)
        term *= log_b * T / (n + 1)
    return out[0], out[1], out[2]


def discount_integrals(T: float, beta: float) -> DiscountIntegrals:
    """Closed-form ``K_i(T) - K_i(0)`` for i = 0, 1, 2.

    Evaluated through ``expm1`` so the differences of antiderivatives do not
    cancel catastrophically; a short power series covers ``|T ln beta| < 0.5``.
    """
    log_b = _check_beta(beta)
    if T < 0:
        raise ValueError(f"interval must be nonnegative, got {T}")
    if T == 0.0:
        return DiscountIntegrals(0.0, 0.0, 0.0)
    u = T * log_b
    if abs(u) < _SERIES_CUTOFF:
        return DiscountIntegrals(*_series(T, log_b))
    em1 = math.expm1(u)
    eu = em1 + 1.0
    d0 = em1 / log_b
    d1 = (u * eu - em1) / log_b**2
    d2 = (u * u * eu - 2.0 * (u * eu - em1)) / log_b**3
    return DiscountIntegrals(d0, d1, d2)


def segment_integrals(t0: float, t1: float, beta: float) -> tuple[float, float, float]:
    """Integral over [t0, t1] of ``t**i * beta**t`` for i = 0, 1, 2."""
    a = discount_integrals(t1, beta).as_tuple()
    b = discount_integrals(t0, beta).as_tuple()
    return a[0] - b[0], a[1] - b[1], a[2] - b[2]


def discount_weight(t0: float, t1: float, beta: float) -> float:
    """Integral over [t0, t1] of ``beta**t``."""
    log_b = _check_beta(beta)
    return beta**t0 * math.expm1((t1 - t0) * log_b) / log_b
