"""Derivative-free 1-D and coordinate searches used by the stage optimizers."""

from __future__ import annotations

import math
from typing import Callable

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section(
    f: Callable[[float], float],
    lo: float,
    hi: float,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> tuple[float, float]:
    """Minimize a unimodal ``f`` on ``[lo, hi]``; returns ``(x, f(x))``.

    The endpoints are evaluated too, so a minimum sitting on the boundary is
    returned exactly. Ties resolve toward the smaller argument.
    """
    if hi < lo:
        raise ValueError(f"empty bracket [{lo}, {hi}]")
    f_lo, f_hi = f(lo), f(hi)
    if hi - lo <= tol:
        return (lo, f_lo) if f_lo <= f_hi else (hi, f_hi)
    a, b = lo, hi
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)
    best = min(((lo, f_lo), (c, fc), (d, fd), (hi, f_hi)), key=lambda p: (p[1], p[0]))
    return best


def coordinate_golden(
    f: Callable[[float, float], float],
    start: tuple[float, float],
    bounds_u: tuple[float, float],
    bounds_w: tuple[float, float],
    tol: float = 1e-6,
    max_sweeps: int = 60,
) -> tuple[float, float, float]:
    """Alternate golden-section line searches over ``w`` then ``u``.

    Each line search runs over its full bracket, so a sweep never increases
    the objective. Stops when a sweep moves both coordinates by less than
    ``tol``. Returns ``(u, w, f(u, w))``.
    """
    u, w = start
    best = f(u, w)
    for _ in range(max_sweeps):
        w_new, _ = golden_section(lambda t: f(u, t), *bounds_w, tol=tol)
        u_new, val = golden_section(lambda s: f(s, w_new), *bounds_u, tol=tol)
        if val > best:
            break
        moved = max(abs(u_new - u), abs(w_new - w))
        u, w, best = u_new, w_new, val
        if moved < tol:
            break
    return u, w, best
