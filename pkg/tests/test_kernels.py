import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from ctmdp import kernels

# 40-digit mpmath evaluations of exp(-m) m^k / k!
PMF_ORACLE = [
    (150, 100.0, 6.5111604687863426424e-7),
    (0, 0.5, 0.6065306597126334236),
    (3, 2.5, 0.21376301724973644575),
    (60, 30.0, 4.7672285869123771686e-7),
]

# mpmath quadrature of t**j * beta**t over [0, T]
DISCOUNT_ORACLE = [
    (2.0, 0.8, (1.6133112423808380062, 1.4937077070692507407, 1.9154280355458497128)),
    (12.0, 0.8, (4.1734592722003360396, 15.007494196652070116, 90.163411063535128901)),
    (0.01, 0.8, (0.0099888511166475219389, 0.000049925681020514770416, 3.327759720770014842e-7)),
    (4.13, 0.5, (1.3602962845480680424, 1.6221858401692821783, 3.2751715869940219444)),
]

# untruncated double sum in 40-digit arithmetic: (x, x', arrival mass, departure mass) -> q
KERNEL_ORACLE = [
    ((8, 10, 4.0, 6.0), 0.056756906350507564283),
    ((0, -3, 1.5, 7.5), 0.087008695126090751369),
    ((5, 5, 0.0, 3.0), 0.049787068367863942979),
    ((2, 9, 12.0, 2.0), 0.082312893553447167634),
]


@pytest.mark.parametrize("k, mean, expected", PMF_ORACLE)
def test_poisson_pmf_matches_high_precision(k, mean, expected):
    assert kernels.poisson_pmf(k, mean) == pytest.approx(expected, rel=1e-12)
    assert kernels.poisson_pmf_vector(mean, k)[k] == pytest.approx(expected, rel=1e-12)


def test_poisson_pmf_edge_cases():
    assert kernels.poisson_pmf(0, 0.0) == 1.0
    assert kernels.poisson_pmf(2, 0.0) == 0.0
    assert kernels.poisson_pmf(-1, 3.0) == 0.0
    with pytest.raises(ValueError):
        kernels.poisson_pmf(1, -0.5)


@pytest.mark.parametrize("mean", [0.0, 0.3, 4.0, 60.0, 250.0])
@pytest.mark.parametrize("eps", [1e-3, 1e-9, 1e-12])
def test_poisson_cutoff_is_smallest(mean, eps):
    from scipy.stats import poisson

    K = kernels.poisson_cutoff(mean, eps)
    assert poisson.sf(K, mean) < eps
    if K > 0:
        assert poisson.sf(K - 1, mean) >= eps


@pytest.mark.parametrize("args, expected", KERNEL_ORACLE)
def test_double_sum_kernel_matches_oracle(args, expected):
    x, xp, A, M = args
    assert kernels.birth_death_kernel(x, xp, A, M, eps=1e-14) == pytest.approx(expected, rel=1e-12)
    row = kernels.kernel_row(x, A, M, eps=1e-14)
    assert row.as_dict().get(xp, 0.0) == pytest.approx(expected, rel=1e-12)


@given(
    x=st.integers(-20, 20),
    A=st.floats(0.0, 60.0),
    M=st.floats(0.0, 60.0),
)
@settings(max_examples=60, deadline=None)
def test_row_matches_double_sum_and_mass_accounting(x, A, M):
    eps = 1e-9
    row = kernels.kernel_row(x, A, M, eps)
    assert row.retained_mass >= 1 - eps
    assert math.isclose(row.probs.sum(), row.retained_mass, rel_tol=0, abs_tol=1e-12)
    assert np.all(row.probs >= 0)
    # spot-check three destinations against the direct double sum
    for xp in (row.lo, x, row.hi):
        direct = kernels.birth_death_kernel(x, xp, A, M, eps=1e-15)
        assert row.as_dict().get(xp, 0.0) == pytest.approx(direct, abs=eps)


@given(A=st.floats(0.0, 60.0), M=st.floats(0.0, 60.0))
@settings(max_examples=60, deadline=None)
def test_skellam_moments(A, M):
    lo, probs, _ = kernels.skellam_offsets(A, M, 1e-12)
    d = lo + np.arange(len(probs))
    mean = probs @ d
    var = probs @ (d - mean) ** 2
    assert mean == pytest.approx(A - M, abs=1e-8)
    assert var == pytest.approx(A + M, abs=1e-8)


def test_row_expectation_clamps_to_window():
    row = kernels.kernel_row(0, 3.0, 3.0, 1e-12)
    values = np.arange(-2, 3, dtype=float)  # window [-2, 2]
    clamped = np.clip(row.destinations, -2, 2)
    assert row.expectation(values, -2) == pytest.approx(row.probs @ clamped)


@pytest.mark.parametrize("T, beta, expected", DISCOUNT_ORACLE)
def test_discount_integrals_match_quadrature(T, beta, expected):
    got = kernels.discount_integrals(T, beta).as_tuple()
    for g, e in zip(got, expected):
        assert g == pytest.approx(e, rel=1e-13)


@given(T=st.floats(0.0, 40.0), beta=st.floats(0.05, 0.999))
@settings(max_examples=100, deadline=None)
def test_discount_integrals_against_quad(T, beta):
    got = kernels.discount_integrals(T, beta).as_tuple()
    for j in range(3):
        ref, _ = integrate.quad(lambda t: t**j * beta**t, 0.0, T, epsabs=1e-14, epsrel=1e-13)
        assert got[j] == pytest.approx(ref, rel=1e-10, abs=1e-14)


def test_series_and_closed_form_agree_at_switch():
    beta = 0.8
    T = 0.5 / -math.log(beta)
    below = kernels.discount_integrals(T * (1 - 1e-12), beta).as_tuple()
    above = kernels.discount_integrals(T * (1 + 1e-12), beta).as_tuple()
    for b, a in zip(below, above):
        assert a == pytest.approx(b, rel=1e-10)


def test_antiderivative_differences():
    T, beta = 5.5, 0.8
    k_T, k_0 = kernels.antiderivatives(T, beta), kernels.antiderivatives(0.0, beta)
    diff = [a - b for a, b in zip(k_T, k_0)]
    assert diff == pytest.approx(kernels.discount_integrals(T, beta).as_tuple(), rel=1e-12)


def test_segment_integrals_additive():
    beta = 0.8
    a = kernels.segment_integrals(0.0, 1.3, beta)
    b = kernels.segment_integrals(1.3, 4.0, beta)
    whole = kernels.discount_integrals(4.0, beta).as_tuple()
    assert [x + y for x, y in zip(a, b)] == pytest.approx(whole, rel=1e-12)
    assert kernels.discount_weight(1.3, 4.0, beta) == pytest.approx(b[0], rel=1e-12)


@pytest.mark.parametrize("beta", [0.0, 1.0, 1.5, -0.2])
def test_discount_rejects_bad_beta(beta):
    with pytest.raises(ValueError):
        kernels.discount_integrals(1.0, beta)
