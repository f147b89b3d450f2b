import math
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from bsvie import ContractionViolated, InvalidParameter
from bsvie.kernels import (TwoTimeKernel, iterated_kernel, iterated_kernel_rows, make_example1_kernel,
                           make_separable_kernel, resolvent_nystrom, resolvent_residual, resolvent_series,
                           weighted_norm_L, weighted_row_norms, zero_kernel)
from bsvie.timegrid import VolterraRule, build_graded_grid


def test_L_example1_matches_formula(ex1_kernel, grid16):
    L = weighted_norm_L(ex1_kernel, 2.0, grid16)
    assert L == pytest.approx(0.5 / (2.0 + 1.0), abs=1e-10)
    assert L == pytest.approx(1 / 6, abs=1e-10)


def test_L_zero_kernel(grid16):
    assert weighted_norm_L(zero_kernel(), 2.0, grid16) == 0.0


@given(lam=st.floats(0.05, 20.0))
def test_any_positive_lambda_passes_when_gamma_exceeds_two_alpha(lam):
    # 2 alpha - gamma < 0 for (0.5, 2), so L < 1/2 for every lambda > 0
    g = build_graded_grid(40.0, 40, 8, 1.05, lam)
    k = make_example1_kernel(0.5, 2.0)
    L = weighted_norm_L(k, lam, g)
    assert L == pytest.approx(0.5 / (2.0 + lam / 2), rel=1e-8)
    assert L < 0.5


def _brute_iterated2(alpha, gamma, t, s):
    phi = lambda a, b: alpha * math.exp(-gamma * (b - a))  # noqa: E731
    return integrate.quad(lambda u: phi(t, u) * phi(u, s), t, s, epsabs=1e-15, epsrel=1e-13)[0]


def test_iterated_kernel_n2_two_oracles(ex1_kernel, grid16):
    closed = 0.25 * math.exp(-2.0)
    assert closed == pytest.approx(0.0338338, abs=1e-7)
    assert _brute_iterated2(0.5, 2.0, 0.0, 1.0) == pytest.approx(closed, rel=1e-12)
    assert ex1_kernel.iterated_exact(2, 0.0, 1.0) == pytest.approx(closed, rel=1e-14)
    assert iterated_kernel(ex1_kernel, 2, 0.0, 1.0, grid16) == pytest.approx(closed, rel=1e-8)


def test_iterated_kernel_base_and_diagonal(ex1_kernel, grid16):
    assert iterated_kernel(ex1_kernel, 1, 0.5, 2.3, grid16) == float(ex1_kernel.eval(0.5, 2.3))
    for n in (2, 3, 5):
        assert iterated_kernel(ex1_kernel, n, 1.0, 1.0, grid16) == 0.0
    with pytest.raises(InvalidParameter):
        iterated_kernel(ex1_kernel, 0, 0.0, 1.0, grid16)
    with pytest.raises(InvalidParameter):
        iterated_kernel(ex1_kernel, 2, 2.0, 1.0, grid16)


@pytest.fixture(scope="module")
def ex1_tables(ex1_kernel, grid16):
    rule = VolterraRule(grid16, ex1_kernel.eval)
    return (resolvent_nystrom(ex1_kernel, grid16, 2.0, rule=rule),
            resolvent_series(ex1_kernel, 2.0, 1e-12, grid16, rule=rule), rule)


def test_series_value_at_0_1(ex1_tables, grid16):
    _, se, _ = ex1_tables
    exact = 0.5 * math.exp(-1.5)
    assert exact == pytest.approx(0.1115651, abs=1e-7)
    assert se.values[0, grid16.index_of(1.0)] == pytest.approx(exact, rel=1e-6)
    assert se(0.0, 1.0)[0] == pytest.approx(exact, rel=1e-6)


def test_both_methods_match_closed_form_on_triangle(ex1_tables, ex1_kernel, grid16):
    ny, se, _ = ex1_tables
    x = grid16.nodes
    jj, kk = np.triu_indices(grid16.n_nodes)
    ex = ex1_kernel.resolvent_exact(x[jj], x[kk])
    for tab in (ny, se):
        assert np.max(np.abs(tab.values[jj, kk] - ex) / np.abs(ex)) <= 1e-6
    assert np.max(np.abs(ny.values - se.values)) <= 1e-8


def test_residuals(ex1_tables, ex1_kernel, grid16):
    ny, se, rule = ex1_tables
    assert resolvent_residual(ny, ex1_kernel, rule) <= 1e-10
    # series residual: truncation tolerance plus the quadrature error of the rule
    assert resolvent_residual(se, ex1_kernel, rule) <= 1e-12 + 1e-9


def test_diagonal_equals_kernel(ex1_tables, ex1_kernel, grid16):
    ny, se, _ = ex1_tables
    d = np.diag(ny.values)
    assert np.array_equal(d, ex1_kernel.eval(grid16.nodes, grid16.nodes))
    assert np.array_equal(np.diag(se.values), d)


def test_geometric_tail_bound(ex1_tables, grid16):
    ny, _, _ = ex1_tables
    L = ny.L_lambda
    norms = weighted_row_norms(ny.values, grid16, 2.0)
    assert np.all(norms <= L / (1 - L) + 1e-8)


def test_induction_bound_for_series_terms(ex1_tables, ex1_kernel, grid16):
    _, se, rule = ex1_tables
    L = se.L_lambda
    n_max = min(se.series_terms_used, 12)
    worst = np.zeros(n_max)
    for i in range(0, grid16.n_nodes, 7):
        rows = iterated_kernel_rows(ex1_kernel, n_max, grid16, i, rule)
        tab = np.zeros((grid16.n_nodes, grid16.n_nodes))
        for n, r in enumerate(rows):
            tab[i, i:] = r
            worst[n] = max(worst[n], weighted_row_norms(tab, grid16, 2.0)[i])
    for n in range(1, n_max + 1):
        assert worst[n - 1] <= L**n + n * 1e-8


def test_zero_kernel_tables(grid16):
    z = zero_kernel()
    se = resolvent_series(z, 2.0, 1e-12, grid16)
    ny = resolvent_nystrom(z, grid16, 2.0)
    assert se.series_terms_used == 1
    assert not np.any(se.values) and not np.any(ny.values)
    assert resolvent_residual(ny, z) == 0.0


def test_contraction_violated_for_gamma_below_alpha():
    g = build_graded_grid(16.0, 16, 4, 1.0, 0.5)
    k = make_example1_kernel(2.0, 1.0)
    with pytest.raises(ContractionViolated, match="contraction condition violated"):
        resolvent_series(k, 0.5, 1e-10, g)
    with pytest.raises(ContractionViolated):
        resolvent_nystrom(k, g, 0.5)


def test_relaxed_contraction_warns():
    g = build_graded_grid(16.0, 16, 4, 1.0, 2.0)
    k = make_example1_kernel(1.6, 2.0)  # L = 1.6 / 3
    with pytest.raises(ContractionViolated):
        resolvent_nystrom(k, g, 2.0)
    k = make_example1_kernel(1.3, 2.0)  # L = 1.3 / 3
    assert resolvent_nystrom(k, g, 2.0).L_lambda < 0.5
    k = make_example1_kernel(2.0, 2.0)  # L = 2/3
    with pytest.warns(RuntimeWarning):
        tab = resolvent_nystrom(k, g, 2.0, relaxed_contraction=True)
    assert tab.L_lambda == pytest.approx(2 / 3, rel=1e-5)  # q=4 panels


def test_separable_constant_phi():
    g = build_graded_grid(10.0, 20, 8, 1.0, 5.0)
    k = make_separable_kernel(lambda s: -np.ones_like(s), 1.0, 0.0, lambda s: -s)
    assert k.resolvent_exact(0.0, 1.0) == pytest.approx(-math.exp(-1.0), abs=1e-15)
    assert float(k.resolvent_exact(0.0, 1.0)) == pytest.approx(-0.3678794, abs=1e-7)
    ny = resolvent_nystrom(k, g, 5.0)
    x = g.nodes
    jj, kk = np.triu_indices(g.n_nodes)
    assert np.max(np.abs(ny.values[jj, kk] + np.exp(-(x[kk] - x[jj]))) / np.exp(-(x[kk] - x[jj]))) <= 1e-6


def test_separable_zero_phi(grid16):
    k = make_separable_kernel(lambda s: np.zeros_like(s), 0.0, 0.0, lambda s: 0 * s)
    assert not np.any(resolvent_nystrom(k, grid16, 2.0).values)
    assert float(k.resolvent_exact(0.0, 3.0)) == 0.0


def test_separable_exponential_phi():
    # oracle: direct quadrature of the exponent, independent of the companion formula
    inner = integrate.quad(lambda r: -math.exp(-r), 0.0, 1.0, epsabs=1e-15)[0]
    oracle = -math.exp(-1.0) * math.exp(inner)
    assert oracle == pytest.approx(-0.1955145, abs=1e-7)
    phi = lambda s: -np.exp(-np.asarray(s, dtype=float))  # noqa: E731
    with_anti = make_separable_kernel(phi, 1.0, 1.0, lambda s: np.exp(-np.asarray(s, dtype=float)))
    without = make_separable_kernel(phi, 1.0, 1.0)
    assert float(with_anti.resolvent_exact(0.0, 1.0)) == pytest.approx(oracle, rel=1e-13)
    assert float(without.resolvent_exact(0.0, 1.0)) == pytest.approx(oracle, rel=1e-11)
    # lambda = 2 gives L = 1/2 exactly at t = 0, so use lambda = 4 (L = 1/3)
    g = build_graded_grid(12.0, 24, 8, 1.0, 4.0)
    ny = resolvent_nystrom(with_anti, g, 4.0)
    assert ny.values[0, g.index_of(1.0)] == pytest.approx(oracle, rel=1e-8)


def test_kernel_decay_metadata_checked():
    with pytest.raises(InvalidParameter):
        TwoTimeKernel(lambda t, s: np.exp(-(np.asarray(s) - np.asarray(t))), 0.5, 1.0)
    with pytest.raises(InvalidParameter):
        TwoTimeKernel(lambda t, s: 0 * s, -1.0, 1.0)
    with pytest.raises(InvalidParameter):
        make_example1_kernel(0.5, -1.0)


def test_table_is_read_only_and_csv(ex1_tables, ex1_kernel, tmp_path):
    ny, _, _ = ex1_tables
    with pytest.raises(ValueError):
        ny.values[0, 0] = 1.0
    p = tmp_path / "psi.csv"
    ny.to_csv(p, ex1_kernel)
    lines = p.read_text().splitlines()
    assert lines[0] == "t,s,psi,phi,residual"
    n = ny.grid.n_nodes
    assert len(lines) == 1 + n * (n + 1) // 2
    t, s, psi, phi, _ = map(float, lines[1].split(","))
    assert (t, s, psi, phi) == (0.0, 0.0, 0.5, 0.5)


@given(alpha=st.floats(0.05, 1.0), gap=st.floats(0.5, 3.0), lam=st.floats(0.5, 6.0))
def test_cross_method_agreement_property(alpha, gap, lam):
    gamma = alpha + gap
    g = build_graded_grid(12.0, 12, 6, 1.0, lam)
    k = make_example1_kernel(alpha, gamma)
    L = alpha / (gamma + lam / 2)
    if L >= 0.45:
        return
    rule = VolterraRule(g, k.eval)
    ny = resolvent_nystrom(k, g, lam, rule=rule)
    se = resolvent_series(k, lam, 1e-12, g, rule=rule)
    assert np.max(np.abs(ny.values - se.values)) <= 1e-8
    assert np.array_equal(np.diag(ny.values), k.eval(g.nodes, g.nodes))


def test_thread_count_does_not_change_tables(ex1_kernel):
    g = build_graded_grid(6.0, 6, 4, 1.0, 2.0)
    a = resolvent_nystrom(ex1_kernel, g, 2.0, threads=1)
    b = resolvent_nystrom(ex1_kernel, g, 2.0, threads=4)
    assert np.array_equal(a.values, b.values)
    env = os.environ.get("BSVIE_THREADS")
    assert env is None or int(env) >= 1
