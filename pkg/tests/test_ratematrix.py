"""Tests for the rate-matrix algebra: weight tables, series, estimators.

The heavy lifting is done against independent oracles in ``oracles.py``:
exact rational path enumeration (valid for dyadic rates, where every double
operation in the table builder is exact), Catalan counts for the star's
first-return weights, and textbook closed forms for loops and chains.
"""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brwlab import (
    ContractError,
    RateMatrix,
    build_series_table,
    check_series_identities,
    estimate_Ks,
    estimate_Kw,
    evaluate_H,
    evaluate_Phi,
    evaluate_Theta,
    lambda_s_from_phi,
    row_apply,
)

from oracles import catalan, exact_first_passage, exact_step_weights

# ---------------------------------------------------------------------------
# model builders local to this file


def loop_model(rate: float) -> RateMatrix:
    return RateMatrix.from_edges(1, [(0, 0, rate)])


def star_model(d: int, ray_length: int) -> RateMatrix:
    """Hub 0 with d rays of the given length, unit rates both ways."""
    edges = []
    for r in range(d):
        prev = 0
        for j in range(ray_length):
            vid = 1 + r * ray_length + j
            edges.append((prev, vid, 1.0))
            edges.append((vid, prev, 1.0))
            prev = vid
    return RateMatrix.from_edges(1 + d * ray_length, edges)


def path_model(rates: list[float]) -> RateMatrix:
    """0 - 1 - ... - n chain, symmetric, rates[i] on edge (i, i+1)."""
    edges = []
    for i, r in enumerate(rates):
        edges.append((i, i + 1, r))
        edges.append((i + 1, i, r))
    return RateMatrix.from_edges(len(rates) + 1, edges)


DYADIC_RATES = [Fraction(0), Fraction(0), Fraction(1, 8), Fraction(3, 8), Fraction(1, 2), Fraction(1), Fraction(2), Fraction(25, 8)]


@st.composite
def small_models(draw, max_vertices: int = 6):
    """Dense-ish random model with dyadic rates, returned with its Fraction grid."""
    V = draw(st.integers(min_value=1, max_value=max_vertices))
    grid = [[draw(st.sampled_from(DYADIC_RATES)) for _ in range(V)] for _ in range(V)]
    edges = [(u, v, float(grid[u][v])) for u in range(V) for v in range(V) if grid[u][v]]
    return V, grid, edges


# ---------------------------------------------------------------------------
# construction and validation


def test_from_edges_basic():
    K = RateMatrix.from_edges(2, [(0, 1, 0.5), (1, 0, 2.0), (1, 1, 0.0)])
    assert K.vertex_count == 2
    np.testing.assert_array_equal(K.dense(), [[0.0, 0.5], [2.0, 0.0]])
    np.testing.assert_array_equal(K.row_sum, [0.5, 2.0])


def test_from_edges_rejects_bad_input():
    with pytest.raises(ContractError):
        RateMatrix.from_edges(0, [])
    with pytest.raises(ContractError):
        RateMatrix.from_edges(2, [(0, 2, 1.0)])
    with pytest.raises(ContractError):
        RateMatrix.from_edges(2, [(0, 1, -0.5)])
    with pytest.raises(ContractError):
        RateMatrix.from_edges(2, [(0, 1, math.nan)])
    with pytest.raises(ContractError):
        RateMatrix.from_edges(2, [(0, 1, math.inf)])
    with pytest.raises(ContractError):
        RateMatrix.from_edges(2, [(0, 1, 1.0), (0, 1, 2.0)])


def test_duplicate_zero_rate_still_rejected():
    # a zero entry is dropped from storage but still counts as seen
    with pytest.raises(ContractError):
        RateMatrix.from_edges(2, [(0, 1, 0.0), (0, 1, 1.0)])


def test_validate_catches_stale_row_sums():
    K = RateMatrix.from_edges(2, [(0, 1, 1.0)])
    K.validate()
    bad = RateMatrix(csr=K.csr, row_sum=np.array([2.0, 0.0]))
    with pytest.raises(ContractError):
        bad.validate()


def test_rows_iteration_matches_dense():
    K = RateMatrix.from_edges(3, [(0, 1, 1.0), (0, 2, 0.25), (2, 0, 3.0)])
    dense = np.zeros((3, 3))
    for x, targets, rates in K.rows():
        dense[x, targets] = rates
    np.testing.assert_array_equal(dense, K.dense())


def test_row_apply_matches_dense_product():
    rng = np.random.default_rng(7)
    K = RateMatrix.from_edges(4, [(0, 1, 1.0), (1, 2, 0.5), (2, 3, 0.25), (3, 0, 2.0), (1, 1, 1.5)])
    v = rng.uniform(0, 1, size=4)
    np.testing.assert_allclose(row_apply(K, v), K.dense() @ v, rtol=1e-12)


def test_row_apply_rejects_bad_vectors():
    K = loop_model(1.0)
    with pytest.raises(ContractError):
        row_apply(K, np.ones(2))
    with pytest.raises(ContractError):
        row_apply(K, np.array([math.nan]))


# ---------------------------------------------------------------------------
# weight tables against exact enumeration


def test_table_base_cases():
    K = RateMatrix.from_edges(2, [(0, 1, 0.7)])
    t = build_series_table(K, 0, target=1, N=3)
    np.testing.assert_array_equal(t.step_weights(0), [1.0, 0.0])
    assert t.first_passage[0] == 0.0
    assert t.first_passage[1] == 0.7


def test_oriented_chain_mass_dies():
    K = RateMatrix.from_edges(2, [(0, 1, 0.7)])
    t = build_series_table(K, 0, N=4)
    np.testing.assert_array_equal(t.generation_mass, [1.0, 0.7, 0.0, 0.0, 0.0])


def test_loop_powers_exact():
    t = build_series_table(loop_model(2.0), 0, target=0, N=50)
    for n in range(51):
        assert t.step_weights(n)[0] == 2.0 ** n
    # on a loop the only first return is the single-step one
    assert t.first_passage[1] == 2.0
    assert np.all(t.first_passage[2:] == 0.0)


def test_build_twice_is_bit_identical():
    K = star_model(3, 4)
    a = build_series_table(K, 0, target=0, N=20)
    b = build_series_table(K, 0, target=0, N=20)
    np.testing.assert_array_equal(a.scaled_rows, b.scaled_rows)
    np.testing.assert_array_equal(a.scale_exp, b.scale_exp)
    np.testing.assert_array_equal(a.fp_scaled, b.fp_scaled)


def test_table_input_contracts():
    K = loop_model(1.0)
    with pytest.raises(ContractError):
        build_series_table(K, 0, N=0)
    with pytest.raises(ContractError):
        build_series_table(K, 1, N=4)
    with pytest.raises(ContractError):
        build_series_table(K, 0, target=5, N=4)
    t = build_series_table(K, 0, N=4)
    with pytest.raises(ContractError):
        _ = t.first_passage
    with pytest.raises(ContractError):
        evaluate_Phi(t, 0.1)


@settings(max_examples=60, deadline=None)
@given(small_models(), st.integers(min_value=0, max_value=6))
def test_step_weights_match_exact_enumeration(model, n):
    # dyadic rates keep every double operation exact, so equality is ==
    V, grid, edges = model
    K = RateMatrix.from_edges(V, edges)
    t = build_series_table(K, 0, N=max(n, 1))
    expected = exact_step_weights(grid, 0, n)
    got = t.step_weights(n)
    for y in range(V):
        assert got[y] == float(expected[y])


@settings(max_examples=60, deadline=None)
@given(small_models(), st.integers(min_value=1, max_value=6))
def test_first_passage_matches_exact_enumeration(model, n):
    V, grid, edges = model
    K = RateMatrix.from_edges(V, edges)
    target = V - 1
    t = build_series_table(K, 0, target=target, N=max(n, 1))
    expected = exact_first_passage(grid, 0, target, n)
    assert t.first_passage[n] == float(expected)


@settings(max_examples=60, deadline=None)
@given(small_models(), st.integers(min_value=1, max_value=6))
def test_first_passage_bounded_by_step_weight(model, n):
    # first-passage paths are a subset of all paths, exactly in this arithmetic
    V, grid, edges = model
    K = RateMatrix.from_edges(V, edges)
    t = build_series_table(K, 0, target=V - 1, N=max(n, 1))
    assert t.first_passage[n] <= t.step_weights(n)[V - 1]


@settings(max_examples=40, deadline=None)
@given(small_models(max_vertices=5), st.integers(min_value=1, max_value=10))
def test_step_weights_match_dense_matrix_power(model, n):
    V, _, edges = model
    K = RateMatrix.from_edges(V, edges)
    t = build_series_table(K, 0, N=n)
    expected = np.linalg.matrix_power(K.dense(), n)[0]
    np.testing.assert_allclose(t.step_weights(n), expected, rtol=1e-9, atol=0.0)


@settings(max_examples=40, deadline=None)
@given(small_models())
def test_tables_are_nonnegative(model):
    V, _, edges = model
    K = RateMatrix.from_edges(V, edges)
    t = build_series_table(K, 0, target=V - 1, N=8)
    assert np.all(t.scaled_rows >= 0.0)
    assert np.all(t.fp_scaled >= 0.0)


def test_star_first_returns_are_catalan_counts():
    # first-return shapes on one ray are Dyck paths, so the weight at depth
    # 2m is d * C_(m-1); integer counts stay exact in doubles at this size
    for d in (3, 4):
        K = star_model(d, ray_length=16)
        t = build_series_table(K, 0, target=0, N=30)
        fp = t.first_passage
        for m in range(1, 16):
            assert fp[2 * m] == float(d * catalan(m - 1))
        assert np.all(fp[1::2] == 0.0)


def test_rate_increase_never_decreases_mass():
    base = [(0, 1, 1.0), (1, 0, 0.5), (1, 2, 0.25), (2, 1, 1.0)]
    bumped = [(0, 1, 1.0), (1, 0, 0.5), (1, 2, 2.25), (2, 1, 1.0)]
    ta = build_series_table(RateMatrix.from_edges(3, base), 0, N=12)
    tb = build_series_table(RateMatrix.from_edges(3, bumped), 0, N=12)
    assert np.all(tb.generation_mass >= ta.generation_mass)


# ---------------------------------------------------------------------------
# series evaluation


def test_loop_series_closed_forms():
    # geometric series: H = Theta = 1/(1 - lam*k), Phi = lam*k
    t = build_series_table(loop_model(2.0), 0, target=0, N=200)
    lam = 0.25
    assert abs(evaluate_H(t, lam).partial_sum - 2.0) < 1e-9
    assert abs(evaluate_Theta(t, lam).partial_sum - 2.0) < 1e-9
    assert abs(evaluate_Phi(t, lam).partial_sum - 0.5) < 1e-15
    assert evaluate_H(t, lam).converged_flag


def test_series_at_lambda_zero():
    t = build_series_table(star_model(4, 8), 0, target=0, N=16)
    assert evaluate_H(t, 0.0).partial_sum == 1.0
    assert evaluate_Theta(t, 0.0).partial_sum == 1.0
    assert evaluate_Phi(t, 0.0).partial_sum == 0.0
    assert evaluate_H(t, 0.0).converged_flag


def test_divergent_series_is_flagged():
    t = build_series_table(loop_model(1.0), 0, target=0, N=64)
    ev = evaluate_H(t, 1.0)  # all terms equal one
    assert not ev.converged_flag
    assert ev.partial_sum == pytest.approx(65.0)


def test_overflowing_series_reports_inf():
    t = build_series_table(loop_model(4.0), 0, target=0, N=600)
    ev = evaluate_H(t, 300.0)
    assert math.isinf(ev.partial_sum)
    assert not ev.converged_flag


def test_negative_lambda_rejected():
    t = build_series_table(loop_model(1.0), 0, target=0, N=8)
    with pytest.raises(ContractError):
        evaluate_H(t, -0.1)


def test_star_return_series_closed_form():
    # at lam = 0.3 the closed form d*(1 - sqrt(1 - 4 lam^2))/2 equals 0.4 exactly
    K = star_model(4, ray_length=32)
    t = build_series_table(K, 0, target=0, N=60)
    got = evaluate_Phi(t, 0.3).partial_sum
    assert abs(got - 0.4) < 1e-9
    got = evaluate_Phi(t, 0.4).partial_sum
    assert abs(got - 0.8) < 1e-6


# ---------------------------------------------------------------------------
# series identities


def _all_unskipped(report: dict, tol: float) -> None:
    names = ["H_recursion", "Theta_recursion", "H_first_passage_product", "H_return_series", "Phi_first_step"]
    for name in names:
        entry = report[name]
        assert not entry["skipped"], name
        assert entry["residual"] <= tol, (name, entry["residual"])


def test_identities_single_loop():
    report = check_series_identities(loop_model(1.0), 0.5, 0, 0, N=64)
    _all_unskipped(report, 1e-9)


def test_identities_star_hub_and_ray():
    K = star_model(4, ray_length=20)
    report = check_series_identities(K, 0.2, 0, 1, N=80)
    _all_unskipped(report, 1e-8)
    report = check_series_identities(K, 0.2, 1, 0, N=80)
    _all_unskipped(report, 1e-8)


def test_identities_random_model_inside_radius():
    rng = np.random.default_rng(11)
    V = 6
    edges = []
    for u in range(V):
        for v in range(V):
            if rng.uniform() < 0.5:
                edges.append((u, v, float(rng.integers(1, 5)) / 4.0))
    K = RateMatrix.from_edges(V, edges)
    t = build_series_table(K, 0, N=40)
    growth = np.nanmax(t.mass_roots()[20:])
    lam = 0.3 / growth
    report = check_series_identities(K, lam, 0, 3, N=80)
    _all_unskipped(report, 1e-6)


def test_identities_skip_on_divergence():
    report = check_series_identities(loop_model(1.0), 2.0, 0, 0, N=40)
    for name in ["H_recursion", "Theta_recursion", "H_first_passage_product", "H_return_series"]:
        assert report[name]["skipped"]
        assert math.isnan(report[name]["residual"])


def test_identities_reject_bad_vertices():
    with pytest.raises(ContractError):
        check_series_identities(loop_model(1.0), 0.5, 0, 3, N=8)


def test_cut_vertex_splits_first_passage():
    # on 0 - 1 - 2 every path 0 -> 2 crosses 1, so the first-passage series factors
    K = path_model([1.0, 1.0])
    lam = 0.2
    t02 = build_series_table(K, 0, target=2, N=80)
    t01 = build_series_table(K, 0, target=1, N=80)
    t12 = build_series_table(K, 1, target=2, N=80)
    lhs = evaluate_Phi(t02, lam).partial_sum
    rhs = evaluate_Phi(t01, lam).partial_sum * evaluate_Phi(t12, lam).partial_sum
    assert abs(lhs - rhs) < 1e-12


# ---------------------------------------------------------------------------
# growth estimators


def test_estimators_constant_loop():
    t = build_series_table(loop_model(2.0), 0, target=0, N=40)
    ks = estimate_Ks(t)
    kw = estimate_Kw(t)
    for est in (ks, kw):
        assert abs(est.liminf_estimate - 2.0) < 1e-10
        assert abs(est.limsup_estimate - 2.0) < 1e-10
        assert not est.oscillation_flag
    assert ks.window_used == (20, 40)


def test_estimators_deep_horizon_stability():
    # 4^600 overflows linear doubles; the log-space pipeline must not care
    t = build_series_table(loop_model(4.0), 0, target=0, N=600)
    assert math.isinf(t.step_weights(600)[0])
    est = estimate_Kw(t)
    assert abs(est.liminf_estimate - 4.0) < 1e-10
    assert abs(est.limsup_estimate - 4.0) < 1e-10


def test_estimators_two_cycle_oscillates():
    # returns exist only at even depths: root sequence alternates 0, 1
    K = RateMatrix.from_edges(2, [(0, 1, 1.0), (1, 0, 1.0)])
    t = build_series_table(K, 0, target=0, N=32)
    ks = estimate_Ks(t)
    assert ks.liminf_estimate == 0.0
    assert ks.limsup_estimate == 1.0
    assert ks.oscillation_flag
    kw = estimate_Kw(t)  # total mass is constant, no oscillation
    assert kw.liminf_estimate == kw.limsup_estimate == 1.0
    assert not kw.oscillation_flag


def test_estimators_all_zero_window():
    K = RateMatrix.from_edges(2, [(0, 1, 1.0)])
    t = build_series_table(K, 0, target=0, N=16)
    est = estimate_Ks(t)
    assert est.liminf_estimate == 0.0
    assert est.limsup_estimate == 0.0
    assert not est.oscillation_flag


@settings(max_examples=40, deadline=None)
@given(small_models())
def test_return_root_never_exceeds_mass_root(model):
    # k^(n)(x,x) <= T^n_x, so the nth roots are ordered pointwise
    V, _, edges = model
    K = RateMatrix.from_edges(V, edges)
    t = build_series_table(K, 0, target=0, N=12)
    rr = t.return_roots()
    mr = t.mass_roots()
    for n in range(1, 13):
        assert rr[n] <= mr[n] * (1.0 + 1e-12) + 1e-300


# ---------------------------------------------------------------------------
# lambda_s from the first-return series


def test_lambda_s_single_loop():
    # the only first return is one step of weight k, so the threshold is 1/k
    got = lambda_s_from_phi(loop_model(2.0), 0, (0.0, 1.0), N=16, tol=1e-9)
    assert abs(got - 0.5) < 1e-8


def test_lambda_s_star():
    K = star_model(4, ray_length=40)
    got = lambda_s_from_phi(K, 0, (0.2, 0.6), N=80, tol=1e-6)
    assert abs(got - math.sqrt(3.0) / 4.0) < 1e-4


def test_lambda_s_interval_contracts():
    K = loop_model(2.0)
    with pytest.raises(ContractError):
        lambda_s_from_phi(K, 0, (0.4, 0.1))
    with pytest.raises(ContractError):
        lambda_s_from_phi(K, 0, (-0.5, 0.5))
    with pytest.raises(ContractError):
        lambda_s_from_phi(K, 0, (0.9, 1.2), N=16)  # already above one at the left end


def test_lambda_s_returns_hi_when_series_stays_small():
    got = lambda_s_from_phi(loop_model(2.0), 0, (0.0, 0.4), N=16)
    assert got == 0.4
