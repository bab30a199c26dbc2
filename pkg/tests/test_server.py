from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import toy_profile
from fedbal.core import ClientReport, FbParams
from fedbal.model import Layout, WeightVector
from fedbal.server import (
    CapabilityTable,
    ControllerState,
    aggregate,
    baseline_deadline,
    ddl_e_curve,
    find_peak_ddl_e,
    peak_deadline,
    pre_fl_round_times,
    select_cohort,
    select_deadline,
    select_loss_threshold,
    stat_util,
    train_time_estimate,
    update_controller,
)

# ---------------------------------------------------------------- loss threshold


def test_threshold_example():
    assert select_loss_threshold([0.1, 0.2], [0.8, 1.0], 0.5) == pytest.approx(0.5, abs=1e-15)


def test_threshold_endpoints():
    assert select_loss_threshold([0.3, 0.2], [0.8, 1.0], 0.0) == 0.2
    assert select_loss_threshold([0.3, 0.2], [0.8, 1.0], 1.0) == 0.9


def test_threshold_falls_back_when_high_below_low():
    assert select_loss_threshold([2.0, 3.0], [1.0, 1.5], 0.7) == 2.0


def test_threshold_needs_metadata():
    with pytest.raises(ValueError):
        select_loss_threshold([], [1.0], 0.5)


positive_lists = st.lists(st.floats(0, 50), min_size=1, max_size=20)


@settings(max_examples=200, deadline=None)
@given(positive_lists, positive_lists, st.floats(0, 1), st.floats(0, 1))
def test_threshold_monotone_in_ratio(llow, lhigh, a, b):
    lo, hi = sorted((a, b))
    assert select_loss_threshold(llow, lhigh, lo) <= select_loss_threshold(llow, lhigh, hi)


# ---------------------------------------------------------------- controller


def run_controller(us, params, ltr=None, ddlr=None):
    state = ControllerState.initial(params)
    if ltr is not None:
        state = ControllerState(ltr, ddlr, params)
    for R, u in enumerate(us, start=1):
        # U_R = lsum / (l * ddl) with l = ddl = 1
        state = update_controller(state, u, 1, 1.0, R)
    return state


def test_controller_steps_up_when_utility_falls():
    s = run_controller([4, 4, 1, 1], FbParams(w=2, lss=0.1, dss=0.1), ltr=0.5, ddlr=0.5)
    assert (s.ltr, s.ddlr) == (0.6, 0.4)


def test_controller_steps_down_when_utility_rises():
    s = run_controller([1, 1, 4, 4], FbParams(w=2, lss=0.1, dss=0.1), ltr=0.5, ddlr=0.5)
    assert (s.ltr, s.ddlr) == (0.4, 0.6)


def test_controller_clamps():
    s = run_controller([4, 4, 1, 1], FbParams(w=2, lss=0.1, dss=0.1), ltr=1.0, ddlr=0.0)
    assert (s.ltr, s.ddlr) == (1.0, 0.0)


def test_controller_waits_for_two_windows():
    s = run_controller([4, 1], FbParams(w=1, lss=0.1, dss=0.1))
    # R=1 has no older window yet; R=2 compares U1 > U2
    assert (s.ltr, s.ddlr) == (0.1, 0.9)
    s = run_controller([4, 1], FbParams(w=2, lss=0.1, dss=0.1))
    assert (s.ltr, s.ddlr) == (0.0, 1.0)


def test_utility_is_zero_without_samples():
    s = update_controller(ControllerState.initial(FbParams()), 5.0, 0, 10.0, 1)
    assert s.utility == (0.0,)
    s = update_controller(s, 6.0, 3, 2.0, 2)
    assert s.utility[-1] == 1.0


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(0, 100), min_size=1, max_size=40),
    st.integers(1, 5),
    st.floats(0, 1),
    st.floats(0, 1),
    st.floats(0, 1),
    st.floats(0, 1),
)
def test_controller_ratios_stay_in_unit_interval(us, w, lss, dss, ltr, ddlr):
    params = FbParams(w=w, lss=lss, dss=dss)
    state = ControllerState(ltr, ddlr, params)
    for R, u in enumerate(us, start=1):
        state = update_controller(state, u, 1, 1.0, R)
        assert 0 <= state.ltr <= 1 and 0 <= state.ddlr <= 1
    frozen = run_controller(us, FbParams(w=w, lss=0.0, dss=0.0), ltr=ltr, ddlr=ddlr)
    assert (frozen.ltr, frozen.ddlr) == (ltr, ddlr)


# ---------------------------------------------------------------- deadlines


def brute_force_peak(times):
    times = np.asarray(times)
    best_t, best = None, -1.0
    for t in range(1, max(1, math.ceil(times.max())) + 1):
        r = np.sum(times <= t) / t
        if r > best:
            best_t, best = t, r
    return best_t


def test_peak_example():
    assert peak_deadline([5, 6, 20]) == 6
    ts, ratios = ddl_e_curve([5, 6, 20])
    assert ratios[ts == 6][0] == pytest.approx(1 / 3)


def test_peak_single_and_identical():
    assert peak_deadline([7.2]) == 8
    assert peak_deadline([3.3] * 6) == 4
    assert peak_deadline([0.2]) == 1


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0.01, 300), min_size=1, max_size=60))
def test_peak_matches_brute_force(times):
    t = peak_deadline(times)
    assert t == brute_force_peak(times)
    assert t in {max(1, math.ceil(c)) for c in times}


def test_train_time_examples():
    assert train_time_estimate(1.0, 100, 10, 5) == 50
    assert train_time_estimate(2.0, 1, 10, 3) == 6
    assert train_time_estimate(1.0, 11, 10, 1) == 2
    assert train_time_estimate(1.0, 10, 10, 1) == 1
    assert train_time_estimate(1.0, 0, 10, 1) == 1
    assert train_time_estimate(1.0, 101, 10, 1, literal=True) == 10.0


def table(ns=(20, 40, 80), batches=(1.0, 2.0, 0.5), net=1.0):
    profiles = [toy_profile(i, n=n, batch=b, net=net) for i, (n, b) in enumerate(zip(ns, batches))]
    return CapabilityTable.from_profiles(profiles, {p.id: list(p.batch_latency_samples) for p in profiles}), profiles


def test_capability_table_defaults_to_dataset_size():
    cap, _ = table()
    assert cap.train_len(1) == 40
    cap.observe_ot_len(1, 7.0)
    assert cap.train_len(1) == 7.0
    cap.observe_batch(0, 12.0)
    assert cap.mean_batch(0) == pytest.approx((10 * 1.0 + 12.0) / 11)


def test_find_peak_on_capabilities():
    cap, _ = table()
    # completion = 2 + batches * B * E: 2+2=4, 2+8=10, 2+4=6 for E=1
    assert find_peak_ddl_e(cap, [0, 1, 2], 1, 10) == brute_force_peak([4, 10, 6])
    with pytest.raises(ValueError):
        find_peak_ddl_e(cap, [], 1, 10)


def test_select_deadline_endpoints():
    cap, _ = table()
    dl = find_peak_ddl_e(cap, [0, 1, 2], 1, 10)
    dh = find_peak_ddl_e(cap, [0, 1, 2], 5, 10)
    assert dl < dh
    assert select_deadline(cap, [0, 1, 2], 5, 1.0, 10) == dh
    assert select_deadline(cap, [0, 1, 2], 5, 0.0, 10) == dl
    assert select_deadline(cap, [0, 1, 2], 1, 0.3, 10) == select_deadline(cap, [0, 1, 2], 1, 0.9, 10)


def test_fixed_deadline_identical_clients():
    cap, profiles = table(ns=(20, 20, 20), batches=(1.0, 1.0, 1.0))
    hist = {p.id: list(p.batch_latency_samples) for p in profiles}
    T = pre_fl_round_times(profiles, hist, 5, 10, np.random.default_rng(0))
    assert T.shape == (3, 10)
    assert baseline_deadline("fixed_1t", T, cap, [0], 5, 10) == 12.0
    assert baseline_deadline("fixed_2t", T, cap, [0], 5, 10) == 24.0


def test_smartpc_covers_eight_of_ten():
    profiles = [toy_profile(i, n=1, batch=float(i + 1), net=1e-9) for i in range(10)]
    cap = CapabilityTable.from_profiles(profiles, {p.id: list(p.batch_latency_samples) for p in profiles})
    ddl = baseline_deadline("smartpc", None, cap, list(range(10)), 1, 1)
    predicted = [cap.network_time(i) + (i + 1.0) for i in range(10)]
    assert sum(t <= ddl for t in predicted) == 8


def test_wait_for_all_is_infinite():
    assert baseline_deadline("wait_for_all", None, None, [0], 5, 10) == math.inf
    with pytest.raises(ValueError):
        baseline_deadline("fixed_1t", None, None, [0], 5, 10)


# ---------------------------------------------------------------- utility & cohort


def test_stat_util_examples():
    assert stat_util(3.0**2 + 4.0**2, 2) == pytest.approx(7.0711, abs=1e-4)
    assert stat_util(10.0, 0) == 0.0
    assert stat_util(2.5**2, 1) == pytest.approx(2.5, abs=1e-15)
    assert stat_util(-3.0, 4.0) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 50), min_size=1, max_size=30), st.floats(0.1, 10))
def test_stat_util_scales_linearly(losses, alpha):
    a = np.array(losses)
    base = stat_util(float(np.sum(a**2)), a.size)
    scaled = stat_util(float(np.sum((alpha * a) ** 2)), a.size)
    assert scaled == pytest.approx(alpha * base, rel=1e-9)


def test_cohort_full_population():
    rng = np.random.default_rng(0)
    assert select_cohort(range(7), 7, "random", {}, rng) == list(range(7))
    assert select_cohort(range(7), 7, "stat_util", {1: 3.0}, rng) == list(range(7))


def test_cohort_top_k_without_exploration():
    utils = {i: float(u) for i, u in enumerate([5, 1, 9, 3, 7, 2])}
    assert select_cohort(range(6), 3, "stat_util", utils, np.random.default_rng(0), epsilon=0.0) == [0, 2, 4]


def test_cohort_unseen_clients_first():
    utils = {0: 100.0, 1: 50.0}
    assert select_cohort(range(4), 2, "stat_util", utils, np.random.default_rng(0), epsilon=0.0) == [2, 3]


def test_cohort_random_reproducible():
    a = select_cohort(range(100), 10, "random", {}, np.random.default_rng(4))
    b = select_cohort(range(100), 10, "random", {}, np.random.default_rng(4))
    assert a == b and len(set(a)) == 10


def test_cohort_exploration_slot():
    utils = {i: float(i) for i in range(20)}
    chosen = select_cohort(range(20), 10, "stat_util", utils, np.random.default_rng(1), epsilon=0.1)
    assert len(chosen) == 10
    assert set(range(11, 20)) <= set(chosen)


# ---------------------------------------------------------------- aggregation


LAYOUT = Layout(1, 0, 2)  # 4 parameters


def report(cid, delta, n):
    return ClientReport(cid, np.asarray(delta, dtype=float), 1, 1.0, 0, 0, 0, 0, n, 0.0, n, 1.0)


def test_aggregate_single_report_verbatim():
    g = WeightVector(np.array([1.0, 2.0, 3.0, 4.0]), LAYOUT)
    out = aggregate([report(0, [0.5, -1.0, 0.0, 2.0], 7)], g)
    assert np.array_equal(out.values, [1.5, 1.0, 3.0, 6.0])


def test_aggregate_symmetric_cancels():
    g = WeightVector(np.zeros(4), LAYOUT)
    w = np.array([1.0, -2.0, 3.0, 0.5])
    assert np.array_equal(aggregate([report(0, w, 5), report(1, -w, 5)], g).values, np.zeros(4))


def test_aggregate_weighted_mean():
    g = WeightVector(np.zeros(4), LAYOUT)
    out = aggregate([report(0, np.zeros(4), 1), report(1, np.full(4, 4.0), 3)], g)
    assert np.array_equal(out.values, np.full(4, 3.0))


def test_aggregate_empty_keeps_model():
    g = WeightVector(np.ones(4), LAYOUT)
    assert aggregate([], g) is g


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 100), st.floats(-5, 5)), min_size=1, max_size=8), st.randoms())
def test_aggregate_permutation_invariant(items, rnd):
    g = WeightVector(np.zeros(4), LAYOUT)
    reports = [report(i, np.full(4, v), n) for i, (n, v) in enumerate(items)]
    shuffled = list(reports)
    rnd.shuffle(shuffled)
    a = aggregate(reports, g)
    assert a == aggregate(shuffled, g)
    # constant deltas: the result equals the n-weighted mean, weights summing to 1
    ns = np.array([n for n, _ in items], dtype=float)
    weights = ns / ns.sum()
    assert abs(weights.sum() - 1.0) <= 1e-12
    assert np.allclose(a.values, np.sum(weights * np.array([v for _, v in items])), atol=1e-12)
