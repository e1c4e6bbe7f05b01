import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qcdkit.fdr import (DecisionEnsemble, StreamwiseDecisions, averaged_fdr, bayes_common_threshold_ensemble,
                        bayes_common_threshold_run, count_vr, eop_estimate, fdr_estimate, fdr_report,
                        fnr_estimate, mth_detection_time)
from qcdkit.model import NEVER, ContractError, RngStream
from qcdkit.noise import BlockSource, replication_streams
from qcdkit.single import ShiryaevState, shiryaev_step


def _dec(T, nu):
    return StreamwiseDecisions(np.array(T, dtype=float), np.array(nu, dtype=float))


def _brute_vr(T, nu, n):
    V = R = 0
    for t, v in zip(T, nu):
        if t <= n:
            R += 1
            if t < v:
                V += 1
    return V, R


def test_count_vr_hand_example():
    d = _dec([5, 20, NEVER], [10, 15, 8])
    assert count_vr(d, 25) == (1, 2)


def test_count_vr_no_stops():
    d = _dec([NEVER, NEVER], [3, NEVER])
    assert count_vr(d, 100) == (0, 0)
    assert fdr_report(d, 100).fdr == 0.0


def test_none_means_never():
    d = StreamwiseDecisions([None, 4], [2, None])
    assert count_vr(d, 10) == (1, 1)


def test_no_false_alarms_when_all_stop_after_change():
    d = _dec([10, 12, 30], [10, 5, 29])
    for n in range(1, 40):
        assert count_vr(d, n)[0] == 0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 30), st.integers(1, 30), st.booleans(), st.booleans()),
                min_size=1, max_size=8), st.integers(1, 40))
def test_count_vr_matches_brute_force(rows, n):
    T = [t if stops else NEVER for t, _, stops, _ in rows]
    nu = [v if changes else NEVER for _, v, _, changes in rows]
    d = _dec(T, nu)
    assert count_vr(d, n) == _brute_vr(T, nu, n)
    V, R = count_vr(d, n)
    assert 0 <= V <= R <= len(rows)
    r = fdr_report(d, n)
    assert 0.0 <= r.fdr <= 1.0 and 0.0 <= r.fnr <= 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 30), st.integers(1, 30)), min_size=1, max_size=8))
def test_detections_nondecreasing_in_n(rows):
    d = _dec([t for t, _ in rows], [v for _, v in rows])
    prev = (0, 0)
    for n in range(1, 35):
        cur = count_vr(d, n)
        assert cur[0] >= prev[0] and cur[1] >= prev[1]
        prev = cur


def test_decisions_contract():
    with pytest.raises(ContractError):
        _dec([1, 2], [1])
    with pytest.raises(ContractError):
        _dec([0], [1])
    with pytest.raises(ContractError):
        count_vr(_dec([1], [1]), 0)


def test_fnr_examples():
    assert fdr_report(_dec([3, NEVER], [5, 5]), 10).fnr == 1.0
    assert fdr_report(_dec([6, 7], [5, 5]), 10).fnr == 0.0
    assert fdr_report(_dec([NEVER, NEVER], [50, NEVER]), 10).fnr == 0.0


def test_fdr_estimate_constant_ratio():
    # every replication has one false and one true detection
    T = np.tile([2.0, 8.0, NEVER], (5, 1))
    nu = np.tile([5.0, 5.0, NEVER], (5, 1))
    est = fdr_estimate(DecisionEnsemble(T, nu), 10)
    assert est.estimate == 0.5 and est.std_error == 0.0 and est.replications == 5


def test_fdr_single_replication_is_realized_ratio():
    d = _dec([1, 2, 3, 9], [5, 5, 1, 1])
    est = fdr_estimate(DecisionEnsemble.from_decisions([d]), 5)
    V, R = count_vr(d, 5)
    assert est.estimate == V / R


def test_averaged_fdr_matches_plain_mean():
    rng = np.random.default_rng(0)
    nu = rng.choice([3.0, 10.0, NEVER], size=(200, 1)).repeat(4, axis=1)
    T = rng.integers(1, 20, size=(200, 4)).astype(float)
    ens = DecisionEnsemble(T, nu)
    assert averaged_fdr(ens, 15) == pytest.approx(fdr_estimate(ens, 15).estimate, abs=1e-12)


def test_eop_examples():
    T = np.array([[NEVER, NEVER], [NEVER, NEVER]])
    nu = np.array([[1.0, 2.0], [3.0, NEVER]])
    assert eop_estimate(DecisionEnsemble(T, nu), 1) == 0.0

    # three scripted replications, tau = first detection time
    T = np.array([[2.0, 6.0], [4.0, 5.0], [NEVER, NEVER]])
    nu = np.array([[5.0, 5.0], [1.0, 1.0], [NEVER, NEVER]])
    ens = DecisionEnsemble(T, nu)
    # ratios at tau: 1/1 at tau=2, 0/1 at tau=4, 0/1 at tau=10
    assert eop_estimate(ens, mth_detection_time(1, 10)) == pytest.approx(1.0 / 16.0)


def test_eop_scaling():
    T = np.array([[1.0, NEVER], [2.0, 3.0]])
    nu = np.array([[5.0, 5.0], [9.0, 9.0]])
    ens = DecisionEnsemble(T, nu)
    # FDR is 1 at tau and at 2*tau, so doubling tau halves the ratio
    a = eop_estimate(ens, np.array([3.0, 3.0]))
    b = eop_estimate(ens, np.array([6.0, 6.0]))
    assert b == pytest.approx(a / 2)
    with pytest.raises(ContractError):
        eop_estimate(ens, 0)


def test_mth_detection_time():
    d = _dec([7, 3, NEVER], [1, 1, 1])
    assert mth_detection_time(1, 100)(d) == 3
    assert mth_detection_time(2, 5)(d) == 5
    assert mth_detection_time(3, 100)(d) == 100


def test_common_threshold_alpha_one_stops_everything_at_first_tick():
    ens = bayes_common_threshold_ensemble(6, 0.5, 0.01, 1.0, 50, 20, seed=1)
    assert np.all(ens.stop_times == 1.0)


def test_common_threshold_rejects_bad_alpha():
    with pytest.raises(ContractError):
        bayes_common_threshold_ensemble(3, 0.5, 0.01, 0.0, 10, 2)
    with pytest.raises(ContractError):
        bayes_common_threshold_ensemble(3, 0.5, 1.0, 0.1, 10, 2)


def test_common_threshold_single_stream_is_shiryaev():
    theta, rho, alpha, horizon, seed = 0.5, 0.02, 0.1, 400, 3
    ens = bayes_common_threshold_ensemble(1, theta, rho, alpha, horizon, 30, seed=seed)
    streams = replication_streams(seed, range(30), 1)
    noise = BlockSource(streams, 1)
    x = np.stack([noise.draw(np.arange(30)) for _ in range(horizon)], axis=1)[..., 0]
    for i in range(30):
        nu = ens.truth[i, 0]
        s = ShiryaevState.initial(rho, 1 - alpha)
        stop = NEVER
        for n in range(1, horizon + 1):
            shift = theta if n >= nu else 0.0
            s = shiryaev_step(s, math.exp(theta * (x[i, n - 1] + shift) - theta ** 2 / 2))
            if s.stopped:
                stop = n
                break
        assert ens.stop_times[i, 0] == stop


def test_common_threshold_run_matches_ensemble_row():
    ens = bayes_common_threshold_ensemble(4, 0.5, 0.05, 0.2, 300, 5, seed=2)
    d = bayes_common_threshold_run(4, 0.5, 0.05, 0.2, 300, RngStream(2, 3, 1))
    np.testing.assert_array_equal(d.stop_times, ens.stop_times[3])
    np.testing.assert_array_equal(d.truth, ens.truth[3])


def test_common_threshold_controls_fdr_and_fnr_decreases():
    ens = bayes_common_threshold_ensemble(20, 0.5, 0.01, 0.2, 2000, 500, seed=4)
    f = fdr_estimate(ens, 2000)
    assert f.estimate <= 0.2 + 2 * f.std_error
    fnr = [fnr_estimate(ens, n) for n in (50, 100, 200, 400, 800, 2000)]
    for a, b in zip(fnr, fnr[1:]):
        assert b.estimate <= a.estimate + 2 * math.hypot(a.std_error, b.std_error)
    assert fnr[-1].estimate < fnr[0].estimate


def test_fnr_can_rise_between_checkpoints():
    # a change between the two checkpoints that is not detected yet
    d = _dec([3, NEVER], [5, 60])
    assert fdr_report(d, 50).fnr == 0.0
    assert fdr_report(d, 100).fnr == 1.0


def test_common_threshold_replications_are_order_independent():
    full = bayes_common_threshold_ensemble(5, 0.5, 0.02, 0.1, 200, 10, seed=7)
    tail = bayes_common_threshold_ensemble(5, 0.5, 0.02, 0.1, 200, 4, seed=7, first_index=6)
    np.testing.assert_array_equal(full.stop_times[6:], tail.stop_times)
