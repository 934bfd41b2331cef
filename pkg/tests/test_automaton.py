import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from penode.automaton import (EVENT_RTOL, EventRecord, ModeSchedule, PwmSpec, TransitionMap,
                              build_schedule, carrier_value, dab_map, encode_modes, gate_log,
                              gate_word, next_crossing, next_event, single_switch_map)
from penode.errors import MapIncomplete, RefOutOfRange

from oracles import bisect_crossing, bisect_cycle


def test_from_duty_reference():
    s = PwmSpec.from_duty(0.25, 1e-5, amplitude=2.0)
    assert s.reference == pytest.approx(-1.0)
    assert s.duty(0, 0.0) == pytest.approx(0.25)


def test_carrier_is_sawtooth():
    s = PwmSpec(1.0, 2.0)
    assert carrier_value(0.0, s) == pytest.approx(-1.0)
    assert carrier_value(1.0, s) == pytest.approx(0.0)
    assert carrier_value(1.5, s) == pytest.approx(0.5)


def test_next_crossing_simple():
    s = PwmSpec.from_duty(0.3, 1.0)
    assert next_crossing(0.0, s) == pytest.approx(0.3)
    assert next_crossing(0.3, s) == pytest.approx(1.0)
    assert next_crossing(0.5, s) == pytest.approx(1.0)
    assert next_crossing(1.0, s) == pytest.approx(1.3)


def test_duty_extremes_have_only_boundary_events():
    for d in (0.0, 1.0):
        s = PwmSpec.from_duty(d, 1.0)
        assert next_crossing(0.1, s) == pytest.approx(1.0)


def test_reference_out_of_range():
    s = PwmSpec(1.0, 1.0, reference=1.5)
    with pytest.raises(RefOutOfRange):
        next_crossing(0.0, s)


@given(st.floats(0.02, 0.98), st.floats(1e-6, 1e-3), st.floats(0.0, 0.999),
       st.floats(0.0, 20.0), st.floats(0.1, 5.0))
@settings(max_examples=200, deadline=None)
def test_next_crossing_matches_bisection(duty, period, phase_frac, t_frac, amp):
    s = PwmSpec.from_duty(duty, period, amplitude=amp, phase_offset=phase_frac * period)
    t = t_frac * period
    # a crossing within rounding of a tolerance edge is a tie either side may call
    start, cross = bisect_cycle(t, s)
    if cross is not None:
        edges = (t + s.tol, start + period - s.tol)
        assume(all(abs(cross - e) > 1e-6 * s.tol for e in edges))
    assert abs(next_crossing(t, s) - bisect_crossing(t, s)) <= 1e-12 * period


@given(st.floats(0.05, 0.95), st.floats(0.0, 10.0))
@settings(max_examples=100, deadline=None)
def test_next_crossing_strictly_later(duty, t_frac):
    s = PwmSpec.from_duty(duty, 1e-4)
    t = t_frac * 1e-4
    assert next_crossing(t, s) > t


def test_gate_word_right_limit():
    s = PwmSpec.from_duty(0.5, 1.0)
    assert gate_word(0.0, [s]) == (1,)
    assert gate_word(0.5, [s]) == (0,)
    assert gate_word(0.999, [s]) == (0,)


def test_transition_maps():
    m = single_switch_map()
    assert m(0, (1,)) == 0 and m(0, (0,)) == 1 and m(1, (1,)) == 0
    d = dab_map()
    assert [d(0, w) for w in ((1, 1), (1, 0), (0, 1), (0, 0))] == [0, 1, 2, 3]
    assert d.word_of_mode() == {0: (1, 1), 1: (1, 0), 2: (0, 1), 3: (0, 0)}
    with pytest.raises(MapIncomplete):
        m(0, (1, 1))


def test_schedule_requires_increasing_times():
    with pytest.raises(ValueError):
        ModeSchedule([EventRecord(0.0, 0), EventRecord(0.0, 1)], 1.0)


def test_build_schedule_single_switch():
    s = PwmSpec.from_duty(0.25, 1.0)
    sched = build_schedule(0.0, 3.0, 0, [s], single_switch_map())
    assert sched.modes == [0, 1, 0, 1, 0, 1]
    np.testing.assert_allclose(sched.times, [0, 0.25, 1, 1.25, 2, 2.25], atol=1e-12)
    assert all(d > 0 for d in sched.dwell_times())
    assert sched.mode_at(1.1) == 0 and sched.mode_at(1.3) == 1


def test_build_schedule_only_records_mode_changes():
    # memoryless map that merges both words into one mode: no events after t0
    tmap = TransitionMap.memoryless({(1,): 0, (0,): 0}, 1)
    sched = build_schedule(0.0, 5.0, 0, [PwmSpec.from_duty(0.5, 1.0)], tmap)
    assert len(sched.records) == 1


def test_dab_schedule_phase_shift():
    T = 1.0
    p = PwmSpec.from_duty(0.5, T)
    s = PwmSpec.from_duty(0.5, T, phase_offset=0.2)
    sched = build_schedule(0.0, 2.0, 1, [p, s], dab_map())
    # words: (1,0) on [0,0.2), (1,1) to 0.5, (0,1) to 0.7, (0,0) to 1.0 ...
    assert sched.modes[:5] == [1, 0, 2, 3, 1]
    np.testing.assert_allclose(sched.times[:5], [0, 0.2, 0.5, 0.7, 1.0], atol=1e-12)


def test_coincident_channels_fold_into_one_event():
    p = PwmSpec.from_duty(0.5, 1.0)
    ev = next_event(0.0, 0, [p, p], dab_map())
    assert ev.time == pytest.approx(0.5)
    assert ev.word == (0, 0) and ev.mode == 3


def test_gate_log_replay_matches_schedule():
    p = PwmSpec.from_duty(0.5, 1.0)
    s = PwmSpec.from_duty(0.5, 1.0, phase_offset=0.3)
    log = gate_log(0.0, 4.0, [p, s])
    replay = encode_modes(log, dab_map(), 0, horizon_end=4.0)
    pred = build_schedule(0.0, 4.0, dab_map()(0, log[0][1]), [p, s], dab_map())
    assert replay.modes == pred.modes
    np.testing.assert_allclose(replay.times, pred.times, atol=1e-12)


def test_encode_modes_collapses_duplicate_timestamps():
    log = [(0.0, (1,)), (0.5, (1,)), (0.5, (0,)), (1.0, (1,))]
    sched = encode_modes(log, single_switch_map(), 1)
    assert sched.modes == [0, 1, 0]
    assert sched.times == [0.0, 0.5, 1.0]


def test_event_rtol_constant():
    assert EVENT_RTOL == 1e-9
    assert PwmSpec(1.0, 2e-5).tol == pytest.approx(2e-14)
