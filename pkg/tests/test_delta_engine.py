import io
import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import batch_of, random_batch
from tracetime.delta_engine import (
    ProbePair,
    Strategy,
    compute_function_deltas,
    compute_sequence_deltas,
    function_matches,
    pid_groups,
    quantile_shift_report,
    write_deltas_csv,
)
from tracetime.errors import UnusableBatch
from tracetime.trace_model import Batch, Direction, Label


def as_lists(series):
    return {str(k): v.tolist() for k, v in series.deltas.items()}


def test_function_grouping_single_call():
    b = batch_of([("filldir64", "enter", 7, 100), ("filldir64", "return", 7, 150)])
    assert as_lists(compute_function_deltas(b)) == {"filldir64-enter:filldir64-return": [50]}


def test_function_grouping_reentrant_innermost_first():
    b = batch_of([("f", "enter", 7, 100), ("f", "enter", 7, 110), ("f", "return", 7, 120), ("f", "return", 7, 140)])
    assert as_lists(compute_function_deltas(b)) == {"f-enter:f-return": [10, 40]}


def test_function_grouping_unmatched_return():
    b = batch_of([("f", "return", 7, 90), ("g", "enter", 7, 95)])
    series = compute_function_deltas(b)
    assert series.deltas == {}
    assert series.unmatched_return == 1
    assert series.unmatched_enter == 1


def _non_crossing_matchings(dirs):
    """All complete enter->return assignments of one function that nest properly."""
    enters = [i for i, d in enumerate(dirs) if d == "enter"]
    returns = [i for i, d in enumerate(dirs) if d == "return"]
    found = []
    for perm in itertools.permutations(enters):
        pairs = list(zip(perm, returns))
        if any(e > r for e, r in pairs):
            continue
        crossing = any(a < c < b < d for (a, b), (c, d) in itertools.permutations(pairs, 2))
        if not crossing:
            found.append(sorted(pairs, key=lambda p: p[1]))
    return found


def _balanced_sequences(n_calls):
    for bits in itertools.product(["enter", "return"], repeat=2 * n_calls):
        depth = 0
        for b in bits:
            depth += 1 if b == "enter" else -1
            if depth < 0:
                break
        else:
            if depth == 0:
                yield list(bits)


@pytest.mark.parametrize("n_calls", [1, 2, 3, 4])
def test_lifo_is_the_unique_nesting(n_calls):
    for dirs in _balanced_sequences(n_calls):
        b = batch_of([("f", d, 1, 10 * (i + 1)) for i, d in enumerate(dirs)])
        events = pid_groups(b)[1]
        matches, ue, ur = function_matches(events)
        brute = _non_crossing_matchings(dirs)
        assert len(brute) == 1, dirs
        assert matches == brute[0]
        assert ue == ur == 0


def test_sequence_grouping_adjacent_pairs():
    b = batch_of([("A", "enter", 7, 100), ("B", "enter", 7, 130), ("A", "return", 7, 170)])
    assert as_lists(compute_sequence_deltas(b)) == {"A-enter:B-enter": [30], "B-enter:A-return": [40]}


def test_sequence_single_event_pid_emits_nothing():
    b = batch_of([("A", "enter", 1, 100), ("A", "enter", 2, 110), ("A", "return", 2, 150)])
    series = compute_sequence_deltas(b)
    assert series.total() == 1


def test_sequence_never_crosses_pids(rng):
    for _ in range(50):
        b = random_batch(rng, n_pids=2)
        series = compute_sequence_deltas(b)
        # brute force: take the merged stream, split again per pid, pair neighbours
        expected = {}
        for pid in {e.pid for e in b.events}:
            own = sorted((e for e in b.events if e.pid == pid), key=lambda e: (e.timestamp_ns, e.arrival_index))
            for x, y in zip(own, own[1:]):
                expected.setdefault(f"{x.probe}:{y.probe}", []).append(y.timestamp_ns - x.timestamp_ns)
        got = {k: sorted(v) for k, v in as_lists(series).items()}
        assert got == {k: sorted(v) for k, v in expected.items()}


def test_ties_broken_by_arrival_index():
    b = batch_of([("A", "enter", 1, 100), ("B", "enter", 1, 100), ("C", "enter", 1, 100)])
    assert as_lists(compute_sequence_deltas(b)) == {"A-enter:B-enter": [0], "B-enter:C-enter": [0]}


def test_unusable_batch_raises():
    with pytest.raises(UnusableBatch):
        compute_function_deltas(Batch("e", Label.NORMAL, "default"))


def _shift(batch, c):
    return replace(batch, events=tuple(replace(e, timestamp_ns=e.timestamp_ns + c) for e in batch.events))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.integers(1, 10**12))
def test_laws_on_random_batches(seed, c):
    b = random_batch(np.random.default_rng(seed))
    seq = compute_sequence_deltas(b)
    fun = compute_function_deltas(b)
    groups = pid_groups(b)
    assert seq.total() == sum(len(g) - 1 for g in groups.values())
    for key, vals in fun.deltas.items():
        assert key.first.direction is Direction.ENTER and key.second.direction is Direction.RETURN
        assert key.first.probe_name == key.second.probe_name
        assert (vals >= 0).all()
    for vals in seq.deltas.values():
        assert (vals >= 0).all()
    shifted = _shift(b, c)
    assert as_lists(compute_sequence_deltas(shifted)) == as_lists(seq)
    assert as_lists(compute_function_deltas(shifted)) == as_lists(fun)
    assert as_lists(compute_function_deltas(b)) == as_lists(fun)


def test_function_delta_is_sum_of_spanned_sequence_deltas(rng):
    for _ in range(100):
        b = random_batch(rng)
        for events in pid_groups(b).values():
            gaps = [y.timestamp_ns - x.timestamp_ns for x, y in zip(events, events[1:])]
            matches, _, _ = function_matches(events)
            for i, j in matches:
                assert events[j].timestamp_ns - events[i].timestamp_ns == sum(gaps[i:j])


def _series_from(values_by_pair, strategy=Strategy.FUNCTION):
    from tracetime.delta_engine import DeltaSeries

    return DeltaSeries(strategy, {ProbePair.parse(k): np.asarray(v, dtype=np.int64) for k, v in values_by_pair.items()}, "x")


def test_shift_report_identity(rng):
    key = "f-enter:f-return"
    normal = [_series_from({key: rng.integers(100, 200, 300)}) for _ in range(5)]
    report = quantile_shift_report(normal, normal, q=9)
    # each rootkit row minus the mean of the same rows sums to zero per quantile
    assert np.allclose(report[ProbePair.parse(key)].sum(axis=0), 0.0)
    same = quantile_shift_report(normal[:1], normal[:1], q=9)
    assert np.all(same[ProbePair.parse(key)] == 0)


def test_shift_report_constant_offset(rng):
    key = "f-enter:f-return"
    base = [rng.integers(1000, 3000, 400) for _ in range(6)]
    normal = [_series_from({key: v}) for v in base]
    rootkit = [_series_from({key: v + 500}) for v in base]
    shifts = quantile_shift_report(normal, rootkit, q=9)[ProbePair.parse(key)]
    assert shifts.shape == (6, 9)
    # per-batch deviations cancel in the mean, leaving exactly the offset
    assert np.allclose(shifts.mean(axis=0), 500.0)


def test_shift_report_no_shared_pairs(caplog):
    report = quantile_shift_report([_series_from({"a-enter:a-return": range(20)})], [_series_from({"b-enter:b-return": range(20)})])
    assert report == {}
    assert "no probe pair" in caplog.text


def test_csv_export():
    b = batch_of([("f", "enter", 1, 100), ("f", "return", 1, 150)])
    buf = io.StringIO()
    write_deltas_csv(compute_function_deltas(b), buf)
    assert buf.getvalue() == "pair,delta_ns\nf-enter:f-return,50\n"
