"""Delta-time extraction from absolute probe timestamps.

Events are split by pid and each group is sorted by ``(timestamp_ns,
arrival_index)`` before subtraction. Two pairing strategies are offered:

* function grouping pairs every return of a function with the most recent
  unconsumed enter of that function in the same pid (a LIFO stack per
  ``(pid, probe_name)``), yielding execution durations;
* sequence grouping pairs each event with its chronological successor in
  the same pid, yielding inter-probe gaps.
"""

from __future__ import annotations

import csv
import logging
import os
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from tracetime.errors import UnusableBatch
from tracetime.trace_model import Batch, Direction, ProbeEvent, ProbeId

logger = logging.getLogger(__name__)


class Strategy(str, Enum):
    FUNCTION = "function"
    SEQUENCE = "sequence"


@dataclass(frozen=True, order=True)
class ProbePair:
    first: ProbeId
    second: ProbeId

    def __str__(self) -> str:
        return f"{self.first}:{self.second}"

    @classmethod
    def parse(cls, text: str) -> ProbePair:
        first, sep, second = text.partition(":")
        if not sep:
            raise ValueError(f"not a probe pair: {text!r}")
        return cls(ProbeId.parse(first), ProbeId.parse(second))

    @classmethod
    def function(cls, probe_name: str) -> ProbePair:
        return cls(ProbeId(probe_name, Direction.ENTER), ProbeId(probe_name, Direction.RETURN))


@dataclass(frozen=True)
class DeltaSeries:
    """Per-pair delta times (ns) of one batch.

    Attributes:
        strategy: pairing strategy that produced the deltas.
        deltas: pair -> int64 array of delta times, in per-pid emission order.
        batch_id: source batch.
        unmatched_enter: enters left on a stack at the end of their pid group
            (function grouping only).
        unmatched_return: returns without a preceding enter (function grouping only).
    """

    strategy: Strategy
    deltas: dict[ProbePair, np.ndarray]
    batch_id: str
    unmatched_enter: int = 0
    unmatched_return: int = 0

    def total(self) -> int:
        return sum(len(v) for v in self.deltas.values())


def pid_groups(batch: Batch) -> dict[int, list[ProbeEvent]]:
    """Split events by pid and sort each group by (timestamp, arrival index)."""
    groups: dict[int, list[ProbeEvent]] = defaultdict(list)
    for ev in batch.events:
        groups[ev.pid].append(ev)
    for events in groups.values():
        events.sort(key=lambda e: (e.timestamp_ns, e.arrival_index))
    return dict(sorted(groups.items()))


def function_matches(events: Sequence[ProbeEvent]) -> tuple[list[tuple[int, int]], int, int]:
    """Match enters to returns within one sorted pid group.

    Returns:
        ``(matches, unmatched_enter, unmatched_return)`` where ``matches``
        holds ``(enter_position, return_position)`` index pairs into
        ``events`` in the order the returns occur.
    """
    stacks: dict[str, list[int]] = defaultdict(list)
    matches = []
    unmatched_return = 0
    for pos, ev in enumerate(events):
        if ev.direction is Direction.ENTER:
            stacks[ev.probe_name].append(pos)
        else:
            stack = stacks.get(ev.probe_name)
            if stack:
                matches.append((stack.pop(), pos))
            else:
                unmatched_return += 1
    unmatched_enter = sum(len(s) for s in stacks.values())
    return matches, unmatched_enter, unmatched_return


def _require_usable(batch: Batch) -> None:
    if not batch.usable:
        raise UnusableBatch(f"batch {batch.batch_id} has {len(batch.events)} events")


def _finish(collected: dict[ProbePair, list[int]]) -> dict[ProbePair, np.ndarray]:
    return {pair: np.asarray(vals, dtype=np.int64) for pair, vals in sorted(collected.items())}


def compute_function_deltas(batch: Batch) -> DeltaSeries:
    """Execution time of every matched enter/return pair, keyed ``f-enter:f-return``."""
    _require_usable(batch)
    collected: dict[ProbePair, list[int]] = defaultdict(list)
    n_enter = n_return = 0
    for events in pid_groups(batch).values():
        matches, ue, ur = function_matches(events)
        n_enter += ue
        n_return += ur
        for i, j in matches:
            start, end = events[i], events[j]
            collected[ProbePair(start.probe, end.probe)].append(end.timestamp_ns - start.timestamp_ns)
    if n_enter or n_return:
        logger.debug("batch %s: %d unmatched enters, %d unmatched returns", batch.batch_id, n_enter, n_return)
    return DeltaSeries(Strategy.FUNCTION, _finish(collected), batch.batch_id, n_enter, n_return)


def compute_sequence_deltas(batch: Batch) -> DeltaSeries:
    """Gap between each event and its successor in the same pid."""
    _require_usable(batch)
    collected: dict[ProbePair, list[int]] = defaultdict(list)
    for events in pid_groups(batch).values():
        for prev, cur in zip(events, events[1:]):
            collected[ProbePair(prev.probe, cur.probe)].append(cur.timestamp_ns - prev.timestamp_ns)
    return DeltaSeries(Strategy.SEQUENCE, _finish(collected), batch.batch_id)


def compute_deltas(batch: Batch, strategy: Strategy | str) -> DeltaSeries:
    if Strategy(strategy) is Strategy.FUNCTION:
        return compute_function_deltas(batch)
    return compute_sequence_deltas(batch)


def quantile_shift_report(
    normal: Sequence[DeltaSeries], rootkit: Sequence[DeltaSeries], q: int = 9
) -> dict[ProbePair, np.ndarray]:
    """Per-quantile shift of rootkit batches relative to the normal mean.

    For each pair seen in both classes, the result row ``i`` holds
    ``quantiles(rootkit[i]) - mean(quantiles(normal))``; column ``k`` is the
    distribution of shifts at quantile level ``(k + 1) / (q + 1)``. Batches
    with fewer than ``q`` deltas for a pair are left out of that pair.
    """
    from tracetime.stat_model import quantile_levels

    if not normal or not rootkit:
        raise ValueError("both normal and rootkit series are required")
    levels = quantile_levels(q)

    def per_pair(series_list):
        out: dict[ProbePair, list[np.ndarray]] = defaultdict(list)
        for series in series_list:
            for pair, vals in series.deltas.items():
                if len(vals) >= q:
                    out[pair].append(np.quantile(vals, levels))
        return out

    normal_q = per_pair(normal)
    rootkit_q = per_pair(rootkit)
    shared = sorted(set(normal_q) & set(rootkit_q))
    if not shared:
        logger.warning("no probe pair is shared by normal and rootkit batches")
    return {pair: np.vstack(rootkit_q[pair]) - np.mean(normal_q[pair], axis=0) for pair in shared}


def write_deltas_csv(series: DeltaSeries, path_or_file) -> None:
    """Write ``pair,delta_ns`` rows for external plotting."""
    own = isinstance(path_or_file, (str, os.PathLike))
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["pair", "delta_ns"])
        for pair, vals in series.deltas.items():
            key = str(pair)
            writer.writerows((key, int(v)) for v in vals)
    finally:
        if own:
            fh.close()
