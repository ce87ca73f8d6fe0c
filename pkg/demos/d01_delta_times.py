"""
From timestamps to delta times
==============================

A tiny hand-written trace of one process calling ``f`` twice (the second
call nested inside the first) and ``g`` once, turned into delta times with
both grouping strategies.
"""

from tracetime.delta_engine import compute_function_deltas, compute_sequence_deltas
from tracetime.trace_model import Batch, Label, make_events

# (probe, direction, pid, tgid, t_ns)
rows = [
    ("f", "enter", 7, 7, 100),
    ("f", "enter", 7, 7, 130),
    ("f", "return", 7, 7, 150),
    ("g", "enter", 7, 7, 160),
    ("g", "return", 7, 7, 175),
    ("f", "return", 7, 7, 300),
]
batch = Batch("demo", Label.NORMAL, "default", make_events(rows))

# function grouping: durations, inner call matched first (LIFO)
for pair, deltas in compute_function_deltas(batch).deltas.items():
    print("function", pair, deltas.tolist())

# sequence grouping: gaps between neighbouring events
for pair, deltas in compute_sequence_deltas(batch).deltas.items():
    print("sequence", pair, deltas.tolist())

# the outer f (200 ns) is the sum of the five gaps it spans
print(sum(sum(d) for d in compute_sequence_deltas(batch).deltas.values()))
