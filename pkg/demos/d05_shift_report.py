"""
Where does the time go?
=======================

Per-quantile shift of rootkit delta times against the normal mean, for
every probe pair. Only the targeted gap should move.
"""

import numpy as np

from tracetime.delta_engine import compute_deltas, quantile_shift_report
from tracetime.synthgen import DatasetPlan, default_scenarios, default_shift, iter_plan_batches
from tracetime.trace_model import Label

spec = default_scenarios()[0]
batches = list(iter_plan_batches([DatasetPlan(spec, 40, 40, default_shift())], seed=5))

for strategy in ("function", "sequence"):
    normal = [compute_deltas(b, strategy) for b in batches if b.label is Label.NORMAL]
    rootkit = [compute_deltas(b, strategy) for b in batches if b.label is Label.ROOTKIT]
    print(strategy)
    for pair, shifts in quantile_shift_report(normal, rootkit).items():
        print(f"  {str(pair):<48}", np.round(np.median(shifts, axis=0)).astype(int))
