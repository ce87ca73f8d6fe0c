"""
Sliding-window detection
========================

A stream of 100 normal batches followed by 100 shifted ones. Each batch is
scored by a model of the 50 batches before it; batches whose window mixes
both classes are left out of the counts.
"""

from tracetime.detector import eval_online
from tracetime.synthgen import DatasetPlan, default_scenarios, iter_plan_batches, with_shift_sigmas

spec = default_scenarios()[0]
shift = with_shift_sigmas(spec, "verify_dirent_name-return:filldir64-return", 3)
stream = list(iter_plan_batches([DatasetPlan(spec, 100, 100, shift)], seed=0))

# at 3σ the switch batch is caught on about 19 of 20 seeds with function grouping
res = eval_online(stream, "function", window=50)
print(res.metrics)

for step in res.steps:
    if step.role == "positive" or step.anomalous:
        print(step.index, step.batch_id, step.role, step.min_pvalue)
