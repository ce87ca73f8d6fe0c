"""Timing-shift detection of kernel rootkits from probe trace data."""

from tracetime.delta_engine import (
    DeltaSeries,
    ProbePair,
    Strategy,
    compute_deltas,
    compute_function_deltas,
    compute_sequence_deltas,
    quantile_shift_report,
)
from tracetime.detector import (
    DetectionReport,
    DetectorModel,
    MetricSet,
    MissingPairPolicy,
    compute_metrics,
    detect,
    eval_offline,
    eval_online,
    train,
)
from tracetime.errors import ManifestError, NotEnoughData, TraceFormatError, UnusableBatch
from tracetime.stat_model import (
    PairModel,
    QuantileVector,
    chi2_sf,
    fit_pair_model,
    mahalanobis_sq,
    pair_pvalue,
    quantile_vector,
)
from tracetime.trace_model import (
    Batch,
    Direction,
    Label,
    ProbeEvent,
    ProbeId,
    Scenario,
    event_counts,
    ingest_batch,
    load_manifest,
)

__version__ = "0.1.0"
