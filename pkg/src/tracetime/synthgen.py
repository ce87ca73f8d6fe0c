"""Seeded synthetic probe traces modelled on a getdents call stack.

One simulated command invocation runs a call template once per process::

    iterate_dir {
        (filldir64 { verify_dirent_name }) x inner_loop_count
        touch_atime
    }

Each template step carries the gap (ns) since the previous event of the same
pid. Gaps are lognormal around their median, scaled by a per-batch factor
(system state drift) and occasionally inflated tenfold (heavy tail). A
:class:`ShiftSpec` adds a delay inside a function or on one transition to
mimic code injected by a rootkit.

Base gaps and rootkit delays come from independent random streams, so a
shifted batch and its unshifted twin under the same seed differ only where
the shift applies.
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from tracetime.trace_model import (
    Batch,
    DatasetManifest,
    Direction,
    Label,
    ManifestEntry,
    ProbeEvent,
    Scenario,
    write_batch,
)

_T0_NS = 1_000_000_000_000


@dataclass(frozen=True)
class TemplateStep:
    probe: str
    direction: Direction
    median_ns: float
    sigma: float | None = None
    in_loop: bool = False

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))
        if not self.median_ns > 0:
            raise ValueError(f"step {self.probe}-{self.direction.value}: median gap must be positive")


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.1
    outlier_prob: float = 0.01
    outlier_factor: float = 10.0
    batch_sigma: float = 0.02


@dataclass(frozen=True)
class PidModel:
    """``concurrent`` workers run the invocations; each invocation gets its own pid.

    Worker start offsets are drawn uniformly within ``interleave_rate`` times
    the expected worker run time, so 0 starts all workers together.
    """

    concurrent: int = 1
    interleave_rate: float = 0.0
    base_pid: int = 4000


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    call_template: tuple[TemplateStep, ...]
    repeats_per_batch: int = 100
    inner_loop_count: tuple[int, int] = (4, 4)
    noise: NoiseModel = field(default_factory=NoiseModel)
    pid_model: PidModel = field(default_factory=PidModel)
    slowdown: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "call_template", tuple(self.call_template))
        object.__setattr__(self, "inner_loop_count", tuple(self.inner_loop_count))
        lo, hi = self.inner_loop_count
        if not 0 <= lo <= hi:
            raise ValueError(f"invalid inner_loop_count {self.inner_loop_count}")
        if self.repeats_per_batch < 1:
            raise ValueError("repeats_per_batch must be >= 1")
        flags = [s.in_loop for s in self.call_template]
        loop_pos = [i for i, f in enumerate(flags) if f]
        if loop_pos and loop_pos != list(range(loop_pos[0], loop_pos[-1] + 1)):
            raise ValueError("loop steps must be contiguous")
        for part in (self.call_template, [s for s in self.call_template if s.in_loop]):
            balance = Counter()
            for s in part:
                balance[s.probe] += 1 if s.direction is Direction.ENTER else -1
            if any(balance.values()):
                raise ValueError(f"unbalanced enter/return in template: {dict(balance)}")

    def step_sigma(self, step: TemplateStep) -> float:
        return self.noise.sigma if step.sigma is None else step.sigma

    def gap_std(self, steps_key: str) -> float:
        """Standard deviation of the lognormal body of one transition's gap.

        ``steps_key`` is ``"<prev probe id>:<probe id>"``; the heavy tail and
        batch factor are ignored.
        """
        seq = self.expand(self.inner_loop_count[0] or 1)
        for prev, cur in zip(seq[-1:] + seq[:-1], seq):
            a, b = self.call_template[prev], self.call_template[cur]
            if f"{a.probe}-{a.direction.value}:{b.probe}-{b.direction.value}" == steps_key:
                s = self.step_sigma(b)
                m = b.median_ns * self.slowdown
                return m * math.sqrt((math.exp(s * s) - 1) * math.exp(s * s))
        raise KeyError(steps_key)

    def expand(self, loops: int) -> list[int]:
        """Template step indices for one invocation with ``loops`` iterations."""
        loop = [i for i, s in enumerate(self.call_template) if s.in_loop]
        if not loop:
            return list(range(len(self.call_template)))
        head = list(range(loop[0]))
        tail = list(range(loop[-1] + 1, len(self.call_template)))
        return head + loop * loops + tail

    def to_json(self) -> dict:
        d = asdict(self)
        for step in d["call_template"]:
            step["direction"] = Direction(step["direction"]).value
        d["inner_loop_count"] = list(self.inner_loop_count)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> ScenarioSpec:
        obj = dict(obj)
        obj["call_template"] = tuple(TemplateStep(**s) for s in obj["call_template"])
        if "noise" in obj:
            obj["noise"] = NoiseModel(**obj["noise"])
        if "pid_model" in obj:
            obj["pid_model"] = PidModel(**obj["pid_model"])
        if "inner_loop_count" in obj:
            obj["inner_loop_count"] = tuple(obj["inner_loop_count"])
        return cls(**obj)


@dataclass(frozen=True)
class ShiftSpec:
    """Delay injected by a simulated rootkit.

    ``target`` is either a probe name, whose execution time grows (the delay
    lands just before its return), or a transition ``"a-enter:b-return"``
    whose gap grows. ``extra_event`` wraps every call of a probe-name target
    in a duplicate enter/return pair, as a hook calling the original does.
    """

    target: str
    delay_ns: float
    delay_sd: float = 0.0
    extra_event: bool = False
    extra_gap_ns: float = 80.0

    def __post_init__(self):
        if self.delay_ns < 0 or self.delay_sd < 0:
            raise ValueError("delay must be non-negative")
        if self.extra_event and ":" in self.target:
            raise ValueError("extra_event needs a probe-name target")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict | None) -> ShiftSpec | None:
        return None if obj is None else cls(**obj)


def getdents_template(
    filldir_ns: float = 900.0,
    verify_ns: float = 600.0,
    loop_gap_ns: float = 1000.0,
    iterate_gap_ns: float = 3000.0,
    touch_ns: float = 5000.0,
    startup_ns: float = 250_000.0,
) -> tuple[TemplateStep, ...]:
    """Call template after the getdents stack, with microsecond-scale gaps."""
    E, R = Direction.ENTER, Direction.RETURN
    return (
        TemplateStep("iterate_dir", E, startup_ns),
        TemplateStep("filldir64", E, loop_gap_ns, in_loop=True),
        TemplateStep("verify_dirent_name", E, 150.0, in_loop=True),
        TemplateStep("verify_dirent_name", R, verify_ns, in_loop=True),
        TemplateStep("filldir64", R, filldir_ns, in_loop=True),
        TemplateStep("touch_atime", E, iterate_gap_ns),
        TemplateStep("touch_atime", R, touch_ns),
        TemplateStep("iterate_dir", R, 500.0),
    )


def default_scenarios() -> list[ScenarioSpec]:
    """The five collection scenarios, with non-authoritative parameters."""
    return [
        ScenarioSpec(Scenario.DEFAULT.value, getdents_template()),
        ScenarioSpec(Scenario.FILE_COUNT.value, getdents_template(), inner_loop_count=(22, 202)),
        ScenarioSpec(Scenario.FILENAME_LENGTH.value, getdents_template(verify_ns=630.0)),
        ScenarioSpec(Scenario.LS_BASIC.value, getdents_template(iterate_gap_ns=2200.0, startup_ns=120_000.0)),
        ScenarioSpec(
            Scenario.SYSTEM_LOAD.value,
            getdents_template(),
            noise=NoiseModel(sigma=0.2, batch_sigma=0.05),
            slowdown=1.4,
        ),
    ]


def default_shift() -> ShiftSpec:
    return ShiftSpec(target="filldir64", delay_ns=400.0, delay_sd=40.0)


def _rngs(seed) -> tuple[np.random.Generator, np.random.Generator]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    base, shift = ss.spawn(2)
    return np.random.default_rng(base), np.random.default_rng(shift)


def _probe_key(step: TemplateStep) -> str:
    return f"{step.probe}-{step.direction.value}"


def generate_batch(
    spec: ScenarioSpec,
    shift: ShiftSpec | None = None,
    label: Label | str | None = None,
    seed: int | np.random.SeedSequence = 0,
    batch_id: str | None = None,
) -> Batch:
    """Simulate one collection run. Deterministic given ``(spec, shift, seed)``.

    Raises:
        ValueError: a shift is given for a normal batch.
    """
    label = Label(label) if label is not None else (Label.ROOTKIT if shift else Label.NORMAL)
    if shift is not None and label is Label.NORMAL:
        raise ValueError("a shifted batch must be labeled rootkit")
    rng, shift_rng = _rngs(seed)
    tpl = spec.call_template
    nrep = spec.repeats_per_batch

    lo, hi = spec.inner_loop_count
    loops = int(rng.integers(lo, hi + 1))
    seq = spec.expand(loops)
    n_steps = len(seq)
    medians = np.array([tpl[i].median_ns for i in seq]) * spec.slowdown
    sigmas = np.array([spec.step_sigma(tpl[i]) for i in seq])

    noise = spec.noise
    factor = math.exp(rng.normal(0.0, noise.batch_sigma)) if noise.batch_sigma > 0 else 1.0
    gaps = medians * factor * np.exp(rng.normal(0.0, 1.0, size=(nrep, n_steps)) * sigmas)
    outliers = rng.random(size=(nrep, n_steps)) < noise.outlier_prob
    gaps = np.where(outliers, gaps * noise.outlier_factor, gaps)

    # Step layout per invocation: (template index, is_extra)
    layout = [(i, False) for i in seq]
    if shift is not None:
        keys = [_probe_key(tpl[i]) for i in seq]
        if ":" in shift.target:
            prev = [keys[-1]] + keys[:-1]
            cols = [c for c in range(n_steps) if f"{prev[c]}:{keys[c]}" == shift.target]
        else:
            cols = [c for c in range(n_steps) if keys[c] == f"{shift.target}-return"]
        delays = shift_rng.normal(shift.delay_ns, shift.delay_sd, size=(nrep, len(cols))) if shift.delay_sd else np.full(
            (nrep, len(cols)), shift.delay_ns
        )
        if not shift.extra_event:
            gaps[:, cols] += np.maximum(delays, 0.0)
        else:
            new_layout, delay_cols = [], []
            for i, _ in layout:
                new_layout.append((i, False))
                if tpl[i].probe == shift.target:
                    new_layout.append((i, True))
                    if tpl[i].direction is Direction.RETURN:
                        delay_cols.append(len(new_layout) - 1)
            extra_idx = [k for k, (_, extra) in enumerate(new_layout) if extra]
            base_idx = [k for k, (_, extra) in enumerate(new_layout) if not extra]
            full = np.empty((nrep, len(new_layout)))
            full[:, base_idx] = gaps
            jitter = shift_rng.normal(0.0, spec.noise.sigma, size=(nrep, len(extra_idx)))
            full[:, extra_idx] = shift.extra_gap_ns * spec.slowdown * np.exp(jitter)
            full[:, delay_cols] += np.maximum(delays, 0.0)
            gaps, layout = full, new_layout

    step_gaps = np.maximum(np.rint(gaps), 1).astype(np.int64)
    return _assemble(spec, step_gaps, layout, label, rng, batch_id or f"{spec.name}-{label.value}")


def _assemble(spec, step_gaps, layout, label, rng, batch_id) -> Batch:
    tpl = spec.call_template
    nrep, width = step_gaps.shape
    pm = spec.pid_model
    workers = max(1, pm.concurrent)
    worker_of = np.arange(nrep) % workers
    expected = step_gaps.sum() / workers
    offsets = rng.uniform(0.0, pm.interleave_rate * expected, size=workers) if pm.interleave_rate > 0 else np.zeros(workers)

    times = np.empty((nrep, width), dtype=np.int64)
    for w in range(workers):
        rows = np.flatnonzero(worker_of == w)
        if rows.size == 0:
            continue
        flat = np.cumsum(step_gaps[rows].ravel()) + _T0_NS + int(offsets[w])
        times[rows] = flat.reshape(rows.size, width)

    pids = pm.base_pid + np.arange(nrep)
    flat_t = times.ravel()
    flat_rep = np.repeat(np.arange(nrep), width)
    flat_col = np.tile(np.arange(width), nrep)
    order = np.lexsort((flat_col, flat_rep, flat_t))
    probes = [tpl[i].probe for i, _ in layout]
    dirs = [tpl[i].direction for i, _ in layout]
    events = tuple(
        ProbeEvent(probes[c], dirs[c], int(pids[r]), int(pids[r]), int(flat_t[k]), n)
        for n, (k, r, c) in enumerate(zip(order.tolist(), flat_rep[order].tolist(), flat_col[order].tolist()))
    )
    return Batch(batch_id=batch_id, label=label, scenario=spec.name, events=events)


@dataclass(frozen=True)
class DatasetPlan:
    spec: ScenarioSpec
    normal_count: int = 150
    rootkit_count: int = 100
    shift: ShiftSpec | None = None

    def to_json(self) -> dict:
        return {
            "spec": self.spec.to_json(),
            "normal_count": self.normal_count,
            "rootkit_count": self.rootkit_count,
            "shift": self.shift.to_json() if self.shift else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> DatasetPlan:
        return cls(
            spec=ScenarioSpec.from_json(obj["spec"]),
            normal_count=int(obj.get("normal_count", 150)),
            rootkit_count=int(obj.get("rootkit_count", 100)),
            shift=ShiftSpec.from_json(obj.get("shift")),
        )


def default_plans() -> list[DatasetPlan]:
    return [DatasetPlan(spec, 150, 100, default_shift()) for spec in default_scenarios()]


def load_config(path: str | os.PathLike) -> tuple[list[DatasetPlan], int | None]:
    """Read a generator config: ``{"seed": int?, "scenarios": [plan, ...]}``."""
    doc = json.loads(Path(path).read_text())
    return [DatasetPlan.from_json(p) for p in doc["scenarios"]], doc.get("seed")


def save_config(plans: Sequence[DatasetPlan], path: str | os.PathLike, seed: int | None = None) -> None:
    doc = {"seed": seed, "scenarios": [p.to_json() for p in plans]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def batch_seed(seed: int, scenario_index: int, label: Label, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, scenario_index, 0 if label is Label.NORMAL else 1, index])


def iter_plan_batches(plans: Sequence[DatasetPlan], seed: int = 0):
    """Yield batches in collection order: per scenario, all normal then all rootkit."""
    for s_idx, plan in enumerate(plans):
        for label, count in ((Label.NORMAL, plan.normal_count), (Label.ROOTKIT, plan.rootkit_count)):
            shift = plan.shift if label is Label.ROOTKIT else None
            for i in range(count):
                yield generate_batch(
                    plan.spec,
                    shift,
                    label,
                    seed=batch_seed(seed, s_idx, label, i),
                    batch_id=f"{plan.spec.name}-{label.value}-{i:03d}",
                )


def generate_dataset(plans: Sequence[DatasetPlan], out_dir: str | os.PathLike, seed: int = 0) -> DatasetManifest:
    """Write every batch as JSON lines under ``out_dir`` plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for batch in iter_plan_batches(plans, seed):
        rel = Path(batch.scenario) / f"{batch.batch_id}.jsonl"
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        write_batch(batch, out / rel)
        entries.append(ManifestEntry(batch.batch_id, rel.as_posix(), batch.label, batch.scenario))
    manifest = DatasetManifest(entries)
    manifest.write(out / "manifest.json")
    return manifest


def with_shift_sigmas(spec: ScenarioSpec, transition: str, sigmas: float) -> ShiftSpec:
    """Constant shift of ``sigmas`` gap standard deviations on one transition."""
    return ShiftSpec(target=transition, delay_ns=sigmas * spec.gap_std(transition))


__all__ = [
    "DatasetPlan",
    "NoiseModel",
    "PidModel",
    "ScenarioSpec",
    "ShiftSpec",
    "TemplateStep",
    "default_plans",
    "default_scenarios",
    "default_shift",
    "generate_batch",
    "generate_dataset",
    "getdents_template",
    "iter_plan_batches",
    "load_config",
    "save_config",
    "with_shift_sigmas",
]
