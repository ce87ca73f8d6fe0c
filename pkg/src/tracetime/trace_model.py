"""Probe events, batches and their on-disk JSON-lines representation.

A trace file holds one JSON object per line. The optional first line is a
header carrying batch metadata::

    {"batch_id":"default-n-000","label":"normal","scenario":"default"}
    {"probe":"iterate_dir","dir":"enter","pid":812,"tgid":812,"t_ns":1000200}
    {"probe":"filldir64","dir":"enter","pid":812,"tgid":812,"t_ns":1001950}

A manifest is a JSON array of ``{batch_id, path, label, scenario}`` objects;
relative paths are resolved against the manifest's directory and the array
order is the chronological order of the batches.
"""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from tracetime.errors import ManifestError, TraceFormatError

logger = logging.getLogger(__name__)

_UINT32_MAX = 2**32 - 1
_UINT64_MAX = 2**64 - 1


class Direction(str, Enum):
    ENTER = "enter"
    RETURN = "return"


class Label(str, Enum):
    NORMAL = "normal"
    ROOTKIT = "rootkit"


class Scenario(str, Enum):
    """Collection scenarios of the reference data set.

    Batches may carry any other scenario string; these are the known ones.
    """

    DEFAULT = "default"
    FILE_COUNT = "file_count"
    FILENAME_LENGTH = "filename_length"
    LS_BASIC = "ls_basic"
    SYSTEM_LOAD = "system_load"


@dataclass(frozen=True, order=True)
class ProbeId:
    probe_name: str
    direction: Direction

    def __str__(self) -> str:
        return f"{self.probe_name}-{self.direction.value}"

    @classmethod
    def parse(cls, text: str) -> ProbeId:
        name, sep, direction = text.rpartition("-")
        if not sep or not name:
            raise ValueError(f"not a probe id: {text!r}")
        return cls(name, Direction(direction))


@dataclass(frozen=True, slots=True)
class ProbeEvent:
    probe_name: str
    direction: Direction
    pid: int
    tgid: int
    timestamp_ns: int
    arrival_index: int

    @property
    def probe(self) -> ProbeId:
        return ProbeId(self.probe_name, self.direction)


@dataclass(frozen=True)
class Batch:
    """All events collected during one bounded collection run.

    Batches are immutable; ``events`` keeps file order and is never sorted.
    """

    batch_id: str
    label: Label
    scenario: str
    events: tuple[ProbeEvent, ...] = ()
    start_time: str | None = None
    end_time: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "label", Label(self.label))
        scenario = self.scenario.value if isinstance(self.scenario, Scenario) else str(self.scenario)
        object.__setattr__(self, "scenario", scenario)
        if not isinstance(self.events, tuple):
            object.__setattr__(self, "events", tuple(self.events))
        for prev, cur in zip(self.events, self.events[1:]):
            if cur.arrival_index <= prev.arrival_index:
                raise ValueError(
                    f"batch {self.batch_id}: arrival_index not strictly increasing "
                    f"({prev.arrival_index} then {cur.arrival_index})"
                )

    @property
    def usable(self) -> bool:
        """Whether the batch has enough events for delta computation."""
        return len(self.events) >= 2

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class ManifestEntry:
    batch_id: str
    path: str
    label: Label
    scenario: str

    def to_json(self) -> dict:
        return {
            "batch_id": self.batch_id,
            "path": self.path,
            "label": Label(self.label).value,
            "scenario": self.scenario,
        }


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for entry in self.entries:
            if entry.batch_id in seen:
                raise ManifestError(f"duplicate batch_id {entry.batch_id!r}")
            seen.add(entry.batch_id)

    def write(self, path: str | os.PathLike) -> None:
        text = json.dumps([e.to_json() for e in self.entries], indent=1)
        Path(path).write_text(text + "\n")


def _check_uint(obj: dict, key: str, upper: int, path, line_no: int) -> int:
    if key not in obj:
        raise TraceFormatError(path, line_no, f"missing field {key!r}")
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise TraceFormatError(path, line_no, f"field {key!r} must be an integer, got {value!r}")
    if not 0 <= value <= upper:
        raise TraceFormatError(path, line_no, f"field {key!r} out of range: {value}")
    return value


def _parse_event(obj, arrival_index: int, path, line_no: int) -> ProbeEvent:
    if not isinstance(obj, dict):
        raise TraceFormatError(path, line_no, "event line must be a JSON object")
    probe = obj.get("probe")
    if not isinstance(probe, str) or not probe:
        raise TraceFormatError(path, line_no, "field 'probe' must be a non-empty string")
    try:
        direction = Direction(obj.get("dir"))
    except ValueError:
        raise TraceFormatError(path, line_no, f"field 'dir' must be enter|return, got {obj.get('dir')!r}") from None
    pid = _check_uint(obj, "pid", _UINT32_MAX, path, line_no)
    tgid = _check_uint(obj, "tgid", _UINT32_MAX, path, line_no)
    t_ns = _check_uint(obj, "t_ns", _UINT64_MAX, path, line_no)
    if t_ns == 0:
        raise TraceFormatError(path, line_no, "t_ns must be positive")
    return ProbeEvent(probe, direction, pid, tgid, t_ns, arrival_index)


def _is_header(obj) -> bool:
    return isinstance(obj, dict) and "batch_id" in obj and "probe" not in obj


def ingest_batch(
    path: str | os.PathLike,
    label: Label | str | None = None,
    scenario: str | None = None,
    batch_id: str | None = None,
) -> Batch:
    """Read one trace file into a :class:`Batch`.

    Explicit ``label``, ``scenario`` and ``batch_id`` arguments take
    precedence over the header line. Without either, the batch id defaults
    to the file stem and the scenario to ``"default"``; a label is mandatory.

    Raises:
        OSError: the file cannot be read.
        TraceFormatError: a line is not valid JSON or violates the schema.
    """
    path = Path(path)
    header: dict = {}
    events: list[ProbeEvent] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(path, line_no, f"invalid JSON: {exc.msg}") from None
            if not events and not header and _is_header(obj):
                header = obj
                continue
            events.append(_parse_event(obj, len(events), path, line_no))

    label = label if label is not None else header.get("label")
    if label is None:
        raise TraceFormatError(path, 1, "no label given and no header line present")
    try:
        label = Label(label)
    except ValueError:
        raise TraceFormatError(path, 1, f"unknown label {label!r}") from None
    batch = Batch(
        batch_id=batch_id or header.get("batch_id") or path.stem,
        label=label,
        scenario=scenario or header.get("scenario") or Scenario.DEFAULT.value,
        events=tuple(events),
        start_time=header.get("start_time"),
        end_time=header.get("end_time"),
    )
    if not batch.usable:
        logger.warning("batch %s has %d events and is unusable", batch.batch_id, len(events))
    return batch


def _dumps(obj: dict) -> str:
    return json.dumps(obj, separators=(",", ":"))


def serialize_batch(batch: Batch) -> str:
    """Render a batch in canonical JSON-lines form (header plus events)."""
    header = {"batch_id": batch.batch_id, "label": batch.label.value, "scenario": batch.scenario}
    if batch.start_time is not None:
        header["start_time"] = batch.start_time
    if batch.end_time is not None:
        header["end_time"] = batch.end_time
    lines = [_dumps(header)]
    lines.extend(
        _dumps({"probe": e.probe_name, "dir": e.direction.value, "pid": e.pid, "tgid": e.tgid, "t_ns": e.timestamp_ns})
        for e in batch.events
    )
    return "\n".join(lines) + "\n"


def write_batch(batch: Batch, path: str | os.PathLike) -> None:
    Path(path).write_text(serialize_batch(batch), encoding="utf-8")


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc.msg}") from None
    if not isinstance(raw, list):
        raise ManifestError(f"{path}: manifest must be a JSON array")
    entries = []
    for i, item in enumerate(raw):
        try:
            entries.append(
                ManifestEntry(
                    batch_id=str(item["batch_id"]),
                    path=str(item["path"]),
                    label=Label(item["label"]),
                    scenario=str(item["scenario"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}: entry {i} is malformed: {exc}") from None
    return DatasetManifest(entries)


def load_manifest(path: str | os.PathLike) -> list[Batch]:
    """Load every batch referenced by a manifest, preserving manifest order.

    Raises:
        ManifestError: malformed manifest, duplicate batch id, or a missing file.
    """
    path = Path(path)
    manifest = read_manifest(path)
    base = path.parent
    resolved = []
    for entry in manifest.entries:
        file_path = base / entry.path
        if not file_path.is_file():
            raise ManifestError(f"batch {entry.batch_id!r}: file not found: {file_path}")
        resolved.append((entry, file_path))
    return [
        ingest_batch(file_path, label=entry.label, scenario=entry.scenario, batch_id=entry.batch_id)
        for entry, file_path in resolved
    ]


def event_counts(batch: Batch) -> Counter[ProbeId]:
    """Count events per probe. Diagnostic only; counts never drive detection."""
    return Counter(e.probe for e in batch.events)


def filter_batches(
    batches: Iterable[Batch], scenario: str | None = None, label: Label | None = None
) -> list[Batch]:
    out = []
    for b in batches:
        if scenario is not None and b.scenario != scenario:
            continue
        if label is not None and b.label != label:
            continue
        out.append(b)
    return out


def make_events(rows: Sequence[tuple[str, str, int, int, int]]) -> tuple[ProbeEvent, ...]:
    """Build events from ``(probe, dir, pid, tgid, t_ns)`` rows in arrival order."""
    return tuple(
        ProbeEvent(probe, Direction(direction), pid, tgid, t_ns, i)
        for i, (probe, direction, pid, tgid, t_ns) in enumerate(rows)
    )
