"""Feature sequences, annotations, manifests and the MMF1 feature file format."""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

MMF1_MAGIC = b"MMF1"
DEFAULT_DURATION_S = 5.0

DEFAULT_COLUMN_MAP = {
    "video_id": "video_id",
    "start": "start",
    "end": "end",
    "source": "source",
    "modality": "modality",
    "intensity": "intensity",
}


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ValidationError(ValueError):
    """A manifest record violates a SegmentRecord invariant."""


class SchemaError(ValueError):
    """An annotation CSV lacks a mapped column."""


class RowError(ValueError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class Source(str, Enum):
    SPEAKER = "speaker"
    AUDIENCE = "audience"


class Modality(str, Enum):
    ACOUSTIC = "acoustic"
    VISUAL = "visual"
    BOTH = "both"


class Intensity(str, Enum):
    CHUCKLE = "chuckle"
    LAUGHTER = "laughter"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


def _enum_value(enum_cls, raw):
    if isinstance(raw, enum_cls):
        return raw
    try:
        return enum_cls(str(raw).strip().lower())
    except ValueError:
        allowed = ", ".join(m.value for m in enum_cls)
        raise ValidationError(f"{raw!r} is not one of {{{allowed}}}") from None


@dataclass(frozen=True)
class FeatureSequence:
    name: str
    rate_hz: float
    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise ValueError(f"stream {self.name!r}: values must be a T x D matrix, got {values.shape}")
        if not self.rate_hz > 0:
            raise ValueError(f"stream {self.name!r}: rate_hz must be positive, got {self.rate_hz}")
        object.__setattr__(self, "values", values)

    @property
    def timesteps(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def consistent_with(self, duration_s: float) -> bool:
        return abs(self.timesteps - duration_s * self.rate_hz) <= 1.0


@dataclass(frozen=True)
class EventAnnotation:
    start_s: float
    end_s: float
    source: Source = Source.AUDIENCE
    modality: Modality = Modality.ACOUSTIC
    intensity: Intensity = Intensity.LAUGHTER

    def __post_init__(self):
        if not (math.isfinite(self.start_s) and math.isfinite(self.end_s)):
            raise ValidationError("event bounds must be finite")
        if not 0 <= self.start_s < self.end_s:
            raise ValidationError(f"event requires 0 <= start < end, got [{self.start_s}, {self.end_s}]")
        object.__setattr__(self, "source", _enum_value(Source, self.source))
        object.__setattr__(self, "modality", _enum_value(Modality, self.modality))
        object.__setattr__(self, "intensity", _enum_value(Intensity, self.intensity))

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s

    def to_dict(self) -> dict:
        return {
            "start_s": self.start_s,
            "end_s": self.end_s,
            "source": self.source.value,
            "modality": self.modality.value,
            "intensity": self.intensity.value,
        }


@dataclass(frozen=True)
class SegmentRecord:
    id: str
    duration_s: float
    label: int
    split: Split
    feature_path: Path
    events: tuple[EventAnnotation, ...] = ()

    def to_dict(self, relative_to: Path | None = None) -> dict:
        path = Path(self.feature_path)
        if relative_to is not None:
            try:
                path = path.resolve().relative_to(Path(relative_to).resolve())
            except ValueError:
                pass
        return {
            "id": self.id,
            "duration_s": self.duration_s,
            "label": self.label,
            "split": self.split.value,
            "feature_path": path.as_posix(),
            "events": [e.to_dict() for e in self.events],
        }


@dataclass
class DatasetStats:
    total_videos: int
    total_hours: float
    videos_with_laughter: int
    total_events: int
    mean_duration_s: float
    std_duration_s: float
    sample_std_duration_s: float
    by_source: dict[str, int] = field(default_factory=dict)
    by_modality: dict[str, int] = field(default_factory=dict)
    by_intensity: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# MMF1 binary feature files
# ---------------------------------------------------------------------------


def encode_streams(streams: Sequence[FeatureSequence]) -> bytes:
    if not streams:
        raise ValueError("at least one stream is required")
    names = [s.name for s in streams]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate stream names: {names}")
    parts = [MMF1_MAGIC, struct.pack("<I", len(streams))]
    for s in streams:
        name = s.name.encode("utf-8")
        if len(name) > 0xFFFF:
            raise ValueError(f"stream name too long: {s.name[:32]}...")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<IIf", s.timesteps, s.dim, s.rate_hz))
        parts.append(s.values.astype("<f4", copy=False).tobytes())
    return b"".join(parts)


def decode_streams(buf: bytes, offset: int = 0) -> tuple[list[FeatureSequence], int]:
    """Decode an MMF1 payload starting at ``offset``; returns streams and end offset."""

    def need(n: int, what: str):
        if pos + n > len(buf):
            raise FormatError(f"truncated payload while reading {what}", pos)

    pos = offset
    need(4, "magic")
    if buf[pos:pos + 4] != MMF1_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[pos:pos + 4])!r}", pos)
    pos += 4
    need(4, "stream count")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    streams: list[FeatureSequence] = []
    seen: set[str] = set()
    for _ in range(count):
        start = pos
        need(2, "name length")
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(name_len, "stream name")
        try:
            name = bytes(buf[pos:pos + name_len]).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("stream name is not valid UTF-8", pos) from None
        pos += name_len
        if name in seen:
            raise FormatError(f"duplicate stream name {name!r}", start)
        seen.add(name)
        need(12, "stream header")
        T, D, rate = struct.unpack_from("<IIf", buf, pos)
        pos += 12
        nbytes = 4 * T * D
        need(nbytes, f"values of stream {name!r}")
        values = np.frombuffer(buf, dtype="<f4", count=T * D, offset=pos).reshape(T, D)
        pos += nbytes
        try:
            streams.append(FeatureSequence(name, float(rate), values.astype(np.float32)))
        except ValueError as exc:
            raise FormatError(str(exc), start) from None
    return streams, pos


def write_feature_file(streams: Sequence[FeatureSequence], path: str | Path) -> None:
    Path(path).write_bytes(encode_streams(streams))


def read_feature_file(path: str | Path) -> list[FeatureSequence]:
    buf = Path(path).read_bytes()
    streams, end = decode_streams(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after last stream", end)
    return streams


def read_feature_map(path: str | Path) -> dict[str, FeatureSequence]:
    return {s.name: s for s in read_feature_file(path)}


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def _record_from_obj(obj: Mapping, base: Path) -> SegmentRecord:
    for key in ("id", "label", "split", "feature_path"):
        if key not in obj:
            raise ValidationError(f"missing field {key!r}")
    try:
        split = _enum_value(Split, obj["split"])
    except ValueError as exc:
        raise ValidationError(f"unknown split: {exc}") from None
    duration = float(obj.get("duration_s", DEFAULT_DURATION_S))
    if not duration > 0:
        raise ValidationError(f"duration_s must be positive, got {duration}")
    label = obj["label"]
    if label not in (0, 1) or isinstance(label, bool):
        raise ValidationError(f"label must be 0 or 1, got {label!r}")
    try:
        events = tuple(EventAnnotation(float(e["start_s"]), float(e["end_s"]),
                                       e.get("source", "audience"), e.get("modality", "acoustic"),
                                       e.get("intensity", "laughter"))
                       for e in obj.get("events", []))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"bad event: {exc}") from None
    if (label == 1) != bool(events):
        raise ValidationError(f"label {label} inconsistent with {len(events)} events")
    for e in events:
        if e.end_s > duration:
            raise ValidationError(f"event [{e.start_s}, {e.end_s}] exceeds segment duration {duration}")
    path = Path(obj["feature_path"])
    if not path.is_absolute():
        path = base / path
    return SegmentRecord(str(obj["id"]), duration, int(label), split, path, events)


def load_manifest(path: str | Path) -> list[SegmentRecord]:
    """Read a JSON-lines manifest; feature paths are resolved against its directory."""
    path = Path(path)
    base = path.parent
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValidationError("record must be an object")
                records.append(_record_from_obj(obj, base))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from None
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return records


def write_manifest(records: Iterable[SegmentRecord], path: str | Path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(relative_to=base)) + "\n")


# ---------------------------------------------------------------------------
# annotation CSVs
# ---------------------------------------------------------------------------


@dataclass
class ParsedAnnotations:
    events: list[tuple[str, EventAnnotation]]
    row_errors: list[RowError]

    def __iter__(self):
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def by_video(self) -> dict[str, list[EventAnnotation]]:
        grouped: dict[str, list[EventAnnotation]] = {}
        for vid, ev in self.events:
            grouped.setdefault(vid, []).append(ev)
        return grouped


def parse_annotation_csv(path: str | Path, column_map: Mapping[str, str] | None = None,
                         strict: bool = False) -> ParsedAnnotations:
    """Parse one event per data row.

    Malformed rows are skipped and collected in ``row_errors`` unless
    ``strict`` is set, in which case the first one is raised. Row indices
    count data rows from 1.
    """
    cmap = {**DEFAULT_COLUMN_MAP, **(column_map or {})}
    events: list[tuple[str, EventAnnotation]] = []
    errors: list[RowError] = []
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        reader.fieldnames = header
        missing = [col for col in cmap.values() if col not in header]
        if missing:
            raise SchemaError(f"{path}: missing mapped column(s) {missing}; header is {header}")
        for i, row in enumerate(reader, start=1):
            try:
                vid = (row[cmap["video_id"]] or "").strip()
                if not vid:
                    raise ValueError("empty video id")
                ev = EventAnnotation(float(row[cmap["start"]]), float(row[cmap["end"]]),
                                     row[cmap["source"]] or "", row[cmap["modality"]] or "",
                                     row[cmap["intensity"]] or "")
            except (TypeError, ValueError) as exc:
                err = RowError(i, str(exc))
                if strict:
                    raise err from None
                errors.append(err)
                continue
            events.append((vid, ev))
    return ParsedAnnotations(events, errors)


def write_annotation_csv(events: Iterable[tuple[str, EventAnnotation]], path: str | Path,
                         column_map: Mapping[str, str] | None = None) -> None:
    cmap = {**DEFAULT_COLUMN_MAP, **(column_map or {})}
    keys = ["video_id", "start", "end", "source", "modality", "intensity"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([cmap[k] for k in keys])
        for vid, e in events:
            writer.writerow([vid, f"{e.start_s:.3f}", f"{e.end_s:.3f}",
                             e.source.value, e.modality.value, e.intensity.value])


def compute_stats(events_by_video: Mapping[str, Sequence[EventAnnotation]],
                  durations: Mapping[str, float] | None = None) -> DatasetStats:
    """Corpus statistics in the layout of the released annotation tables.

    ``durations`` maps every video (with or without events) to its length in
    seconds; when omitted, only videos present in ``events_by_video`` count
    and total hours is 0.
    """
    all_events = [e for evs in events_by_video.values() for e in evs]
    if not all_events:
        raise ValueError("compute_stats: no events")
    d = np.array([e.duration_s for e in all_events], dtype=np.float64)
    videos = set(events_by_video) | set(durations or {})
    return DatasetStats(
        total_videos=len(videos),
        total_hours=sum((durations or {}).values()) / 3600.0,
        videos_with_laughter=sum(1 for evs in events_by_video.values() if evs),
        total_events=len(all_events),
        mean_duration_s=float(d.mean()),
        std_duration_s=float(d.std()),
        sample_std_duration_s=float(d.std(ddof=1)) if d.size > 1 else 0.0,
        by_source={s.value: sum(e.source is s for e in all_events) for s in Source},
        by_modality={m.value: sum(e.modality is m for e in all_events) for m in Modality},
        by_intensity={k.value: sum(e.intensity is k for e in all_events) for k in Intensity},
    )
