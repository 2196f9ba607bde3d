"""Synthetic audio/visual feature datasets with planted event bursts.

Background frames are i.i.d. Gaussian. Each positive segment gets one burst:
a fixed unit direction per modality (shared by the whole dataset), scaled by
the burst amplitude, is added to every frame whose center falls inside the
burst interval of the dominant modality (or of both). The planted intervals
are the ground truth for checking localization learned from clip labels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import (EventAnnotation, FeatureSequence, Intensity, Modality, SegmentRecord, Source,
                        Split, write_annotation_csv, write_feature_file, write_manifest)

MANIFEST_NAME = "manifest.jsonl"
ORACLE_CSV_NAME = "oracle.csv"
FEATURE_DIR = "features"


@dataclass(frozen=True)
class SynthConfig:
    n_segments: int = 1000
    n_val: int | None = None
    n_test: int | None = None
    positive_fraction: float = 0.3
    duration_s: float = 5.0
    audio_rate_hz: float = 50.0
    audio_dim: int = 32
    visual_rate_hz: float = 10.0
    visual_dim: int = 24
    burst_min_s: float = 0.5
    burst_max_s: float = 2.5
    amplitude: float = 3.0
    noise_std: float = 1.0
    mix_acoustic: float = 0.79
    mix_visual: float = 0.06
    mix_both: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.n_segments < 1:
            raise ValueError("n_segments must be >= 1")
        if not 0 < self.positive_fraction < 1:
            raise ValueError(f"positive_fraction must lie in (0, 1), got {self.positive_fraction}")
        if not self.duration_s > 0:
            raise ValueError("duration_s must be positive")
        if not 0 < self.burst_min_s <= self.burst_max_s:
            raise ValueError("burst duration range must satisfy 0 < min <= max")
        if self.burst_max_s > self.duration_s:
            raise ValueError(f"burst_max_s {self.burst_max_s} exceeds segment duration {self.duration_s}")
        if self.amplitude < 0 or not self.noise_std > 0:
            raise ValueError("amplitude must be >= 0 and noise_std > 0")
        mix = (self.mix_acoustic, self.mix_visual, self.mix_both)
        if min(mix) < 0 or abs(sum(mix) - 1.0) > 1e-9:
            raise ValueError(f"modality mix must be non-negative and sum to 1, got {mix}")
        for name in ("audio_dim", "visual_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (self.audio_rate_hz > 0 and self.visual_rate_hz > 0):
            raise ValueError("feature rates must be positive")
        n_val, n_test = self.split_sizes[1:]
        if n_val < 0 or n_test < 0 or n_val + n_test >= self.n_segments:
            raise ValueError("validation and test sizes leave no training segments")

    @property
    def split_sizes(self) -> tuple[int, int, int]:
        n_val = self.n_val if self.n_val is not None else int(round(0.15 * self.n_segments))
        n_test = self.n_test if self.n_test is not None else int(round(0.15 * self.n_segments))
        return self.n_segments - n_val - n_test, n_val, n_test

    @property
    def audio_frames(self) -> int:
        return int(round(self.duration_s * self.audio_rate_hz))

    @property
    def visual_frames(self) -> int:
        return int(round(self.duration_s * self.visual_rate_hz))


@dataclass(frozen=True)
class SynthSegment:
    record: SegmentRecord
    burst: tuple[float, float] | None
    dominance: Modality | None


@dataclass
class SynthDataset:
    config: SynthConfig
    segments: list[SynthSegment]
    features: dict[str, dict[str, FeatureSequence]] = field(repr=False)
    directions: dict[str, np.ndarray] = field(repr=False)

    @property
    def records(self) -> list[SegmentRecord]:
        return [s.record for s in self.segments]

    def split(self, split: Split) -> list[SynthSegment]:
        return [s for s in self.segments if s.record.split is split]


def _frames_inside(n: int, rate: float, start: float, end: float) -> np.ndarray:
    centers = (np.arange(n) + 0.5) / rate
    return (centers >= start) & (centers <= end)


def _segment(cfg: SynthConfig, index: int, split: Split, positive: bool,
             directions: dict[str, np.ndarray], base: Path) -> tuple[SynthSegment, dict[str, FeatureSequence]]:
    rng = np.random.default_rng([cfg.seed, index])
    audio = rng.normal(0.0, cfg.noise_std, size=(cfg.audio_frames, cfg.audio_dim))
    visual = rng.normal(0.0, cfg.noise_std, size=(cfg.visual_frames, cfg.visual_dim))
    seg_id = f"syn_{index:06d}"
    burst = dominance = None
    events: tuple[EventAnnotation, ...] = ()
    if positive:
        length = rng.uniform(cfg.burst_min_s, cfg.burst_max_s)
        start = rng.uniform(0.0, cfg.duration_s - length)
        end = start + length
        dominance = [Modality.ACOUSTIC, Modality.VISUAL, Modality.BOTH][
            int(rng.choice(3, p=[cfg.mix_acoustic, cfg.mix_visual, cfg.mix_both]))]
        shift = cfg.amplitude * cfg.noise_std
        if dominance in (Modality.ACOUSTIC, Modality.BOTH):
            audio[_frames_inside(cfg.audio_frames, cfg.audio_rate_hz, start, end)] += shift * directions["audio"]
        if dominance in (Modality.VISUAL, Modality.BOTH):
            visual[_frames_inside(cfg.visual_frames, cfg.visual_rate_hz, start, end)] += shift * directions["visual"]
        source = Source.SPEAKER if rng.random() < 0.184 else Source.AUDIENCE
        intensity = Intensity.CHUCKLE if rng.random() < 0.594 else Intensity.LAUGHTER
        burst = (float(start), float(end))
        events = (EventAnnotation(burst[0], burst[1], source, dominance, intensity),)
    record = SegmentRecord(seg_id, cfg.duration_s, int(positive), split,
                           base / FEATURE_DIR / f"{seg_id}.mmf", events)
    streams = {
        "audio": FeatureSequence("audio", cfg.audio_rate_hz, audio),
        "visual": FeatureSequence("visual", cfg.visual_rate_hz, visual),
    }
    return SynthSegment(record, burst, dominance), streams


def generate(cfg: SynthConfig, out_dir: str | Path | None = None) -> SynthDataset:
    """Build a dataset in memory and, if ``out_dir`` is given, write it to disk.

    On disk: ``features/<id>.mmf`` (MMF1), ``manifest.jsonl`` and an
    ``oracle.csv`` of burst intervals in the annotation CSV schema.
    """
    base = Path(out_dir) if out_dir is not None else Path(".")
    root = np.random.default_rng([cfg.seed, 2**31 - 1])
    directions = {}
    for name, dim in (("audio", cfg.audio_dim), ("visual", cfg.visual_dim)):
        v = root.standard_normal(dim)
        directions[name] = v / np.linalg.norm(v)

    plan: list[tuple[Split, bool]] = []
    for split, size in zip((Split.TRAIN, Split.VAL, Split.TEST), cfg.split_sizes):
        n_pos = int(round(cfg.positive_fraction * size))
        flags = np.zeros(size, dtype=bool)
        flags[root.choice(size, size=n_pos, replace=False)] = True
        plan.extend((split, bool(f)) for f in flags)

    segments, features = [], {}
    for i, (split, positive) in enumerate(plan):
        seg, streams = _segment(cfg, i, split, positive, directions, base)
        segments.append(seg)
        features[str(seg.record.feature_path)] = streams
    dataset = SynthDataset(cfg, segments, features, directions)
    if out_dir is not None:
        write_dataset(dataset, base)
    return dataset


def write_dataset(dataset: SynthDataset, out_dir: Path) -> None:
    (out_dir / FEATURE_DIR).mkdir(parents=True, exist_ok=True)
    for seg in dataset.segments:
        streams = dataset.features[str(seg.record.feature_path)]
        write_feature_file([streams["audio"], streams["visual"]], seg.record.feature_path)
    write_manifest(dataset.records, out_dir / MANIFEST_NAME)
    write_annotation_csv([(s.record.id, e) for s in dataset.segments for e in s.record.events],
                         out_dir / ORACLE_CSV_NAME)


def burst_snr(dataset: SynthDataset, modality: str = "audio") -> tuple[float, int]:
    """Mean projection of in-burst frames onto the planted direction, and burst count."""
    cfg = dataset.config
    rate, n = (cfg.audio_rate_hz, cfg.audio_frames) if modality == "audio" else (cfg.visual_rate_hz, cfg.visual_frames)
    wanted = {"audio": (Modality.ACOUSTIC, Modality.BOTH), "visual": (Modality.VISUAL, Modality.BOTH)}[modality]
    shifts = []
    for seg in dataset.segments:
        if seg.burst is None or seg.dominance not in wanted:
            continue
        vals = dataset.features[str(seg.record.feature_path)][modality].values.astype(np.float64)
        inside = _frames_inside(n, rate, *seg.burst)
        shifts.append(float((vals[inside] @ dataset.directions[modality]).mean()))
    return (float(np.mean(shifts)) if shifts else math.nan), len(shifts)
