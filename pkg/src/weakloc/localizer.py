"""Post-hoc temporal localization from pooling attention and gate weights."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .model import ForwardOutput, ModelConfig


@dataclass(frozen=True)
class LocalizerConfig:
    tau: float = 0.5
    n_bins: int = 50
    audio_align: str = "maxpool"
    visual_align: str = "interp"

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.n_bins < 1:
            raise ValueError(f"n_bins must be >= 1, got {self.n_bins}")
        for m in (self.audio_align, self.visual_align):
            if m not in ("maxpool", "interp"):
                raise ValueError(f"alignment method must be 'maxpool' or 'interp', got {m!r}")


@dataclass
class LocalizationResult:
    label: int
    start_s: float
    end_s: float
    beta: np.ndarray | None
    peak_bin: int | None
    duration_s: float
    # True when localization was requested for a segment classified negative
    flagged: bool = False
    # True when the model has no attention and the whole segment is returned
    fallback: bool = False

    @property
    def peak_time_s(self) -> float:
        """Center of the peak bin, or the segment center in fallback mode."""
        if self.peak_bin is None or self.beta is None:
            return self.duration_s / 2
        width = self.duration_s / len(self.beta)
        return (self.peak_bin + 0.5) * width


def sharpen(alpha, tau: float) -> np.ndarray:
    """Raise a distribution to the power ``1/tau`` and renormalize (in log space)."""
    a = np.asarray(alpha, dtype=np.float64)
    if np.any(a < 0) or not np.any(a > 0):
        raise ValueError("sharpen: alpha must be non-negative with positive mass")
    if tau == 1.0:
        return a / a.sum()
    logs = np.log(np.maximum(a, 1e-12)) / tau
    z = np.exp(logs - logs.max())
    return z / z.sum()


def align(alpha, n_bins: int, method: str) -> np.ndarray:
    """Resample a length-T attention vector to ``n_bins`` values summing to 1.

    ``maxpool`` assigns timestep t to bin floor(t * N / T) and keeps the
    per-bin maximum; bins that receive no timestep (N > T) read the nearest
    timestep. ``interp`` samples the piecewise-linear curve through timestep
    centers at bin centers, holding end values constant.
    """
    a = np.asarray(alpha, dtype=np.float64)
    T = a.shape[0]
    if T < 1:
        raise ValueError("align: empty attention vector")
    if method == "maxpool":
        bins = (np.arange(T) * n_bins) // T
        out = np.full(n_bins, -np.inf)
        np.maximum.at(out, bins, a)
        empty = ~np.isfinite(out)
        if np.any(empty):
            centers = (np.flatnonzero(empty) + 0.5) * T / n_bins
            out[empty] = a[np.clip(np.floor(centers).astype(int), 0, T - 1)]
    elif method == "interp":
        src = (np.arange(T) + 0.5) / T
        dst = (np.arange(n_bins) + 0.5) / n_bins
        out = np.interp(dst, src, a)
    else:
        raise ValueError(f"unknown alignment method {method!r}")
    total = out.sum()
    return out / total if total > 0 else np.full(n_bins, 1.0 / n_bins)


def combine(aligned_a, aligned_v, w_a: float, w_v: float) -> np.ndarray:
    if aligned_a is None:
        return np.asarray(aligned_v, dtype=np.float64)
    if aligned_v is None:
        return np.asarray(aligned_a, dtype=np.float64)
    a = np.asarray(aligned_a, dtype=np.float64)
    v = np.asarray(aligned_v, dtype=np.float64)
    if a.shape != v.shape:
        raise ValueError(f"combine: aligned lengths {a.shape} and {v.shape} differ")
    return w_a * a + w_v * v


def peak_expand(beta, duration_s: float) -> tuple[float, float, int]:
    """Grow a contiguous bin range from the argmax while neighbors exceed the mean.

    Returns ``(start_s, end_s, peak_bin)``; ties go to the earliest bin.
    """
    b = np.asarray(beta, dtype=np.float64)
    N = b.shape[0]
    if N < 1:
        raise ValueError("peak_expand: empty signal")
    peak = int(np.argmax(b))
    thresh = b.mean()
    lo = peak
    while lo > 0 and b[lo - 1] > thresh:
        lo -= 1
    hi = peak
    while hi < N - 1 and b[hi + 1] > thresh:
        hi += 1
    width = duration_s / N
    return lo * width, min((hi + 1) * width, duration_s), peak


def localize(output: ForwardOutput, config: LocalizerConfig, duration_s: float,
             model_config: ModelConfig | None = None) -> LocalizationResult:
    flagged = output.label != 1
    has_attention = model_config.has_attention if model_config is not None else (
        output.scores_audio is not None or output.scores_visual is not None)
    if not has_attention:
        return LocalizationResult(output.label, 0.0, duration_s, None, None, duration_s,
                                  flagged=flagged, fallback=True)
    aligned_a = aligned_v = None
    if output.alpha_audio is not None:
        aligned_a = align(sharpen(output.alpha_audio, config.tau), config.n_bins, config.audio_align)
    if output.alpha_visual is not None:
        aligned_v = align(sharpen(output.alpha_visual, config.tau), config.n_bins, config.visual_align)
    beta = combine(aligned_a, aligned_v, output.w_audio, output.w_visual)
    start, end, peak = peak_expand(beta, duration_s)
    return LocalizationResult(output.label, start, end, beta, peak, duration_s, flagged=flagged)


# ---------------------------------------------------------------------------
# prediction files
# ---------------------------------------------------------------------------


def write_predictions(rows: Iterable[tuple[str, LocalizationResult, float, float]], path: str | Path) -> None:
    """Write one JSON line per segment: id, label, interval, gate weights, beta."""
    with open(path, "w", encoding="utf-8") as fh:
        for seg_id, res, w_a, w_v in rows:
            fh.write(json.dumps({
                "id": seg_id,
                "label": res.label,
                "start_s": res.start_s,
                "end_s": res.end_s,
                "peak_bin": res.peak_bin,
                "duration_s": res.duration_s,
                "w_a": w_a,
                "w_v": w_v,
                "beta": None if res.beta is None else [float(x) for x in res.beta],
            }) + "\n")


def read_predictions(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            for key in ("id", "label", "start_s", "end_s"):
                if key not in obj:
                    raise ValueError(f"{path}:{lineno}: missing field {key!r}")
            rows.append(obj)
    return rows


def result_from_row(row: dict) -> LocalizationResult:
    beta = row.get("beta")
    return LocalizationResult(
        label=int(row["label"]),
        start_s=float(row["start_s"]),
        end_s=float(row["end_s"]),
        beta=None if beta is None else np.asarray(beta, dtype=np.float64),
        peak_bin=row.get("peak_bin"),
        duration_s=float(row.get("duration_s", row["end_s"])),
        fallback=beta is None,
    )

