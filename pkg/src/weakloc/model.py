"""Multimodal clip classifier with temporal softmax pooling and modality gating.

Each modality is projected to a shared hidden size, pooled over time with a
learned attention distribution, and the pooled vectors are fused with
complementary gate weights before a two-logit classifier. The attention
distributions and gate weights are kept for post-hoc localization.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .datamodel import FeatureSequence, FormatError, decode_streams, encode_streams
from .numerics import Tensor

POOLING_MODES = ("softmax_tanh", "softmax_no_tanh", "mean", "max")
FUSION_MODES = ("softmax_gate", "sigmoid_gate", "concat")
MODALITY_MODES = ("both", "audio_only", "visual_only")

AUDIO, VISUAL = "audio", "visual"

MMCK_MAGIC = b"MMCK"
MMCK_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_audio: int = 1024
    d_visual: int = 768
    hidden: int = 1024
    dropout_p: float = 0.5
    pooling: str = "softmax_tanh"
    fusion: str = "softmax_gate"
    modalities: str = "both"
    projection_activation: bool = True
    focal_gamma: float = 2.0
    # None means "derive from the training split"
    class_weights: tuple[float, float] | None = None

    def __post_init__(self):
        if self.class_weights is not None:
            object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
        self.validate()

    def validate(self) -> None:
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.modalities not in MODALITY_MODES:
            raise ValueError(f"modalities must be one of {MODALITY_MODES}, got {self.modalities!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        for name in ("d_audio", "d_visual", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be non-negative")
        if self.class_weights is not None:
            if len(self.class_weights) != 2 or min(self.class_weights) <= 0:
                raise ValueError(f"class_weights must be two positive floats, got {self.class_weights}")

    @property
    def active_modalities(self) -> tuple[str, ...]:
        return {"both": (AUDIO, VISUAL), "audio_only": (AUDIO,), "visual_only": (VISUAL,)}[self.modalities]

    @property
    def gated(self) -> bool:
        return self.modalities == "both" and self.fusion != "concat"

    @property
    def fused_dim(self) -> int:
        if self.modalities == "both" and self.fusion == "concat":
            return 2 * self.hidden
        return self.hidden

    @property
    def has_attention(self) -> bool:
        return self.pooling in ("softmax_tanh", "softmax_no_tanh")

    def input_dim(self, modality: str) -> int:
        return self.d_audio if modality == AUDIO else self.d_visual

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_weights"] = list(self.class_weights) if self.class_weights else None
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        if kw.get("class_weights") is not None:
            kw["class_weights"] = tuple(kw["class_weights"])
        return cls(**kw)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every trainable parameter for ``config``."""
    d = config.hidden
    shapes: dict[str, tuple[int, ...]] = {}
    for m in config.active_modalities:
        shapes[f"{m}.proj.weight"] = (d, config.input_dim(m))
        shapes[f"{m}.proj.bias"] = (d,)
        if config.projection_activation:
            shapes[f"{m}.norm.gain"] = (d,)
            shapes[f"{m}.norm.shift"] = (d,)
        if config.has_attention:
            shapes[f"{m}.pool.weight"] = (d,)
            shapes[f"{m}.pool.bias"] = (1,)
        if config.gated:
            shapes[f"{m}.gate.weight"] = (d,)
    shapes["classifier.weight"] = (2, config.fused_dim)
    shapes["classifier.bias"] = (2,)
    return shapes


class ModelParams:
    """Named trainable tensors for one model configuration."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, Tensor]):
        expected = param_shapes(config)
        if set(tensors) != set(expected):
            raise ValueError(f"parameter names {sorted(tensors)} do not match {sorted(expected)}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.config = config
        self.tensors = {name: tensors[name] for name in expected}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self, dtype=None) -> "ModelParams":
        return ModelParams.from_arrays(self.config, {k: np.array(t.data, dtype=dtype or t.dtype)
                                                     for k, t in self.tensors.items()})

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        return cls(config, {k: nx.parameter(v, name=k) for k, v in arrays.items()})

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def norm(self) -> float:
        return float(math.sqrt(sum(float(np.sum(t.data.astype(np.float64) ** 2)) for t in self.tensors.values())))


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    arrays = {}
    for name, shape in param_shapes(config).items():
        kind = name.rsplit(".", 1)[-1]
        part = name.split(".")[-2]
        if part in ("proj", "classifier") and kind == "weight":
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, size=shape)
        elif part in ("pool", "gate") and kind == "weight":
            arr = rng.uniform(-1e-2, 1e-2, size=shape)
        elif kind == "gain":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        arrays[name] = arr.astype(dtype)
    return ModelParams.from_arrays(config, arrays)


@dataclass
class ForwardOutput:
    logits: np.ndarray
    label: int
    alpha_audio: np.ndarray | None
    alpha_visual: np.ndarray | None
    w_audio: float
    w_visual: float
    pooled_audio: np.ndarray | None
    pooled_visual: np.ndarray | None
    fused: np.ndarray
    scores_audio: np.ndarray | None = None
    scores_visual: np.ndarray | None = None
    logits_tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def probability(self) -> float:
        z = self.logits.astype(np.float64)
        e = np.exp(z - z.max())
        return float(e[1] / e.sum())


# ---------------------------------------------------------------------------
# components
# ---------------------------------------------------------------------------


def project(features: Tensor, params: ModelParams, modality: str) -> Tensor:
    """Per-timestep affine map to the hidden size, then LayerNorm and ReLU."""
    config = params.config
    expected = config.input_dim(modality)
    if features.data.ndim != 2 or features.shape[1] != expected:
        raise nx.ShapeError(f"project: {modality} features have shape {features.shape}, "
                            f"expected (T, {expected})")
    h = nx.add_bias(nx.matmul(features, nx.transpose(params[f"{modality}.proj.weight"])),
                    params[f"{modality}.proj.bias"])
    if config.projection_activation:
        h = nx.relu(nx.layernorm(h, params[f"{modality}.norm.gain"], params[f"{modality}.norm.shift"]))
    return h


def temporal_pool(projected: Tensor, scorer_weight: Tensor | None, scorer_bias: Tensor | None,
                  mode: str) -> tuple[Tensor, Tensor | None, Tensor | None]:
    """Pool a (T, d) sequence to a d-vector.

    Returns ``(pooled, attention, scores)``. Attention is ``None`` for max
    pooling; scores are ``None`` for the non-softmax modes.
    """
    if projected.data.ndim != 2 or projected.shape[0] < 1:
        raise nx.ContractError(f"temporal_pool: need a non-empty (T, d) sequence, got {projected.shape}")
    T = projected.shape[0]
    if mode == "mean":
        alpha = nx.constant(np.full(T, 1.0 / T), dtype=projected.dtype)
        return nx.mean_rows(projected), alpha, None
    if mode == "max":
        return nx.max_rows(projected), None, None
    if mode not in ("softmax_tanh", "softmax_no_tanh"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    scores = nx.add_scalar(nx.matmul(projected, scorer_weight), scorer_bias)
    if mode == "softmax_tanh":
        scores = nx.tanh(scores)
    alpha = nx.softmax(scores)
    return nx.weighted_sum(alpha, projected), alpha, scores


def fuse(f_a: Tensor, f_v: Tensor, gate_a: Tensor | None, gate_v: Tensor | None,
         mode: str) -> tuple[Tensor, Tensor, Tensor]:
    """Combine pooled audio and visual vectors; returns ``(fused, w_a, w_v)``."""
    if f_a.shape != f_v.shape:
        raise nx.ShapeError(f"fuse: pooled shapes {f_a.shape} and {f_v.shape} differ")
    if mode == "concat":
        half = nx.constant(0.5, dtype=f_a.dtype)
        return nx.concat(f_a, f_v), half, half
    g_a = nx.matmul(f_a, gate_a)
    g_v = nx.matmul(f_v, gate_v)
    if mode == "softmax_gate":
        w = nx.softmax(nx.stack([g_a, g_v]))
        w_a, w_v = nx.index(w, 0), nx.index(w, 1)
    elif mode == "sigmoid_gate":
        w_a = nx.sigmoid(nx.sub(g_a, g_v))
        w_v = nx.affine(w_a, -1.0, 1.0)
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    return nx.add(nx.scale(f_a, w_a), nx.scale(f_v, w_v)), w_a, w_v


def classify(fused: Tensor, weight: Tensor, bias: Tensor, dropout_p: float, train: bool,
             rng: np.random.Generator | None = None) -> Tensor:
    if fused.shape != (weight.shape[1],):
        raise nx.ShapeError(f"classify: fused shape {fused.shape} vs classifier {weight.shape}")
    h = nx.dropout(fused, dropout_p, rng, train)
    return nx.add_bias(nx.matmul(weight, h), bias)


def focal_loss(logits: Tensor, label: int, gamma: float = 2.0,
               class_weights: Sequence[float] = (1.0, 1.0)) -> Tensor:
    return nx.focal_loss(logits, label, gamma, class_weights)


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, FeatureSequence):
        x = x.values
    return nx.constant(x, dtype=dtype)


def forward(features: Mapping[str, object], params: ModelParams, train: bool = False,
            rng: np.random.Generator | None = None) -> ForwardOutput:
    """Run the full network on one segment.

    ``features`` maps ``"audio"``/``"visual"`` to FeatureSequence objects or
    (T, D) arrays; only the modalities the config uses are required.
    """
    config = params.config
    dtype = params.dtype
    pooled: dict[str, Tensor] = {}
    alphas: dict[str, Tensor | None] = {}
    scores: dict[str, Tensor | None] = {}
    for m in config.active_modalities:
        if m not in features:
            raise KeyError(f"segment is missing the {m!r} stream")
        h = project(_as_input(features[m], dtype), params, m)
        w = params.tensors.get(f"{m}.pool.weight")
        b = params.tensors.get(f"{m}.pool.bias")
        pooled[m], alphas[m], scores[m] = temporal_pool(h, w, b, config.pooling)

    if config.modalities == "both":
        fused, w_a, w_v = fuse(pooled[AUDIO], pooled[VISUAL], params.tensors.get("audio.gate.weight"),
                               params.tensors.get("visual.gate.weight"), config.fusion)
        wa, wv = w_a.item(), w_v.item()
    else:
        fused = pooled[config.active_modalities[0]]
        wa, wv = (1.0, 0.0) if config.modalities == "audio_only" else (0.0, 1.0)

    logits = classify(fused, params["classifier.weight"], params["classifier.bias"],
                      config.dropout_p, train, rng)

    def arr(t):
        return None if t is None else t.data

    return ForwardOutput(
        logits=logits.data,
        label=int(np.argmax(logits.data)),
        alpha_audio=arr(alphas.get(AUDIO)),
        alpha_visual=arr(alphas.get(VISUAL)),
        w_audio=wa,
        w_visual=wv,
        pooled_audio=arr(pooled.get(AUDIO)),
        pooled_visual=arr(pooled.get(VISUAL)),
        fused=fused.data,
        scores_audio=arr(scores.get(AUDIO)),
        scores_visual=arr(scores.get(VISUAL)),
        logits_tensor=logits,
    )


def batch_loss(params: ModelParams, batch: Sequence[tuple[Mapping[str, object], int]],
               class_weights: Sequence[float], train: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
    """Mean focal loss over ``(features, label)`` pairs."""
    if not batch:
        raise nx.ContractError("batch_loss: empty batch")
    gamma = params.config.focal_gamma
    losses = [focal_loss(forward(feats, params, train, rng).logits_tensor, label, gamma, class_weights)
              for feats, label in batch]
    return nx.mean(nx.stack(losses))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def encode_checkpoint(params: ModelParams) -> bytes:
    config_bytes = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    streams = []
    for name, t in params.tensors.items():
        values = t.data.astype(np.float32)
        values = values.reshape(1, -1) if values.ndim < 2 else values
        streams.append(FeatureSequence(name, 1.0, values))
    return MMCK_MAGIC + struct.pack("<II", MMCK_VERSION, len(config_bytes)) + config_bytes + encode_streams(streams)


def decode_checkpoint(buf: bytes) -> ModelParams:
    if len(buf) < 12:
        raise FormatError("truncated checkpoint header", len(buf))
    if buf[:4] != MMCK_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}", 0)
    version, n = struct.unpack_from("<II", buf, 4)
    if version != MMCK_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    if 12 + n > len(buf):
        raise FormatError("truncated checkpoint config", 12)
    try:
        config = ModelConfig.from_dict(json.loads(buf[12:12 + n].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"invalid checkpoint config: {exc}", 12) from None
    streams, end = decode_streams(buf, 12 + n)
    if end != len(buf):
        raise FormatError("trailing bytes after checkpoint tensors", end)
    shapes = param_shapes(config)
    arrays = {}
    for s in streams:
        if s.name not in shapes:
            raise FormatError(f"unexpected tensor {s.name!r}", 12 + n)
        if s.values.size != math.prod(shapes[s.name]):
            raise FormatError(f"tensor {s.name!r} has {s.values.size} values, "
                              f"expected shape {shapes[s.name]}", 12 + n)
        arrays[s.name] = s.values.reshape(shapes[s.name])
    try:
        return ModelParams.from_arrays(config, arrays)
    except ValueError as exc:
        raise FormatError(str(exc), 12 + n) from None


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(params))


def load_checkpoint(path: str | Path) -> ModelParams:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

VARIANTS: dict[str, dict] = {
    "full": {},
    "mean_pool": {"pooling": "mean"},
    "max_pool": {"pooling": "max"},
    "no_tanh": {"pooling": "softmax_no_tanh"},
    "concat": {"fusion": "concat"},
    "sigmoid_gate": {"fusion": "sigmoid_gate"},
    "audio_only": {"modalities": "audio_only"},
    "visual_only": {"modalities": "visual_only"},
    "no_proj_activation": {"projection_activation": False},
}


def gradient_check(config: ModelConfig, seed: int = 0, t_audio: int = 12, t_visual: int = 6,
                   epsilon: float = 1e-5, grad_hook=None) -> dict[str, float]:
    """Finite-difference check of every parameter on a random two-segment batch.

    Runs in float64 with dropout off. Scorer and gate vectors are drawn at
    unit scale instead of the near-zero training init so that every path
    carries a non-trivial gradient.
    """
    rng = np.random.default_rng(seed)
    params = init_params(config, rng, dtype=np.float64)
    arrays = {}
    for name, arr in params.arrays().items():
        if name.endswith(("pool.weight", "gate.weight", "pool.bias", "proj.bias", "classifier.bias",
                          "norm.shift")):
            arr = rng.normal(0.0, 0.5, size=arr.shape)
        elif name.endswith("norm.gain"):
            arr = 1.0 + rng.normal(0.0, 0.2, size=arr.shape)
        arrays[name] = arr
    batch = [({AUDIO: rng.normal(size=(t_audio, config.d_audio)),
               VISUAL: rng.normal(size=(t_visual, config.d_visual))}, label) for label in (0, 1)]
    weights = config.class_weights or (0.7, 1.8)

    def loss_fn(p):
        return batch_loss(ModelParams(config, p), batch, weights, train=False)

    return nx.finite_diff_check(ModelParams.from_arrays(config, arrays).tensors, loss_fn, epsilon, grad_hook)
