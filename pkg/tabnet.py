"""Attention-gated periodic inception network for per-cycle BP forecasting.

The network normalises a feature window, embeds it, extends it along time to
cover the forecast horizon, then runs a stack of residual blocks. Each block
finds the dominant periods of its input from FFT amplitudes, folds the
sequence into one 2D tensor per period, applies a gated multi-kernel
convolution, unfolds, and fuses the branches with amplitude-softmax weights.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from engine import Tensor, conv2d, linear, no_grad, pad_rows, rfft_amplitude
from errors import ShapeMismatch, SignalTooShort

logger = logging.getLogger(__name__)

DEGENERATE_SD = 1e-8
ZERO_AMPLITUDE = 1e-10


class TabNetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    input_length: int = Field(30, ge=2)
    forecast_length: int = Field(5, ge=1)
    n_features: int = Field(38, ge=1)
    channels: int = Field(39, ge=2)
    d_model: int = Field(32, ge=8)
    n_layers: int = Field(2, ge=1)
    top_k: int = Field(5, ge=1)
    inception_kernels: Tuple[int, ...] = (1, 3, 5)
    attention_bottleneck_ratio: int = Field(4, ge=1)
    attention_sigmoid: bool = False
    use_attention: bool = True
    lr: float = Field(1e-4, gt=0)
    batch_size: int = Field(4, ge=1)
    epochs: int = Field(10, ge=1)
    seed: int = Field(0, ge=0)

    @field_validator("inception_kernels")
    @classmethod
    def kernels_are_odd(cls, kernels):
        if not kernels:
            raise ValueError("inception_kernels must not be empty")
        if any(k < 1 or k % 2 == 0 for k in kernels):
            raise ValueError(f"inception kernels must be positive odd sizes, got {list(kernels)}")
        if len(set(kernels)) != len(kernels):
            raise ValueError(f"inception kernels must be distinct, got {list(kernels)}")
        return tuple(kernels)

    @model_validator(mode="after")
    def check_shapes(self):
        if self.channels != self.n_features + 1:
            raise ValueError(f"channels ({self.channels}) must equal n_features + 1 ({self.n_features + 1})")
        extended = self.input_length + self.forecast_length
        if self.top_k > extended // 2:
            raise ValueError(f"top_k={self.top_k} exceeds half the extended length {extended}")
        return self

    @property
    def extended_length(self) -> int:
        return self.input_length + self.forecast_length

    @property
    def attention_channels(self) -> int:
        return max(1, self.d_model // self.attention_bottleneck_ratio)


# ------------------ Instance normalisation ------------------
@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    divisor: np.ndarray
    degenerate: np.ndarray

    @property
    def flagged(self) -> bool:
        return bool(self.degenerate.any())


def normalize_in(x) -> Tuple[Tensor, NormStats]:
    """Per-channel standardisation over the window (population SD).

    Channels with SD below 1e-8 are centred but not scaled and flagged.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ShapeMismatch(f"normalize_in expects a [T>=2, C] window, got shape {data.shape}")
    mean = data.mean(axis=0)
    std = data.std(axis=0)
    degenerate = std < DEGENERATE_SD
    divisor = np.where(degenerate, 1.0, std).astype(data.dtype)
    if degenerate.any():
        logger.debug(f"normalize_in: {int(degenerate.sum())} constant channel(s) passed through unscaled")
    stats = NormStats(mean=mean, std=std, divisor=divisor, degenerate=degenerate)
    return Tensor((data - mean) / divisor), stats


def de_normalize(y: Tensor, stats: NormStats) -> Tensor:
    """Inverse of :func:`normalize_in` for a [T, C] tensor: y * std + mean."""
    if y.ndim != 2 or y.shape[1] != stats.mean.shape[0]:
        raise ShapeMismatch(f"de_normalize: tensor {y.shape} does not match {stats.mean.shape[0]} channels")
    scale = Tensor(np.broadcast_to(stats.std.astype(y.dtype), y.shape).copy())
    shift = Tensor(np.broadcast_to(stats.mean.astype(y.dtype), y.shape).copy())
    return y * scale + shift


def positional_encoding(length: int, d_model: int, dtype=np.float32) -> np.ndarray:
    position = np.arange(length, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, d_model, 2, dtype=np.float64) * (-np.log(10000.0) / d_model))
    pe = np.zeros((length, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(position * div)
    pe[:, 1::2] = np.cos(position * div[: d_model // 2])
    return pe.astype(dtype)


# ------------------ Period detection and folding ------------------
@dataclass(frozen=True)
class PeriodDecomposition:
    amplitudes: np.ndarray
    frequencies: np.ndarray
    periods: np.ndarray

    @property
    def selected_amplitudes(self) -> np.ndarray:
        return self.amplitudes[self.frequencies - 1]


def detect_periods(x, top_k: int) -> PeriodDecomposition:
    """Top-k frequencies of the channel-averaged amplitude spectrum.

    Amplitudes at or below 1e-10 * max(1, max|x|) count as zero. Ties go to
    the lower frequency; empty slots take the lowest unused frequencies.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    length = data.shape[0]
    if length < 2 * top_k:
        raise SignalTooShort(f"detect_periods needs T >= 2*top_k, got T={length}, top_k={top_k}")
    amplitudes = rfft_amplitude(data).data
    freqs = np.arange(1, amplitudes.shape[0] + 1)

    threshold = ZERO_AMPLITUDE * max(1.0, float(np.max(np.abs(data))) if data.size else 1.0)
    live = amplitudes > threshold
    order = np.lexsort((freqs[live], -amplitudes[live]))
    chosen = list(freqs[live][order][:top_k])
    if len(chosen) < top_k:
        unused = [f for f in freqs if f not in chosen]
        chosen.extend(unused[: top_k - len(chosen)])

    frequencies = np.asarray(chosen, dtype=np.int64)
    periods = -(-length // frequencies)
    return PeriodDecomposition(amplitudes=amplitudes, frequencies=frequencies, periods=periods)


def reshape_to_2d(x: Tensor, r: int, c: int) -> Tensor:
    """Fold [T, d] into [d, c, r]: element (ch, a, b) is x[b*c + a, ch]."""
    length, d = x.shape
    if r < 1 or c < 1 or c * r < length:
        raise ShapeMismatch(f"reshape_to_2d: {r} x {c} cannot hold {length} timesteps")
    padded = pad_rows(x, c * r)
    return padded.reshape(r, c, d).permute(2, 1, 0)


def restore_to_1d(x2d: Tensor, length: int) -> Tensor:
    d, c, r = x2d.shape
    if c * r < length:
        raise ShapeMismatch(f"restore_to_1d: {c} x {r} holds fewer than {length} timesteps")
    flat = x2d.permute(2, 1, 0).reshape(r * c, d)
    return flat if r * c == length else flat[:length]


def aggregate(branches: Sequence[Tensor], amplitudes) -> Tensor:
    """Softmax(amplitudes)-weighted sum of branches; weights carry no gradient."""
    amplitudes = np.asarray(amplitudes, dtype=np.float64).reshape(-1)
    if not branches or len(branches) != amplitudes.shape[0]:
        raise ShapeMismatch(f"aggregate: {len(branches)} branches for {amplitudes.shape[0]} amplitudes")
    shape = branches[0].shape
    if any(b.shape != shape for b in branches):
        raise ShapeMismatch("aggregate: branch shapes differ")
    exp = np.exp(amplitudes - amplitudes.max())
    weights = exp / exp.sum()
    out = branches[0] * float(weights[0])
    for branch, weight in zip(branches[1:], weights[1:]):
        out = out + branch * float(weight)
    return out


# ------------------ Parameters ------------------
def parameter_shapes(config: TabNetConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    d, C = config.d_model, config.channels
    h = config.attention_channels
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["embed.W"] = (C, d)
    shapes["embed.b"] = (d,)
    shapes["time_extend.W"] = (config.input_length, config.extended_length)
    shapes["time_extend.b"] = (config.extended_length,)
    for layer in range(config.n_layers):
        prefix = f"layers.{layer}"
        shapes[f"{prefix}.attention.conv1.W"] = (h, d, 3, 3)
        shapes[f"{prefix}.attention.conv1.b"] = (h,)
        shapes[f"{prefix}.attention.conv2.W"] = (d, h, 3, 3)
        shapes[f"{prefix}.attention.conv2.b"] = (d,)
        for k in config.inception_kernels:
            shapes[f"{prefix}.branch_{k}.W"] = (d, d, k, k)
            shapes[f"{prefix}.branch_{k}.b"] = (d,)
    shapes["project.W"] = (d, C)
    shapes["project.b"] = (C,)
    return shapes


def _fan_in(shape: Tuple[int, ...]) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


def init_parameters(config: TabNetConfig, dtype=np.float32) -> Dict[str, np.ndarray]:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero."""
    rng = np.random.default_rng(config.seed)
    params: Dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = 1.0 / np.sqrt(_fan_in(shape))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def _conv_parameter_count(c_out: int, c_in: int, k: int) -> int:
    return c_out * c_in * k * k + c_out


def tabblock_parameter_count(config: TabNetConfig) -> int:
    d, h = config.d_model, config.attention_channels
    count = sum(_conv_parameter_count(d, d, k) for k in config.inception_kernels)
    if config.use_attention:
        count += _conv_parameter_count(h, d, 3) + _conv_parameter_count(d, h, 3)
    return count


def reference_inception_parameter_count(d_model: int, kernels: Sequence[int] = (1, 3, 5, 7, 9, 11)) -> int:
    return sum(_conv_parameter_count(d_model, d_model, k) for k in kernels)


# ------------------ Layers ------------------
class AttInception:
    """Conv-parameterised gate followed by averaged k x k convolution branches."""

    def __init__(self, params: Mapping[str, Tensor], prefix: str, config: TabNetConfig):
        self.config = config
        self.conv1 = (params[f"{prefix}.attention.conv1.W"], params[f"{prefix}.attention.conv1.b"])
        self.conv2 = (params[f"{prefix}.attention.conv2.W"], params[f"{prefix}.attention.conv2.b"])
        self.branches = [(params[f"{prefix}.branch_{k}.W"], params[f"{prefix}.branch_{k}.b"])
                         for k in config.inception_kernels]

    def attention_map(self, x2d: Tensor) -> Tensor:
        z = conv2d(conv2d(x2d, *self.conv1).relu(), *self.conv2)
        return z.sigmoid() if self.config.attention_sigmoid else z

    def __call__(self, x2d: Tensor) -> Tensor:
        if x2d.ndim != 3 or x2d.shape[0] != self.config.d_model:
            raise ShapeMismatch(f"att_inception expects [{self.config.d_model}, c, r], got {x2d.shape}")
        gated = x2d * self.attention_map(x2d) if self.config.use_attention else x2d
        out = conv2d(gated, *self.branches[0])
        for kernel, bias in self.branches[1:]:
            out = out + conv2d(gated, kernel, bias)
        return out * (1.0 / len(self.branches))


class TabBlock:
    def __init__(self, params: Mapping[str, Tensor], prefix: str, config: TabNetConfig):
        self.top_k = config.top_k
        self.inception = AttInception(params, prefix, config)

    def __call__(self, x: Tensor) -> Tensor:
        length = x.shape[0]
        periods = detect_periods(x, self.top_k)
        branches = []
        for r, c in zip(periods.frequencies, periods.periods):
            folded = reshape_to_2d(x, int(r), int(c))
            branches.append(restore_to_1d(self.inception(folded), length))
        return x + aggregate(branches, periods.selected_amplitudes)


# ------------------ Feature scaling ------------------
@dataclass(frozen=True)
class FeatureScaler:
    """Training-split z-score statistics for the feature columns."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "FeatureScaler":
        features = np.asarray(features, dtype=np.float64)
        mean = features.mean(axis=0)
        scale = features.std(axis=0)
        scale = np.where(scale < DEGENERATE_SD, 1.0, scale)
        return cls(mean=mean, scale=scale)

    @classmethod
    def identity(cls, n_features: int) -> "FeatureScaler":
        return cls(mean=np.zeros(n_features), scale=np.ones(n_features))

    def transform(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.mean.shape[0]:
            raise ShapeMismatch(f"scaler fitted on {self.mean.shape[0]} features, got {features.shape[-1]}")
        return (features - self.mean) / self.scale


# ------------------ Model ------------------
class TabNetModel:
    def __init__(self, config: TabNetConfig, parameters: Optional[Mapping[str, np.ndarray]] = None,
                 dtype=np.float32, scaler: Optional[FeatureScaler] = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.scaler = scaler or FeatureScaler.identity(config.n_features)
        if self.scaler.mean.shape != (config.n_features,) or self.scaler.scale.shape != (config.n_features,):
            raise ShapeMismatch(f"feature scaler covers {self.scaler.mean.shape} features, config has {config.n_features}")
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.load_state_dict(parameters if parameters is not None else init_parameters(config, self.dtype))

    # ------------------ State ------------------
    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.params.items())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.params.items()}

    def load_state_dict(self, parameters: Mapping[str, np.ndarray]) -> None:
        expected = parameter_shapes(self.config)
        missing = [name for name in expected if name not in parameters]
        extra = [name for name in parameters if name not in expected]
        if missing or extra:
            raise ShapeMismatch(f"parameter set does not match config: missing={missing[:3]} unexpected={extra[:3]}")
        params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, shape in expected.items():
            value = np.asarray(parameters[name])
            if value.shape != shape:
                raise ShapeMismatch(f"parameter {name} has shape {value.shape}, config expects {shape}")
            params[name] = Tensor(value.astype(self.dtype, copy=True), requires_grad=True, name=name)
        self.params = params
        self.blocks = [TabBlock(self.params, f"layers.{layer}", self.config) for layer in range(self.config.n_layers)]

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    # ------------------ Forward ------------------
    def prepare_window(self, features: np.ndarray, target: np.ndarray) -> np.ndarray:
        """Scale raw feature rows and append the target history as the last channel."""
        scaled = self.scaler.transform(features)
        target = np.asarray(target, dtype=np.float64).reshape(-1, 1)
        return np.hstack([scaled, target]).astype(self.dtype)

    def embed(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.config.channels:
            raise ShapeMismatch(f"embed expects [T, {self.config.channels}], got {x.shape}")
        pe = positional_encoding(x.shape[0], self.config.d_model, self.dtype)
        return linear(x, self.params["embed.W"], self.params["embed.b"]) + Tensor(pe)

    def extend_time(self, h: Tensor) -> Tensor:
        along_time = h.permute(1, 0)
        extended = linear(along_time, self.params["time_extend.W"], self.params["time_extend.b"])
        return extended.permute(1, 0)

    def _as_window(self, x) -> Tensor:
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        expected = (self.config.input_length, self.config.channels)
        if data.shape != expected:
            raise ShapeMismatch(f"forward expects a window of shape {expected}, got {data.shape}")
        return Tensor(data.astype(self.dtype, copy=False))

    def forward_with_stats(self, x) -> Tuple[Tensor, NormStats]:
        """Normalised target forecast plus the window statistics it was computed under.

        The model holds no per-call state, so one instance may serve
        concurrent read-only forecasts.
        """
        window, stats = normalize_in(self._as_window(x))
        h = self.extend_time(self.embed(window))
        for block in self.blocks:
            h = block(h)
        y = linear(h, self.params["project.W"], self.params["project.b"])
        return y[-self.config.forecast_length :, self.config.channels - 1], stats

    def forward_normalized(self, x) -> Tensor:
        """Forecast of the target channel in the window's normalised units."""
        return self.forward_with_stats(x)[0]

    def forward(self, x) -> Tensor:
        """Forecast of the target channel in mmHg, shape [H]."""
        y, stats = self.forward_with_stats(x)
        target = self.config.channels - 1
        return y * float(stats.std[target]) + float(stats.mean[target])

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        with no_grad():
            return self.forward(x).data.copy()
