"""The five network module types and their parameter layout.

Each module type is a small differentiable block keyed by an instance
label; ``find[red]`` and ``find[circle]`` share an architecture but own
separate weights. Signatures:

    find       image features        -> attention
    transform  attention             -> attention
    combine    attention x attention -> attention
    describe   features x attention  -> answer representation
    measure    attention             -> answer representation

Attentions are unnormalized H x W heatmaps; answer representations are
pre-softmax vectors of size ``d_ans``. All forwards are pure functions of
(store snapshot, inputs) and create their parameters lazily on first use.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .params import ParameterStore

__all__ = [
    "MODULE_TYPES",
    "ModuleKey",
    "ModuleConfig",
    "find_forward",
    "transform_forward",
    "combine_forward",
    "describe_forward",
    "measure_forward",
    "ensure_parameters",
]

MODULE_TYPES = ("find", "transform", "combine", "describe", "measure")

_INSTANCE_RE = re.compile(r"[a-z][a-z0-9_-]*\Z")


@dataclass(frozen=True)
class ModuleKey:
    module_type: str
    instance: str

    def __post_init__(self):
        if self.module_type not in MODULE_TYPES:
            raise ValueError(f"unknown module type {self.module_type!r}")
        if not _INSTANCE_RE.match(self.instance):
            raise ValueError(f"bad instance label {self.instance!r}")

    def render(self) -> str:
        return f"{self.module_type}[{self.instance}]"

    def __str__(self) -> str:
        return self.render()


@dataclass
class ModuleConfig:
    """Dimensions shared by all modules in one model."""

    feature_channels: int = 64
    attention_height: int = 9
    attention_width: int = 9
    transform_hidden: int = 32
    labels: tuple[str, ...] = ("no", "yes")
    # Size of the answer representation emitted by describe/measure. When
    # None it equals the label count, which is required whenever the
    # question-encoder fusion head is disabled.
    answer_rep_size: int | None = None
    share_by_type: bool = False

    def __post_init__(self):
        for name in ("feature_channels", "attention_height", "attention_width",
                     "transform_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.labels:
            raise ValueError("labels must be non-empty")

    @property
    def d_ans(self) -> int:
        return self.answer_rep_size if self.answer_rep_size else len(self.labels)

    @property
    def attention_cells(self) -> int:
        return self.attention_height * self.attention_width


def _param_instance(config: ModuleConfig, instance: str) -> str:
    # Optional type-level sharing collapses every instance onto one weight set.
    return "shared" if config.share_by_type else instance


def _check_attention(op: str, attention: Tensor, config: ModuleConfig) -> None:
    expected = (config.attention_height, config.attention_width)
    if attention.dims != expected:
        raise ShapeError(f"{op}: attention dims {attention.dims}, expected {expected}")


def _check_features(op: str, features: Tensor, config: ModuleConfig) -> None:
    expected = (config.attention_height, config.attention_width,
                config.feature_channels)
    if features.dims != expected:
        raise ShapeError(f"{op}: feature dims {features.dims}, expected {expected}")


def find_forward(store: ParameterStore, instance: str, features: Tensor,
                 config: ModuleConfig) -> Tensor:
    """1x1 convolution of the feature map down to a single-channel heatmap."""
    _check_features(f"find[{instance}]", features, config)
    inst = _param_instance(config, instance)
    weight = store.weight(f"find.{inst}.conv.weight",
                          (1, 1, config.feature_channels, 1))
    bias = store.bias(f"find.{inst}.conv.bias", (1,))
    heat = ad.conv2d(features, weight, bias, "same")
    return ad.reshape(heat, (config.attention_height, config.attention_width))


def transform_forward(store: ParameterStore, instance: str, attention: Tensor,
                      config: ModuleConfig) -> Tensor:
    """Two-layer perceptron from one attention to another.

    Hidden layer is rectified; the output layer is linear so the result is
    free to be any real heatmap.
    """
    _check_attention(f"transform[{instance}]", attention, config)
    inst = _param_instance(config, instance)
    cells = config.attention_cells
    hidden = config.transform_hidden
    w1 = store.weight(f"transform.{inst}.fc1.weight", (cells, hidden))
    b1 = store.bias(f"transform.{inst}.fc1.bias", (hidden,))
    w2 = store.weight(f"transform.{inst}.fc2.weight", (hidden, cells))
    b2 = store.bias(f"transform.{inst}.fc2.bias", (cells,))
    h = ad.relu(ad.fully_connected(ad.flatten(attention), w1, b1))
    out = ad.fully_connected(h, w2, b2)
    return ad.reshape(out, (config.attention_height, config.attention_width))


def combine_forward(store: ParameterStore, instance: str, a: Tensor, b: Tensor,
                    config: ModuleConfig) -> Tensor:
    """Merge two attentions: 1x1 convolution over the 2-channel stack, then relu."""
    _check_attention(f"combine[{instance}]", a, config)
    _check_attention(f"combine[{instance}]", b, config)
    inst = _param_instance(config, instance)
    weight = store.weight(f"combine.{inst}.conv.weight", (1, 1, 2, 1))
    bias = store.bias(f"combine.{inst}.conv.bias", (1,))
    stacked = ad.stack_pair(a, b)
    merged = ad.relu(ad.conv2d(stacked, weight, bias, "same"))
    return ad.reshape(merged, (config.attention_height, config.attention_width))


def describe_forward(store: ParameterStore, instance: str, features: Tensor,
                     attention: Tensor, config: ModuleConfig) -> Tensor:
    """Attention-weighted feature average followed by one linear layer."""
    _check_features(f"describe[{instance}]", features, config)
    _check_attention(f"describe[{instance}]", attention, config)
    inst = _param_instance(config, instance)
    weight = store.weight(f"describe.{inst}.fc.weight",
                          (config.feature_channels, config.d_ans))
    bias = store.bias(f"describe.{inst}.fc.bias", (config.d_ans,))
    pooled = ad.attention_weighted_pool(features, attention)
    return ad.fully_connected(pooled, weight, bias)


def measure_forward(store: ParameterStore, instance: str, attention: Tensor,
                    config: ModuleConfig) -> Tensor:
    """Linear readout of the flattened attention.

    Linearity keeps the output sensitive to overall attention magnitude,
    which is what makes this head suitable for existence decisions over
    unnormalized heatmaps.
    """
    _check_attention(f"measure[{instance}]", attention, config)
    inst = _param_instance(config, instance)
    weight = store.weight(f"measure.{inst}.fc.weight",
                          (config.attention_cells, config.d_ans))
    bias = store.bias(f"measure.{inst}.fc.bias", (config.d_ans,))
    return ad.fully_connected(ad.flatten(attention), weight, bias)


def ensure_parameters(store: ParameterStore, key: ModuleKey,
                      config: ModuleConfig) -> None:
    """Create a module instance's parameters without running a forward pass."""
    inst = _param_instance(config, key.instance)
    cells = config.attention_cells
    if key.module_type == "find":
        store.weight(f"find.{inst}.conv.weight", (1, 1, config.feature_channels, 1))
        store.bias(f"find.{inst}.conv.bias", (1,))
    elif key.module_type == "transform":
        store.weight(f"transform.{inst}.fc1.weight", (cells, config.transform_hidden))
        store.bias(f"transform.{inst}.fc1.bias", (config.transform_hidden,))
        store.weight(f"transform.{inst}.fc2.weight", (config.transform_hidden, cells))
        store.bias(f"transform.{inst}.fc2.bias", (cells,))
    elif key.module_type == "combine":
        store.weight(f"combine.{inst}.conv.weight", (1, 1, 2, 1))
        store.bias(f"combine.{inst}.conv.bias", (1,))
    elif key.module_type == "describe":
        store.weight(f"describe.{inst}.fc.weight",
                     (config.feature_channels, config.d_ans))
        store.bias(f"describe.{inst}.fc.bias", (config.d_ans,))
    elif key.module_type == "measure":
        store.weight(f"measure.{inst}.fc.weight", (cells, config.d_ans))
        store.bias(f"measure.{inst}.fc.bias", (config.d_ans,))
