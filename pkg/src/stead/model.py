"""The STEAD backbone: (2+1)D feature enhancer, linear-attention blocks, pooling, classifier.

Parameters live in a flat ``{name: ndarray}`` dict so the optimizer and the
checkpoint writer can treat them uniformly. Forward functions accept either
arrays (constants) or leaf Tensors (to collect gradients).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from functools import lru_cache

import numpy as np

from .attention import AttentionBundle, FeatureMapParams, draw_feature_map, performer_attention
from .errors import ConfigError, DimensionError
from .functional import channel_linear, conv1d_temporal, conv2d_spatial, gelu, layer_norm, pool
from .tensor import Tensor, as_tensor, get_default_dtype, sigmoid

REFERENCE_PARAM_COUNTS = {"fast": "17,441", "base": "1.63M"}


@dataclass(frozen=True)
class ModelConfig:
    enhancer_channels: int = 32
    enhancer_depth: int = 1
    attention_channels: int = 32
    attention_depth: int = 1
    random_features: int = 256
    input_shape: tuple = (192, 16, 10, 10)
    ffn_expansion: float = 4.0
    seed: int = 0
    feature_seed: int = 0
    spatial_kernel: int = 3
    temporal_kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        if len(self.input_shape) != 4 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be four positive sizes, got {self.input_shape}")
        for name in ("enhancer_channels", "attention_channels", "random_features"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.enhancer_depth < 0 or self.attention_depth < 0:
            raise ConfigError("block depths must be non-negative")
        if self.spatial_kernel % 2 == 0 or self.temporal_kernel % 2 == 0:
            raise ConfigError("kernel sizes must be odd so blocks preserve (T, H, W)")
        if self.ffn_expansion <= 0:
            raise ConfigError("ffn_expansion must be positive")

    @property
    def embedding_dim(self) -> int:
        return self.attention_channels if self.attention_depth else self.trunk_channels

    @property
    def trunk_channels(self) -> int:
        return self.enhancer_channels if self.enhancer_depth else self.input_shape[0]

    def hidden(self, channels: int) -> int:
        return max(1, int(round(channels * self.ffn_expansion)))

    def to_dict(self) -> dict:
        return asdict(self)


FAST = ModelConfig(enhancer_channels=32, enhancer_depth=1, attention_channels=32, attention_depth=1)
BASE = ModelConfig(enhancer_channels=192, enhancer_depth=3, attention_channels=128, attention_depth=3)
PRESETS = {"fast": FAST, "base": BASE}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides)


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Every trainable tensor in forward order, with its shape."""
    ks, kt = config.spatial_kernel, config.temporal_kernel
    shapes: dict[str, tuple] = {}
    c_in = config.input_shape[0]
    for i in range(config.enhancer_depth):
        c = config.enhancer_channels
        h = config.hidden(c)
        pre = f"enhancer.{i}"
        shapes[f"{pre}.norm1.gamma"] = (c_in,)
        shapes[f"{pre}.norm1.beta"] = (c_in,)
        shapes[f"{pre}.spatial.weight"] = (c, c_in, ks, ks)
        shapes[f"{pre}.spatial.bias"] = (c,)
        shapes[f"{pre}.temporal.weight"] = (c, c, kt)
        shapes[f"{pre}.temporal.bias"] = (c,)
        if c_in != c:
            shapes[f"{pre}.shortcut.weight"] = (c, c_in, 1, 1)
            shapes[f"{pre}.shortcut.bias"] = (c,)
        shapes[f"{pre}.norm2.gamma"] = (c,)
        shapes[f"{pre}.norm2.beta"] = (c,)
        shapes[f"{pre}.ffn.fc1.weight"] = (h, c)
        shapes[f"{pre}.ffn.fc1.bias"] = (h,)
        shapes[f"{pre}.ffn.fc2.weight"] = (c, h)
        shapes[f"{pre}.ffn.fc2.bias"] = (c,)
        c_in = c
    if config.attention_depth and c_in != config.attention_channels:
        c = config.attention_channels
        shapes["transition.weight"] = (c, c_in, 1, 1)
        shapes["transition.bias"] = (c,)
        c_in = c
    for i in range(config.attention_depth):
        c = config.attention_channels
        h = config.hidden(c)
        pre = f"attention.{i}"
        shapes[f"{pre}.norm1.gamma"] = (c,)
        shapes[f"{pre}.norm1.beta"] = (c,)
        for proj in ("query", "key", "value", "out"):
            shapes[f"{pre}.{proj}.weight"] = (c, c)
            shapes[f"{pre}.{proj}.bias"] = (c,)
        shapes[f"{pre}.norm2.gamma"] = (c,)
        shapes[f"{pre}.norm2.beta"] = (c,)
        shapes[f"{pre}.ffn.fc1.weight"] = (h, c)
        shapes[f"{pre}.ffn.fc1.bias"] = (h,)
        shapes[f"{pre}.ffn.fc2.weight"] = (c, h)
        shapes[f"{pre}.ffn.fc2.bias"] = (c,)
    shapes["head.weight"] = (1, c_in)
    shapes["head.bias"] = (1,)
    return shapes


def init_params(config: ModelConfig, dtype=None) -> dict[str, np.ndarray]:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases, identity LayerNorm affine."""
    dtype = np.dtype(dtype or get_default_dtype())
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith((".beta", ".bias")):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        params[name] = arr.astype(dtype)
    return params


def draw_feature_maps(config: ModelConfig, dtype=None) -> list[FeatureMapParams]:
    """One fixed projection per attention block, seeded from ``feature_seed``."""
    return [
        draw_feature_map(config.attention_channels, config.random_features, config.feature_seed + i, dtype=dtype)
        for i in range(config.attention_depth)
    ]


@lru_cache(maxsize=8)
def _cached_feature_maps(config: ModelConfig, dtype: str) -> tuple:
    return tuple(draw_feature_maps(config, dtype))


def count_params(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def param_breakdown(config: ModelConfig) -> list[tuple[str, tuple, int]]:
    """``(name, shape, count)`` rows; the counts sum to :func:`count_params`."""
    return [(name, shape, int(np.prod(shape))) for name, shape in param_shapes(config).items()]


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


def _sub(params: dict, prefix: str) -> dict:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _ffn(x: Tensor, p: dict) -> Tensor:
    axis = 1 if x.ndim == 5 else 0
    h = gelu(channel_linear(x, p["ffn.fc1.weight"], p["ffn.fc1.bias"], axis=axis))
    return channel_linear(h, p["ffn.fc2.weight"], p["ffn.fc2.bias"], axis=axis)


def enhancer_block(x, params: dict) -> Tensor:
    """Pre-LN (2+1)D conv with residual, then pre-LN FFN with residual.

    ``params`` holds this block's tensors under short names (``norm1.gamma``,
    ``spatial.weight``, ...). When the block changes the channel count the
    residual goes through a 1x1 spatial conv (``shortcut.*``).
    """
    x = as_tensor(x)
    w_s = as_tensor(params["spatial.weight"])
    w_t = as_tensor(params["temporal.weight"])
    ps = w_s.shape[-1] // 2
    pt = w_t.shape[-1] // 2

    h = layer_norm(x, params["norm1.gamma"], params["norm1.beta"])
    h = conv2d_spatial(h, w_s, params["spatial.bias"], pad=ps)
    h = conv1d_temporal(h, w_t, params["temporal.bias"], pad=pt)
    if "shortcut.weight" in params:
        x = conv2d_spatial(x, params["shortcut.weight"], params["shortcut.bias"])
    elif x.shape[-4] != w_t.shape[0]:
        raise DimensionError(f"enhancer changes channels {x.shape[-4]} -> {w_t.shape[0]} without a shortcut")
    x = x + h
    h = layer_norm(x, params["norm2.gamma"], params["norm2.beta"])
    return x + _ffn(h, params)


def attention_block(x, params: dict, features: FeatureMapParams) -> Tensor:
    """Pre-LN single-head linear attention over all T*H*W sites, then pre-LN FFN."""
    x = as_tensor(x)
    batched = x.ndim == 5
    c = x.shape[-4]
    lead = x.shape[:1] if batched else ()
    axis = 1 if batched else 0

    h = layer_norm(x, params["norm1.gamma"], params["norm1.beta"])
    tokens = h.reshape(lead + (c, -1))  # (..., C, L)
    tokens = tokens.transpose((0, 2, 1) if batched else (1, 0))  # (..., L, C)

    def proj(name):
        w = as_tensor(params[f"{name}.weight"])
        return tokens @ w.T + as_tensor(params[f"{name}.bias"])

    attended = performer_attention(AttentionBundle(proj("query"), proj("key"), proj("value")), features)
    w_o = as_tensor(params["out.weight"])
    out = attended @ w_o.T + as_tensor(params["out.bias"])
    out = out.transpose((0, 2, 1) if batched else (1, 0)).reshape(x.shape)
    x = x + out
    h = layer_norm(x, params["norm2.gamma"], params["norm2.beta"], axis=axis)
    return x + _ffn(h, params)


def embed(features, config: ModelConfig, params: dict, feature_maps=None) -> Tensor:
    """Run the trunk and mean-pool over (T, H, W); returns ``(d,)`` or ``(B, d)``."""
    x = as_tensor(features)
    if x.shape[-4:] != config.input_shape or x.ndim not in (4, 5):
        raise DimensionError(f"features of shape {x.shape} do not match input_shape {config.input_shape}")
    if feature_maps is None:
        feature_maps = _cached_feature_maps(config, np.dtype(x.dtype).name)
    for i in range(config.enhancer_depth):
        x = enhancer_block(x, _sub(params, f"enhancer.{i}"))
    if "transition.weight" in params:
        x = conv2d_spatial(x, params["transition.weight"], params["transition.bias"])
    for i in range(config.attention_depth):
        x = attention_block(x, _sub(params, f"attention.{i}"), feature_maps[i])
    return pool(x, (-3, -2, -1), mode="mean")


def classify(embedding, params: dict) -> Tensor:
    """Affine map d -> 1 followed by the logistic function."""
    e = as_tensor(embedding)
    w, b = as_tensor(params["head.weight"]), as_tensor(params["head.bias"])
    logit = e.reshape(-1, e.shape[-1]) @ w.T + b
    return sigmoid(logit.reshape(e.shape[:-1]))


def forward(features, config: ModelConfig, params: dict, feature_maps=None) -> tuple[Tensor, Tensor]:
    """Embedding and anomaly score in (0, 1) for one clip or a batch of clips."""
    emb = embed(features, config, params, feature_maps)
    return emb, classify(emb, params)


def config_fields() -> list[str]:
    return [f.name for f in fields(ModelConfig)]
