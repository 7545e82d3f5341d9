"""Configurable 3D residual track encoder with non-local blocks.

Pipeline: separable stem -> BN -> ReLU -> (max pool) -> residual stages with
optional non-local blocks -> global average pool -> bottleneck
(linear, BN, leaky ReLU, dropout) -> identity classifier.

Each parameter is initialised from its own generator keyed by
``(seed, crc32(name))``, so adding or removing a non-local block leaves
every other parameter unchanged.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import layers as L
from .errors import ConfigError, ShapeError
from .nonlocal_block import NonLocalParams, init_nonlocal, nonlocal_backward, nonlocal_forward
from .tensor import make_rng

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class StageConfig:
    n_blocks: int
    channels: int
    temporal_kernel: int = 3
    spatial_kernel: int = 3
    stride: int = 1


def _default_stages() -> list[StageConfig]:
    return [StageConfig(2, 16), StageConfig(2, 32, stride=2)]


@dataclass
class ModelConfig:
    in_channels: int = 3
    stem_channels: int = 8
    stem_temporal_kernel: int = 3
    stem_spatial_kernel: int = 7
    stem_stride: int = 2
    stem_pool: bool = True
    stages: list[StageConfig] = field(default_factory=_default_stages)
    # per stage: indices of blocks followed by a non-local block
    nonlocal_placement: list[list[int]] = field(default_factory=lambda: [[0], [0]])
    embedding_dim: int = 128
    n_identities: int = 8
    dropout: float = 0.5
    leaky_slope: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages]
        self.nonlocal_placement = [list(p) for p in self.nonlocal_placement]
        self.validate()

    def validate(self) -> None:
        if self.dtype not in _DTYPES:
            raise ConfigError(f"unsupported dtype {self.dtype!r}", "model.dtype")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be >= 1", "model.embedding_dim")
        if self.n_identities < 2:
            raise ConfigError("n_identities must be >= 2", "model.n_identities")
        if len(self.nonlocal_placement) not in (0, len(self.stages)):
            raise ConfigError("nonlocal_placement needs one list per stage", "model.nonlocal_placement")
        for s_idx, placement in enumerate(self.nonlocal_placement):
            stage = self.stages[s_idx]
            for b in placement:
                if not 0 <= b < stage.n_blocks:
                    raise ConfigError(
                        f"non-local index {b} out of range for stage {s_idx} with {stage.n_blocks} blocks",
                        f"model.nonlocal_placement[{s_idx}]",
                    )
            if stage.channels % 2 and placement:
                raise ConfigError(f"stage {s_idx} has odd channels; non-local needs even", "model.stages")
        for s_idx, stage in enumerate(self.stages):
            if min(stage.n_blocks, stage.channels, stage.temporal_kernel, stage.spatial_kernel, stage.stride) < 1:
                raise ConfigError(f"stage {s_idx} has a non-positive field", f"model.stages[{s_idx}]")
            # same-size padding k // 2 only preserves extents for odd kernels
            if stage.temporal_kernel % 2 == 0 or stage.spatial_kernel % 2 == 0:
                raise ConfigError(f"stage {s_idx} kernels must be odd", f"model.stages[{s_idx}]")
        if self.stem_temporal_kernel % 2 == 0 or self.stem_spatial_kernel % 2 == 0:
            raise ConfigError("stem kernels must be odd", "model.stem_spatial_kernel")

    def placement(self, stage: int) -> list[int]:
        return self.nonlocal_placement[stage] if self.nonlocal_placement else []

    @property
    def n_nonlocal(self) -> int:
        return sum(len(p) for p in self.nonlocal_placement)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


class Layer:
    """Minimal stateful layer: parameters, gradient slots, cached activations."""

    training = True

    def children(self) -> list[tuple[str, "Layer"]]:
        return []

    def local_params(self) -> dict[str, np.ndarray]:
        return {}

    def local_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def init_param(self, name: str, arr: np.ndarray, rng: np.random.Generator) -> None:
        arr[...] = 0

    def walk(self, prefix: str = "") -> Iterator[tuple[str, "Layer"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.walk(f"{prefix}{name}.")

    def set_training(self, flag: bool) -> None:
        for _, layer in self.walk():
            layer.training = flag
            layer._on_mode()

    def _on_mode(self) -> None:
        pass

    def zero_grad(self) -> None:
        for _, layer in self.walk():
            layer.grads = {k: np.zeros_like(v) for k, v in layer.local_params().items()}

    def _accumulate(self, name: str, g: np.ndarray | None) -> None:
        if g is None:
            return
        if not hasattr(self, "grads"):
            self.grads = {k: np.zeros_like(v) for k, v in self.local_params().items()}
        self.grads[name] += g


class SeparableConv(Layer):
    def __init__(self, c_in, c_out, temporal_kernel, spatial_kernel, stride=1, dtype=np.float32, bias=False):
        kt, ks = temporal_kernel, spatial_kernel
        self.temporal = L.Conv3dParams(
            np.zeros((c_out, c_in, kt, 1, 1), dtype), np.zeros(c_out, dtype) if bias else None,
            stride=(1, 1, 1), padding=(kt // 2, 0, 0),
        )
        self.spatial = L.Conv3dParams(
            np.zeros((c_out, c_out, 1, ks, ks), dtype), np.zeros(c_out, dtype) if bias else None,
            stride=(1, stride, stride), padding=(0, ks // 2, ks // 2),
        )

    def local_params(self):
        out = {f"temporal.{k}": v for k, v in self.temporal.named().items()}
        out.update({f"spatial.{k}": v for k, v in self.spatial.named().items()})
        return out

    def init_param(self, name, arr, rng):
        if name.endswith("weight"):
            arr[...] = rng.standard_normal(arr.shape) * np.sqrt(2.0 / np.prod(arr.shape[1:]))
        else:
            arr[...] = 0

    def forward(self, x):
        self.x = x
        self.mid = L.conv3d_forward(x, self.temporal)
        return L.conv3d_forward(self.mid, self.spatial)

    def backward(self, g):
        g_mid, gw, gb = L.conv3d_backward(g, self.mid, self.spatial)
        self._accumulate("spatial.weight", gw)
        self._accumulate("spatial.bias", gb)
        gx, gw, gb = L.conv3d_backward(g_mid, self.x, self.temporal)
        self._accumulate("temporal.weight", gw)
        self._accumulate("temporal.bias", gb)
        return gx


class PointwiseConv(Layer):
    def __init__(self, c_in, c_out, stride=1, dtype=np.float32):
        self.p = L.Conv3dParams(np.zeros((c_out, c_in, 1, 1, 1), dtype), None, stride=(1, stride, stride))

    def local_params(self):
        return self.p.named()

    def init_param(self, name, arr, rng):
        arr[...] = rng.standard_normal(arr.shape) * np.sqrt(2.0 / arr.shape[1])

    def forward(self, x):
        self.x = x
        return L.conv3d_forward(x, self.p)

    def backward(self, g):
        gx, gw, _ = L.conv3d_backward(g, self.x, self.p)
        self._accumulate("weight", gw)
        return gx


class BatchNorm(Layer):
    def __init__(self, channels, dtype=np.float32, gamma=1.0):
        self.p = L.BatchNormParams.create(channels, dtype=dtype, gamma=gamma)
        self.gamma0 = gamma

    def local_params(self):
        return self.p.named()

    def local_buffers(self):
        return self.p.buffers()

    def init_param(self, name, arr, rng):
        arr[...] = self.gamma0 if name == "gamma" else 0

    def _on_mode(self):
        self.p.training = self.training

    def forward(self, x):
        out, self.cache = L.batchnorm_forward(x, self.p)
        return out

    def backward(self, g):
        gx, gg, gb = L.batchnorm_backward(g, self.cache, self.p)
        self._accumulate("gamma", gg)
        self._accumulate("beta", gb)
        return gx


class LeakyReLU(Layer):
    def __init__(self, alpha=0.0):
        self.alpha = alpha

    def forward(self, x):
        self.x = x
        return L.leaky_relu(x, self.alpha)

    def backward(self, g):
        return L.leaky_relu_backward(g, self.x, self.alpha)


class MaxPool(Layer):
    kernel, stride, padding = (1, 3, 3), (1, 2, 2), (0, 1, 1)

    def forward(self, x):
        self.x = x
        out, self.arg = L.pool3d_forward(x, "max", self.kernel, self.stride, self.padding)
        return out

    def backward(self, g):
        return L.pool3d_backward(g, self.x, "max", self.kernel, self.stride, self.padding, self.arg)


class Linear(Layer):
    def __init__(self, d_in, d_out, dtype=np.float32, init_std=None):
        self.p = L.LinearParams(np.zeros((d_out, d_in), dtype), np.zeros(d_out, dtype))
        self.init_std = init_std

    def local_params(self):
        return self.p.named()

    def init_param(self, name, arr, rng):
        if name == "bias":
            arr[...] = 0
            return
        std = self.init_std if self.init_std is not None else np.sqrt(2.0 / arr.shape[1])
        arr[...] = rng.standard_normal(arr.shape) * std

    def forward(self, x):
        self.x = x
        return L.linear_forward(x, self.p)

    def backward(self, g):
        gx, gw, gb = L.linear_backward(g, self.x, self.p)
        self._accumulate("weight", gw)
        self._accumulate("bias", gb)
        return gx


class Dropout(Layer):
    def __init__(self, rate):
        self.rate = rate
        self.rng: np.random.Generator | None = None

    def forward(self, x):
        out, self.mask = L.dropout(x, self.rate, self.rng, self.training)
        return out

    def backward(self, g):
        return L.dropout_backward(g, self.mask)


class NonLocal(Layer):
    def __init__(self, channels, dtype=np.float32):
        self.p = init_nonlocal(channels, make_rng(0), dtype)
        self.attn: np.ndarray | None = None

    def local_params(self):
        return self.p.named()

    def local_buffers(self):
        return {f"wz_bn.{k}": v for k, v in self.p.wz_bn.buffers().items()}

    def init_param(self, name, arr, rng):
        if name.endswith("weight"):
            arr[...] = rng.standard_normal(arr.shape) * np.sqrt(2.0 / arr.shape[1])
        else:  # biases, and the zero BN scale that makes the block an identity
            arr[...] = 0

    def _on_mode(self):
        self.p.wz_bn.training = self.training

    def forward(self, x):
        out, self.cache = nonlocal_forward(x, self.p)
        self.attn = self.cache.attn
        return out

    def backward(self, g):
        gx, grads = nonlocal_backward(g, self.cache, self.p)
        for k, v in grads.items():
            self._accumulate(k, v)
        return gx


class Sequential(Layer):
    def __init__(self, items: list[tuple[str, Layer]]):
        self.items = items

    def children(self):
        return self.items

    def forward(self, x):
        for _, layer in self.items:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for _, layer in reversed(self.items):
            g = layer.backward(g)
        return g


class ResidualBlock3d(Layer):
    """Two separable convs with BN; ReLU after the first and after the sum."""

    def __init__(self, c_in, c_out, kt, ks, stride, dtype):
        self.main = Sequential([
            ("conv1", SeparableConv(c_in, c_out, kt, ks, stride, dtype)),
            ("bn1", BatchNorm(c_out, dtype)),
            ("relu1", LeakyReLU(0.0)),
            ("conv2", SeparableConv(c_out, c_out, kt, ks, 1, dtype)),
            ("bn2", BatchNorm(c_out, dtype)),
        ])
        self.shortcut: Sequential | None = None
        if c_in != c_out or stride != 1:
            self.shortcut = Sequential([
                ("conv", PointwiseConv(c_in, c_out, stride, dtype)),
                ("bn", BatchNorm(c_out, dtype)),
            ])
        self.relu = LeakyReLU(0.0)

    def children(self):
        out = [("main", self.main)]
        if self.shortcut is not None:
            out.append(("shortcut", self.shortcut))
        return out

    def forward(self, x):
        m = self.main.forward(x)
        s = self.shortcut.forward(x) if self.shortcut is not None else x
        if m.shape != s.shape:
            raise ShapeError(f"shortcut shape {s.shape} != main path {m.shape}")
        return self.relu.forward(m + s)

    def backward(self, g):
        g = self.relu.backward(g)
        gx = self.main.backward(g)
        return gx + (self.shortcut.backward(g) if self.shortcut is not None else g)


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return make_rng([seed, zlib.crc32(name.encode())])


class TrackEncoder(Layer):
    """Track -> (features B x d, logits B x N)."""

    def __init__(self, config: ModelConfig):
        self.config = config
        dt = _DTYPES[config.dtype]
        self.dtype = dt
        stem = [
            ("conv", SeparableConv(config.in_channels, config.stem_channels, config.stem_temporal_kernel,
                                   config.stem_spatial_kernel, config.stem_stride, dt)),
            ("bn", BatchNorm(config.stem_channels, dt)),
            ("relu", LeakyReLU(0.0)),
        ]
        if config.stem_pool:
            stem.append(("pool", MaxPool()))
        body: list[tuple[str, Layer]] = [("stem", Sequential(stem))]
        c = config.stem_channels
        for s_idx, st in enumerate(config.stages):
            for b in range(st.n_blocks):
                stride = st.stride if b == 0 else 1
                body.append((f"stage{s_idx}.block{b}", ResidualBlock3d(c, st.channels, st.temporal_kernel,
                                                                      st.spatial_kernel, stride, dt)))
                c = st.channels
                if b in config.placement(s_idx):
                    body.append((f"stage{s_idx}.nonlocal{b}", NonLocal(c, dt)))
        self.body = Sequential(body)
        self.feat_channels = c
        self.bottleneck = Sequential([
            ("fc", Linear(c, config.embedding_dim, dt)),
            ("bn", BatchNorm(config.embedding_dim, dt)),
            ("act", LeakyReLU(config.leaky_slope)),
        ])
        self.drop = Dropout(config.dropout)
        self.classifier = Linear(config.embedding_dim, config.n_identities, dt, init_std=0.01)
        self._cache = None

    def children(self):
        return [("body", self.body), ("head", self.bottleneck), ("dropout", self.drop),
                ("classifier", self.classifier)]

    # -- parameter access ------------------------------------------------

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, layer in self.walk():
            for k, v in layer.local_params().items():
                out[prefix + k] = v
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, layer in self.walk():
            for k, v in layer.local_buffers().items():
                out[prefix + k] = v
        return out

    def named_grads(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, layer in self.walk():
            params = layer.local_params()
            grads = getattr(layer, "grads", None) or {k: np.zeros_like(v) for k, v in params.items()}
            for k in params:
                out[prefix + k] = grads[k]
        return out

    def parameter_count(self) -> int:
        return sum(v.size for v in self.named_parameters().values())

    def nonlocal_layers(self) -> dict[str, NonLocal]:
        return {prefix.rstrip("."): layer for prefix, layer in self.walk() if isinstance(layer, NonLocal)}

    def attention_maps(self) -> dict[str, np.ndarray]:
        """Attention of each non-local block from the most recent forward."""
        return {name: layer.attn for name, layer in self.nonlocal_layers().items() if layer.attn is not None}

    def initialize(self, seed: int) -> None:
        for prefix, layer in self.walk():
            for k, arr in layer.local_params().items():
                layer.init_param(k, arr, _param_rng(seed, prefix + k))
        self.zero_grad()

    # -- computation -----------------------------------------------------

    def forward(self, tracks: np.ndarray, rng: np.random.Generator | None = None):
        c = self.config
        if tracks.ndim != 5 or tracks.shape[1] != c.in_channels:
            raise ShapeError(f"tracks must be B x {c.in_channels} x T x H x W, got {tracks.shape}")
        x = np.ascontiguousarray(tracks, dtype=self.dtype)
        fmap = self.body.forward(x)
        self._pool_shape = fmap.shape
        pooled = fmap.mean(axis=(2, 3, 4))
        features = self.bottleneck.forward(pooled)
        if self.training and self.drop.rate > 0 and rng is None:
            raise ValueError("training-mode forward with dropout needs an rng")
        self.drop.rng = rng
        logits = self.classifier.forward(self.drop.forward(features))
        self._cache = True
        return features, logits

    def backward(self, grad_features: np.ndarray | None, grad_logits: np.ndarray | None) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient w.r.t. the input tracks."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        g_feat = np.zeros((self._pool_shape[0], self.config.embedding_dim), self.dtype)
        if grad_logits is not None:
            g_feat += self.drop.backward(self.classifier.backward(grad_logits))
        if grad_features is not None:
            g_feat += grad_features
        g_pooled = self.bottleneck.backward(g_feat)
        vol = np.prod(self._pool_shape[2:])
        g_map = np.broadcast_to(
            (g_pooled / self.dtype(vol))[:, :, None, None, None], self._pool_shape
        ).copy()
        return self.body.backward(g_map)

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        targets = {**self.named_parameters(), **self.named_buffers()}
        for name, arr in targets.items():
            src = tensors[name]
            if src.shape != arr.shape or src.dtype != arr.dtype:
                raise ShapeError(f"{name}: expected {arr.shape}/{arr.dtype}, got {src.shape}/{src.dtype}")
            arr[...] = src


def build(config: ModelConfig, seed: int = 0) -> TrackEncoder:
    enc = TrackEncoder(config)
    enc.initialize(seed)
    enc.set_training(True)
    return enc


def forward(enc: TrackEncoder, tracks: np.ndarray, rng: np.random.Generator | None = None):
    return enc.forward(tracks, rng)


def backward(enc: TrackEncoder, grad_features, grad_logits) -> None:
    enc.backward(grad_features, grad_logits)
