"""3D convolution, pooling, normalization, dropout and linear layers.

Every layer is a pair of pure functions: ``*_forward`` and ``*_backward``.
Backward functions return the vector-Jacobian product for the input followed
by the parameter gradients, in the order the parameters are declared.
Feature maps are laid out ``B x C x T x H x W``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError
from .tensor import leaky_relu, matmul


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ShapeError(f"expected 3 values, got {v}")
    return t


def output_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


@dataclass
class Conv3dParams:
    """Weight ``C_out x C_in x R x P x Q`` (R temporal), optional bias ``C_out``."""

    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        self.stride = _triple(self.stride)
        self.padding = _triple(self.padding)
        if self.weight.ndim != 5:
            raise ShapeError(f"conv3d weight must be rank 5, got {self.weight.shape}")
        if min(self.weight.shape) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ShapeError("kernel extents and strides must be >= 1, padding >= 0")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")

    def named(self) -> dict[str, np.ndarray]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


def _conv_geometry(x: np.ndarray, p: Conv3dParams) -> tuple[int, int, int]:
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be B x C x T x H x W, got {x.shape}")
    if x.shape[1] != p.weight.shape[1]:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape} vs weight {p.weight.shape}")
    outs = tuple(
        output_extent(x.shape[2 + i], p.weight.shape[2 + i], p.stride[i], p.padding[i]) for i in range(3)
    )
    if min(outs) < 1:
        raise ShapeError(f"non-positive conv3d output extent {outs} for input {x.shape}")
    return outs


def _pad(x: np.ndarray, padding, value=0.0) -> np.ndarray:
    if not any(padding):
        return x
    pt, ph, pw = padding
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)), constant_values=value)


def _window(xp: np.ndarray, offset, stride, outs) -> tuple[slice, ...]:
    return (slice(None), slice(None)) + tuple(
        slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, outs)
    )


def conv3d_forward(x: np.ndarray, p: Conv3dParams) -> np.ndarray:
    """Zero-padded strided 3D cross-correlation plus bias."""
    outs = _conv_geometry(x, p)
    xp = _pad(x, p.padding)
    w = p.weight
    # channels-last accumulator: B x T' x H' x W' x C_out
    acc = np.zeros((x.shape[0],) + outs + (w.shape[0],), dtype=x.dtype)
    for off in itertools.product(*(range(k) for k in w.shape[2:])):
        patch = xp[_window(xp, off, p.stride, outs)]
        acc += np.tensordot(patch, w[(slice(None), slice(None)) + off], axes=([1], [1]))
    if p.bias is not None:
        acc += p.bias
    return np.ascontiguousarray(acc.transpose(0, 4, 1, 2, 3))


def conv3d_backward(grad_out: np.ndarray, x: np.ndarray, p: Conv3dParams):
    """Returns ``(grad_x, grad_weight, grad_bias)``; ``grad_bias`` is None without bias."""
    outs = _conv_geometry(x, p)
    expected = (x.shape[0], p.weight.shape[0]) + outs
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {expected}")
    xp = _pad(x, p.padding)
    w = p.weight
    g = grad_out.transpose(0, 2, 3, 4, 1)  # B x T' x H' x W' x C_out
    grad_xp = np.zeros_like(xp)
    grad_w = np.zeros_like(w)
    for off in itertools.product(*(range(k) for k in w.shape[2:])):
        win = _window(xp, off, p.stride, outs)
        patch = xp[win]
        grad_w[(slice(None), slice(None)) + off] = np.tensordot(g, patch, axes=([0, 1, 2, 3], [0, 2, 3, 4]))
        # B x T' x H' x W' x C_in -> B x C_in x T' x H' x W'
        grad_xp[win] += np.tensordot(g, w[(slice(None), slice(None)) + off], axes=([4], [0])).transpose(0, 4, 1, 2, 3)
    pt, ph, pw = p.padding
    T, H, W = x.shape[2:]
    grad_x = np.ascontiguousarray(grad_xp[:, :, pt : pt + T, ph : ph + H, pw : pw + W])
    grad_b = grad_out.sum(axis=(0, 2, 3, 4)) if p.bias is not None else None
    return grad_x, grad_w, grad_b


def check_separable(temporal: Conv3dParams, spatial: Conv3dParams) -> None:
    if temporal.weight.shape[3:] != (1, 1):
        raise ShapeError(f"temporal kernel must be R x 1 x 1, got {temporal.weight.shape[2:]}")
    if spatial.weight.shape[2] != 1:
        raise ShapeError(f"spatial kernel must be 1 x P x Q, got {spatial.weight.shape[2:]}")
    if spatial.weight.shape[1] != temporal.weight.shape[0]:
        raise ShapeError("spatial conv input channels must equal temporal conv output channels")


def separable_conv3d_forward(x: np.ndarray, temporal: Conv3dParams, spatial: Conv3dParams) -> np.ndarray:
    """R x 1 x 1 temporal convolution followed by a 1 x P x Q spatial one."""
    check_separable(temporal, spatial)
    return conv3d_forward(conv3d_forward(x, temporal), spatial)


def separable_conv3d_backward(grad_out: np.ndarray, x: np.ndarray, temporal: Conv3dParams, spatial: Conv3dParams):
    """Returns ``(grad_x, (gw_t, gb_t), (gw_s, gb_s))``."""
    check_separable(temporal, spatial)
    mid = conv3d_forward(x, temporal)
    g_mid, gw_s, gb_s = conv3d_backward(grad_out, mid, spatial)
    g_x, gw_t, gb_t = conv3d_backward(g_mid, x, temporal)
    return g_x, (gw_t, gb_t), (gw_s, gb_s)


def inflate_2d_to_3d(weight2d: np.ndarray, t: int) -> np.ndarray:
    """Replicate a ``C_out x C_in x P x Q`` kernel over ``t`` frames, scaled by 1/t."""
    if t < 1:
        raise DomainError(f"inflation depth must be >= 1, got {t}")
    if weight2d.ndim != 4:
        raise ShapeError(f"2D kernel must be rank 4, got {weight2d.shape}")
    plane = weight2d / weight2d.dtype.type(t)
    return np.ascontiguousarray(np.repeat(plane[:, :, None], t, axis=2))


def pool3d_forward(x: np.ndarray, kind: str, kernel, stride=None, padding=0):
    """Max or average pooling. Returns ``(out, argmax)``; argmax is None for avg.

    Average pooling divides by the full window volume, padded cells included.
    Max pooling pads with -inf and keeps the first maximal cell of the window.
    """
    kernel = _triple(kernel)
    stride = _triple(stride if stride is not None else kernel)
    padding = _triple(padding)
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pool kind {kind!r}")
    outs = tuple(output_extent(x.shape[2 + i], kernel[i], stride[i], padding[i]) for i in range(3))
    if min(outs) < 1:
        raise ShapeError(f"non-positive pool output extent {outs} for input {x.shape}")
    xp = _pad(x, padding, value=-np.inf if kind == "max" else 0.0)
    out_shape = x.shape[:2] + outs
    if kind == "avg":
        acc = np.zeros(out_shape, dtype=x.dtype)
        for off in itertools.product(*(range(k) for k in kernel)):
            acc += xp[_window(xp, off, stride, outs)]
        return acc / x.dtype.type(np.prod(kernel)), None
    best = np.full(out_shape, -np.inf, dtype=x.dtype)
    arg = np.zeros(out_shape, dtype=np.int64)
    for i, off in enumerate(itertools.product(*(range(k) for k in kernel))):
        v = xp[_window(xp, off, stride, outs)]
        better = v > best
        best = np.where(better, v, best)
        arg[better] = i
    return best, arg


def pool3d_backward(grad_out, x, kind, kernel, stride=None, padding=0, argmax=None):
    kernel = _triple(kernel)
    stride = _triple(stride if stride is not None else kernel)
    padding = _triple(padding)
    outs = grad_out.shape[2:]
    pt, ph, pw = padding
    grad_xp = np.zeros(x.shape[:2] + tuple(n + 2 * q for n, q in zip(x.shape[2:], padding)), dtype=x.dtype)
    scale = grad_out.dtype.type(1.0 / np.prod(kernel))
    for i, off in enumerate(itertools.product(*(range(k) for k in kernel))):
        win = _window(grad_xp, off, stride, outs)
        if kind == "avg":
            grad_xp[win] += grad_out * scale
        else:
            grad_xp[win] += np.where(argmax == i, grad_out, 0)
    T, H, W = x.shape[2:]
    return np.ascontiguousarray(grad_xp[:, :, pt : pt + T, ph : ph + H, pw : pw + W])


@dataclass
class BatchNormParams:
    """Per-channel affine normalization over every axis except axis 1.

    Running variance is updated with the unbiased batch variance.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, channels: int, dtype=np.float32, gamma: float = 1.0, **kw) -> "BatchNormParams":
        return cls(
            gamma=np.full(channels, gamma, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            **kw,
        )

    def named(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    training: bool
    axes: tuple[int, ...] = field(default=())


def _bn_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batchnorm_forward(x: np.ndarray, p: BatchNormParams) -> tuple[np.ndarray, BatchNormCache]:
    if x.ndim < 2 or x.shape[1] != p.gamma.shape[0]:
        raise ShapeError(f"batchnorm channel mismatch: input {x.shape} vs {p.gamma.shape[0]} channels")
    axes = (0,) + tuple(range(2, x.ndim))
    eps = x.dtype.type(p.epsilon)
    if p.training:
        n = x.size // x.shape[1]
        if n < 2:
            raise ShapeError("batchnorm in training mode needs at least 2 values per channel")
        mean = x.mean(axis=axes)
        var = ((x - _bn_view(mean, x.ndim)) ** 2).mean(axis=axes)
        m = p.momentum
        p.running_mean[...] = (1 - m) * p.running_mean + m * mean
        p.running_var[...] = (1 - m) * p.running_var + m * var * (n / (n - 1))
    else:
        mean, var = p.running_mean, p.running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - _bn_view(mean, x.ndim)) * _bn_view(inv_std, x.ndim)
    out = xhat * _bn_view(p.gamma, x.ndim) + _bn_view(p.beta, x.ndim)
    return out, BatchNormCache(xhat, inv_std, p.training, axes)


def batchnorm_backward(grad_out: np.ndarray, cache: BatchNormCache, p: BatchNormParams):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    if grad_out.shape != cache.xhat.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != {cache.xhat.shape}")
    axes, nd = cache.axes, grad_out.ndim
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * cache.xhat).sum(axis=axes)
    gxhat = grad_out * _bn_view(p.gamma, nd)
    if not cache.training:
        return gxhat * _bn_view(cache.inv_std, nd), grad_gamma, grad_beta
    mean_g = gxhat.mean(axis=axes)
    mean_gx = (gxhat * cache.xhat).mean(axis=axes)
    grad_x = (gxhat - _bn_view(mean_g, nd) - cache.xhat * _bn_view(mean_gx, nd)) * _bn_view(cache.inv_std, nd)
    return grad_x, grad_gamma, grad_beta


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None, training: bool = True):
    """Inverted dropout. Returns ``(out, mask)`` where mask holds 0 or 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, np.ones_like(x)
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return grad_out * mask


def leaky_relu_backward(grad_out: np.ndarray, x: np.ndarray, alpha: float) -> np.ndarray:
    return np.where(x >= 0, grad_out, grad_out * grad_out.dtype.type(alpha))


@dataclass
class LinearParams:
    weight: np.ndarray  # D_out x D_in
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"inconsistent linear shapes {self.weight.shape}, {self.bias.shape}")

    def named(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}


def linear_forward(x: np.ndarray, p: LinearParams) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != p.weight.shape[1]:
        raise ShapeError(f"linear input {x.shape} incompatible with weight {p.weight.shape}")
    return matmul(x, np.ascontiguousarray(p.weight.T)) + p.bias


def linear_backward(grad_out: np.ndarray, x: np.ndarray, p: LinearParams):
    """Returns ``(grad_x, grad_weight, grad_bias)``."""
    if grad_out.shape != (x.shape[0], p.weight.shape[0]):
        raise ShapeError(f"grad_out shape {grad_out.shape} incompatible with linear output")
    grad_x = matmul(grad_out, p.weight)
    grad_w = matmul(np.ascontiguousarray(grad_out.T), x)
    return grad_x, grad_w, grad_out.sum(axis=0)


__all__ = [
    "Conv3dParams",
    "BatchNormParams",
    "LinearParams",
    "conv3d_forward",
    "conv3d_backward",
    "separable_conv3d_forward",
    "separable_conv3d_backward",
    "inflate_2d_to_3d",
    "pool3d_forward",
    "pool3d_backward",
    "batchnorm_forward",
    "batchnorm_backward",
    "dropout",
    "dropout_backward",
    "leaky_relu",
    "leaky_relu_backward",
    "linear_forward",
    "linear_backward",
]
