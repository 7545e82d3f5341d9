"""Spacetime non-local block with embedded-Gaussian attention.

For an input ``x`` of shape ``B x C x T x H x W`` with ``N = T*H*W``
positions, per sample::

    theta, phi, g = 1x1x1 convs C -> C/2
    A = softmax over j of theta_i . phi_j      (N x N, row-stochastic)
    y = A @ g                                  (N x C/2)
    z = x + BN(W_z y)                          (W_z: 1x1x1 conv C/2 -> C)

BatchNorm sits only after ``W_z``; with its scale at zero the block is an
exact identity, which is how fresh blocks are initialised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .layers import (
    BatchNormCache,
    BatchNormParams,
    Conv3dParams,
    batchnorm_backward,
    batchnorm_forward,
    conv3d_backward,
    conv3d_forward,
)
from .tensor import matmul, softmax_rows


@dataclass
class NonLocalParams:
    theta: Conv3dParams
    phi: Conv3dParams
    g: Conv3dParams
    wz: Conv3dParams
    wz_bn: BatchNormParams

    def __post_init__(self):
        inner = {self.theta.weight.shape[0], self.phi.weight.shape[0], self.g.weight.shape[0]}
        if len(inner) != 1:
            raise ShapeError("theta/phi/g must share their output channel count")
        for conv in (self.theta, self.phi, self.g, self.wz):
            if conv.weight.shape[2:] != (1, 1, 1):
                raise ShapeError("non-local projections must be 1x1x1 convolutions")

    @property
    def channels(self) -> int:
        return self.theta.weight.shape[1]

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for name in ("theta", "phi", "g", "wz", "wz_bn"):
            for k, v in getattr(self, name).named().items():
                out[f"{name}.{k}"] = v
        return out


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_nonlocal(channels: int, rng: np.random.Generator, dtype=np.float32) -> NonLocalParams:
    """He-initialised projections, zero biases, and a zero-scale BatchNorm."""
    if channels % 2 or channels < 2:
        raise ShapeError(f"non-local block needs an even channel count, got {channels}")
    inner = channels // 2

    def conv(c_out, c_in):
        w = he_normal(rng, (c_out, c_in, 1, 1, 1), c_in, dtype)
        return Conv3dParams(w, np.zeros(c_out, dtype=dtype))

    return NonLocalParams(
        theta=conv(inner, channels),
        phi=conv(inner, channels),
        g=conv(inner, channels),
        wz=conv(channels, inner),
        wz_bn=BatchNormParams.create(channels, dtype=dtype, gamma=0.0),
    )


@dataclass
class NonLocalCache:
    x: np.ndarray
    theta: np.ndarray  # B x N x C'
    phi: np.ndarray  # B x C' x N
    g: np.ndarray  # B x N x C'
    attn: np.ndarray  # B x N x N
    y: np.ndarray  # B x C' x T x H x W
    bn: BatchNormCache


def _check_input(x: np.ndarray, p: NonLocalParams) -> None:
    if x.ndim != 5:
        raise ShapeError(f"non-local input must be B x C x T x H x W, got {x.shape}")
    if x.shape[1] % 2:
        raise ShapeError(f"non-local block needs an even channel count, got {x.shape[1]}")
    if x.shape[1] != p.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, block expects {p.channels}")


def _embed(x: np.ndarray, conv: Conv3dParams) -> np.ndarray:
    """1x1x1 conv flattened to ``B x C' x N``."""
    e = conv3d_forward(x, conv)
    return e.reshape(e.shape[0], e.shape[1], -1)


def _attention(x: np.ndarray, p: NonLocalParams):
    theta = np.ascontiguousarray(_embed(x, p.theta).transpose(0, 2, 1))
    phi = _embed(x, p.phi)
    attn = softmax_rows(matmul(theta, phi))
    return theta, phi, attn


def attention_map(x: np.ndarray, p: NonLocalParams) -> np.ndarray:
    """Row-stochastic ``B x N x N`` attention; row i attends over positions j."""
    _check_input(x, p)
    return _attention(x, p)[2]


def nonlocal_forward(x: np.ndarray, p: NonLocalParams) -> tuple[np.ndarray, NonLocalCache]:
    _check_input(x, p)
    theta, phi, attn = _attention(x, p)
    g = np.ascontiguousarray(_embed(x, p.g).transpose(0, 2, 1))
    y_flat = matmul(attn, g)  # B x N x C'
    y = np.ascontiguousarray(y_flat.transpose(0, 2, 1)).reshape((x.shape[0], -1) + x.shape[2:])
    w = conv3d_forward(y, p.wz)
    bn_out, bn_cache = batchnorm_forward(w, p.wz_bn)
    z = x + bn_out
    return z, NonLocalCache(x, theta, phi, g, attn, y, bn_cache)


def nonlocal_backward(grad_out: np.ndarray, cache: NonLocalCache, p: NonLocalParams):
    """Returns ``(grad_x, grads)`` with ``grads`` keyed like ``p.named()``."""
    x = cache.x
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input {x.shape}")
    B = x.shape[0]
    grads: dict[str, np.ndarray] = {}

    g_w, grads["wz_bn.gamma"], grads["wz_bn.beta"] = batchnorm_backward(grad_out, cache.bn, p.wz_bn)
    g_y, grads["wz.weight"], grads["wz.bias"] = conv3d_backward(g_w, cache.y, p.wz)
    g_yflat = np.ascontiguousarray(g_y.reshape(B, g_y.shape[1], -1).transpose(0, 2, 1))  # B x N x C'

    g_attn = matmul(g_yflat, np.ascontiguousarray(cache.g.transpose(0, 2, 1)))
    g_g = matmul(np.ascontiguousarray(cache.attn.transpose(0, 2, 1)), g_yflat)
    a = cache.attn
    g_s = a * (g_attn - (g_attn * a).sum(axis=-1, keepdims=True))
    g_theta = matmul(g_s, np.ascontiguousarray(cache.phi.transpose(0, 2, 1)))  # B x N x C'
    g_phi = matmul(np.ascontiguousarray(cache.theta.transpose(0, 2, 1)), g_s)  # B x C' x N

    grad_x = grad_out.copy()
    spatial = x.shape[2:]
    for name, g_emb in (
        ("theta", g_theta.transpose(0, 2, 1)),
        ("phi", g_phi),
        ("g", g_g.transpose(0, 2, 1)),
    ):
        g5 = np.ascontiguousarray(g_emb).reshape((B, -1) + spatial)
        gx, grads[f"{name}.weight"], grads[f"{name}.bias"] = conv3d_backward(g5, x, getattr(p, name))
        grad_x += gx
    return grad_x, grads
