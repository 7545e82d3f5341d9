"""Dense tensor primitives on top of numpy arrays.

Tensors are plain row-major ``numpy.ndarray`` objects of dtype float32 or
float64. The functions here add what numpy does not promise: a fixed
ascending summation order for matmul and sum-reductions (so loop oracles can
be matched bit for bit), explicit shape errors, and the TNSR file format.

TNSR layout (little-endian, no padding)::

    bytes 0-3   b"TNSR"
    u16         version (1)
    u8          dtype code (0 = float32, 1 = float64)
    u8          ndim
    ndim * u64  dimension sizes
    ...         raw row-major data
"""

from __future__ import annotations

import os
import struct
from typing import Sequence

import numpy as np

from .errors import (
    BadMagicError,
    DomainError,
    ShapeError,
    TruncatedError,
    UnsupportedDtypeError,
    UnsupportedVersionError,
)

MAGIC = b"TNSR"
VERSION = 1
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_TO_DTYPE = {v: k for k, v in _DTYPE_TO_CODE.items()}
_HEADER = struct.Struct("<4sHBB")


def make_rng(seed: int | Sequence[int]) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=dtype))


def _check_float(*arrays: np.ndarray) -> None:
    for a in arrays:
        if a.dtype not in _DTYPE_TO_CODE:
            raise UnsupportedDtypeError(f"unsupported dtype {a.dtype}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b`` with leading batch dimensions allowed.

    Each output element is accumulated as ``((0 + a0*b0) + a1*b1) + ...`` in
    ascending inner index, so results are bit-identical to a triple loop.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul dtype mismatch: {a.dtype} x {b.dtype}")
    _check_float(a)
    out = np.zeros(a.shape[:-1] + b.shape[-1:], dtype=a.dtype)
    for k in range(a.shape[-1]):
        out += a[..., :, k, None] * b[..., None, k, :]
    return out


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def leaky_relu(x: np.ndarray, alpha: float) -> np.ndarray:
    return np.where(x >= 0, x, x * x.dtype.type(alpha))


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def elementwise(op: str, *inputs: np.ndarray, alpha: float = 0.0) -> np.ndarray:
    """Pointwise op by name: add, sub, mul, scale, leaky_relu, exp, log.

    ``scale`` multiplies the single input by ``alpha``; ``leaky_relu`` uses
    ``alpha`` as the negative slope.
    """
    if op in ("add", "sub", "mul"):
        if len(inputs) != 2:
            raise ShapeError(f"{op} takes two inputs, got {len(inputs)}")
        a, b = inputs
        _same_shape(a, b, op)
        return {"add": np.add, "sub": np.subtract, "mul": np.multiply}[op](a, b)
    if len(inputs) != 1:
        raise ShapeError(f"{op} takes one input, got {len(inputs)}")
    (x,) = inputs
    if op == "scale":
        return x * x.dtype.type(alpha)
    if op == "leaky_relu":
        return leaky_relu(x, alpha)
    if op == "exp":
        return np.exp(x)
    if op == "log":
        if np.any(x <= 0):
            raise DomainError("log of non-positive value")
        return np.log(x)
    raise ValueError(f"unknown elementwise op {op!r}")


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"invalid axis {ax} for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axis}")
    return tuple(sorted(out))


def reduce(x: np.ndarray, op: str, axis=None) -> np.ndarray:
    """Reduce ``x`` over ``axis`` (int, tuple, or None for all axes).

    sum/mean accumulate in ascending row-major order over the reduced axes.
    argmax accepts a single axis and breaks ties toward the lowest index.
    """
    axes = _normalize_axes(axis, x.ndim)
    if op == "argmax":
        if len(axes) != 1:
            raise ShapeError("argmax needs exactly one axis")
        return np.argmax(x, axis=axes[0])
    if op == "max":
        return np.max(x, axis=axes)
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    kept = [d for d in range(x.ndim) if d not in axes]
    moved = np.transpose(x, axes + tuple(kept))
    n = int(np.prod([x.shape[d] for d in axes], dtype=np.int64))
    flat = moved.reshape((n,) + tuple(x.shape[d] for d in kept))
    acc = np.zeros(flat.shape[1:], dtype=x.dtype)
    for i in range(n):
        acc = acc + flat[i]
    if op == "mean":
        acc = acc / x.dtype.type(n)
    return acc


def sum_last(x: np.ndarray) -> np.ndarray:
    """Ascending-order sum over the last axis."""
    acc = np.zeros(x.shape[:-1], dtype=x.dtype)
    for i in range(x.shape[-1]):
        acc = acc + x[..., i]
    return acc


def tensor_to_bytes(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if t.dtype not in _DTYPE_TO_CODE:
        raise UnsupportedDtypeError(f"cannot serialize dtype {t.dtype}")
    if t.ndim > 255:
        raise ShapeError("TNSR supports at most 255 dimensions")
    header = _HEADER.pack(MAGIC, VERSION, _DTYPE_TO_CODE[t.dtype], t.ndim)
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    data = np.ascontiguousarray(t).astype(t.dtype.newbyteorder("<"), copy=False).tobytes()
    return header + dims + data


def tensor_from_bytes(buf: bytes, *, exact: bool = True) -> tuple[np.ndarray, int]:
    """Parse one TNSR record; returns the tensor and bytes consumed.

    With ``exact`` the record must span the whole buffer.
    """
    if len(buf) < _HEADER.size:
        if len(buf) >= 4 and buf[:4] != MAGIC:
            raise BadMagicError(f"bad magic {bytes(buf[:4])!r}")
        raise TruncatedError("header truncated")
    magic, version, code, ndim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if code not in _CODE_TO_DTYPE:
        raise UnsupportedDtypeError(f"unsupported dtype code {code}")
    pos = _HEADER.size
    if len(buf) < pos + 8 * ndim:
        raise TruncatedError("dimension table truncated")
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    dtype = _CODE_TO_DTYPE[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise TruncatedError(f"payload truncated: need {nbytes} bytes, have {len(buf) - pos}")
    if exact and len(buf) != pos + nbytes:
        raise TruncatedError(f"{len(buf) - pos - nbytes} trailing bytes after payload")
    data = np.frombuffer(buf, dtype=dtype.newbyteorder("<"), count=nbytes // dtype.itemsize, offset=pos)
    return data.astype(dtype).reshape(shape), pos + nbytes


def write_tensor(t: np.ndarray, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    return tensor_from_bytes(buf)[0]
