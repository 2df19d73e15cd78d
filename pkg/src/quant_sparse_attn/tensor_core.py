"""Dense BHSD tensors, per-tensor symmetric INT8 quantization and the SATN file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

QMAX = 127
MAGIC = b"SATN"
FORMAT_VERSION = 1
DTYPE_F32 = 0
DTYPE_I8 = 1


class ValidationError(ValueError):
    """Raised when an argument violates a documented precondition."""


class TensorFormatError(ValueError):
    """Malformed tensor file."""


class BadMagicError(TensorFormatError):
    pass


class VersionMismatchError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _check_dims(shape) -> None:
    if len(shape) == 0 or any(d <= 0 for d in shape):
        raise ValidationError(f"dims must be a non-empty list of positive integers, got {tuple(shape)}")


@dataclass(frozen=True, eq=False)
class Tensor:
    """Row-major float32 tensor. Attention code uses the BHSD layout."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        _check_dims(arr.shape)
        if not np.all(np.isfinite(arr)):
            raise ValidationError("tensor contains NaN or Inf")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    data: np.ndarray
    scale: float

    def __post_init__(self):
        arr = np.asarray(self.data)
        _check_dims(arr.shape)
        if arr.dtype != np.int8:
            if not np.issubdtype(arr.dtype, np.integer):
                raise ValidationError(f"quantized data must be integer, got {arr.dtype}")
            arr = arr.astype(np.int64)
            if arr.min() < -QMAX or arr.max() > QMAX:
                raise ValidationError("quantized values must lie in [-127, 127]")
            arr = arr.astype(np.int8)
        elif arr.size and arr.min() < -QMAX:
            raise ValidationError("-128 is outside the symmetric int8 range")
        scale = float(np.float32(self.scale))
        if not np.isfinite(scale) or scale <= 0:
            raise ValidationError(f"scale must be positive and finite, got {self.scale}")
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "scale", scale)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return self.scale == other.scale and np.array_equal(self.data, other.data)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def max_scale(t: Union[Tensor, np.ndarray]) -> float:
    """max|x| / 127 rounded to float32; 1.0 for an all-zero tensor."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    peak = float(np.max(np.abs(data))) if data.size else 0.0
    if peak == 0.0:
        return 1.0
    scale = np.float32(peak / QMAX)
    if scale < np.finfo(np.float32).tiny and float(scale) * QMAX < peak:
        # subnormal scales lose whole ulps; round up so the peak is not clipped (and never to zero)
        scale = np.nextafter(scale, np.float32(np.inf))
    return float(scale)


def quantize(t: Tensor, scale_override: Optional[float] = None) -> QuantizedTensor:
    if not isinstance(t, Tensor):
        t = Tensor(t)
    if scale_override is None:
        scale = max_scale(t)
    else:
        if not np.isfinite(scale_override) or scale_override <= 0:
            raise ValidationError(f"scale_override must be > 0, got {scale_override}")
        scale = float(np.float32(scale_override))
    codes = round_half_away(t.data.astype(np.float64) / scale)
    codes = np.clip(codes, -QMAX, QMAX).astype(np.int8)
    return QuantizedTensor(codes, scale)


def dequantize(q: QuantizedTensor) -> Tensor:
    return Tensor((np.float64(q.scale) * q.data.astype(np.float64)).astype(np.float32))


def write_tensor(t: Union[Tensor, QuantizedTensor], path: Union[str, Path]) -> None:
    if isinstance(t, QuantizedTensor):
        dtype, payload = DTYPE_I8, t.data.astype("<i1").tobytes()
    elif isinstance(t, Tensor):
        dtype, payload = DTYPE_F32, t.data.astype("<f4").tobytes()
    else:
        raise TypeError(f"cannot write {type(t).__name__}")
    header = MAGIC + struct.pack("<IBB", FORMAT_VERSION, dtype, len(t.dims))
    header += struct.pack(f"<{len(t.dims)}Q", *t.dims)
    if dtype == DTYPE_I8:
        header += struct.pack("<f", t.scale)
    Path(path).write_bytes(header + payload)


def read_tensor(path: Union[str, Path]) -> Union[Tensor, QuantizedTensor]:
    """Read a SATN file; returns a QuantizedTensor when the dtype code is int8."""
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: missing SATN magic")
    if len(buf) < 10:
        raise TruncatedPayloadError(f"{path}: header truncated")
    version, dtype, ndim = struct.unpack_from("<IBB", buf, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {FORMAT_VERSION}")
    if dtype not in (DTYPE_F32, DTYPE_I8):
        raise TensorFormatError(f"{path}: unknown dtype code {dtype}")
    if ndim == 0:
        raise TensorFormatError(f"{path}: zero dimension count")
    offset = 10
    if len(buf) < offset + 8 * ndim:
        raise TruncatedPayloadError(f"{path}: dims truncated")
    dims = struct.unpack_from(f"<{ndim}Q", buf, offset)
    offset += 8 * ndim
    if any(d == 0 for d in dims):
        raise TensorFormatError(f"{path}: zero-length dimension in {dims}")
    count = int(np.prod(dims, dtype=np.uint64))
    if dtype == DTYPE_I8:
        if len(buf) < offset + 4:
            raise TruncatedPayloadError(f"{path}: scale truncated")
        (scale,) = struct.unpack_from("<f", buf, offset)
        offset += 4
        itemsize, np_dtype = 1, "<i1"
    else:
        itemsize, np_dtype = 4, "<f4"
    need = count * itemsize
    if len(buf) - offset < need:
        raise TruncatedPayloadError(f"{path}: payload has {len(buf) - offset} bytes, header promises {need}")
    if len(buf) - offset > need:
        raise TensorFormatError(f"{path}: {len(buf) - offset - need} trailing bytes")
    arr = np.frombuffer(buf, dtype=np_dtype, count=count, offset=offset).reshape(dims)
    if dtype == DTYPE_I8:
        return QuantizedTensor(arr.astype(np.int8), scale)
    return Tensor(arr.astype(np.float32))
