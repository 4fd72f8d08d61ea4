"""Dense float64 arrays with strict shape checking.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  The helpers
here add the contracts the rest of the package relies on: no implicit
broadcasting, finite results, a fixed sequential summation order for the
norm reductions, a seeded generator and the ``CGT1`` binary blob.

Randomness comes from numpy's PCG64 bit generator
(``numpy.random.Generator(numpy.random.PCG64(seed))``); normal draws use the
generator's ziggurat sampler, so a seed fixes every value bit-for-bit.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, NamedTuple

import numpy as np

Tensor = np.ndarray

BLOB_MAGIC = b"CGT1"


class TensorError(ValueError):
    """Raised on a shape mismatch, bad extent or non-finite result."""


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise TensorError("shape must have at least one extent")
    if any(s < 1 for s in shape):
        raise TensorError(f"extents must be >= 1, got {shape}")
    return shape


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise TensorError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _finite(x: Tensor, op: str) -> Tensor:
    if not np.all(np.isfinite(x)):
        raise TensorError(f"{op}: result is not finite")
    return x


def rng(seed: int) -> np.random.Generator:
    """Deterministic PCG64 generator for a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def tensor(values) -> Tensor:
    out = np.array(values, dtype=np.float64)
    if out.ndim == 0:
        out = out.reshape(1)
    _check_shape(out.shape)
    return _finite(out, "tensor")


def zeros(shape) -> Tensor:
    return np.zeros(_check_shape(shape), dtype=np.float64)


def randn(shape, mean: float = 0.0, stddev: float = 1.0, seed: int = 0) -> Tensor:
    if stddev < 0:
        raise TensorError(f"stddev must be >= 0, got {stddev}")
    shape = _check_shape(shape)
    if stddev == 0:
        return np.full(shape, float(mean))
    return rng(seed).normal(mean, stddev, size=shape)


def seq_sum(x: Tensor) -> float:
    """Sum in sequential row-major order (left fold), not numpy's pairwise."""
    flat = np.ascontiguousarray(x, dtype=np.float64).ravel()
    if flat.size == 0:
        return 0.0
    return float(np.add.accumulate(flat)[-1])


class Norms(NamedTuple):
    sum: float
    diff_l2_sq: float
    dot: float


def axpy_norms(a: Tensor, b: Tensor) -> Norms:
    """Return ``sum(a + b)``, ``sum((a - b)**2)`` and ``sum(a * b)``.

    All three are left folds over the row-major element order, so results
    are reproducible to the bit for identical inputs.
    """
    _same_shape(a, b, "axpy_norms")
    d = a - b
    return Norms(seq_sum(a + b), seq_sum(d * d), seq_sum(a * b))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _finite(a + b, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _finite(a - b, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _finite(a * b, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    with np.errstate(over="ignore", invalid="ignore"):
        out = a * float(c)
    return _finite(out, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise TensorError(f"matmul needs 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul: inner extents differ {a.shape} @ {b.shape}")
    return _finite(a @ b, "matmul")


def total(a: Tensor) -> float:
    return seq_sum(a)


def maximum(a: Tensor) -> float:
    return float(np.max(a))


def argmax(a: Tensor) -> int:
    """Flat row-major index of the first maximum."""
    return int(np.argmax(a))


def take(a: Tensor, index: int) -> Tensor:
    """Slice by leading index."""
    if not 0 <= index < a.shape[0]:
        raise TensorError(f"index {index} out of range for leading extent {a.shape[0]}")
    return a[index]


# --- CGT1 blob -------------------------------------------------------------

def write_blob(fh: BinaryIO, x: Tensor) -> None:
    x = np.asarray(x, dtype=np.float64)
    shape = _check_shape(x.shape)
    fh.write(BLOB_MAGIC)
    fh.write(struct.pack("<I", len(shape)))
    fh.write(struct.pack(f"<{len(shape)}I", *shape))
    fh.write(np.ascontiguousarray(x).astype("<f8", copy=False).tobytes())


def read_blob(fh: BinaryIO) -> Tensor:
    magic = fh.read(4)
    if magic != BLOB_MAGIC:
        raise TensorError(f"bad tensor blob magic {magic!r}")
    (rank,) = _unpack(fh, "<I")
    if rank < 1:
        raise TensorError("tensor blob with rank 0")
    shape = _unpack(fh, f"<{rank}I")
    count = int(np.prod(shape))
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise TensorError("truncated tensor blob")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def blob_bytes(x: Tensor) -> bytes:
    import io

    buf = io.BytesIO()
    write_blob(buf, x)
    return buf.getvalue()


def _unpack(fh: BinaryIO, fmt: str) -> tuple:
    size = struct.calcsize(fmt)
    raw = fh.read(size)
    if len(raw) != size:
        raise TensorError("truncated binary stream")
    return struct.unpack(fmt, raw)
