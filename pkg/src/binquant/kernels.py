"""Bit-packed code storage and the packed-weight inference matmul.

The compiled extension ``binquant._ckernels`` is used when it was built;
otherwise the numpy fallback in ``binquant._kernels_py`` is used.  Set
``BINQUANT_PURE_PYTHON=1`` to force the fallback.  ``BINQUANT_THREADS`` caps
the number of threads the compiled matmul uses.
"""

from __future__ import annotations

import csv
import io
import os
import time
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import _kernels_py
from . import quantcore as qc
from .quantcore import Mode, QuantizedTensor

if os.environ.get("BINQUANT_PURE_PYTHON", "") not in ("", "0"):
    _backend = _kernels_py
else:
    try:
        from . import _ckernels as _backend
    except ImportError:  # extension not built
        _backend = _kernels_py

BACKEND = "cython" if _backend is not _kernels_py else "python"
BACKENDS = {"python": _kernels_py}
if BACKEND == "cython":
    BACKENDS["cython"] = _backend

SIGN = "lsb0-sign"  # 1-bit, bit 1 = +1, bit 0 = -1
UINT = "lsb0-uint"  # unsigned codes, LSB-first

BENCH_HEADER = ["m", "k", "n", "scheme", "f32_ns", "packed_ns"]


def num_threads() -> int:
    env = os.environ.get("BINQUANT_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class PackedBits:
    data: bytes
    bit_width: int
    logical_len: int
    layout: str = SIGN

    def __post_init__(self):
        if self.bit_width not in (1, 2):
            raise ValueError("bit_width must be 1 or 2")
        if len(self.data) != -(-self.logical_len * self.bit_width // 8):
            raise ValueError("packed byte length does not match logical length")
        if self.layout not in (SIGN, UINT) or (self.layout == SIGN and self.bit_width != 1):
            raise ValueError(f"bad layout {self.layout!r} for {self.bit_width}-bit codes")

    @property
    def array(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=np.uint8)


def pack_codes(codes, bit_width: int, signed: Optional[bool] = None, backend=None) -> PackedBits:
    """Pack integer codes LSB-first in ascending index order.

    1-bit codes default to the sign layout (values -1/+1); pass
    ``signed=False`` to store 0/1 codes as-is.
    """
    be = backend or _backend
    codes = np.ascontiguousarray(np.asarray(codes).reshape(-1), dtype=np.int8)
    if signed is None:
        signed = bit_width == 1
    if bit_width == 1:
        if signed:
            bad = np.flatnonzero((codes != 1) & (codes != -1))
            if bad.size:
                raise ValueError(f"1-bit code out of range at {bad[0]}: {codes[bad[0]]}")
            codes = ((codes + 1) // 2).astype(np.int8)
        data = be.pack1(codes)
    elif bit_width == 2:
        if signed:
            raise ValueError("2-bit codes are unsigned")
        data = be.pack2(codes)
    else:
        raise ValueError("bit_width must be 1 or 2")
    return PackedBits(np.asarray(data).tobytes(), bit_width, codes.size, SIGN if signed else UINT)


def unpack_codes(packed: PackedBits, backend=None) -> np.ndarray:
    be = backend or _backend
    buf = packed.array
    if packed.bit_width == 1:
        raw = np.asarray(be.unpack1(buf, packed.logical_len))
        return (2 * raw - 1).astype(np.int8) if packed.layout == SIGN else raw
    return np.asarray(be.unpack2(buf, packed.logical_len))


def pack_quantized(q: QuantizedTensor) -> PackedBits:
    signed = q.scheme.mode is Mode.ABSMEAN
    return pack_codes(q.codes, q.scheme.bits, signed=signed)


def binary_matmul_deferred_scale(activations, packed: PackedBits, scales, shape: Sequence[int],
                                 zero_points=None, backend=None) -> np.ndarray:
    """``y = a @ W.T`` with W held as packed codes plus per-block metadata.

    Each block's dot product runs over the raw codes and is scaled once;
    asymmetric schemes add ``zero_point * sum(a_block)``.  The activation
    row is split into blocks to match the weight layout.
    """
    be = backend or _backend
    c, k = qc._matrix_dims(shape)
    scales = np.ascontiguousarray(scales, dtype=np.float64)
    g = scales.size
    if g % c or packed.logical_len % c:
        raise ValueError("layout mismatch: groups do not tile the output channels")
    nb = g // c
    kp = packed.logical_len // c
    if kp % nb or kp < k:
        raise ValueError("layout mismatch: packed length does not match shape")
    gs = kp // nb
    a = np.asarray(activations, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != k:
        raise ValueError(f"layout mismatch: activations {a.shape} vs weights [{c}x{k}]")
    if kp > k:
        a = np.pad(a, ((0, 0), (0, kp - k)))
    a = np.ascontiguousarray(a)
    zp = None if zero_points is None else np.ascontiguousarray(zero_points, dtype=np.float64)
    if zp is not None and zp.shape != scales.shape:
        raise ValueError("layout mismatch: zero_points vs scales")
    return np.asarray(be.packed_matmul(a, packed.array, packed.bit_width, packed.layout == SIGN,
                                       c, nb, gs, scales, zp, num_threads()))


class PackedLinear:
    """Inference-side weight: packed codes plus metadata for one layer."""

    def __init__(self, q: QuantizedTensor):
        q.validate()
        self.shape = tuple(q.original_shape)
        self.packed = pack_quantized(q)
        self.scales = np.asarray(q.scales, dtype=np.float64)
        self.zero_points = None if q.zero_points is None else np.asarray(q.zero_points, dtype=np.float64)

    def __call__(self, x, backend=None) -> np.ndarray:
        return binary_matmul_deferred_scale(x, self.packed, self.scales, self.shape,
                                            self.zero_points, backend=backend)


def weight_traffic_ratio(bits: int, block_size: int, meta_bits: int = 32, asymmetric: bool = False) -> float:
    """Weight-operand bytes of the packed path relative to f32 weights."""
    per_block = meta_bits * (2 if asymmetric else 1)
    return (bits + per_block / block_size) / 32.0


def _time_ns(fn, reps: int) -> int:
    best = None
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        dt = time.perf_counter_ns() - t0
        best = dt if best is None else min(best, dt)
    return int(best)


def bench_matmul(sizes: Iterable[Sequence[int]], reps: int = 5, schemes: Sequence[str] = ("e5",),
                 seed: int = 42, backend=None) -> list[dict]:
    """Time f32 ``a @ W.T`` against the packed path for each ``(m, k, n)``.

    ``m`` is the batch, ``k`` the reduction length and ``n`` the number of
    output channels.  Timings are the best of ``reps``.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for m, k, n in sizes:
        a = rng.standard_normal((m, k)).astype(np.float32)
        w = rng.standard_normal((n, k)).astype(np.float32)
        f32_ns = _time_ns(lambda: a @ w.T, reps)
        for name in schemes:
            layer = PackedLinear(qc.quantize(w, qc.SCHEMES[name]))
            if not np.array_equal(layer(a, backend), layer(a, backend)):
                raise RuntimeError("packed matmul is not deterministic")
            packed_ns = _time_ns(lambda: layer(a, backend), reps)
            rows.append({"m": m, "k": k, "n": n, "scheme": name, "f32_ns": f32_ns, "packed_ns": packed_ns})
    return rows


def bench_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_HEADER, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
