"""Quantize / dequantize transforms for 1-bit and 2-bit weight schemes.

Weights are viewed as a matrix ``[C, K]``: axis 0 is the output channel,
everything else is flattened into the per-channel length ``K``.  Per-channel
schemes give each row one scale; sub-channel schemes first split every row
into blocks of ``block_size`` and give each block its own scale.

All functions here are pure and gradient-free.  The training path lives in
:mod:`binquant.autodiff`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

DEFAULT_EPS = 1e-6
DEFAULT_BLOCK = 64
DEFAULT_CLIP = 0.95


class QuantError(ValueError):
    pass


class Granularity(str, enum.Enum):
    PER_CHANNEL = "per_channel"
    SUB_CHANNEL = "sub_channel"


class Mode(str, enum.Enum):
    ABSMEAN = "absmean"          # symmetric sign codes, 1-bit only
    ABSMAX_ASYM = "absmax_asym"  # affine min/max codes, 1- or 2-bit


@dataclass(frozen=True)
class QuantScheme:
    """One quantization configuration.

    ``clip`` shrinks the ``[min, max]`` range toward zero before codes are
    assigned (1.0 disables clipping).  ``eps`` replaces exact zeros before
    the sign is taken so binary codes are never 0.
    """

    bits: int = 1
    granularity: Granularity = Granularity.PER_CHANNEL
    block_size: Optional[int] = None
    mode: Mode = Mode.ABSMEAN
    clip: float = 1.0
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.bits not in (1, 2):
            raise QuantError(f"bits must be 1 or 2, got {self.bits}")
        if self.mode is Mode.ABSMEAN and self.bits != 1:
            raise QuantError("absmean binarization requires bits=1")
        if self.granularity is Granularity.SUB_CHANNEL:
            if self.block_size is None or int(self.block_size) < 1:
                raise QuantError("sub-channel scheme needs block_size >= 1")
        elif self.block_size is not None:
            raise QuantError("block_size is only valid for sub-channel schemes")
        if not (0.0 < self.clip <= 1.0):
            raise QuantError(f"clip must be in (0, 1], got {self.clip}")
        if not self.eps > 0:
            raise QuantError("eps must be positive")

    @property
    def asymmetric(self) -> bool:
        return self.mode is Mode.ABSMAX_ASYM

    @property
    def levels(self) -> int:
        return 1 << self.bits

    def group_size(self, k: int) -> int:
        if self.granularity is Granularity.SUB_CHANNEL:
            return int(self.block_size)
        return k

    def n_groups(self, shape: Sequence[int]) -> int:
        c, k = _matrix_dims(shape)
        return c * -(-k // self.group_size(k))

    def label(self) -> str:
        gran = "pc" if self.granularity is Granularity.PER_CHANNEL else f"b{self.block_size}"
        clip = "" if self.clip == 1.0 else f"-clip{self.clip:g}"
        return f"{self.mode.value}{self.bits}-{gran}{clip}"


def absmean_scheme(block_size: Optional[int] = None, eps: float = DEFAULT_EPS) -> QuantScheme:
    if block_size is None:
        return QuantScheme(1, Granularity.PER_CHANNEL, None, Mode.ABSMEAN, 1.0, eps)
    return QuantScheme(1, Granularity.SUB_CHANNEL, block_size, Mode.ABSMEAN, 1.0, eps)


def absmax_scheme(bits: int, block_size: Optional[int] = None, clip: float = 1.0) -> QuantScheme:
    gran = Granularity.PER_CHANNEL if block_size is None else Granularity.SUB_CHANNEL
    return QuantScheme(bits, gran, block_size, Mode.ABSMAX_ASYM, clip)


# Experiment aliases: E1/E2 2-bit asymmetric, E3 1-bit absmax with static
# clip, E4/E5 absmean binarization per-channel / block 64.
SCHEMES = {
    "e1": absmax_scheme(2),
    "e2": absmax_scheme(2, DEFAULT_BLOCK, DEFAULT_CLIP),
    "e3": absmax_scheme(1, clip=DEFAULT_CLIP),
    "e4": absmean_scheme(),
    "e5": absmean_scheme(DEFAULT_BLOCK),
}


@dataclass
class QuantizedTensor:
    """Integer codes plus per-group metadata, enough to rebuild the weights.

    ``codes`` has shape ``[n_groups, group_size]`` (the sub-channel view);
    ``pad`` counts the zero columns appended to each channel so that the
    block size divides it.
    """

    codes: np.ndarray
    scales: np.ndarray
    zero_points: Optional[np.ndarray]
    original_shape: tuple
    scheme: QuantScheme
    pad: int = 0
    # int8 double-quantized metadata, when the scales came from it
    meta: Optional[dict] = field(default=None, repr=False)

    @property
    def n_groups(self) -> int:
        return self.codes.shape[0]

    @property
    def group_size(self) -> int:
        return self.codes.shape[1]

    def validate(self) -> None:
        g, gs = self.codes.shape
        c, k = _matrix_dims(self.original_shape)
        if (k + self.pad) % gs or c * (k + self.pad) // gs != g:
            raise QuantError("codes layout does not match original shape")
        if self.scales.shape != (g,):
            raise QuantError("scales do not match number of groups")
        if self.scheme.asymmetric:
            if self.zero_points is None or self.zero_points.shape != (g,):
                raise QuantError("zero_points do not match number of groups")
        elif self.zero_points is not None:
            raise QuantError("absmean tensors carry no zero_points")
        if not np.all(np.isfinite(self.scales)) or np.any(self.scales < 0):
            raise QuantError("scales must be finite and non-negative")


def _matrix_dims(shape: Sequence[int]) -> tuple[int, int]:
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0:
        return 1, 1
    if len(shape) == 1:
        return 1, shape[0]
    return shape[0], int(np.prod(shape[1:]))


def as_matrix(w: np.ndarray) -> np.ndarray:
    """View ``w`` as ``[C, K]``; a vector is a single channel."""
    c, k = _matrix_dims(np.shape(w))
    return np.asarray(w).reshape(c, k)


def subchannel_split(w: np.ndarray, block_size: int, pad: bool = False) -> np.ndarray:
    """Regroup each row of ``w`` into consecutive rows of length ``block_size``.

    >>> subchannel_split(np.arange(1, 9).reshape(2, 4), 2).tolist()
    [[1, 2], [3, 4], [5, 6], [7, 8]]
    """
    w = as_matrix(w)
    c, k = w.shape
    extra = (-k) % block_size
    if extra:
        if not pad:
            raise QuantError(f"block size mismatch: {block_size} does not divide {k}")
        w = np.pad(w, ((0, 0), (0, extra)))
    return w.reshape(c * (k + extra) // block_size, block_size)


def subchannel_merge(blocks: np.ndarray, shape: Sequence[int], pad: int = 0) -> np.ndarray:
    c, k = _matrix_dims(shape)
    rows = np.asarray(blocks).reshape(c, k + pad)
    return rows[:, :k].reshape(tuple(shape))


def group_view(w: np.ndarray, scheme: QuantScheme) -> tuple[np.ndarray, np.ndarray, int]:
    """Split ``w`` into quantization groups.

    Returns ``(groups, valid, pad)`` where ``valid`` masks out the zero
    padding so group statistics only see real weights.
    """
    w = as_matrix(w)
    gs = scheme.group_size(w.shape[1])
    pad = (-w.shape[1]) % gs
    groups = subchannel_split(w, gs, pad=True)
    if pad:
        valid = subchannel_split(np.ones(w.shape, dtype=bool), gs, pad=True)
    else:
        valid = np.ones(groups.shape, dtype=bool)
    return groups, valid, pad


def _check_finite(w: np.ndarray) -> None:
    if not np.all(np.isfinite(w)):
        raise QuantError("non-finite weights")


def absmean_stats(groups: np.ndarray, valid: np.ndarray) -> np.ndarray:
    counts = valid.sum(axis=1)
    return np.where(valid, np.abs(groups), 0.0).sum(axis=1) / np.maximum(counts, 1)


def absmax_range(groups: np.ndarray, valid: np.ndarray, clip: float) -> tuple[np.ndarray, np.ndarray]:
    lo = np.where(valid, groups, np.inf).min(axis=1) * clip
    hi = np.where(valid, groups, -np.inf).max(axis=1) * clip
    return lo, hi


def binary_sign(groups: np.ndarray, eps: float) -> np.ndarray:
    # exact zeros become +eps so sign() only yields -1 or +1
    return np.sign(np.where(groups == 0, eps, groups)).astype(np.int8)


def absmean_binarize(w: np.ndarray, eps: float = DEFAULT_EPS,
                     block_size: Optional[int] = None) -> QuantizedTensor:
    """Binarize to sign codes with a per-group mean-absolute-value scale.

    No mean-centering is applied.  The scale is taken from the original
    weights, so an all-zero group gets scale 0 and dequantizes to zeros.
    """
    return quantize(w, absmean_scheme(block_size, eps))


def quantize_absmax_asym(w: np.ndarray, scheme: QuantScheme) -> QuantizedTensor:
    if scheme.mode is not Mode.ABSMAX_ASYM:
        raise QuantError("quantize_absmax_asym needs an absmax_asym scheme")
    return quantize(w, scheme)


def quantize(w: np.ndarray, scheme: QuantScheme) -> QuantizedTensor:
    w = np.asarray(w, dtype=np.float64)
    _check_finite(w)
    groups, valid, pad = group_view(w, scheme)
    if scheme.mode is Mode.ABSMEAN:
        scales = absmean_stats(groups, valid)
        codes = binary_sign(groups, scheme.eps)
        zero_points = None
    else:
        lo, hi = absmax_range(groups, valid, scheme.clip)
        scales = (hi - lo) / (scheme.levels - 1)
        safe = np.where(scales > 0, scales, 1.0)[:, None]
        clamped = np.clip(groups, lo[:, None], hi[:, None])
        codes = np.round((clamped - lo[:, None]) / safe)  # half-to-even
        codes = np.where(scales[:, None] > 0, codes, 0.0)
        codes = np.clip(codes, 0, scheme.levels - 1).astype(np.int8)
        codes[~valid] = 0
        zero_points = lo
    return QuantizedTensor(codes, scales, zero_points, tuple(np.shape(w)), scheme, pad)


def dequantize_groups(q: QuantizedTensor) -> np.ndarray:
    deq = q.codes.astype(np.float64) * q.scales[:, None]
    if q.scheme.asymmetric:
        deq = deq + q.zero_points[:, None]
    return deq


def dequantize(q: QuantizedTensor) -> np.ndarray:
    q.validate()
    return subchannel_merge(dequantize_groups(q), q.original_shape, q.pad)


def fake_quant(w: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    """Quantize then dequantize at full precision; the training forward."""
    return dequantize(quantize(w, scheme)).astype(np.result_type(w, np.float32), copy=False)


def quant_mse(w: np.ndarray, scheme: QuantScheme) -> float:
    w = np.asarray(w, dtype=np.float64)
    return float(np.mean((w - dequantize(quantize(w, scheme))) ** 2))


def with_scales(q: QuantizedTensor, scales: np.ndarray,
                zero_points: Optional[np.ndarray] = None, meta: Optional[dict] = None) -> QuantizedTensor:
    """Copy of ``q`` with replaced (typically reconstructed) metadata."""
    zp = zero_points if q.scheme.asymmetric else None
    return replace(q, scales=np.asarray(scales, dtype=np.float64),
                   zero_points=None if zp is None else np.asarray(zp, dtype=np.float64),
                   meta=meta)
