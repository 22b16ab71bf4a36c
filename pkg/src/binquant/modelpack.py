"""Model manifests, size accounting, int8 scale metadata and file formats.

Two binary formats, both little-endian:

``RTW0`` (raw float tensors, CLI input)::

    b"RTW0" | u32 count | count x (u16 name_len | name utf-8 | u8 ndim |
    ndim x u32 dims | f32 data, row-major)

``BQW1`` (packed model)::

    b"BQW1" | u16 version=1 | u8 meta (0=f32, 1=int8) | u32 count |
    count x record | u32 crc32 of every preceding byte

    record   = u16 name_len | name | u8 ndim | ndim x u32 dims | u8 kind
    kind 0   = f32 data (float layer)
    kind 1   = u8 bits | u8 granularity (0 per-channel, 1 sub-channel) |
               u8 mode (0 absmean, 1 absmax-asym) | u32 block_size (0 = none) |
               f64 clip | f64 eps | u32 pad | u32 n_groups | u32 group_size |
               u32 n_code_bytes | code bytes (LSB-first, see kernels) |
               scales meta | zero-point meta (asymmetric modes only)
    f32 meta = n_groups x f32
    int8 meta= f32 super_scale | n_groups x i8
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import kernels
from . import quantcore as qc
from .quantcore import Granularity, Mode, QuantizedTensor, QuantScheme

MAGIC = b"BQW1"
RAW_MAGIC = b"RTW0"
VERSION = 1
META_DTYPES = ("f32", "int8")
META_BITS = {"f32": 32, "int8": 8}
SUPER_SCALE_BITS = 32


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    shape: tuple
    scheme: Optional[QuantScheme] = None  # None = kept in float32

    @property
    def params(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class ModelManifest:
    layers: list
    name: str = ""
    note: str = ""

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        for l in self.layers:
            if not l.shape or any(int(d) <= 0 for d in l.shape):
                raise ValueError(f"layer {l.name}: shape must be positive")

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def quantized_params(self) -> int:
        return sum(l.params for l in self.layers if l.scheme is not None)

    def with_scheme(self, scheme: Optional[QuantScheme]) -> "ModelManifest":
        """Same layers, every quantized layer switched to ``scheme``."""
        layers = [LayerSpec(l.name, l.shape, scheme if l.scheme is not None else None) for l in self.layers]
        return ModelManifest(layers, self.name, self.note)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "note": self.note,
            "layers": [
                {"name": l.name, "shape": list(l.shape),
                 "scheme": "float" if l.scheme is None else scheme_to_dict(l.scheme)}
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelManifest":
        layers = [LayerSpec(e["name"], tuple(int(x) for x in e["shape"]), parse_scheme(e.get("scheme", "float")))
                  for e in d["layers"]]
        return cls(layers, d.get("name", ""), d.get("note", ""))


def scheme_to_dict(s: QuantScheme) -> dict:
    return {"bits": s.bits, "granularity": s.granularity.value, "block_size": s.block_size,
            "mode": s.mode.value, "clip": s.clip, "eps": s.eps}


def parse_scheme(spec: Union[str, dict, QuantScheme, None]) -> Optional[QuantScheme]:
    """Accept an alias (``e1``..``e5``, ``absmean1``, ``absmax2``...), a dict or a scheme."""
    if spec is None or isinstance(spec, QuantScheme):
        return spec
    if isinstance(spec, dict):
        return QuantScheme(**spec)
    key = spec.lower()
    if key in ("float", "f32", "e0"):
        return None
    if key in qc.SCHEMES:
        return qc.SCHEMES[key]
    if key == "absmean1":
        return qc.absmean_scheme()
    if key in ("absmax1", "absmax2"):
        return qc.absmax_scheme(int(key[-1]))
    raise ValueError(f"unknown scheme {spec!r}")


def load_manifest(path) -> ModelManifest:
    return ModelManifest.from_dict(json.loads(Path(path).read_text()))


def save_manifest(manifest: ModelManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=1) + "\n")


def paper_manifest(scheme: Optional[QuantScheme] = None) -> ModelManifest:
    """Approximate layer list of the ~893M-parameter RNN-T model.

    The published description gives totals, not a per-layer breakdown, so
    the shapes are a reconstruction (see the ``note`` field).
    """
    text = resources.files("binquant").joinpath("data/usm_rnnt_1b.json").read_text()
    m = ModelManifest.from_dict(json.loads(text))
    return m.with_scheme(scheme) if scheme is not None else m


# ---------------------------------------------------------------------------
# size accounting
# ---------------------------------------------------------------------------

@dataclass
class LayerSize:
    name: str
    params: int
    scheme: str
    bits: int        # code bits
    meta_bits: int   # scales (+ zero points), incl. super-scales for int8

    @property
    def total_bits(self) -> int:
        return self.bits + self.meta_bits


@dataclass
class SizeReport:
    layers: list
    meta_dtype: str
    total_bits_float_baseline: int = field(init=False)
    total_bits_quantized: int = field(init=False)

    def __post_init__(self):
        self.total_bits_float_baseline = 32 * sum(l.params for l in self.layers)
        self.total_bits_quantized = sum(l.total_bits for l in self.layers)

    @property
    def reduction_factor(self) -> float:
        return self.total_bits_float_baseline / self.total_bits_quantized

    def table(self, max_layers: Optional[int] = None) -> str:
        rows = self.layers if max_layers is None else self.layers[:max_layers]
        w = max([len(l.name) for l in rows] + [5])
        out = [f"{'layer':<{w}}  {'params':>12}  {'scheme':<20}  {'bits':>14}  {'meta_bits':>12}  {'total_bits':>14}"]
        for l in rows:
            out.append(f"{l.name:<{w}}  {l.params:>12,}  {l.scheme:<20}  {l.bits:>14,}  {l.meta_bits:>12,}  {l.total_bits:>14,}")
        if max_layers is not None and len(self.layers) > max_layers:
            out.append(f"... {len(self.layers) - max_layers} more layers")
        out.append("")
        out.append(f"float32 baseline : {self.total_bits_float_baseline / 1e9:.2f}e9 bits")
        out.append(f"quantized ({self.meta_dtype} meta): {self.total_bits_quantized / 1e9:.2f}e9 bits")
        out.append(f"size reduction   : {self.reduction_factor:.1f}x")
        return "\n".join(out)

    def csv(self) -> str:
        lines = ["layer,params,scheme,bits,meta_bits,total_bits"]
        lines += [f"{l.name},{l.params},{l.scheme},{l.bits},{l.meta_bits},{l.total_bits}" for l in self.layers]
        return "\n".join(lines) + "\n"


def meta_bits_per_array(n_groups: int, meta_dtype: str) -> int:
    if meta_dtype == "f32":
        return 32 * n_groups
    if meta_dtype == "int8":
        return 8 * n_groups + SUPER_SCALE_BITS
    raise ValueError(f"meta dtype must be one of {META_DTYPES}")


def layer_size(layer: LayerSpec, meta_dtype: str) -> LayerSize:
    if layer.scheme is None:
        return LayerSize(layer.name, layer.params, "float32", 32 * layer.params, 0)
    s = layer.scheme
    arrays = 2 if s.asymmetric else 1
    meta = arrays * meta_bits_per_array(s.n_groups(layer.shape), meta_dtype)
    return LayerSize(layer.name, layer.params, s.label(), s.bits * layer.params, meta)


def size_report(manifest: ModelManifest, meta_dtype: str = "f32") -> SizeReport:
    if meta_dtype not in META_DTYPES:
        raise ValueError(f"meta dtype must be one of {META_DTYPES}")
    return SizeReport([layer_size(l, meta_dtype) for l in manifest.layers], meta_dtype)


# ---------------------------------------------------------------------------
# double quantization of metadata
# ---------------------------------------------------------------------------

def double_quantize_scales(values) -> tuple[np.ndarray, float]:
    """Quantize metadata to int8 codes with one f32 super-scale.

    ``super_scale = max|v| / 127`` and ``codes = round(v / super_scale)``.
    Non-negative scales land in ``[0, 127]``; zero points, which may be
    negative, use the symmetric range ``[-127, 127]``.
    """
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("metadata must be finite")
    peak = float(np.max(np.abs(v))) if v.size else 0.0
    if peak == 0.0:
        return np.zeros(v.shape, dtype=np.int8), 0.0
    super_scale = float(np.float32(peak / 127.0))
    codes = np.clip(np.round(v / super_scale), -127, 127).astype(np.int8)
    return codes, super_scale


def double_dequantize_scales(codes, super_scale: float) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) * float(np.float32(super_scale))


def compress_metadata(q: QuantizedTensor, meta_dtype: str) -> QuantizedTensor:
    """Round ``q``'s metadata to what a ``meta_dtype`` file stores.

    The returned tensor's scales are the reconstructed (lossy) values, so
    anything computed from it sees the same numbers a reader would.
    """
    if meta_dtype == "f32":
        zp = None if q.zero_points is None else q.zero_points.astype(np.float32)
        return qc.with_scales(q, q.scales.astype(np.float32), zp)
    if meta_dtype != "int8":
        raise ValueError(f"meta dtype must be one of {META_DTYPES}")
    if q.meta is not None:
        return q
    meta = {"scales": double_quantize_scales(q.scales)}
    zp = None
    if q.zero_points is not None:
        meta["zero_points"] = double_quantize_scales(q.zero_points)
        zp = double_dequantize_scales(*meta["zero_points"])
    return qc.with_scales(q, double_dequantize_scales(*meta["scales"]), zp, meta)


# ---------------------------------------------------------------------------
# BQW1 packed model file
# ---------------------------------------------------------------------------

_GRAN = {Granularity.PER_CHANNEL: 0, Granularity.SUB_CHANNEL: 1}
_MODE = {Mode.ABSMEAN: 0, Mode.ABSMAX_ASYM: 1}


def _pack_name_shape(buf: io.BytesIO, name: str, shape: Sequence[int]) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", len(shape)))
    buf.write(struct.pack(f"<{len(shape)}I", *shape))


def _write_meta(buf: io.BytesIO, values: np.ndarray, dq: Optional[tuple], meta_dtype: str) -> None:
    if meta_dtype == "f32":
        buf.write(np.asarray(values, dtype="<f4").tobytes())
    else:
        codes, super_scale = dq
        buf.write(struct.pack("<f", super_scale))
        buf.write(np.asarray(codes, dtype=np.int8).tobytes())


def encode_model(manifest: ModelManifest, tensors: dict, meta_dtype: Optional[str] = None) -> bytes:
    if meta_dtype is None:
        quantized = [t for t in tensors.values() if isinstance(t, QuantizedTensor)]
        meta_dtype = "int8" if quantized and all(t.meta is not None for t in quantized) else "f32"
    if meta_dtype not in META_DTYPES:
        raise ValueError(f"meta dtype must be one of {META_DTYPES}")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HBI", VERSION, META_DTYPES.index(meta_dtype), len(manifest.layers)))
    for layer in manifest.layers:
        if layer.name not in tensors:
            raise ValueError(f"missing tensor for layer {layer.name}")
        t = tensors[layer.name]
        _pack_name_shape(buf, layer.name, layer.shape)
        if layer.scheme is None:
            arr = np.asarray(t)
            if isinstance(t, QuantizedTensor) or arr.shape != tuple(layer.shape):
                raise ValueError(f"layer {layer.name}: expected float array of shape {layer.shape}")
            buf.write(struct.pack("<B", 0))
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            continue
        if not isinstance(t, QuantizedTensor) or tuple(t.original_shape) != tuple(layer.shape) \
                or t.scheme != layer.scheme:
            raise ValueError(f"layer {layer.name}: tensor does not match manifest scheme/shape")
        t.validate()
        t = compress_metadata(t, meta_dtype)
        s = t.scheme
        packed = kernels.pack_quantized(t)
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<BBBIddIIII", s.bits, _GRAN[s.granularity], _MODE[s.mode],
                              s.block_size or 0, s.clip, s.eps, t.pad, t.n_groups, t.group_size,
                              len(packed.data)))
        buf.write(packed.data)
        meta = t.meta or {}
        _write_meta(buf, t.scales, meta.get("scales"), meta_dtype)
        if s.asymmetric:
            _write_meta(buf, t.zero_points, meta.get("zero_points"), meta_dtype)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def write_model(path, manifest: ModelManifest, tensors: dict, meta_dtype: Optional[str] = None) -> int:
    data = encode_model(manifest, tensors, meta_dtype)
    Path(path).write_bytes(data)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name_shape(self) -> tuple[str, tuple]:
        (n,) = self.unpack("H")
        name = self.take(n).decode("utf-8")
        (ndim,) = self.unpack("B")
        return name, tuple(self.unpack(f"{ndim}I"))


def _read_meta(r: _Reader, n: int, meta_dtype: str):
    if meta_dtype == "f32":
        return np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float64), None
    (super_scale,) = r.unpack("f")
    codes = np.frombuffer(r.take(n), dtype=np.int8).copy()
    return double_dequantize_scales(codes, super_scale), (codes, float(super_scale))


def decode_model(data: bytes) -> tuple[ModelManifest, dict]:
    if len(data) < len(MAGIC) + 11:
        raise FormatError("truncated file")
    if data[:4] != MAGIC:
        raise FormatError("bad magic, not a BQW1 file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    (version,) = struct.unpack("<H", data[4:6])
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch (file corrupted or truncated)")
    r = _Reader(body)
    r.take(4)
    _, meta_code, count = r.unpack("HBI")
    if meta_code >= len(META_DTYPES):
        raise FormatError(f"bad metadata dtype code {meta_code}")
    meta_dtype = META_DTYPES[meta_code]
    layers, tensors = [], {}
    for _ in range(count):
        name, shape = r.name_shape()
        (kind,) = r.unpack("B")
        n = int(np.prod(shape))
        if kind == 0:
            tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).copy()
            layers.append(LayerSpec(name, shape, None))
            continue
        if kind != 1:
            raise FormatError(f"layer {name}: unknown record kind {kind}")
        bits, gran, mode, block, clip, eps, pad, n_groups, gs, nbytes = r.unpack("BBBIddIIII")
        try:
            scheme = QuantScheme(bits, list(_GRAN)[gran], block or None, list(_MODE)[mode], clip, eps)
        except (IndexError, ValueError) as exc:
            raise FormatError(f"layer {name}: bad scheme ({exc})") from None
        signed = scheme.mode is Mode.ABSMEAN
        packed = kernels.PackedBits(r.take(nbytes), bits, n_groups * gs, kernels.SIGN if signed else kernels.UINT)
        codes = kernels.unpack_codes(packed).reshape(n_groups, gs)
        scales, dq_s = _read_meta(r, n_groups, meta_dtype)
        zps, dq_z, meta = None, None, None
        if scheme.asymmetric:
            zps, dq_z = _read_meta(r, n_groups, meta_dtype)
        if meta_dtype == "int8":
            meta = {"scales": dq_s}
            if dq_z is not None:
                meta["zero_points"] = dq_z
        q = QuantizedTensor(codes, scales, zps, shape, scheme, pad, meta)
        try:
            q.validate()
        except qc.QuantError as exc:
            raise FormatError(f"layer {name}: {exc}") from None
        tensors[name] = q
        layers.append(LayerSpec(name, shape, scheme))
    if r.pos != len(body):
        raise FormatError("trailing bytes after last record")
    return ModelManifest(layers), tensors


def read_model(path) -> tuple[ModelManifest, dict]:
    return decode_model(Path(path).read_bytes())


def verify_model(path) -> tuple[bool, str]:
    try:
        manifest, tensors = read_model(path)
    except (OSError, FormatError, ValueError) as exc:
        return False, str(exc)
    nq = sum(1 for l in manifest.layers if l.scheme is not None)
    return True, f"{len(manifest.layers)} tensors ({nq} quantized), {manifest.total_params:,} params"


# ---------------------------------------------------------------------------
# RTW0 raw tensors
# ---------------------------------------------------------------------------

def write_raw(path, tensors: dict) -> None:
    buf = io.BytesIO()
    buf.write(RAW_MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        _pack_name_shape(buf, name, arr.shape)
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_raw(path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != RAW_MAGIC:
        raise FormatError("bad magic, not an RTW0 file")
    r = _Reader(data)
    r.take(4)
    (count,) = r.unpack("I")
    out = {}
    for _ in range(count):
        name, shape = r.name_shape()
        n = int(np.prod(shape))
        out[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).copy()
    if r.pos != len(data):
        raise FormatError("trailing bytes after last tensor")
    return out
