"""Pure-numpy kernels, used when the compiled extension is unavailable."""

import numpy as np


def pack1(bits: np.ndarray) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int8)
    bad = np.flatnonzero((bits < 0) | (bits > 1))
    if bad.size:
        raise ValueError(f"1-bit code out of range at {bad[0]}")
    return np.packbits(bits.astype(np.uint8), bitorder="little")


def pack2(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int8)
    bad = np.flatnonzero((codes < 0) | (codes > 3))
    if bad.size:
        raise ValueError(f"2-bit code out of range at {bad[0]}")
    n = codes.size
    padded = np.zeros(-(-n // 4) * 4, dtype=np.uint8)
    padded[:n] = codes
    quads = padded.reshape(-1, 4)
    return (quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)).astype(np.uint8)


def unpack1(data: np.ndarray, n: int) -> np.ndarray:
    return np.unpackbits(np.asarray(data, dtype=np.uint8), count=n, bitorder="little").astype(np.int8)


def unpack2(data: np.ndarray, n: int) -> np.ndarray:
    data = np.asarray(data, dtype=np.uint8)
    quads = np.stack([(data >> s) & 3 for s in (0, 2, 4, 6)], axis=1)
    return quads.reshape(-1)[:n].astype(np.int8)


def packed_matmul(a, packed, bit_width, signed_codes, n_channels, blocks_per_channel,
                  group_size, scales, zero_points=None, num_threads=1):
    # blockwise einsum over raw codes; scale applied to the partial sums
    nb, gs = blocks_per_channel, group_size
    n = n_channels * nb * gs
    raw = unpack1(packed, n) if bit_width == 1 else unpack2(packed, n)
    codes = raw.astype(np.float64)
    if bit_width == 1 and signed_codes:
        codes = 2.0 * codes - 1.0
    codes = codes.reshape(n_channels, nb, gs)
    blocks = np.ascontiguousarray(a, dtype=np.float64).reshape(a.shape[0], nb, gs)
    partial = np.matmul(blocks.transpose(1, 0, 2), codes.transpose(1, 2, 0))  # [nb, B, C]
    scales = np.asarray(scales, dtype=np.float64).reshape(n_channels, nb)
    y = np.einsum("nbc,cn->bc", partial, scales)
    if zero_points is not None:
        zp = np.asarray(zero_points, dtype=np.float64).reshape(n_channels, nb)
        y += blocks.sum(axis=2) @ zp.T
    return y
