"""Gray-mapped square QAM with unit average energy.

``qam_bits == 0`` is the degenerate single-point constellation ``{1}``.
"""
from functools import lru_cache

import numpy as np

from .errors import ConfigError

SUPPORTED_QAM_BITS = (0, 2, 4, 6, 8)


def _check(qam_bits):
    if qam_bits not in SUPPORTED_QAM_BITS:
        raise ConfigError(f"qam_bits must be one of {SUPPORTED_QAM_BITS}, got {qam_bits}")


def _gray_to_binary(g):
    b = g
    shift = g >> 1
    while shift:
        b ^= shift
        shift >>= 1
    return b


@lru_cache(maxsize=None)
def constellation(qam_bits: int) -> np.ndarray:
    """Constellation points indexed by their Gray-coded bit label."""
    _check(qam_bits)
    if qam_bits == 0:
        return np.ones(1, dtype=complex)
    half = qam_bits // 2
    levels = 1 << half
    scale = np.sqrt(2 * (levels**2 - 1) / 3)
    points = np.empty(1 << qam_bits, dtype=complex)
    for idx in range(points.size):
        gi, gq = idx >> half, idx & (levels - 1)
        i_amp = 2 * _gray_to_binary(gi) - (levels - 1)
        q_amp = 2 * _gray_to_binary(gq) - (levels - 1)
        points[idx] = complex(i_amp, q_amp) / scale
    points.flags.writeable = False
    return points


@lru_cache(maxsize=None)
def _pam_lookup(qam_bits):
    # position (0..L-1) on one axis -> Gray label
    half = qam_bits // 2
    levels = 1 << half
    lut = np.empty(levels, dtype=np.int64)
    for g in range(levels):
        lut[_gray_to_binary(g)] = g
    return lut


def slice_symbols(values, qam_bits: int) -> np.ndarray:
    """Nearest constellation index for each (unit-energy scaled) value.

    Exact minimum-distance decision for square QAM: each axis is sliced
    independently.
    """
    _check(qam_bits)
    values = np.asarray(values, dtype=complex)
    if qam_bits == 0:
        return np.zeros(values.shape, dtype=np.int64)
    half = qam_bits // 2
    levels = 1 << half
    scale = np.sqrt(2 * (levels**2 - 1) / 3)
    lut = _pam_lookup(qam_bits)

    def axis(x):
        pos = np.rint((x * scale + (levels - 1)) / 2)
        return np.clip(pos, 0, levels - 1).astype(np.int64)

    gi = lut[axis(values.real)]
    gq = lut[axis(values.imag)]
    return (gi << half) | gq
