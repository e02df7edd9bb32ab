"""Deterministic random streams for frozen-weight generation.

Frozen encoder weights must hash identically across runs and platforms, so
they come from a counter-based SplitMix64 stream pushed through Box-Muller
instead of numpy's stateful generators. Everything integer-side is exact
uint64 arithmetic; the only platform dependence left is IEEE-754 libm.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


def splitmix64(seed: int, count: int, offset: int = 0) -> np.ndarray:
    """Return `count` uint64 words from the SplitMix64 stream of `seed`.

    Counter-based: word i depends only on (seed, offset + i), so disjoint
    slices of one stream can be generated independently.
    """
    idx = np.arange(offset + 1, offset + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _U64) + idx * _GAMMA
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        z = z ^ (z >> np.uint64(31))
    return z


def uniforms(seed: int, count: int, offset: int = 0) -> np.ndarray:
    """Uniform float64 samples in (0, 1), one per stream word."""
    words = splitmix64(seed, count, offset)
    # 53 mantissa bits; +0.5 shifts off exact zero.
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0**-53)


def normals(seed: int, count: int, offset: int = 0) -> np.ndarray:
    """Standard normal samples via Box-Muller on the SplitMix64 stream."""
    pairs = (count + 1) // 2
    u1 = uniforms(seed, pairs, offset)
    u2 = uniforms(seed, pairs, offset + pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:count]


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _U64
    return h


def derive_seed(seed: int, tag: str) -> int:
    """Derive an independent child seed from (seed, tag).

    Mixes the tag hash into the parent seed through one SplitMix64 round so
    sibling streams ("weights", "table", ...) never overlap.
    """
    mixed = (seed & _U64) ^ fnv1a64(tag.encode("utf-8"))
    return int(splitmix64(mixed, 1)[0])
