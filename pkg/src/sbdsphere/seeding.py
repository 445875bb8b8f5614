"""Deterministic seed derivation with named substreams.

A root seed and a path of names (``"synth"``, ``"init"``, ``"trial-3"``, ...)
map to a 64-bit child seed by folding each name through splitmix64.  The
mapping is pure, so trials and grid cells can run in any order.
"""

import zlib

import numpy as np

__all__ = ["splitmix64", "derive_seed", "substream"]

_MASK = (1 << 64) - 1


def splitmix64(state):
    """One splitmix64 output for the 64-bit integer ``state``."""
    z = (int(state) + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed, *names):
    """Child seed for ``seed`` along the substream path ``names``."""
    s = int(seed) & _MASK
    for name in names:
        tag = name if isinstance(name, int) else zlib.crc32(str(name).encode("utf-8"))
        s = splitmix64(s ^ splitmix64(int(tag) & _MASK))
    return s


def substream(seed, *names):
    """``numpy.random.Generator`` for the named substream of ``seed``."""
    return np.random.default_rng(derive_seed(seed, *names))
