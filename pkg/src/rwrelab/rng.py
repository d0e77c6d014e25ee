"""Keyed, counter-style randomness.

Environment draws must be a pure function of (master seed, lattice site,
purpose tag): disjoint windows then agree at shared sites, lazily sampled
sites are persistent, and results do not depend on sampling order or thread
count.  numpy's Philox generator cannot be vectorized across per-site keys,
so site-keyed uniforms are produced by a SplitMix64-finalizer hash chain over
the key material, vectorized on uint64 arrays.  Sequential randomness (walk
steps, tag sequences, generic MC) uses Philox streams keyed by
(master seed, purpose, stream index).
"""
from __future__ import annotations

import numpy as np

_GOLD = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)
# one salt per coordinate axis, d <= 4 covered; axis i uses salt i mod 4
_AXIS_SALT = (
    np.uint64(0xD6E8FEB86659FD93),
    np.uint64(0xCA5A826395121157),
    np.uint64(0x8CB92BA72F3D8DD7),
    np.uint64(0xABCB3B9ACC1CBF11),
)

# purpose tags; distinct values keep draw domains disjoint
TAG_ENV = 0x45313A01
TAG_WALK = 0x45313A02
TAG_TAGS = 0x45313A03
TAG_RUIN = 0x45313A04
TAG_PATHS = 0x45313A05
TAG_DENOM = 0x45313A06
TAG_MISC = 0x45313A07


def mix64(x):
    """SplitMix64 finalizer, elementwise on uint64 arrays (bijective)."""
    x = np.asarray(x, dtype=np.uint64).copy()
    with np.errstate(over="ignore"):
        x ^= x >> np.uint64(30)
        x *= _MUL1
        x ^= x >> np.uint64(27)
        x *= _MUL2
        x ^= x >> np.uint64(31)
    return x


def _fold(h, w):
    # hash-combine: h and w may be arrays (broadcast) or scalars
    with np.errstate(over="ignore"):
        return mix64((np.asarray(h, dtype=np.uint64) * _MUL1) ^ np.asarray(w, dtype=np.uint64))


def _as_u64(ints):
    # reinterpret signed coordinates; keeps negatives distinct from positives
    return np.asarray(ints, dtype=np.int64).view(np.uint64)


def site_hashes(seed: int, tag: int, coords) -> np.ndarray:
    """uint64 hash per site.

    coords: integer array of shape (..., d); returns shape (...,).
    """
    coords = np.asarray(coords, dtype=np.int64)
    d = coords.shape[-1]
    h = _fold(np.uint64(seed) ^ _GOLD, np.uint64(tag))
    out = np.full(coords.shape[:-1], h, dtype=np.uint64)
    for i in range(d):
        with np.errstate(over="ignore"):
            salted = _as_u64(coords[..., i]) * _AXIS_SALT[i % 4] + np.uint64(i)
        out = _fold(out, salted)
    return out


def site_uniforms(seed: int, tag: int, coords) -> np.ndarray:
    """Uniform[0,1) per site, pure in (seed, tag, site coordinates)."""
    h = site_hashes(seed, tag, coords)
    return (h >> np.uint64(11)).astype(np.float64) * (2.0**-53)


def stream(seed: int, tag: int, index: int = 0) -> np.random.Generator:
    """Philox stream keyed by (seed, tag, index)."""
    k0 = int(_fold(_fold(np.uint64(seed), np.uint64(tag)), np.uint64(index)))
    k1 = int(_fold(np.uint64(k0), _GOLD))
    return np.random.Generator(np.random.Philox(key=[k0, k1]))


def subseed(seed: int, tag: int, index: int = 0) -> int:
    """Derived 63-bit seed for nested keyed draws."""
    return int(_fold(_fold(np.uint64(seed), np.uint64(tag)), np.uint64(index)) >> np.uint64(1))
