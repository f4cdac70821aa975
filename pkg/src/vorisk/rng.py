"""Deterministic per-stream random number derivation.

Two layers, both keyed by (seed, tag, *indices) through SplitMix64 so that
streams are independent of evaluation order, platform-stable, and adding a
new consumer (e.g. a corruption layer) never perturbs existing draws:

* ``stream``: a Philox generator for sequential, low-volume draws
  (landmark placement, recruitment choices, region anchors).
* ``normal_field`` / ``uniform_field``: counter-mode SplitMix64 hashed per
  (seed, tag, frame, id, component) and mapped through the inverse normal
  CDF; vectorized for the per-observation hot path.
"""
import numpy as np
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1

# stream tags; distinct values keep consumer families independent
TAG_MEASUREMENT = 0x01
TAG_RECRUIT = 0x02
TAG_LANDMARKS = 0x03
TAG_CORRUPTION = 0x04
TAG_TEST = 0x7F

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_U53 = np.float64(1.0 / (1 << 53))


def splitmix64(x: int) -> int:
    """One SplitMix64 step; the standard 64-bit finalizer."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_key(seed: int, *parts: int) -> tuple[int, int]:
    """Fold (seed, parts...) into a 128-bit Philox key."""
    h = splitmix64(seed & _MASK64)
    for p in parts:
        h = splitmix64(h ^ (int(p) & _MASK64))
    return h, splitmix64(h)


def stream(seed: int, *parts: int) -> np.random.Generator:
    """Independent generator for the given (seed, parts...) stream."""
    k0, k1 = derive_key(seed, *parts)
    key = np.array([k0, k1], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _splitmix_vec(x: np.ndarray) -> np.ndarray:
    x = (x + _GAMMA).astype(np.uint64)
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def u64_field(seed: int, tag: int, frame_id: int, ids, n_components: int
              ) -> np.ndarray:
    """Hashed uint64 grid (len(ids), n_components), one value per
    (seed, tag, frame_id, id, component)."""
    base = splitmix64(splitmix64(splitmix64(seed & _MASK64) ^ tag)
                      ^ (frame_id & _MASK64))
    ids = np.asarray(ids, dtype=np.uint64)
    h = _splitmix_vec(np.uint64(base) ^ ids)
    comps = np.arange(1, n_components + 1, dtype=np.uint64)
    return _splitmix_vec(h[:, None] ^ comps[None, :])


def uniform_field(seed: int, tag: int, frame_id: int, ids,
                  n_components: int = 1) -> np.ndarray:
    """Uniform (0, 1) variates, shape (len(ids), n_components)."""
    bits = u64_field(seed, tag, frame_id, ids, n_components)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * _U53


def normal_field(seed: int, tag: int, frame_id: int, ids,
                 n_components: int = 1) -> np.ndarray:
    """Standard normal variates, shape (len(ids), n_components)."""
    return ndtri(uniform_field(seed, tag, frame_id, ids, n_components))
