"""Deterministic random number generation.

Every random quantity in this package is derived from a single 64-bit seed
through a fixed, documented scheme, so two runs (or two conforming
implementations) produce bit-identical streams:

* Seed derivation uses the SplitMix64 sequence.  From a state ``s`` the
  k-th output (k >= 1) is ``mix64(s + k * GOLDEN)`` where
  ``GOLDEN = 0x9E3779B97F4A7C15`` and ``mix64`` is the SplitMix64 finalizer
  with multipliers ``0xBF58476D1CE4E5B9`` and ``0x94D049BB133111EB`` and
  shifts 30/27/31.  ``split_seed(seed, i)`` is defined as output ``i + 1``
  of the sequence started at ``seed``.
* Value streams are xoshiro256++.  A stream is seeded from a 64-bit seed by
  taking the first four SplitMix64 outputs as the state words s0..s3.
* A uniform double in [0, 1) is the top 53 bits of the next stream output:
  ``(u64 >> 11) * 2**-53``.
* A standard normal uses the polar Box-Muller method: draw ``u`` then ``v``
  uniform, map to (2u-1, 2v-1), reject when ``s = u*u + v*v`` is 0 or >= 1,
  and return ``(2u-1) * sqrt(-2 ln s / s)``.  The companion variate is
  discarded (no caching), so each normal consumes exactly two uniforms per
  attempt.

Block draws (:meth:`Rng.block_uniforms` / :meth:`Rng.block_normals`) give
element ``j`` its own child stream ``split_seed(b, j)`` where ``b`` is one
sequential seed drawn from the owning stream.  Per-element substreams keep
large fills vectorizable and independent of evaluation order.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1
_U53_SCALE = 2.0 ** -53


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a 64-bit integer."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX_A) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX_B) & _MASK64
    return z ^ (z >> 31)


def split_seed(seed: int, index: int) -> int:
    """Child seed ``index`` of ``seed`` (the (index+1)-th SplitMix64 output)."""
    if index < 0:
        raise ValueError("split index must be nonnegative")
    return mix64((seed + (index + 1) * GOLDEN) & _MASK64)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class _Stream:
    """Scalar xoshiro256++ stream."""

    __slots__ = ("s0", "s1", "s2", "s3")

    def __init__(self, seed: int):
        self.s0 = split_seed(seed, 0)
        self.s1 = split_seed(seed, 1)
        self.s2 = split_seed(seed, 2)
        self.s3 = split_seed(seed, 3)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s0, self.s1, self.s2, self.s3
        result = (_rotl((s0 + s3) & _MASK64, 23) + s0) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s0, self.s1, self.s2, self.s3 = s0, s1, s2, s3
        return result

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * _U53_SCALE

    def normal(self) -> float:
        while True:
            u = 2.0 * self.uniform() - 1.0
            v = 2.0 * self.uniform() - 1.0
            s = u * u + v * v
            if 0.0 < s < 1.0:
                return u * np.sqrt(-2.0 * np.log(s) / s)


# ---------------------------------------------------------------------------
# Vectorized lanes: one xoshiro256++ stream per array element, stepped in
# lockstep.  Equivalent to running the scalar stream per lane.
# ---------------------------------------------------------------------------

_V_GOLDEN = np.uint64(GOLDEN)
_V_MIX_A = np.uint64(_MIX_A)
_V_MIX_B = np.uint64(_MIX_B)


def _vec_mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _V_MIX_A
    z = (z ^ (z >> np.uint64(27))) * _V_MIX_B
    return z ^ (z >> np.uint64(31))


def child_seeds(seed: int, n: int, base_index: int = 0) -> np.ndarray:
    """Vectorized ``split_seed(seed, base_index + j)`` for j in range(n)."""
    idx = np.arange(base_index + 1, base_index + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _vec_mix64(np.uint64(seed & _MASK64) + idx * _V_GOLDEN)


class Lanes:
    """Array of independent xoshiro256++ streams stepped in lockstep."""

    def __init__(self, seeds: np.ndarray):
        seeds = np.asarray(seeds, dtype=np.uint64)
        with np.errstate(over="ignore"):
            self.s0 = _vec_mix64(seeds + np.uint64(1) * _V_GOLDEN)
            self.s1 = _vec_mix64(seeds + np.uint64(2) * _V_GOLDEN)
            self.s2 = _vec_mix64(seeds + np.uint64(3) * _V_GOLDEN)
            self.s3 = _vec_mix64(seeds + np.uint64(4) * _V_GOLDEN)

    def next_u64(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            s0, s1, s2, s3 = self.s0, self.s1, self.s2, self.s3
            x = s0 + s3
            result = ((x << np.uint64(23)) | (x >> np.uint64(41))) + s0
            t = s1 << np.uint64(17)
            s2 = s2 ^ s0
            s3 = s3 ^ s1
            s1 = s1 ^ s2
            s0 = s0 ^ s3
            s2 = s2 ^ t
            s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
        self.s0, self.s1, self.s2, self.s3 = s0, s1, s2, s3
        return result

    def uniform(self) -> np.ndarray:
        return (self.next_u64() >> np.uint64(11)) * _U53_SCALE

    def normal(self) -> np.ndarray:
        """One polar Box-Muller normal per lane (lockstep rejection)."""
        n = self.s0.shape[0]
        out = np.empty(n, dtype=np.float64)
        need = np.ones(n, dtype=bool)
        while need.any():
            u = 2.0 * self.uniform() - 1.0
            v = 2.0 * self.uniform() - 1.0
            s = u * u + v * v
            ok = need & (s > 0.0) & (s < 1.0)
            if ok.any():
                sv = s[ok]
                out[ok] = u[ok] * np.sqrt(-2.0 * np.log(sv) / sv)
                need &= ~ok
        return out


class Rng:
    """Deterministic generator: one scalar stream plus child derivation.

    Scalar draws (:meth:`uniform`, :meth:`normal`, :meth:`next_seed`) step the
    owned xoshiro256++ stream.  :meth:`child` derives an independent generator
    from this generator's seed without touching stream state.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self._stream = _Stream(self.seed)

    def child(self, index: int) -> "Rng":
        return Rng(split_seed(self.seed, index))

    def uniform(self) -> float:
        return self._stream.uniform()

    def normal(self) -> float:
        return self._stream.normal()

    def next_seed(self) -> int:
        """Draw one 64-bit seed from the scalar stream."""
        return self._stream.next_u64()

    def block_uniforms(self, n: int) -> np.ndarray:
        """n uniforms, element j from child stream split_seed(b, j)."""
        b = self.next_seed()
        return Lanes(child_seeds(b, n)).uniform()

    def block_normals(self, n: int) -> np.ndarray:
        """n standard normals, element j from child stream split_seed(b, j)."""
        b = self.next_seed()
        return Lanes(child_seeds(b, n)).normal()
