"""Counter-keyed random number streams for reproducible parallel Monte Carlo.

Every replicate of every experiment owns a stream addressed by
``(master_seed, stream_index)``.  Stream state is derived by hashing the pair
through SplitMix64, so replicate ``k`` produces the same numbers no matter
which worker runs it or in which order.  The generator core is PCG32
(64-bit LCG state, xorshift-rotate output), small enough to inline inside
numba kernels.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_U64 = np.uint64
_U32 = np.uint32

_PCG_MULT = _U64(6364136223846793005)
_SPLITMIX_GAMMA = _U64(0x9E3779B97F4A7C15)


@njit(cache=True, inline="always")
def splitmix64(x):
    x = _U64(x) + _SPLITMIX_GAMMA
    z = x
    z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
    return x, z ^ (z >> _U64(31))


@njit(cache=True)
def stream_state(master_seed, stream_index):
    """Derive an independent (state, inc) PCG32 pair for one stream."""
    x = _U64(master_seed) ^ (_U64(stream_index) * _U64(0xDA942042E4DD58B5))
    x, s0 = splitmix64(x)
    x, s1 = splitmix64(x)
    state = s0
    inc = (s1 << _U64(1)) | _U64(1)
    # standard PCG seeding round so nearby keys decorrelate
    state = state * _PCG_MULT + inc
    return state, inc


@njit(cache=True, inline="always")
def pcg32_next(state, inc):
    old = state
    state = old * _PCG_MULT + inc
    xorshifted = _U32(((old >> _U64(18)) ^ old) >> _U64(27))
    rot = _U32(old >> _U64(59))
    out = _U32((xorshifted >> rot) | (xorshifted << ((_U32(0) - rot) & _U32(31))))
    return state, out


@njit(cache=True, inline="always")
def next_uint32_below(state, inc, bound):
    """Unbiased bounded draw in [0, bound) by Lemire's method with rejection."""
    threshold = (_U32(0) - _U32(bound)) % _U32(bound)
    while True:
        state, x = pcg32_next(state, inc)
        m = _U64(x) * _U64(bound)
        if _U32(m & _U64(0xFFFFFFFF)) >= threshold:
            return state, _U32(m >> _U64(32))


@njit(cache=True, inline="always")
def next_double(state, inc):
    """53-bit uniform double in [0, 1)."""
    state, hi = pcg32_next(state, inc)
    state, lo = pcg32_next(state, inc)
    v = (_U64(hi) >> _U64(5)) * _U64(67108864) + (_U64(lo) >> _U64(6))
    return state, np.float64(v) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def next_poisson(state, inc, lam):
    """Exact Poisson draw.

    Multiplicative inversion for small means; larger means are split into
    chunks of mean <= 16 and summed, which stays exact by Poisson additivity
    and avoids both exp-underflow and any normal approximation.
    """
    total = 0
    remaining = lam
    while remaining > 16.0:
        chunk = 16.0
        limit = np.exp(-chunk)
        prod = 1.0
        k = -1
        while prod > limit:
            state, u = next_double(state, inc)
            prod *= u
            k += 1
        total += k
        remaining -= chunk
    limit = np.exp(-remaining)
    prod = 1.0
    k = -1
    while prod > limit:
        state, u = next_double(state, inc)
        prod *= u
        k += 1
    total += k
    return state, total


class RngStream:
    """One reproducible random stream keyed by (master_seed, stream_index).

    Two streams with distinct keys are statistically independent; equal keys
    replay bit-identical output regardless of scheduling.  Instances are
    cheap; they hold two 64-bit words.
    """

    __slots__ = ("master_seed", "stream_index", "_state", "_inc")

    def __init__(self, master_seed: int, stream_index: int = 0):
        if master_seed < 0 or stream_index < 0:
            raise ValueError("master_seed and stream_index must be nonnegative")
        self.master_seed = int(master_seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_index = int(stream_index)
        s, i = stream_state(_U64(self.master_seed), _U64(self.stream_index))
        # numba hands uint64 results back as signed python ints; re-wrap
        self._state = _U64(s & 0xFFFFFFFFFFFFFFFF)
        self._inc = _U64(i & 0xFFFFFFFFFFFFFFFF)

    def child(self, offset: int) -> "RngStream":
        """Stream with the same master seed at stream_index + offset."""
        return RngStream(self.master_seed, self.stream_index + offset)

    # The scalar drawing methods below are conveniences for pure-python code
    # paths; hot loops pass .state_pair() into numba kernels instead.

    def state_pair(self):
        return self._state, self._inc

    def set_state(self, state):
        self._state = _U64(int(state) & 0xFFFFFFFFFFFFFFFF)

    def uint32(self) -> int:
        s, x = pcg32_next(self._state, self._inc)
        self.set_state(s)
        return int(x) & 0xFFFFFFFF

    def below(self, bound: int) -> int:
        s, x = next_uint32_below(self._state, self._inc, _U32(bound))
        self.set_state(s)
        return int(x) & 0xFFFFFFFF

    def uniform(self) -> float:
        s, u = next_double(self._state, self._inc)
        self.set_state(s)
        return float(u)

    def poisson(self, lam: float) -> int:
        if lam < 0:
            raise ValueError("lam must be nonnegative")
        s, n = next_poisson(self._state, self._inc, float(lam))
        self.set_state(s)
        return int(n)

    def bernoulli(self, p: float) -> bool:
        return self.uniform() < p

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, stream_index={self.stream_index})"
