"""Seeded random streams and numerically careful elementary operations.

Tensors are plain ``numpy.ndarray`` objects.  Every public function here
refuses non-finite input instead of propagating NaN/Inf.

Random numbers
--------------
``Rng`` wraps numpy's Philox-4x64 counter-based bit generator.  The key is
derived from ``(seed, stream)`` through ``numpy.random.SeedSequence`` so that
named substreams (initialisation, shuffling, noise, ...) never overlap and are
reproducible bit-for-bit across platforms.

Draw accounting is exact: every uniform and every normal consumes one raw
64-bit word.  A uniform is built from the top 53 bits ``k`` of the word as
``(k + 0.5) / 2**53``, which lies strictly inside (0, 1); a standard normal is
the inverse normal CDF of that uniform.
"""

import math

import numpy as np
from scipy.special import ndtri

from .errors import DegenerateVectorError, InvalidInputError, NonFiniteError

_TWO_M53 = 2.0 ** -53


def check_finite(a, what="array"):
    """Raise :class:`NonFiniteError` if ``a`` holds NaN or Inf."""
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return a


class Rng:
    """Deterministic random stream identified by ``seed`` and a ``stream`` key path."""

    def __init__(self, seed, stream=()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise InvalidInputError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self.stream = tuple(int(s) for s in stream)
        self._bits = np.random.Philox(np.random.SeedSequence(seed, spawn_key=self.stream))
        self.draws = 0

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream}, draws={self.draws})"

    def substream(self, *key):
        """Independent child stream; does not advance this one."""
        return Rng(self.seed, self.stream + tuple(key))

    def raw(self, n):
        out = self._bits.random_raw(int(n))
        self.draws += int(n)
        return np.asarray(out, dtype=np.uint64).reshape(-1)

    def uniform(self, shape=()):
        n = int(np.prod(shape, dtype=np.int64))
        k = (self.raw(n) >> np.uint64(11)).astype(np.float64)
        return ((k + 0.5) * _TWO_M53).reshape(shape)

    def normal(self, shape=()):
        return ndtri(self.uniform(shape))

    def abs_normal(self, shape=()):
        return np.abs(self.normal(shape))

    def permutation(self, n):
        # stable argsort of n uniforms: one draw per element
        return np.argsort(self.uniform(n), kind="stable")


def sample_abs_normal(rng):
    """Draw ``|xi|`` with ``xi ~ N(0, 1)``; consumes exactly one raw word."""
    return float(rng.abs_normal())


def stable_softmax(logits, axis=-1):
    """Softmax with max subtraction.  Works row-wise on batched input."""
    f = np.asarray(logits)
    if f.size == 0:
        raise InvalidInputError("softmax of an empty vector")
    if not np.all(np.isfinite(f)):
        raise InvalidInputError("softmax input contains non-finite values")
    z = f - np.max(f, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    f = np.asarray(logits)
    if not np.all(np.isfinite(f)):
        raise InvalidInputError("log_softmax input contains non-finite values")
    z = f - np.max(f, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def stable_mean(values):
    """Mean as ``v0 + fsum(v - v0) / n``: compensated, and exact when every value is equal."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise InvalidInputError("mean of an empty array")
    v0 = v[0]
    return float(v0 + math.fsum(v - v0) / v.size)


def l2_norm(v, axis=None):
    v = np.asarray(v)
    return np.sqrt(np.sum(v * v, axis=axis))


def cosine_angle(u, v):
    """Cosine of the angle between two non-zero vectors, clamped into [-1, 1]."""
    u = np.asarray(u, dtype=float).reshape(-1)
    v = np.asarray(v, dtype=float).reshape(-1)
    if u.shape != v.shape:
        raise InvalidInputError(f"length mismatch {u.shape} vs {v.shape}")
    nu, nv = l2_norm(u), l2_norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateVectorError("cosine of a zero-norm vector is undefined")
    c = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(-1.0, c))
