"""Counter-based random streams keyed by (master seed, purpose, entity).

Every draw is a pure function of ``(seed, purpose, entity, n)`` computed with
Philox4x32-10, so any stream can be entered at an arbitrary position in O(1).
Connections, initial potentials and Poisson drive all draw from streams keyed
by the entity they belong to, which makes simulation results independent of
how work is split across workers.

Key layout (injective by construction)::

    philox key     = (seed & 0xffffffff, seed >> 32)
    philox counter = (block & 0xffffffff, block >> 32,
                      entity & 0xffffffff, (purpose << 24) | (entity >> 32))

Each block yields two 64-bit words; draw ``n`` uses word ``n & 1`` of block
``n >> 1``.  Every distribution below consumes exactly one draw per value.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numba
import numpy as np

MAX_ENTITY = (1 << 56) - 1
MAX_SEED = (1 << 64) - 1

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S11 = np.uint64(11)
_S24 = np.uint64(24)
_ONE = np.uint64(1)
_TWO_M53 = 1.0 / 9007199254740992.0


class Purpose(enum.IntEnum):
    CONNECTIVITY = 1
    INITIAL_CONDITIONS = 2
    POISSON_DRIVE = 3


@numba.njit(cache=True, inline="always")
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Philox4x32-10 bijection; all arguments are uint64 holding 32-bit words."""
    for r in range(10):
        if r > 0:
            k0 = (k0 + _W0) & _MASK32
            k1 = (k1 + _W1) & _MASK32
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> _S32
        lo0 = p0 & _MASK32
        hi1 = p1 >> _S32
        lo1 = p1 & _MASK32
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@numba.njit(cache=True, inline="always")
def draw_u64(seed, purpose, entity, n):
    seed = np.uint64(seed)
    entity = np.uint64(entity)
    n = np.uint64(n)
    block = n >> _ONE
    w0, w1, w2, w3 = philox4x32(
        block & _MASK32,
        block >> _S32,
        entity & _MASK32,
        (np.uint64(purpose) << _S24) | (entity >> _S32),
        seed & _MASK32,
        seed >> _S32,
    )
    if n & _ONE:
        return (w3 << _S32) | w2
    return (w1 << _S32) | w0


@numba.njit(cache=True, inline="always")
def draw_uniform(seed, purpose, entity, n):
    """Uniform double in the open interval (0, 1)."""
    x = draw_u64(seed, purpose, entity, n)
    return (float(x >> _S11) + 0.5) * _TWO_M53


@numba.njit(cache=True)
def ndtri(p):
    """Inverse standard normal CDF (Wichura AS241, ~1e-16 relative accuracy)."""
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2509.0809287301226727 * r + 33430.575583588128105) * r
                    + 67265.770927008700853) * r + 45921.953931549871457) * r
                  + 13731.693765509461125) * r + 1971.5909503065514427) * r
                + 133.14166789178437745) * r + 3.387132872796366608)
        den = (((((((5226.495278852545925 * r + 28729.085735721942674) * r
                    + 39307.89580009271061) * r + 21213.794301586595867) * r
                  + 5394.1960214247511077) * r + 687.1870074920579083) * r
                + 42.313330701600911252) * r + 1.0)
        return q * num / den
    if q < 0.0:
        r = p
    else:
        r = 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        num = (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r
                    + 0.24178072517745061177) * r + 1.27045825245236838258) * r
                  + 3.64784832476320460504) * r + 5.7694972214606914055) * r
                + 4.6303378461565452959) * r + 1.42343711074968357734)
        den = (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r
                    + 0.0151986665636164571966) * r + 0.14810397642748007459) * r
                  + 0.68976733498510000455) * r + 1.6763848301838038494) * r
                + 2.05319162663775882187) * r + 1.0)
    else:
        r -= 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 0.0012426609473880784386) * r + 0.026532189526576123093) * r
                  + 0.29656057182850489123) * r + 1.7848265399172913358) * r
                + 5.4637849111641143699) * r + 6.6579046435011037772)
        den = (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
                    + 1.8463183175100546818e-5) * r + 7.868691311456132591e-4) * r
                  + 0.0148753612908506148525) * r + 0.13692988092273580531) * r
                + 0.59983220655588793769) * r + 1.0)
    z = num / den
    if q < 0.0:
        return -z
    return z


@numba.njit(cache=True, inline="always")
def uniform_int_from(u, a, b):
    k = a + np.int64(u * (b - a + 1))
    if k > b:
        k = b
    return k


@numba.njit(cache=True)
def poisson_from(u, lam):
    """Poisson inversion with one uniform; exact up to floating point."""
    if lam <= 0.0:
        return 0
    if lam < 30.0:
        p = math.exp(-lam)
        cdf = p
        k = 0
        while cdf < u and k < 1000:
            k += 1
            p *= lam / k
            cdf += p
        return k
    sd = math.sqrt(lam)
    lo = max(0, int(lam - 12.0 * sd - 10.0))
    hi = int(lam + 12.0 * sd + 10.0)
    logp = lo * math.log(lam) - lam - math.lgamma(lo + 1.0)
    return _window_invert_poisson(u, lam, lo, hi, logp)


@numba.njit(cache=True)
def _window_invert_poisson(u, lam, lo, hi, logp):
    p = math.exp(logp)
    total = 0.0
    q = p
    for k in range(lo, hi + 1):
        total += q
        q *= lam / (k + 1)
    target = u * total
    cum = 0.0
    q = p
    for k in range(lo, hi + 1):
        cum += q
        if cum >= target:
            return k
        q *= lam / (k + 1)
    return hi


@numba.njit(cache=True)
def binomial_from(u, n, p):
    """Binomial(n, p) inversion over a +-12 sd window around the mean."""
    if n <= 0 or p <= 0.0:
        return 0
    if p >= 1.0:
        return n
    mean = n * p
    sd = math.sqrt(n * p * (1.0 - p))
    lo = max(0, int(mean - 12.0 * sd - 10.0))
    hi = min(n, int(mean + 12.0 * sd + 10.0))
    lp = math.log(p)
    lq = math.log1p(-p)
    logpmf = (math.lgamma(n + 1.0) - math.lgamma(lo + 1.0) - math.lgamma(n - lo + 1.0)
              + lo * lp + (n - lo) * lq)
    ratio = p / (1.0 - p)
    first = math.exp(logpmf)
    total = 0.0
    q = first
    for k in range(lo, hi + 1):
        total += q
        q *= (n - k) / (k + 1.0) * ratio
    target = u * total
    cum = 0.0
    q = first
    for k in range(lo, hi + 1):
        cum += q
        if cum >= target:
            return k
        q *= (n - k) / (k + 1.0) * ratio
    return hi


@numba.njit(cache=True)
def hypergeometric_from(u, total, good, draws):
    """Number of good items among ``draws`` taken without replacement."""
    bad = total - good
    lo = max(0, draws - bad)
    hi = min(draws, good)
    if lo == hi:
        return lo
    mean = draws * good / total
    var = mean * (bad / total) * (total - draws) / max(total - 1.0, 1.0)
    sd = math.sqrt(max(var, 0.0))
    wlo = max(lo, int(mean - 12.0 * sd - 10.0))
    whi = min(hi, int(mean + 12.0 * sd + 10.0))
    logpmf = (_lchoose(good, wlo) + _lchoose(bad, draws - wlo) - _lchoose(total, draws))
    first = math.exp(logpmf)
    total_mass = 0.0
    q = first
    for k in range(wlo, whi + 1):
        total_mass += q
        q *= (good - k) * (draws - k) / ((k + 1.0) * (bad - draws + k + 1.0))
    target = u * total_mass
    cum = 0.0
    q = first
    for k in range(wlo, whi + 1):
        cum += q
        if cum >= target:
            return k
        q *= (good - k) * (draws - k) / ((k + 1.0) * (bad - draws + k + 1.0))
    return whi


@numba.njit(cache=True, inline="always")
def _lchoose(n, k):
    return math.lgamma(n + 1.0) - math.lgamma(k + 1.0) - math.lgamma(n - k + 1.0)


# ---------------------------------------------------------------------------
# Python-level stream handles


@dataclass(frozen=True)
class StreamKey:
    master_seed: int
    purpose: Purpose
    entity_id: int

    def __post_init__(self):
        if not 0 <= self.master_seed <= MAX_SEED:
            raise ValueError(f"master_seed out of range: {self.master_seed}")
        if not 0 <= self.entity_id <= MAX_ENTITY:
            raise ValueError(f"entity_id out of range: {self.entity_id}")
        object.__setattr__(self, "purpose", Purpose(self.purpose))


@dataclass(frozen=True)
class UniformInt:
    low: int
    high: int


@dataclass(frozen=True)
class UniformReal:
    pass


@dataclass(frozen=True)
class Normal:
    mean: float
    sd: float


@dataclass(frozen=True)
class Poisson:
    lam: float


@dataclass(frozen=True)
class Discrete:
    weights: Sequence[float]


Distribution = Union[UniformInt, UniformReal, Normal, Poisson, Discrete]


def _check(dist: Distribution) -> None:
    if isinstance(dist, UniformInt):
        if dist.high < dist.low:
            raise ValueError("uniform_int requires low <= high")
    elif isinstance(dist, Normal):
        if not dist.sd >= 0:
            raise ValueError("normal requires sd >= 0")
    elif isinstance(dist, Poisson):
        if not dist.lam >= 0:
            raise ValueError("poisson requires lam >= 0")
    elif isinstance(dist, Discrete):
        w = np.asarray(dist.weights, dtype=float)
        if w.size == 0 or np.any(w < 0) or not np.any(w > 0):
            raise ValueError("discrete weights must be non-negative and not all zero")
    elif not isinstance(dist, UniformReal):
        raise TypeError(f"unknown distribution {dist!r}")


@numba.njit(cache=True)
def _uniform_block(seed, purpose, entity, start, size):
    out = np.empty(size, dtype=np.float64)
    for i in range(size):
        out[i] = draw_uniform(seed, purpose, entity, start + i)
    return out


@numba.njit(cache=True)
def _u64_block(seed, purpose, entity, start, size):
    out = np.empty(size, dtype=np.uint64)
    for i in range(size):
        out[i] = draw_u64(seed, purpose, entity, start + i)
    return out


@numba.njit(cache=True)
def _normal_block(u, mean, sd):
    out = np.empty(u.size)
    for i in range(u.size):
        out[i] = mean + sd * ndtri(u[i])
    return out


@numba.njit(cache=True)
def _poisson_block(u, lam):
    out = np.empty(u.size, dtype=np.int64)
    for i in range(u.size):
        out[i] = poisson_from(u[i], lam)
    return out


class Stream:
    """Seekable handle on one keyed stream.

    The handle only carries a position; two handles with equal keys and
    positions produce identical values.
    """

    def __init__(self, key: StreamKey, position: int = 0):
        self.key = key
        self.position = position

    def seek(self, n: int) -> "Stream":
        if n < 0:
            raise ValueError("stream position must be non-negative")
        self.position = n
        return self

    def _args(self):
        k = self.key
        return np.uint64(k.master_seed), int(k.purpose), np.uint64(k.entity_id)

    def u64(self, size: int | None = None):
        seed, purpose, entity = self._args()
        n = 1 if size is None else size
        out = _u64_block(seed, purpose, entity, self.position, n)
        self.position += n
        return int(out[0]) if size is None else out

    def uniforms(self, size: int) -> np.ndarray:
        seed, purpose, entity = self._args()
        out = _uniform_block(seed, purpose, entity, self.position, size)
        self.position += size
        return out

    def sample(self, dist: Distribution, size: int | None = None):
        """Draw from ``dist``; each value consumes exactly one stream position."""
        _check(dist)
        n = 1 if size is None else size
        u = self.uniforms(n)
        if isinstance(dist, UniformReal):
            out = u
        elif isinstance(dist, UniformInt):
            span = dist.high - dist.low + 1
            out = np.minimum(dist.low + np.floor(u * span).astype(np.int64), dist.high)
        elif isinstance(dist, Normal):
            out = _normal_block(u, float(dist.mean), float(dist.sd))
        elif isinstance(dist, Poisson):
            out = _poisson_block(u, float(dist.lam))
        else:
            w = np.asarray(dist.weights, dtype=float)
            cdf = np.cumsum(w / w.sum())
            out = np.minimum(np.searchsorted(cdf, u, side="left"), w.size - 1)
        if size is None:
            return out[0].item()
        return out


def derive_stream(key: StreamKey) -> Stream:
    return Stream(key)
