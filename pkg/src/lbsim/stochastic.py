"""Bounded i.i.d. arrival and service processes.

Every process draws integer counts per slot from a finite support
``[0, bound]``.  Poisson processes are clamped at ``cap`` (mass at the cap);
the clamped mean and variance are computed exactly so downstream quantities
such as the capacity gap and the heavy-traffic constant use the moments of
what is actually sampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Union

import numpy as np
from numba import njit

DEFAULT_CAP = 64


def default_cap(rate: float) -> int:
    """64, or more for rates where clamping at 64 would bias the mean."""
    return max(DEFAULT_CAP, int(math.ceil(rate + 12.0 * math.sqrt(rate) + 12.0)))


@lru_cache(maxsize=256)
def _clamped_cdf(rate: float, cap: int) -> np.ndarray:
    # P(X <= k) for k < cap; anything beyond the table lands on the cap
    k = np.arange(cap)
    if rate == 0:
        return np.ones(cap)
    logp = k * math.log(rate) - rate - np.array([math.lgamma(i + 1) for i in k])
    return np.cumsum(np.exp(logp))


@njit(cache=True)
def _inverse_cdf(u, cdf):
    out = np.empty(u.shape[0], dtype=np.int64)
    last = cdf.shape[0]
    for i in range(u.shape[0]):
        x = u[i]
        k = 0
        while k < last and cdf[k] <= x:
            k += 1
        out[i] = k
    return out


def _clamped_poisson_moments(rate: float, cap: int) -> tuple[float, float]:
    # E[min(X, cap)] and Var[min(X, cap)] for X ~ Poisson(rate)
    if rate == 0:
        return 0.0, 0.0
    m1 = 0.0
    m2 = 0.0
    below = 0.0
    log_rate = math.log(rate)
    for k in range(cap):
        pk = math.exp(k * log_rate - rate - math.lgamma(k + 1))
        below += pk
        m1 += k * pk
        m2 += k * k * pk
    tail = max(0.0, 1.0 - below)
    m1 += cap * tail
    m2 += cap * cap * tail
    return m1, m2 - m1 * m1


class _Counts:
    # each count is a deterministic function of one uniform, which keeps
    # streams aligned however the horizon is chunked
    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return self.from_uniform(rng.random(size))


@dataclass(frozen=True)
class PoissonTruncated(_Counts):
    """Poisson counts clamped at ``cap`` (default :func:`default_cap`).

    Sampled by inverse CDF from one uniform per draw.
    """

    rate: float
    cap: Optional[int] = None

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError(f"Poisson rate must be nonnegative, got {self.rate}")
        if self.cap is None:
            object.__setattr__(self, "cap", default_cap(self.rate))
        if self.cap < 1:
            raise ValueError("cap must be positive")

    @property
    def mean(self) -> float:
        return _clamped_poisson_moments(self.rate, self.cap)[0]

    @property
    def variance(self) -> float:
        return _clamped_poisson_moments(self.rate, self.cap)[1]

    @property
    def bound(self) -> int:
        return self.cap

    @property
    def truncation_bias(self) -> float:
        """Nominal rate minus the mean actually sampled."""
        return self.rate - self.mean

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        flat = _inverse_cdf(np.ravel(u), _clamped_cdf(float(self.rate), int(self.cap)))
        return flat.reshape(np.shape(u))


@dataclass(frozen=True)
class Constant(_Counts):
    value: int

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("constant count must be nonnegative")

    mean = property(lambda self: float(self.value))
    variance = property(lambda self: 0.0)
    bound = property(lambda self: self.value)

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        return np.full(np.shape(u), self.value, dtype=np.int64)


@dataclass(frozen=True)
class TwoPoint(_Counts):
    """``value`` with probability ``prob``, otherwise 0."""

    value: int
    prob: float

    def __post_init__(self):
        if self.value < 0 or not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"invalid two-point process ({self.value}, {self.prob})")

    @classmethod
    def with_mean(cls, value: int, mean: float) -> "TwoPoint":
        return cls(value, mean / value)

    @property
    def mean(self) -> float:
        return self.prob * self.value

    @property
    def variance(self) -> float:
        return self.prob * (1.0 - self.prob) * self.value**2

    @property
    def bound(self) -> int:
        return self.value

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        return np.where(u < self.prob, self.value, 0).astype(np.int64)


@dataclass(frozen=True)
class ClassA(_Counts):
    """Arrivals with a fixed probability ``p0`` of an empty slot.

    The nonzero part is supported on ``{v, v + 1}`` with
    ``v = floor(rate / (1 - p0))`` and mixed so the mean is exactly ``rate``.
    Construction fails unless the variance exceeds ``8 / p0 - 4``.
    """

    p0: float
    rate: float

    def __post_init__(self):
        if not 0.0 < self.p0 < 1.0:
            raise ValueError("p0 must lie in (0, 1)")
        if self.rate / (1.0 - self.p0) < 1.0:
            raise ValueError("rate too small: nonzero support would include 0")
        if not self.variance > 8.0 / self.p0 - 4.0:
            raise ValueError(
                f"variance {self.variance:.4g} does not exceed 8/p0 - 4 = {8.0 / self.p0 - 4.0:.4g}"
            )

    @property
    def _support(self) -> tuple[int, float, float]:
        # (v, P(A = v), P(A = v + 1))
        busy = 1.0 - self.p0
        scaled = self.rate / busy
        v = math.floor(scaled)
        frac = scaled - v
        return v, busy * (1.0 - frac), busy * frac

    @property
    def mean(self) -> float:
        return self.rate

    @property
    def variance(self) -> float:
        v, p_lo, p_hi = self._support
        return p_lo * v * v + p_hi * (v + 1) ** 2 - self.rate**2

    @property
    def bound(self) -> int:
        v, _, p_hi = self._support
        return v + 1 if p_hi > 0 else v

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        v, p_lo, _ = self._support
        out = np.where(u < self.p0, 0, v)
        out = np.where(u >= self.p0 + p_lo, v + 1, out)
        return out.astype(np.int64)


Process = Union[PoissonTruncated, Constant, TwoPoint, ClassA]
ArrivalSpec = Process


@dataclass(frozen=True)
class ServiceSpec:
    """One independent service process per server."""

    processes: tuple

    def __post_init__(self):
        object.__setattr__(self, "processes", tuple(self.processes))
        for p in self.processes:
            if isinstance(p, ClassA):
                raise ValueError("ClassA is an arrival-only process")

    @classmethod
    def poisson(cls, rates, cap: Optional[int] = None) -> "ServiceSpec":
        return cls(tuple(PoissonTruncated(float(r), cap) for r in rates))

    @property
    def n(self) -> int:
        return len(self.processes)

    @property
    def means(self) -> np.ndarray:
        return np.array([p.mean for p in self.processes])

    @property
    def variances(self) -> np.ndarray:
        return np.array([p.variance for p in self.processes])

    @property
    def bound(self) -> int:
        return max(p.bound for p in self.processes)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Return a ``(size, n)`` int64 array of offered services."""
        u = rng.random((size, self.n))
        out = np.empty((size, self.n), dtype=np.int64)
        for j, p in enumerate(self.processes):
            out[:, j] = p.from_uniform(u[:, j])
        return out


def sample_arrival(spec: ArrivalSpec, rng: np.random.Generator) -> int:
    return int(spec.sample(rng, 1)[0])


def sample_service(spec: Process, rng: np.random.Generator) -> int:
    return int(spec.sample(rng, 1)[0])


def make_streams(seed: int, replication: int = 0) -> dict[str, np.random.Generator]:
    """Independent counter-based streams for one run.

    Streams are keyed by ``(seed, replication)``; arrivals, services and
    policy randomness never share a stream, so two runs that differ only in
    policy see identical arrival and service samples.
    """
    root = np.random.SeedSequence(seed, spawn_key=(replication,))
    arr, svc, pol = root.spawn(3)
    return {
        "arrival": np.random.Generator(np.random.Philox(arr)),
        "service": np.random.Generator(np.random.Philox(svc)),
        "policy": np.random.Generator(np.random.Philox(pol)),
    }


def process_from_dict(d: dict) -> Process:
    kind = d["kind"].lower()
    if kind == "poisson":
        cap = d.get("cap")
        return PoissonTruncated(float(d["rate"]), None if cap is None else int(cap))
    if kind == "constant":
        return Constant(int(d["value"]))
    if kind in ("two_point", "twopoint", "bursty"):
        if "prob" in d:
            return TwoPoint(int(d["value"]), float(d["prob"]))
        return TwoPoint.with_mean(int(d["value"]), float(d["mean"]))
    if kind in ("class_a", "classa"):
        return ClassA(float(d.get("p0", 0.8)), float(d["rate"]))
    raise ValueError(f"unknown process kind {d['kind']!r}")


def process_to_dict(p: Process) -> dict:
    if isinstance(p, PoissonTruncated):
        return {"kind": "poisson", "rate": p.rate, "cap": p.cap}
    if isinstance(p, Constant):
        return {"kind": "constant", "value": p.value}
    if isinstance(p, TwoPoint):
        return {"kind": "two_point", "value": p.value, "prob": p.prob}
    return {"kind": "class_a", "p0": p.p0, "rate": p.rate}


def process_label(p: Process) -> str:
    return {PoissonTruncated: "poisson", Constant: "constant", TwoPoint: "bursty", ClassA: "class_a"}[type(p)]
