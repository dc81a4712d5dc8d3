"""Sorted dispatching distributions, tilt classification and one-step drifts.

Positions are 0-based here: position 0 is the shortest queue.  Probabilities
are kept as :class:`fractions.Fraction` wherever the policy formula is
rational, so classification is exact; floats are accepted and converted
exactly (every float is a dyadic rational).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from math import comb

import numpy as np

from .policies import PolicySpec

NOT_TILTED, TILTED, DELTA_TILTED = "NotTilted", "Tilted", "DeltaTilted"


def sort_permutation(q) -> np.ndarray:
    """Stable permutation sorting ``q`` nondecreasingly (ties by server index)."""
    return np.argsort(np.asarray(q), kind="stable")


@dataclass(frozen=True)
class DispatchDistribution:
    sigma: tuple
    P: tuple
    q_sorted: tuple

    def __post_init__(self):
        if len(self.sigma) != len(self.P) or len(self.P) != len(self.q_sorted):
            raise ValueError("sigma, P and q_sorted must have equal length")
        if any(p < 0 for p in self.P):
            raise ValueError("negative probability")
        if abs(float(sum(self.P)) - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {float(sum(self.P))}")
        if any(a > b for a, b in zip(self.q_sorted, self.q_sorted[1:])):
            raise ValueError("sigma must sort the queue vector nondecreasingly")

    @classmethod
    def from_sorted(cls, q, P) -> "DispatchDistribution":
        sigma = sort_permutation(q)
        q = np.asarray(q)
        return cls(tuple(int(s) for s in sigma), tuple(P), tuple(int(x) for x in q[sigma]))

    @classmethod
    def from_servers(cls, q, p) -> "DispatchDistribution":
        """Build from per-server probabilities ``p[server]``."""
        sigma = sort_permutation(q)
        q = np.asarray(q)
        return cls(tuple(int(s) for s in sigma), tuple(p[s] for s in sigma),
                   tuple(int(x) for x in q[sigma]))

    @property
    def n(self) -> int:
        return len(self.P)

    def per_server(self) -> list:
        out = [0] * self.n
        for pos, s in enumerate(self.sigma):
            out[s] = self.P[pos]
        return out

    def inner(self) -> Fraction:
        return sum(Fraction(q) * _frac(p) for q, p in zip(self.q_sorted, self.P))


def _frac(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)


def tie_groups(q_sorted) -> list[tuple[int, int]]:
    """Maximal runs ``[start, end)`` of equal sorted queue lengths."""
    groups = []
    start = 0
    for i in range(1, len(q_sorted) + 1):
        if i == len(q_sorted) or q_sorted[i] != q_sorted[start]:
            groups.append((start, i))
            start = i
    return groups


def capacity_shares(sigma, mu) -> list[Fraction]:
    mu = [_frac(float(m)) for m in mu]
    total = sum(mu)
    return [mu[s] / total for s in sigma]


def delta_vector(dist: DispatchDistribution, mu) -> list[Fraction]:
    c = capacity_shares(dist.sigma, mu)
    return [_frac(p) - ci for p, ci in zip(dist.P, c)]


# ---------------------------------------------------------------- closed forms

def power_of_d_sorted(n: int, d: int) -> list[Fraction]:
    """P_n = C(N-n, d-1) / C(N, d) over 1-based sorted positions n."""
    if not 1 <= d <= n:
        raise ValueError(f"need 1 <= d <= N, got d={d}, N={n}")
    total = comb(n, d)
    return [Fraction(comb(n - 1 - i, d - 1), total) for i in range(n)]


def power_of_d_server_probs(q, d: int) -> list[Fraction]:
    """Per-server probabilities of power-of-d with uniform tie-breaking."""
    q = np.asarray(q)
    n = len(q)
    sigma = sort_permutation(q)
    P = power_of_d_sorted(n, d)
    out = [Fraction(0)] * n
    q_sorted = q[sigma]
    for a, b in tie_groups(q_sorted):
        mass = sum(P[a:b], Fraction(0))
        for pos in range(a, b):
            out[int(sigma[pos])] = mass / (b - a)
    return out


def memory_prefix_distribution(q, mem_dist, mu=None, weighted: bool = False) -> DispatchDistribution:
    """Dispatch distribution when memory holds the ``k`` shortest queues w.p. ``mem_dist[k]``.

    ``mem_dist`` has ``N + 1`` entries (k = 0..N; an empty memory falls back
    to uniform, or rate-weighted, random) or ``N`` entries (k = 1..N).
    """
    q = np.asarray(q)
    n = len(q)
    pt = [_frac(x) for x in mem_dist]
    if len(pt) == n:
        pt = [Fraction(0)] + pt
    if len(pt) != n + 1 or any(x < 0 for x in pt):
        raise ValueError("memory-size distribution must have N or N+1 nonnegative entries")
    if abs(float(sum(pt)) - 1.0) > 1e-12:
        raise ValueError(f"memory-size distribution sums to {float(sum(pt))}, not 1")
    sigma = sort_permutation(q)
    mu_s = [Fraction(1)] * n if mu is None else [_frac(float(mu[s])) for s in sigma]
    P = [Fraction(0)] * n
    if not weighted:
        for i in range(n):
            P[i] = sum((pt[k] / k for k in range(i + 1, n + 1)), Fraction(0)) + pt[0] / n
    else:
        prefix = np.cumsum([0] + mu_s).tolist()
        total = sum(mu_s)
        for i in range(n):
            P[i] = mu_s[i] * (sum((pt[k] / prefix[k] for k in range(i + 1, n + 1)), Fraction(0))
                              + pt[0] / total)
    return DispatchDistribution.from_sorted(q, P)


def refresh_distribution(q, d: int, mu=None, weighted: bool = False) -> DispatchDistribution:
    """Exact JBT/JBTG dispatch distribution in the slot right after a threshold refresh.

    The threshold is the minimum of a uniform d-sample, memory is every
    server at or below it, and the dispatcher picks from memory uniformly
    (or rate-weighted).
    """
    q = np.asarray(q)
    n = len(q)
    total = comb(n, d)
    sigma = sort_permutation(q)
    q_sorted = q[sigma]
    mem = [Fraction(0)] * (n + 1)
    for a, b in tie_groups(q_sorted):
        # threshold equals this group's length: all d samples at or above it,
        # not all strictly above
        p = Fraction(comb(n - a, d) - comb(n - b, d), total)
        mem[b] += p
    return memory_prefix_distribution(q, mem, mu, weighted)


def theoretical_distribution(policy: PolicySpec, q, mu=None, mem_dist=None) -> DispatchDistribution:
    """Sorted dispatching distribution of ``policy`` at queue state ``q``.

    For the JBT family ``mem_dist`` is ``Pr(|m(t)| = k)``; without it the
    exact post-refresh distribution is returned.
    """
    q = np.asarray(q)
    n = len(q)
    kind = policy.kind
    if kind == "jsq":
        return DispatchDistribution.from_sorted(q, [Fraction(1)] + [Fraction(0)] * (n - 1))
    if kind == "pod":
        return DispatchDistribution.from_sorted(q, power_of_d_sorted(n, policy.d))
    if kind == "random":
        return DispatchDistribution.from_sorted(q, [Fraction(1, n)] * n)
    if kind == "weighted_random":
        sigma = sort_permutation(q)
        return DispatchDistribution.from_sorted(q, capacity_shares(sigma, mu if mu is not None else [1] * n))
    if kind in ("jbt", "jbtg"):
        weighted = kind == "jbtg"
        if mem_dist is None:
            return refresh_distribution(q, policy.d, mu, weighted)
        return memory_prefix_distribution(q, mem_dist, mu, weighted)
    if kind == "jbt_avg" and mem_dist is not None:
        return memory_prefix_distribution(q, mem_dist, mu)
    raise ValueError(f"no closed-form sorted distribution for {policy.label}")


# ---------------------------------------------------------- equivalence / tilt

def canonicalize_ties(dist: DispatchDistribution, q=None) -> DispatchDistribution:
    """Move each tied group's mass to the group's first sorted position.

    The result is equivalent in inner product with the sorted queue vector.
    """
    if q is not None:
        q = np.asarray(q)
        if tuple(int(x) for x in q[list(dist.sigma)]) != dist.q_sorted:
            raise ValueError("distribution does not match this queue vector")
    P = list(dist.P)
    zero = P[0] * 0
    for a, b in tie_groups(dist.q_sorted):
        mass = sum(P[a:b], zero)
        P[a] = mass
        for i in range(a + 1, b):
            P[i] = zero
    return DispatchDistribution(dist.sigma, tuple(P), dist.q_sorted)


@dataclass(frozen=True)
class TiltClassification:
    verdict: str
    delta_witness: Fraction
    split: int | None = None

    @property
    def tilted(self) -> bool:
        return self.verdict != NOT_TILTED

    @property
    def delta_tilted(self) -> bool:
        return self.verdict == DELTA_TILTED


def classify(dist: DispatchDistribution, mu) -> TiltClassification:
    """Best tilt verdict over every distribution equivalent in inner product.

    For a split ``k`` (positions ``< k`` need Delta >= 0, positions ``>= k``
    need Delta <= 0) a tied group can redistribute its mass freely, so
    feasibility and the extreme values of Delta at the first and last
    positions follow group by group.  The witness is the largest
    ``min(Delta_1, -Delta_N)`` over feasible splits.
    """
    n = dist.n
    c = capacity_shares(dist.sigma, mu)
    P = [_frac(p) for p in dist.P]
    groups = tie_groups(dist.q_sorted)
    if n == 1:
        return TiltClassification(TILTED, Fraction(0), None)
    best = None
    best_k = None
    for k in range(1, n):  # 0-based split: positions < k nonnegative
        ok = True
        for a, b in groups:
            mass = sum(P[a:b], Fraction(0))
            need = sum(c[a:min(b, k)], Fraction(0)) if a < k else Fraction(0)
            if mass < need:
                ok = False
                break
            if a >= k and mass > sum(c[a:b], Fraction(0)):
                ok = False
                break
        if not ok:
            continue
        a1, b1 = groups[0]
        m1 = sum(P[a1:b1], Fraction(0))
        d_first = m1 - sum(c[a1:min(b1, k)], Fraction(0))
        aN, bN = groups[-1]
        mN = sum(P[aN:bN], Fraction(0))
        if aN < k:
            d_last = -c[n - 1]
        else:
            d_last = max(-c[n - 1], mN - sum(c[aN:bN], Fraction(0)))
        w = min(d_first, -d_last)
        if best is None or w > best:
            best, best_k = w, k
    if best is None:
        return TiltClassification(NOT_TILTED, Fraction(0), None)
    if best > 0:
        return TiltClassification(DELTA_TILTED, best, best_k)
    return TiltClassification(TILTED, Fraction(0), best_k)


def is_tilted_as_given(dist: DispatchDistribution, mu) -> bool:
    """Tilt test on the representative itself, without using ties."""
    d = delta_vector(dist, mu)
    for k in range(1, dist.n):
        if all(x >= 0 for x in d[:k]) and all(x <= 0 for x in d[k:]):
            return True
    return False


# ---------------------------------------------------------------- drifts

def inner_drift(dist: DispatchDistribution, q, mu, lam: float) -> tuple[float, float]:
    """Exact one-step conditional drifts ``E[<Q, A - S> | Z]`` and ``E[<Q_perp, A - S> | Z]``.

    Uses the offered service ``S`` (not the served amount), as in the drift
    bounds.
    """
    q = np.asarray(q, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma = list(dist.sigma)
    qs = q[sigma]
    ms = mu[sigma]
    P = np.array([float(p) for p in dist.P])
    rate = P * lam - ms
    full = float(np.dot(qs, rate))
    perp = float(np.dot(qs - q.mean(), rate))
    return full, perp


def perp_norm(q) -> float:
    q = np.asarray(q, dtype=float)
    return float(np.linalg.norm(q - q.mean()))


@dataclass
class DriftCheck:
    name: str
    lhs: float
    rhs: float

    @property
    def ok(self) -> bool:
        return self.lhs <= self.rhs + 1e-9 * max(1.0, abs(self.rhs), abs(self.lhs))


def drift_checks(dist: DispatchDistribution, q, mu, eps: float,
                 verdict: TiltClassification | None = None) -> list[DriftCheck]:
    """Numerical instances of the tilt/drift inequalities at one state.

    Only checks whose hypotheses hold (tilted, or delta-tilted with the
    witness) are returned.
    """
    verdict = verdict or classify(dist, mu)
    q = np.asarray(q, dtype=float)
    mu = np.asarray(mu, dtype=float)
    n = len(q)
    mu_total = float(mu.sum())
    lam = mu_total - eps
    out = []
    spread = float(dist.q_sorted[-1] - dist.q_sorted[0])
    pn = perp_norm(q)
    out.append(DriftCheck("perp_norm_vs_spread", pn, math.sqrt(n) * spread))
    if not verdict.tilted:
        return out
    delta = [float(x) for x in delta_vector(dist, mu)]
    qd = float(np.dot(np.asarray(dist.q_sorted, dtype=float), delta))
    full, perp = inner_drift(dist, q, mu, lam)
    out.append(DriftCheck("tilted_inner_product", qd, 0.0))
    out.append(DriftCheck("drift_full", full, -eps * float(mu.min()) / mu_total * float(np.linalg.norm(q))))
    out.append(DriftCheck("drift_perp", perp, eps * math.sqrt(n) * pn))
    if verdict.delta_tilted:
        dw = float(verdict.delta_witness)
        out.append(DriftCheck("delta_inner_product", qd, -dw * spread))
        out.append(DriftCheck("drift_perp_delta", perp, math.sqrt(n) * pn * (eps - dw * lam / n)))
    return out
