"""Dispatching policies.

This module is the readable reference for every policy.  All randomness is
taken from a per-slot row of uniforms ``u`` so that the compiled engine in
:mod:`lbsim._kernel` can replay exactly the same decisions; the offsets used
inside ``u`` are part of the contract between the two:

* ``u[0]`` drives the single random choice of a dispatch (JSQ tie-break,
  memory pick, random fallback).  PowerOfD variants instead use
  ``u[0:d]`` for the partial Fisher-Yates sample and ``u[d]`` for the tie-break.
* ``u[1:1+d]`` drives the threshold-refresh sample of the JBT family.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

RANDOM, WEIGHTED, JSQ, POD, PODMEM, JIQ, JBT, JBTG, JBTAVG = range(9)

KINDS = {
    "random": RANDOM,
    "weighted_random": WEIGHTED,
    "jsq": JSQ,
    "pod": POD,
    "pod_mem": PODMEM,
    "jiq": JIQ,
    "jbt": JBT,
    "jbtg": JBTG,
    "jbt_avg": JBTAVG,
}

THRESHOLD_KINDS = (JBT, JBTG, JBTAVG)


@dataclass(frozen=True)
class PolicySpec:
    kind: str
    d: int = 1
    m: int = 0
    T: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.d < 1 or self.T < 1:
            raise ValueError("d and T must be at least 1")
        if self.kind == "pod_mem" and self.m < 1:
            raise ValueError("SQ(d,m) needs m >= 1")

    @property
    def code(self) -> int:
        return KINDS[self.kind]

    @property
    def label(self) -> str:
        return {
            "random": "Random",
            "weighted_random": "WRandom",
            "jsq": "JSQ",
            "pod": f"SQ({self.d})",
            "pod_mem": f"SQ({self.d},{self.m})",
            "jiq": "JIQ",
            "jbt": f"JBT-{self.d}",
            "jbtg": f"JBTG-{self.d}",
            "jbt_avg": "JBTAvg",
        }[self.kind]

    def validate(self, n: int) -> None:
        if self.kind in ("pod", "pod_mem", "jbt", "jbtg") and self.d > n:
            raise ValueError(f"{self.label}: d={self.d} exceeds N={n}")

    def n_uniforms(self, n: int) -> int:
        if self.kind in ("pod", "pod_mem"):
            return self.d + 1
        if self.kind in ("jbt", "jbtg"):
            return self.d + 1
        return 1

    def with_T(self, T: int) -> "PolicySpec":
        return replace(self, T=T)


_LABEL_RE = [
    (re.compile(r"^SQ\((\d+),(\d+)\)$", re.I), lambda g: PolicySpec("pod_mem", d=int(g[0]), m=int(g[1]))),
    (re.compile(r"^SQ\((\d+)\)$", re.I), lambda g: PolicySpec("pod", d=int(g[0]))),
    (re.compile(r"^JBTG-(\d+)$", re.I), lambda g: PolicySpec("jbtg", d=int(g[0]))),
    (re.compile(r"^JBT-(\d+)$", re.I), lambda g: PolicySpec("jbt", d=int(g[0]))),
]


def parse_policy(label: str, T: int = 1) -> PolicySpec:
    """Parse a label such as ``SQ(2,3)`` or ``JBT-10``."""
    s = label.strip().replace(" ", "")
    for rx, build in _LABEL_RE:
        g = rx.match(s)
        if g:
            p = build(g.groups())
            return p.with_T(T) if p.kind in ("jbt", "jbtg") else p
    simple = {"jsq": "jsq", "jiq": "jiq", "random": "random", "wrandom": "weighted_random",
              "weightedrandom": "weighted_random", "jbtavg": "jbt_avg"}
    key = s.lower()
    if key in simple:
        kind = simple[key]
        return PolicySpec(kind, T=T) if kind == "jbt_avg" else PolicySpec(kind)
    raise ValueError(f"cannot parse policy label {label!r}")


@dataclass
class MemoryState:
    """Dispatcher memory m(t).

    ``ids`` are server IDs available to pull from.  ``threshold`` and
    ``reported`` are used by the JBT family only; ``stored_sample`` holds
    ``(server, recorded length)`` pairs for SQ(d,m).
    """

    ids: set = field(default_factory=set)
    threshold: int = 0
    reported: list = field(default_factory=list)
    stored_sample: list = field(default_factory=list)

    @classmethod
    def empty(cls, n: int) -> "MemoryState":
        return cls(reported=[False] * n)

    def copy(self) -> "MemoryState":
        return MemoryState(set(self.ids), self.threshold, list(self.reported), list(self.stored_sample))


def _pick(u: float, k: int) -> int:
    return min(int(u * k), k - 1)


def sample_servers(u, n: int, d: int) -> list[int]:
    """Uniform d-subset of ``range(n)`` by partial Fisher-Yates, in draw order."""
    perm = list(range(n))
    for i in range(d):
        j = i + _pick(u[i], n - i)
        perm[i], perm[j] = perm[j], perm[i]
    return perm[:d]


def _weighted_pick(u: float, servers, mu) -> int:
    total = 0.0
    for s in servers:
        total += mu[s]
    target = u * total
    acc = 0.0
    last = servers[-1]
    for s in servers:
        acc += mu[s]
        if target < acc:
            return s
    return last


def dispatch(policy: PolicySpec, q, mem: MemoryState, u, mu=None, a_total: int = 1):
    """Choose the destination for this slot's arrival batch.

    Returns ``(dest, push_msgs, consumed_id, new_mem)``; ``mem`` is not
    modified.  ``mu`` is needed by the weighted variants, ``a_total`` by
    SQ(d,m) to update its recorded length of the chosen server.
    """
    n = len(q)
    kind = policy.code
    mem = mem.copy()
    if kind == RANDOM:
        return _pick(u[0], n), 0, None, mem
    if kind == WEIGHTED:
        return _weighted_pick(u[0], list(range(n)), mu), 0, None, mem
    if kind == JSQ:
        lo = min(q)
        mins = [i for i in range(n) if q[i] == lo]
        return mins[_pick(u[0], len(mins))], 2 * n, None, mem
    if kind == POD:
        d = policy.d
        sample = sample_servers(u, n, d)
        lo = min(q[s] for s in sample)
        mins = [s for s in sample if q[s] == lo]
        return mins[_pick(u[d], len(mins))], 2 * d, None, mem
    if kind == PODMEM:
        d = policy.d
        sample = sample_servers(u, n, d)
        cands = [[s, int(q[s])] for s in sample]
        for s, length in mem.stored_sample:
            for c in cands:
                if c[0] == s:
                    c[1] = min(c[1], length)
                    break
            else:
                cands.append([s, length])
        lo = min(c[1] for c in cands)
        mins = [c for c in cands if c[1] == lo]
        chosen = mins[_pick(u[d], len(mins))]
        chosen[1] += a_total
        cands.sort(key=lambda c: c[1])
        mem.stored_sample = [(s, length) for s, length in cands[: policy.m]]
        return chosen[0], 2 * d, None, mem
    # pull-based: JIQ and the JBT family
    if mem.ids:
        ids = sorted(mem.ids)
        if kind == JBTG:
            dest = _weighted_pick(u[0], ids, mu)
        else:
            dest = ids[_pick(u[0], len(ids))]
        mem.ids.discard(dest)
        if kind in THRESHOLD_KINDS:
            mem.reported[dest] = False
        return dest, 0, dest, mem
    if kind == JBTG:
        return _weighted_pick(u[0], list(range(n)), mu), 0, None, mem
    return _pick(u[0], n), 0, None, mem


def end_of_slot(policy: PolicySpec, q_next, mem: MemoryState, t: int, u):
    """Server reports and threshold refresh after service in slot ``t``.

    Returns ``(new_mem, pull_msgs, push_msgs)``.
    """
    kind = policy.code
    n = len(q_next)
    if kind == JIQ:
        mem = mem.copy()
        pull = 0
        for i in range(n):
            if q_next[i] == 0 and i not in mem.ids:
                mem.ids.add(i)
                pull += 1
        return mem, pull, 0
    if kind not in THRESHOLD_KINDS:
        return mem, 0, 0

    mem = mem.copy()
    if (t + 1) % policy.T == 0:
        if kind == JBTAVG:
            theta = int(sum(int(x) for x in q_next) // n)
            push = 2 * n
        else:
            sample = sample_servers(u[1:], n, policy.d)
            theta = int(min(q_next[s] for s in sample))
            push = 2 * policy.d
        new_ids = {i for i in range(n) if q_next[i] <= theta}
        pull = len(new_ids - mem.ids)
        mem.ids = new_ids
        mem.threshold = theta
        mem.reported = [i in new_ids for i in range(n)]
        return mem, pull, push

    pull = 0
    for i in range(n):
        if q_next[i] <= mem.threshold and not mem.reported[i]:
            mem.ids.add(i)
            mem.reported[i] = True
            pull += 1
    return mem, pull, 0


def dispatch_probabilities(policy: PolicySpec, q, mem: MemoryState, mu=None) -> np.ndarray:
    """Exact per-server dispatch probabilities given ``(Q, m)``.

    Computed by the same rules as :func:`dispatch` but analytically, so it
    can serve as the per-state distribution for drift calculations.
    """
    n = len(q)
    q = np.asarray(q)
    mu = np.ones(n) if mu is None else np.asarray(mu, dtype=float)
    p = np.zeros(n)
    kind = policy.code
    if kind == RANDOM:
        p[:] = 1.0 / n
    elif kind == WEIGHTED:
        p[:] = mu / mu.sum()
    elif kind == JSQ:
        mins = q == q.min()
        p[mins] = 1.0 / mins.sum()
    elif kind == POD:
        from .tilt import power_of_d_server_probs

        p[:] = power_of_d_server_probs(q, policy.d)
    elif kind in (JIQ, JBT, JBTAVG) and mem.ids:
        ids = sorted(mem.ids)
        p[ids] = 1.0 / len(ids)
    elif kind == JBTG and mem.ids:
        ids = sorted(mem.ids)
        p[ids] = mu[ids] / mu[ids].sum()
    elif kind == JBTG:
        p[:] = mu / mu.sum()
    elif kind in (JIQ, JBT, JBTAVG):
        p[:] = 1.0 / n
    else:
        raise ValueError(f"no closed-form per-state distribution for {policy.label}")
    return p
