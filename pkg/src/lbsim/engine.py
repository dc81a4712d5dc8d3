"""Time-slotted load-balancing engine.

Each slot: sample arrivals, dispatch the whole batch to one queue using
``(Q(t), m(t))``, sample services, apply the queue recursion, then run the
policy's end-of-slot reports.  ``step`` is the reference definition of a
slot; ``run`` executes the same rules in compiled code over pre-drawn random
chunks and is checked against a ``step`` fold in the tests.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernel
from .metrics import Accumulator, RunStatistics, finish
from .policies import MemoryState, PolicySpec, dispatch, end_of_slot
from .stochastic import ArrivalSpec, PoissonTruncated, ServiceSpec, make_streams

CHUNK = 1 << 15


@dataclass(frozen=True)
class SystemConfig:
    n: int
    mu: tuple
    arrival: ArrivalSpec
    policy: PolicySpec
    horizon: int
    seed: int = 0
    service: ServiceSpec | None = None
    warmup: int | None = None
    batches: int = 30
    replication: int = 0
    stable_regime: bool = True
    guard_factor: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "mu", tuple(float(x) for x in self.mu))
        if self.service is None:
            object.__setattr__(self, "service", ServiceSpec.poisson(self.mu))
        if self.warmup is None:
            object.__setattr__(self, "warmup", self.horizon // 10)
        if self.n < 1 or len(self.mu) != self.n or self.service.n != self.n:
            raise ValueError("n, mu and service must describe the same number of servers")
        if min(self.mu) <= 0:
            raise ValueError("service rates must be positive")
        if self.horizon < 1 or self.batches < 1 or not 0 <= self.warmup < self.horizon:
            raise ValueError("need horizon >= 1, batches >= 1 and 0 <= warmup < horizon")
        if self.horizon - self.warmup < self.batches:
            raise ValueError("fewer measured slots than batches")
        self.policy.validate(self.n)
        if self.stable_regime and not self.has_gap:
            raise ValueError(
                f"stable-regime config has arrival rate {self.lam:.6g} >= capacity {self.mu_total:.6g}"
            )

    @classmethod
    def homogeneous(cls, n: int, rho: float, policy: PolicySpec, horizon: int, **kw) -> "SystemConfig":
        return cls(n=n, mu=(1.0,) * n, arrival=PoissonTruncated(rho * n), policy=policy,
                   horizon=horizon, **kw)

    @property
    def lam(self) -> float:
        return self.arrival.mean

    @property
    def mu_total(self) -> float:
        return float(self.service.means.sum())

    @property
    def epsilon(self) -> float:
        return self.mu_total - self.lam

    @property
    def has_gap(self) -> bool:
        # clamped-Poisson moments carry round-off far below this
        return self.epsilon > 1e-9 * self.mu_total

    @property
    def rho(self) -> float:
        return self.lam / self.mu_total

    @property
    def measured_slots(self) -> int:
        return self.horizon - self.warmup

    def with_(self, **kw) -> "SystemConfig":
        return replace(self, **kw)


@dataclass
class SystemState:
    t: int
    q: np.ndarray
    mem: MemoryState
    fifo: list = field(default_factory=list)

    @classmethod
    def initial(cls, n: int) -> "SystemState":
        return cls(0, np.zeros(n, dtype=np.int64), MemoryState.empty(n), [deque() for _ in range(n)])

    def copy(self) -> "SystemState":
        return SystemState(self.t, self.q.copy(), self.mem.copy(),
                           [deque([list(b) for b in f]) for f in self.fifo])


@dataclass(frozen=True)
class SlotOutcome:
    t: int
    a_total: int
    dest: int | None
    S: tuple
    U: tuple
    push_msgs: int
    pull_msgs: int
    departures: tuple


def step(state: SystemState, a_total: int, policy: PolicySpec, services, u, mu=None):
    """Advance one slot.  Returns ``(new_state, outcome)``; ``state`` is untouched.

    ``u`` is the slot's row of policy uniforms (see :mod:`lbsim.policies`).
    A job served in the slot it arrived in has response time 0, so the
    per-job mean equals the time-average total queue divided by the arrival rate.
    """
    new = state.copy()
    t = state.t
    n = len(state.q)
    dest = None
    push = 0
    if a_total > 0:
        dest, push, _, new.mem = dispatch(policy, state.q, new.mem, u, mu, a_total)
        new.fifo[dest].append([t, int(a_total)])
        new.q[dest] += a_total
    departures = []
    unused = []
    for s in range(n):
        offered = int(services[s])
        served = min(offered, int(new.q[s]))
        unused.append(offered - served)
        new.q[s] -= served
        fifo = new.fifo[s]
        while served > 0:
            batch = fifo[0]
            take = min(batch[1], served)
            departures.extend([(s, t - batch[0])] * take)
            served -= take
            batch[1] -= take
            if batch[1] == 0:
                fifo.popleft()
    new.mem, pull, refresh_push = end_of_slot(policy, new.q, new.mem, t, u)
    new.t = t + 1
    outcome = SlotOutcome(t, int(a_total), dest, tuple(int(x) for x in services), tuple(unused),
                          push + refresh_push, pull, tuple(departures))
    return new, outcome


def draw_chunk(config: SystemConfig, streams: dict, size: int):
    a = config.arrival.sample(streams["arrival"], size)
    s = config.service.sample(streams["service"], size)
    u = streams["policy"].random((size, config.policy.n_uniforms(config.n)))
    return a, s, u


def _chunks(config: SystemConfig, chunk: int = CHUNK):
    streams = make_streams(config.seed, config.replication)
    t = 0
    while t < config.horizon:
        size = min(chunk, config.horizon - t)
        yield t, draw_chunk(config, streams, size)
        t += size


def growth_verdict(config: SystemConfig, first_sum: float, last_sum: float) -> tuple[bool, float]:
    """Flag runs whose last-decile mean total queue dwarfs the first decile's.

    The first-decile mean is floored at 1 job so near-empty systems are never
    flagged.
    """
    decile = config.horizon // 10
    if decile == 0:
        return False, float("nan")
    first = first_sum / decile
    last = last_sum / decile
    ratio = last / max(first, 1.0)
    return ratio > config.guard_factor, ratio


def iterate(config: SystemConfig, state: SystemState | None = None):
    """Yield ``(state_after, outcome)`` for every slot using the reference ``step``."""
    state = state or SystemState.initial(config.n)
    mu = np.asarray(config.mu)
    for t0, (a, s, u) in _chunks(config):
        for i in range(len(a)):
            state, outcome = step(state, int(a[i]), config.policy, s[i], u[i], mu)
            yield state, outcome


def run_reference(config: SystemConfig) -> RunStatistics:
    """Pure-Python fold of ``step``; slow, used to check ``run``."""
    acc = Accumulator(config.n, config.lam, config.measured_slots, config.batches)
    decile = config.horizon // 10
    first = last = 0
    mem_size = 0
    for state, outcome in iterate(config):
        total = int(state.q.sum())
        if outcome.t < decile:
            first += total
        if outcome.t >= config.horizon - decile:
            last += total
        if outcome.t >= config.warmup:
            acc.accumulate(outcome, state.q, mem_size, config.warmup)
        mem_size = len(state.mem.ids)
    flag, ratio = growth_verdict(config, first, last)
    return acc.finish(flag, ratio)


def run(config: SystemConfig, chunk: int = CHUNK) -> RunStatistics:
    """Simulate ``config.horizon`` slots and return post-warmup statistics."""
    n = config.n
    pol = config.policy
    mu = np.asarray(config.mu, dtype=np.float64)
    q = np.zeros(n, dtype=np.int64)
    fslot = np.zeros((n, 64), dtype=np.int64)
    fcnt = np.zeros((n, 64), dtype=np.int64)
    fhead = np.zeros(n, dtype=np.int64)
    flen = np.zeros(n, dtype=np.int64)
    in_mem = np.zeros(n, dtype=np.bool_)
    reported = np.zeros(n, dtype=np.bool_)
    scal = np.zeros(3, dtype=np.int64)
    m = max(pol.m, 1)
    st_srv = np.zeros(m, dtype=np.int64)
    st_len = np.zeros(m, dtype=np.int64)
    acc = np.zeros(_kernel.N_ACC, dtype=np.int64)
    b_resp = np.zeros(config.batches, dtype=np.int64)
    b_cnt = np.zeros(config.batches, dtype=np.int64)
    b_q = np.zeros(config.batches, dtype=np.int64)
    mem_hist = np.zeros(n + 1, dtype=np.int64)
    dec = np.zeros(2, dtype=np.int64)
    for t0, (a, s, u) in _chunks(config, chunk):
        fslot, fcnt = _kernel.run_chunk(
            t0, a, s, u, pol.code, pol.d, pol.m, pol.T, mu,
            q, fslot, fcnt, fhead, flen, in_mem, reported, scal, st_srv, st_len,
            config.warmup, config.horizon, config.batches, acc, b_resp, b_cnt, b_q, mem_hist, dec,
        )
    k = _kernel
    flag, ratio = growth_verdict(config, dec[0], dec[1])
    return finish(
        acc[k.A_SLOTS], acc[k.A_QSUM], acc[k.A_RSUM], acc[k.A_RCNT], acc[k.A_PUSH], acc[k.A_PULL],
        acc[k.A_EVENTS], acc[k.A_ARR], acc[k.A_UNUSED], b_resp, b_cnt, b_q, mem_hist,
        config.lam, config.measured_slots, flag, ratio,
    )
