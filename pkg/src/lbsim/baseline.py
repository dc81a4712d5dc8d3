"""Resource-pooled single-queue comparator.

One FCFS queue receives every arrival and serves the sum of the N offered
services.  Driven by the same seed as an N-queue run it sees identical
arrival and service samples, so ``q(t) <= sum_n Q_n(t)`` holds slot by slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernel
from .engine import SystemConfig, _chunks, growth_verdict, run
from .metrics import HeavyTrafficPoint, RunStatistics, batch_ci, zeta


@dataclass(frozen=True)
class PooledState:
    q: int = 0
    u: int = 0


def pooled_step(state: PooledState, a: int, s: int) -> PooledState:
    x = state.q + a - s
    return PooledState(max(x, 0), max(-x, 0))


@dataclass
class PooledStatistics(RunStatistics):
    mean_unused_sq: float = 0.0


def pooled_run(config: SystemConfig, chunk: int | None = None) -> PooledStatistics:
    """Run the pooled queue on the arrival/service streams of ``config``.

    Per-job response times are not tracked; ``mean_response_perjob`` is the
    Little's-law value, which equals the FCFS per-job mean up to jobs still
    queued at the horizon.
    """
    acc = np.zeros(5, dtype=np.int64)
    b_q = np.zeros(config.batches, dtype=np.int64)
    dec = np.zeros(2, dtype=np.int64)
    state = np.zeros(1, dtype=np.int64)
    kw = {} if chunk is None else {"chunk": chunk}
    for t0, (a, s, _) in _chunks(config, **kw):
        _kernel.pooled_chunk(t0, a, s, state, config.warmup, config.horizon, config.batches, acc, b_q, dec)
    slots = int(acc[4])
    edges = [k * config.measured_slots // config.batches for k in range(config.batches + 1)]
    qmeans = [float(x / z) for x, z in zip(b_q, np.diff(edges))]
    mean_q = acc[0] / slots
    little = mean_q / config.lam if config.lam > 0 else 0.0
    _, hw = batch_ci(qmeans)
    flag, ratio = growth_verdict(config, dec[0], dec[1])
    return PooledStatistics(
        mean_total_queue=float(mean_q),
        mean_response_perjob=little,
        mean_response_little=little,
        msgs_push_per_arrival=0.0,
        msgs_pull_per_arrival=0.0,
        ci_halfwidth=hw / config.lam if config.lam > 0 else float("nan"),
        batch_means=[x / config.lam if config.lam > 0 else 0.0 for x in qmeans],
        slots_simulated=slots,
        jobs_completed=0,
        unstable_suspect=flag,
        arrivals=int(acc[3]),
        mean_unused=float(acc[1] / slots),
        queue_batch_means=qmeans,
        growth_ratio=ratio,
        mean_unused_sq=float(acc[2] / slots),
    )


@dataclass
class PairedRun:
    policy: RunStatistics
    pooled: PooledStatistics

    @property
    def gap_batches(self) -> list:
        return [a - b for a, b in zip(self.policy.queue_batch_means, self.pooled.queue_batch_means)]

    @property
    def gap(self) -> tuple[float, float]:
        """Mean and CI halfwidth of (policy total queue - pooled queue)."""
        return batch_ci(self.gap_batches)


def paired_run(config: SystemConfig) -> PairedRun:
    """N-queue run and pooled run sharing one seed (hence identical samples)."""
    return PairedRun(run(config), pooled_run(config))


def coupled_heavy_traffic_point(config: SystemConfig, pair: PairedRun) -> HeavyTrafficPoint:
    """Heavy-traffic point using the pooled queue as a control variate.

    The pooled queue's stationary mean satisfies
    ``eps * E[q] = zeta / 2 - E[u^2] / 2`` exactly, so
    ``eps * (mean(sum Q) - mean(q)) + zeta / 2 - mean(u^2) / 2`` estimates
    ``eps * E[sum Q]`` with only the (small) coupled gap left to noise.
    """
    eps = config.epsilon
    if not config.has_gap:
        raise ValueError(f"capacity gap must be positive, got {eps}")
    z = zeta(config.arrival.variance, float(config.service.variances.sum()), eps)
    gap = pair.policy.mean_total_queue - pair.pooled.mean_total_queue
    scaled = eps * gap + z / 2 - pair.pooled.mean_unused_sq / 2
    return HeavyTrafficPoint(eps, scaled, z / 2, raw_scaled_queue=eps * pair.policy.mean_total_queue)


def pooled_limit(config: SystemConfig) -> float:
    """zeta/2 for the config: the heavy-traffic limit of eps * E[q]."""
    return zeta(config.arrival.variance, float(config.service.variances.sum()), config.epsilon) / 2

