"""Run statistics, batch-means confidence intervals and heavy-traffic points."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats


@dataclass
class RunStatistics:
    mean_total_queue: float
    mean_response_perjob: float
    mean_response_little: float
    msgs_push_per_arrival: float
    msgs_pull_per_arrival: float
    ci_halfwidth: float
    batch_means: list
    slots_simulated: int
    jobs_completed: int
    unstable_suspect: bool
    arrivals: int = 0
    arrival_events: int = 0
    mean_unused: float = 0.0
    queue_batch_means: list = field(default_factory=list)
    memory_histogram: list = field(default_factory=list)
    growth_ratio: float = float("nan")

    @property
    def msgs_per_arrival(self) -> float:
        return self.msgs_push_per_arrival + self.msgs_pull_per_arrival

    @property
    def ci_defined(self) -> bool:
        return len(self.batch_means) >= 2 and not math.isnan(self.ci_halfwidth)

    def to_dict(self) -> dict:
        return asdict(self)


def batch_ci(batch_means, level: float = 0.95) -> tuple[float, float]:
    """Student-t interval over (assumed i.i.d.) batch means.

    Returns ``(mean, halfwidth)``; the halfwidth is NaN for fewer than two
    batches.
    """
    x = np.asarray(batch_means, dtype=float)
    if x.size == 0:
        return float("nan"), float("nan")
    mean = math.fsum(x) / x.size
    if x.size < 2:
        return mean, float("nan")
    sd = 0.0 if np.ptp(x) == 0 else float(x.std(ddof=1))
    t = stats.t.ppf(0.5 + level / 2, x.size - 1)
    return mean, float(t * sd / math.sqrt(x.size))


class Accumulator:
    """Running sums for one run; fed post-warmup slots only.

    The same sums are produced by the compiled engine, so ``finish`` is
    shared by both paths.
    """

    def __init__(self, n: int, lam: float, measured_slots: int, batches: int = 30):
        self.n = n
        self.lam = lam
        self.measured = measured_slots
        self.batches = batches
        self.slots = 0
        self.queue_sum = 0
        self.resp_sum = 0
        self.resp_count = 0
        self.push = 0
        self.pull = 0
        self.arrival_events = 0
        self.arrivals = 0
        self.unused = 0
        self.b_resp = np.zeros(batches, dtype=np.int64)
        self.b_count = np.zeros(batches, dtype=np.int64)
        self.b_queue = np.zeros(batches, dtype=np.int64)
        self.mem_hist = np.zeros(n + 1, dtype=np.int64)

    def batch_of(self, k: int) -> int:
        return k * self.batches // self.measured

    def accumulate(self, outcome, q, mem_size: int | None = None, warmup: int = 0) -> None:
        b = self.batch_of(self.slots)
        total = int(sum(q))
        self.queue_sum += total
        self.b_queue[b] += total
        self.push += outcome.push_msgs
        self.pull += outcome.pull_msgs
        self.unused += int(sum(outcome.U))
        if outcome.a_total > 0:
            self.arrival_events += 1
            self.arrivals += outcome.a_total
            if mem_size is not None:
                self.mem_hist[mem_size] += 1
        for _, r in outcome.departures:
            if outcome.t - r < warmup:
                continue
            self.resp_sum += r
            self.resp_count += 1
            self.b_resp[b] += r
            self.b_count[b] += 1
        self.slots += 1

    def finish(self, unstable_suspect: bool = False, growth_ratio: float = float("nan")) -> RunStatistics:
        return finish(
            self.slots, self.queue_sum, self.resp_sum, self.resp_count, self.push, self.pull,
            self.arrival_events, self.arrivals, self.unused, self.b_resp, self.b_count,
            self.b_queue, self.mem_hist, self.lam, self.measured, unstable_suspect, growth_ratio,
        )


def finish(slots, queue_sum, resp_sum, resp_count, push, pull, arrival_events, arrivals,
           unused, b_resp, b_count, b_queue, mem_hist, lam, measured, unstable_suspect,
           growth_ratio=float("nan")) -> RunStatistics:
    mean_q = queue_sum / slots if slots else 0.0
    mean_r = resp_sum / resp_count if resp_count else 0.0
    batch_means = [float(r / c) if c else float("nan") for r, c in zip(b_resp, b_count)]
    batches = len(b_queue)
    # slots per batch differ by at most one
    edges = [k * measured // batches for k in range(batches + 1)]
    sizes = np.diff(edges)
    qmeans = [float(s / z) if z else float("nan") for s, z in zip(b_queue, sizes)]
    valid = [x for x in batch_means if not math.isnan(x)]
    _, hw = batch_ci(valid) if len(valid) == len(batch_means) else (0.0, float("nan"))
    return RunStatistics(
        mean_total_queue=mean_q,
        mean_response_perjob=mean_r,
        mean_response_little=mean_q / lam if lam > 0 else 0.0,
        msgs_push_per_arrival=push / arrival_events if arrival_events else 0.0,
        msgs_pull_per_arrival=pull / arrival_events if arrival_events else 0.0,
        ci_halfwidth=hw,
        batch_means=batch_means,
        slots_simulated=int(slots),
        jobs_completed=int(resp_count),
        unstable_suspect=bool(unstable_suspect),
        arrivals=int(arrivals),
        arrival_events=int(arrival_events),
        mean_unused=unused / slots if slots else 0.0,
        queue_batch_means=qmeans,
        memory_histogram=[int(x) for x in mem_hist],
        growth_ratio=float(growth_ratio),
    )


def merge(runs: list[RunStatistics], lam: float) -> RunStatistics:
    """Combine replications: slot-weighted means, pooled batch means."""
    if not runs:
        raise ValueError("nothing to merge")
    slots = sum(r.slots_simulated for r in runs)
    jobs = sum(r.jobs_completed for r in runs)
    events = sum(r.arrival_events for r in runs)
    mean_q = sum(r.mean_total_queue * r.slots_simulated for r in runs) / slots if slots else 0.0
    mean_r = sum(r.mean_response_perjob * r.jobs_completed for r in runs) / jobs if jobs else 0.0
    push = sum(r.msgs_push_per_arrival * r.arrival_events for r in runs)
    pull = sum(r.msgs_pull_per_arrival * r.arrival_events for r in runs)
    pooled = [x for r in runs for x in r.batch_means]
    qpooled = [x for r in runs for x in r.queue_batch_means]
    _, hw = batch_ci(pooled) if not any(math.isnan(x) for x in pooled) else (0.0, float("nan"))
    hist = np.sum([np.asarray(r.memory_histogram) for r in runs], axis=0)
    return RunStatistics(
        mean_total_queue=mean_q,
        mean_response_perjob=mean_r,
        mean_response_little=mean_q / lam if lam > 0 else 0.0,
        msgs_push_per_arrival=push / events if events else 0.0,
        msgs_pull_per_arrival=pull / events if events else 0.0,
        ci_halfwidth=hw,
        batch_means=pooled,
        slots_simulated=slots,
        jobs_completed=jobs,
        unstable_suspect=any(r.unstable_suspect for r in runs),
        arrivals=sum(r.arrivals for r in runs),
        arrival_events=events,
        mean_unused=sum(r.mean_unused * r.slots_simulated for r in runs) / slots if slots else 0.0,
        queue_batch_means=qpooled,
        memory_histogram=[int(x) for x in hist],
        growth_ratio=max(r.growth_ratio for r in runs),
    )


def queue_ci(run: RunStatistics) -> tuple[float, float]:
    return batch_ci(run.queue_batch_means)


@dataclass(frozen=True)
class HeavyTrafficPoint:
    epsilon: float
    scaled_queue: float
    zeta_half: float
    raw_scaled_queue: float = float("nan")

    @property
    def ratio(self) -> float:
        return self.scaled_queue / self.zeta_half


def zeta(arrival_variance: float, service_variance_total: float, epsilon: float) -> float:
    return arrival_variance + service_variance_total + epsilon**2


def heavy_traffic_point(config, run: RunStatistics) -> HeavyTrafficPoint:
    """Scale the measured mean total queue by the capacity gap.

    ``ratio`` near 1 means the policy matches the resource-pooled system's
    heavy-traffic constant.
    """
    eps = config.epsilon
    if not config.has_gap:
        raise ValueError(f"capacity gap must be positive, got {eps}")
    z = zeta(config.arrival.variance, float(config.service.variances.sum()), eps)
    scaled = eps * run.mean_total_queue
    return HeavyTrafficPoint(eps, scaled, z / 2, raw_scaled_queue=scaled)
