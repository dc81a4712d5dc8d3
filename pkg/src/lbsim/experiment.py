"""Scenario files, load/policy sweeps, CSV output and tilt certification."""

from __future__ import annotations

import csv
import io
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .baseline import PairedRun, coupled_heavy_traffic_point, pooled_run
from .engine import SystemConfig, run
from .metrics import HeavyTrafficPoint, RunStatistics, heavy_traffic_point, merge
from .policies import THRESHOLD_KINDS, PolicySpec, parse_policy
from .stochastic import (ClassA, Constant, PoissonTruncated, ServiceSpec, TwoPoint,
                         process_label)
from . import tilt

CSV_COLUMNS = [
    "policy", "N", "rho", "arrival_kind", "service_kind", "T", "d", "m",
    "mean_response", "ci95", "msgs_per_arrival", "eps", "scaled_queue",
    "zeta_half", "ratio", "slots", "seed", "unstable_suspect",
]
OUT_ENV = "LBSIM_OUT"


class ScenarioError(ValueError):
    """Malformed or infeasible scenario."""


@dataclass(frozen=True)
class SweepPoint:
    load: float
    by_eps: bool
    policy: PolicySpec


@dataclass
class Scenario:
    name: str
    mu: tuple
    arrival: dict
    service: dict
    sweep: list
    horizon: int = 2_000_000
    warmup: int | None = None
    batches: int = 30
    replications: int = 1
    seed: int = 1
    outputs: str = "results"
    pooled: bool = False
    stable_regime: bool = True
    guard_factor: float = 5.0

    def __post_init__(self):
        if not self.sweep:
            raise ScenarioError(f"scenario {self.name!r}: empty sweep")
        if self.replications < 1:
            raise ScenarioError("replications must be positive")
        self.mu = tuple(float(x) for x in self.mu)
        if not self.mu or min(self.mu) <= 0:
            raise ScenarioError("service rates must be positive")

    @property
    def n(self) -> int:
        return len(self.mu)

    def points(self) -> list[SweepPoint]:
        out = []
        for entry in self.sweep:
            by_eps = "eps" in entry
            loads = entry.get("eps" if by_eps else "rho")
            policies = entry.get("policies")
            if not loads or not policies:
                raise ScenarioError("each sweep entry needs a nonempty load list and policy list")
            Ts = entry.get("T", [1000])
            ds = entry.get("d", [None])
            for label in policies:
                for d in ds:
                    text = label.format(d=d) if d is not None else label
                    try:
                        base = parse_policy(text)
                    except ValueError as e:
                        raise ScenarioError(str(e)) from None
                    specs = [base.with_T(int(T)) for T in Ts] if base.code in THRESHOLD_KINDS else [base]
                    for spec in specs:
                        for load in loads:
                            out.append(SweepPoint(float(load), by_eps, spec))
        return out

    def config(self, point: SweepPoint, replication: int = 0) -> SystemConfig:
        service = build_service(self.service, self.mu)
        cap = float(service.means.sum())
        lam = cap - point.load if point.by_eps else point.load * cap
        if self.stable_regime and lam >= cap:
            raise ScenarioError(f"load {point.load} reaches capacity {cap:g} in a stable-regime scenario")
        if lam < 0:
            raise ScenarioError(f"negative arrival rate for load {point.load}")
        try:
            return SystemConfig(
                n=self.n, mu=self.mu, arrival=build_arrival(self.arrival, lam), policy=point.policy,
                horizon=self.horizon, seed=self.seed, service=service, warmup=self.warmup,
                batches=self.batches, replication=replication, stable_regime=self.stable_regime,
                guard_factor=self.guard_factor,
            )
        except ValueError as e:
            raise ScenarioError(str(e)) from None


def build_arrival(d: dict, lam: float):
    kind = d.get("kind", "poisson").lower()
    if kind == "poisson":
        return PoissonTruncated(lam, d.get("cap"))
    if kind in ("bursty", "two_point"):
        value = int(d.get("value", 12))
        if lam > value:
            raise ScenarioError(f"bursty arrival value {value} below rate {lam:g}")
        return TwoPoint.with_mean(value, lam)
    if kind in ("class_a", "classa"):
        return ClassA(float(d.get("p0", 0.8)), lam)
    raise ScenarioError(f"unknown arrival kind {kind!r}")


def build_service(d: dict, mu) -> ServiceSpec:
    kind = d.get("kind", "poisson").lower()
    if kind == "poisson":
        return ServiceSpec.poisson(mu, d.get("cap"))
    if kind == "constant":
        if any(float(m) != int(m) for m in mu):
            raise ScenarioError("constant service needs integer rates")
        return ServiceSpec(tuple(Constant(int(m)) for m in mu))
    if kind in ("bursty", "two_point"):
        value = int(d.get("value", 10))
        if max(mu) > value:
            raise ScenarioError(f"bursty service value {value} below a service rate")
        return ServiceSpec(tuple(TwoPoint.with_mean(value, float(m)) for m in mu))
    raise ScenarioError(f"unknown service kind {kind!r}")


def _mu_from(system: dict) -> list:
    if "mu" in system and isinstance(system["mu"], list):
        return system["mu"]
    if "pools" in system:
        return [float(p["rate"]) for p in system["pools"] for _ in range(int(p["count"]))]
    if "n" in system:
        return [float(system.get("mu", 1.0))] * int(system["n"])
    raise ScenarioError("[system] needs mu = [...], pools, or n")


def scenario_from_dict(data: dict, name: str = "scenario") -> Scenario:
    try:
        system = data.get("system", {})
        return Scenario(
            name=data.get("name", name),
            mu=tuple(_mu_from(system)),
            arrival=data.get("arrival", {}),
            service=data.get("service", {}),
            sweep=data.get("sweep", []),
            horizon=int(data.get("horizon", 2_000_000)),
            warmup=data.get("warmup"),
            batches=int(data.get("batches", 30)),
            replications=int(data.get("replications", 1)),
            seed=int(data.get("seed", 1)),
            outputs=data.get("outputs", "results"),
            pooled=bool(data.get("pooled", False)),
            stable_regime=bool(data.get("stable_regime", True)),
            guard_factor=float(data.get("guard_factor", 5.0)),
        )
    except (KeyError, TypeError) as e:
        raise ScenarioError(f"malformed scenario: {e}") from None


def load_scenario(path) -> Scenario:
    """Read a scenario file; a bare name resolves to a bundled scenario."""
    p = Path(path)
    if not p.exists():
        bundled = resources.files("lbsim") / "scenarios" / f"{p.stem}.toml"
        if not bundled.is_file():
            raise ScenarioError(f"no scenario file {path}")
        text = bundled.read_text()
    else:
        text = p.read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ScenarioError(f"{path}: {e}") from None
    scenario = scenario_from_dict(data, p.stem)
    scenario.points()
    return scenario


def bundled_scenarios() -> list[str]:
    root = resources.files("lbsim") / "scenarios"
    return sorted(f.name[:-5] for f in root.iterdir() if f.name.endswith(".toml"))


# ------------------------------------------------------------------ running

@dataclass
class Row:
    policy: str
    n: int
    rho: float
    arrival_kind: str
    service_kind: str
    T: int
    d: int
    m: int
    mean_response: float
    ci95: float
    msgs_per_arrival: float
    eps: float
    scaled_queue: float
    zeta_half: float
    ratio: float
    slots: int
    seed: int
    unstable_suspect: bool

    def values(self) -> list:
        return [self.policy, self.n, _fmt(self.rho), self.arrival_kind, self.service_kind, self.T,
                self.d, self.m, _fmt(self.mean_response), _fmt(self.ci95),
                _fmt(self.msgs_per_arrival), _fmt(self.eps), _fmt(self.scaled_queue),
                _fmt(self.zeta_half), _fmt(self.ratio), self.slots, self.seed,
                int(self.unstable_suspect)]


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.10g}"


def _task(args):
    scenario, point, rep = args
    config = scenario.config(point, rep)
    pooled = pooled_run(config) if scenario.pooled else None
    return run(config), pooled


def _row(config: SystemConfig, policy_label: str, stats: RunStatistics, ht) -> Row:
    p = config.policy
    return Row(
        policy=policy_label, n=config.n, rho=config.rho,
        arrival_kind=process_label(config.arrival),
        service_kind=process_label(config.service.processes[0]),
        T=p.T, d=p.d, m=p.m, mean_response=stats.mean_response_perjob, ci95=stats.ci_halfwidth,
        msgs_per_arrival=stats.msgs_per_arrival, eps=ht.epsilon, scaled_queue=ht.scaled_queue,
        zeta_half=ht.zeta_half, ratio=ht.ratio, slots=stats.slots_simulated, seed=config.seed,
        unstable_suspect=stats.unstable_suspect,
    )


def run_scenario(scenario: Scenario, jobs: int = 1, horizon: int | None = None) -> list[Row]:
    """Run every sweep point and replication; rows come back in sweep order."""
    if horizon is not None:
        scenario = Scenario(**{**scenario.__dict__, "horizon": int(horizon)})
    points = scenario.points()
    for pt in points:
        scenario.config(pt)  # surface config errors before any work starts
    tasks = [(scenario, pt, rep) for pt in points for rep in range(scenario.replications)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_task, tasks))
    else:
        results = [_task(t) for t in tasks]
    rows = []
    R = scenario.replications
    pooled_done = set()
    for i, pt in enumerate(points):
        chunk = results[i * R:(i + 1) * R]
        config = scenario.config(pt)
        stats = merge([r for r, _ in chunk], config.lam)
        if scenario.pooled:
            pooled = [p for _, p in chunk]
            pstats = merge(pooled, config.lam)
            pstats.mean_unused_sq = float(np.mean([p.mean_unused_sq for p in pooled]))
            ht = coupled_heavy_traffic_point(config, PairedRun(stats, pstats))
        else:
            ht = heavy_traffic_point(config, stats) if config.has_gap else _nan_point(config)
        rows.append(_row(config, pt.policy.label, stats, ht))
        key = (pt.load, pt.by_eps)
        if scenario.pooled and key not in pooled_done:
            pooled_done.add(key)
            prow = _row(config, "POOLED", pstats, heavy_traffic_point(config, pstats))
            rows.append(replace(prow, T=1, d=1, m=0))
    return rows


def _nan_point(config):
    nan = float("nan")
    return HeavyTrafficPoint(config.epsilon, nan, nan)


def rows_to_csv(rows: list[Row]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.values())
    return buf.getvalue()


def resolve_out(scenario: Scenario, out: str | None) -> Path:
    path = Path(out or os.environ.get(OUT_ENV) or scenario.outputs)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ScenarioError(f"cannot create output directory {path}: {e}") from None
    if not os.access(path, os.W_OK):
        raise ScenarioError(f"output directory {path} is not writable")
    return path


def write_outputs(scenario: Scenario, rows: list[Row], out: Path, plot: bool = False) -> list[Path]:
    written = [out / f"{scenario.name}.csv"]
    written[0].write_text(rows_to_csv(rows))
    if plot:
        written += write_plot_data(scenario, rows, out)
    return written


def write_plot_data(scenario: Scenario, rows: list[Row], out: Path) -> list[Path]:
    """Two-column files per policy: load vs response, messages and heavy-traffic ratio."""
    series: dict[tuple, list] = {}
    for r in rows:
        x_t = len({row.T for row in rows if row.policy == r.policy}) > 1
        tag = f"{r.policy}_T{r.T}" if x_t else r.policy
        series.setdefault(("response", tag), []).append((r.rho, r.mean_response))
        series.setdefault(("messages", tag), []).append((r.rho, r.msgs_per_arrival))
        if not math.isnan(r.ratio):
            series.setdefault(("ratio", tag), []).append((r.eps, r.ratio))
    written = []
    for (what, tag), pts in series.items():
        safe = "".join(c if c.isalnum() or c in "-_" else "_" for c in tag)
        path = out / f"{scenario.name}_{what}_{safe}.dat"
        path.write_text("".join(f"{_fmt(x)} {_fmt(y)}\n" for x, y in sorted(pts)))
        written.append(path)
    return written


# ------------------------------------------------------------- certification

CERTIFIABLE = ("jsq", "pod", "random", "weighted_random", "jbt", "jbtg")


@dataclass
class CertifyReport:
    policy: str
    n: int
    states: int
    tilted: int
    delta_tilted: int
    min_witness: Fraction
    delta_first_range: tuple
    bound: Fraction | None
    violations: list = field(default_factory=list)
    checks: int = 0

    @property
    def tilted_fraction(self) -> float:
        return self.tilted / self.states

    @property
    def delta_fraction(self) -> float:
        return self.delta_tilted / self.states

    @property
    def ok(self) -> bool:
        if self.violations or self.tilted != self.states:
            return False
        if self.bound is None:
            return True
        return self.delta_tilted == self.states and self.min_witness >= self.bound

    def lines(self) -> list[str]:
        lo, hi = self.delta_first_range
        out = [
            f"policy {self.policy}  N={self.n}  states={self.states}",
            f"tilted {self.tilted_fraction:.1%}  delta-tilted {self.delta_fraction:.1%}",
            f"min delta witness {float(self.min_witness):.6g}"
            + ("" if self.bound is None else f"  (bound {float(self.bound):.6g})"),
            f"Delta_1 as given: min {float(lo):.6g}  max {float(hi):.6g}",
            f"drift inequality checks {self.checks}, violations {len(self.violations)}",
        ]
        out += [f"  violation: {v}" for v in self.violations[:10]]
        out.append("PASS" if self.ok else "FAIL")
        return out


def witness_bound(policy: PolicySpec, mu) -> Fraction | None:
    """Guaranteed delta for the policy, or None when none is claimed."""
    mu = [Fraction(float(x)) for x in mu]
    n = len(mu)
    total = sum(mu)
    homogeneous = len(set(mu)) == 1
    if policy.kind == "jsq":
        return min(mu) / total
    if policy.kind == "pod" and homogeneous and policy.d > 1:
        return Fraction(1, n)
    if policy.kind == "jbt" and homogeneous:
        return min(Fraction(policy.d, n) * (1 - Fraction(1, n)), Fraction(1, n))
    if policy.kind == "jbtg":
        return min(Fraction(policy.d, n) * (1 - max(mu) / total), min(mu) / total)
    return None


def adversarial_states(n: int, low: int = 3, high: int = 9) -> list[np.ndarray]:
    """One short queue among equal long ones, and one long among equal short ones."""
    states = []
    for s in range(n):
        q = np.full(n, high)
        q[s] = low
        states.append(q)
        q = np.full(n, low)
        q[s] = high
        states.append(q)
    return states


def random_states(n: int, trials: int, rng: np.random.Generator, top: int | None = None) -> list[np.ndarray]:
    """Random non-constant queue vectors (ties allowed)."""
    top = top or 3 * n
    out = []
    while len(out) < trials:
        q = rng.integers(0, top + 1, n)
        if q.min() != q.max():
            out.append(q)
    return out


def certify(policy: str | PolicySpec, n: int, mu=None, trials: int = 1000, seed: int = 0,
            eps_fraction: float = 0.05) -> CertifyReport:
    """Classify the policy's dispatch distribution on random and adversarial states.

    For the threshold policies the distribution is the exact one in the slot
    after a refresh.  Drift inequalities are evaluated at
    ``lambda = (1 - eps_fraction) * mu_total``.
    """
    spec = parse_policy(policy) if isinstance(policy, str) else policy
    if spec.kind not in CERTIFIABLE:
        raise ValueError(f"certify does not support {spec.label}")
    mu = [1.0] * n if mu is None else [float(x) for x in mu]
    if len(mu) != n or n < 2:
        raise ValueError("need N >= 2 and one rate per server")
    spec.validate(n)
    rng = np.random.default_rng(seed)
    states = random_states(n, trials, rng) + adversarial_states(n)
    eps = eps_fraction * sum(mu)
    tilted_count = delta_count = checks = 0
    min_w = None
    d1 = []
    violations = []
    for q in states:
        dist = tilt.theoretical_distribution(spec, q, mu)
        canon = tilt.canonicalize_ties(dist, q)
        verdict = tilt.classify(canon, mu)
        d1.append(tilt.delta_vector(dist, mu)[0])
        tilted_count += verdict.tilted
        delta_count += verdict.delta_tilted
        w = verdict.delta_witness if verdict.delta_tilted else Fraction(0)
        min_w = w if min_w is None else min(min_w, w)
        for c in tilt.drift_checks(canon, q, mu, eps, verdict):
            checks += 1
            if not c.ok:
                violations.append(f"{c.name} at Q={q.tolist()}: {c.lhs:.6g} > {c.rhs:.6g}")
    return CertifyReport(
        policy=spec.label, n=n, states=len(states), tilted=tilted_count, delta_tilted=delta_count,
        min_witness=min_w, delta_first_range=(min(d1), max(d1)), bound=witness_bound(spec, mu),
        violations=violations, checks=checks,
    )


def read_rates(path) -> list[float]:
    """Service rates from a TOML file (``mu = [...]`` or a [system] table) or plain text."""
    p = Path(path)
    text = p.read_text()
    if p.suffix == ".toml":
        data = tomllib.loads(text)
        return [float(x) for x in _mu_from(data.get("system", data))]
    return [float(x) for x in text.replace(",", " ").split()]
