import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from lbsim.engine import SystemState
from lbsim.policies import MemoryState, dispatch, end_of_slot, parse_policy
from lbsim.stochastic import PoissonTruncated, ServiceSpec, make_streams
from lbsim import tilt
from lbsim.tilt import (DispatchDistribution, canonicalize_ties, classify, delta_vector,
                        drift_checks, inner_drift, memory_prefix_distribution, perp_norm,
                        theoretical_distribution)

from oracles import power_of_d_brute_force, refresh_brute_force

F = Fraction


def sorted_of(q, per_server):
    sigma = tilt.sort_permutation(q)
    return [per_server[s] for s in sigma]


# ---------------------------------------------------------------- closed forms

def test_power_of_d_example():
    d = theoretical_distribution(parse_policy("SQ(2)"), [4, 1, 3, 2])
    assert list(d.P) == [F(1, 2), F(1, 3), F(1, 6), F(0)]
    assert d.sigma == (1, 3, 2, 0)


@pytest.mark.parametrize("n", range(1, 9))
def test_power_of_d_matches_enumeration(n):
    q = list(range(n, 0, -1))
    for d in range(1, n + 1):
        spec = parse_policy(f"SQ({d})")
        assert list(theoretical_distribution(spec, q).P) == sorted_of(q, power_of_d_brute_force(q, d))


@given(st.lists(st.integers(0, 3), min_size=1, max_size=7), st.data())
@settings(max_examples=80, deadline=None)
def test_power_of_d_per_server_with_ties(q, data):
    d = data.draw(st.integers(1, len(q)))
    assert tilt.power_of_d_server_probs(q, d) == power_of_d_brute_force(q, d)


@pytest.mark.parametrize("n", [1, 4, 10])
def test_jsq_closed_form(n):
    P = theoretical_distribution(parse_policy("JSQ"), list(range(n))).P
    assert P == (F(1),) + (F(0),) * (n - 1)


def test_jbt_full_memory_is_uniform():
    n = 6
    d = theoretical_distribution(parse_policy("JBT-2"), [3, 1, 4, 1, 5, 9], mem_dist=[0] * (n - 1) + [1])
    assert d.P == (F(1, n),) * n


def test_jbt_memory_distribution_must_sum_to_one():
    with pytest.raises(ValueError):
        theoretical_distribution(parse_policy("JBT-2"), [1, 2, 3], mem_dist=[0.5, 0.4, 0.0])


def test_eq12_formula():
    pt = [F(0), F(1, 2), F(1, 4), F(1, 4)]  # k = 0..3
    d = memory_prefix_distribution([5, 2, 8], pt)
    assert d.P == (F(1, 2) + F(1, 8) + F(1, 12), F(1, 8) + F(1, 12), F(1, 12))


@given(st.lists(st.integers(0, 4), min_size=2, max_size=6), st.data())
@settings(max_examples=60, deadline=None)
def test_refresh_distribution_matches_enumeration(q, data):
    n = len(q)
    d = data.draw(st.integers(1, n))
    mu = data.draw(st.lists(st.sampled_from([1, 2, 5]), min_size=n, max_size=n))
    for label, weighted in ((f"JBT-{d}", False), (f"JBTG-{d}", True)):
        dist = theoretical_distribution(parse_policy(label), q, mu)
        assert dist.per_server() == refresh_brute_force(q, d, mu, weighted)


def test_refresh_distribution_matches_policy_rules():
    # run the actual refresh + dispatch with random uniforms
    q = [4, 2, 2, 7, 3]
    p = parse_policy("JBT-2", T=1)
    rng = np.random.default_rng(0)
    draws = 30_000
    hits = np.zeros(5)
    for _ in range(draws):
        u = rng.random(p.n_uniforms(5))
        mem, _, _ = end_of_slot(p, q, MemoryState.empty(5), 0, u)
        hits[dispatch(p, q, mem, rng.random(3))[0]] += 1
    exact = np.array([float(x) for x in theoretical_distribution(p, q).per_server()])
    se = np.sqrt(exact * (1 - exact) / draws)
    assert np.all(np.abs(hits / draws - exact) <= 4 * se + 1e-12)


def test_random_and_weighted():
    mu = [1, 3, 1, 5]
    assert theoretical_distribution(parse_policy("Random"), [1, 2, 3, 4]).P == (F(1, 4),) * 4
    w = theoretical_distribution(parse_policy("WRandom"), [9, 2, 3, 4], mu)
    assert w.P == (F(3, 10), F(1, 10), F(5, 10), F(1, 10))


def test_unsupported_closed_form():
    with pytest.raises(ValueError):
        theoretical_distribution(parse_policy("JIQ"), [1, 2])


def test_distribution_invariants_enforced():
    with pytest.raises(ValueError):
        DispatchDistribution((0, 1), (0.5, 0.6), (0, 1))
    with pytest.raises(ValueError):
        DispatchDistribution((0, 1), (0.5, 0.5), (3, 1))


# ---------------------------------------------------------- canonicalization

def test_canonicalize_all_tied():
    d = DispatchDistribution.from_sorted([5, 5, 5, 5], [F(1, 4)] * 4)
    assert canonicalize_ties(d).P == (F(1), F(0), F(0), F(0))


def test_canonicalize_distinct_unchanged():
    d = theoretical_distribution(parse_policy("SQ(2)"), [4, 1, 3, 2])
    assert canonicalize_ties(d) == d


def test_canonicalize_partial_tie():
    d = DispatchDistribution.from_sorted([1, 2, 2], [0.2, 0.4, 0.4])
    c = canonicalize_ties(d, [1, 2, 2])
    assert c.P == (0.2, 0.8, 0.0)
    assert float(c.inner()) == pytest.approx(1.8, abs=1e-12)
    assert float(d.inner()) == pytest.approx(1.8, abs=1e-12)


def test_canonicalize_rejects_mismatched_queue():
    d = DispatchDistribution.from_sorted([1, 2, 2], [0.2, 0.4, 0.4])
    with pytest.raises(ValueError):
        canonicalize_ties(d, [2, 1, 0])


queue_vectors = st.lists(st.integers(0, 6), min_size=2, max_size=8)


@st.composite
def states_with_distribution(draw):
    q = draw(queue_vectors)
    w = draw(st.lists(st.integers(0, 20), min_size=len(q), max_size=len(q)))
    assume(sum(w) > 0)
    P = [F(x, sum(w)) for x in w]
    mu = draw(st.lists(st.sampled_from([1, 2, 3, 10]), min_size=len(q), max_size=len(q)))
    return q, DispatchDistribution.from_sorted(q, P), mu


@given(states_with_distribution())
@settings(max_examples=300, deadline=None)
def test_canonicalize_preserves_mass_and_inner_product(arg):
    q, d, _ = arg
    c = canonicalize_ties(d, q)
    assert sum(c.P) == 1
    assert c.inner() == d.inner()


@given(states_with_distribution())
@settings(max_examples=300, deadline=None)
def test_delta_sums_to_zero(arg):
    _, d, mu = arg
    assert sum(delta_vector(d, mu)) == 0


# ---------------------------------------------------------------- classify

def test_classify_examples():
    mu = [1] * 10
    q = list(range(10, 0, -1))
    jsq = classify(canonicalize_ties(theoretical_distribution(parse_policy("JSQ"), q)), mu)
    assert jsq.delta_tilted and jsq.delta_witness == F(1, 10)
    pod = theoretical_distribution(parse_policy("SQ(3)"), q)
    delta = delta_vector(pod, mu)
    assert delta[0] == F(2, 10) and delta[-1] == F(-1, 10)
    assert classify(pod, mu).delta_witness == F(1, 10)
    rnd = classify(theoretical_distribution(parse_policy("Random"), q), mu)
    assert rnd.verdict == tilt.TILTED and rnd.delta_witness == 0


def test_classify_not_tilted():
    d = DispatchDistribution.from_sorted([1, 2, 3], [F(0), F(1), F(0)])
    assert classify(d, [1, 1, 1]).verdict == tilt.NOT_TILTED


def test_classify_uses_equivalence_class():
    # greedy front-loading alone would make this look untilted
    q = [1, 1, 2, 2]
    d = theoretical_distribution(parse_policy("Random"), q)
    assert not tilt.is_tilted_as_given(canonicalize_ties(d), [1] * 4)
    assert classify(d, [1] * 4).verdict == tilt.TILTED


def test_all_equal_state_is_delta_tilted_for_any_policy():
    d = theoretical_distribution(parse_policy("Random"), [3] * 5)
    assert classify(d, [1] * 5).delta_witness == F(1, 5)


@given(states_with_distribution())
@settings(max_examples=300, deadline=None)
def test_classify_consistent_with_definition(arg):
    q, d, mu = arg
    v = classify(d, mu)
    if tilt.is_tilted_as_given(d, mu) or tilt.is_tilted_as_given(canonicalize_ties(d), mu):
        assert v.tilted
    if v.delta_tilted:
        assert v.tilted and v.delta_witness > 0
    # verdict is a property of the equivalence class
    assert classify(canonicalize_ties(d), mu) == v


@given(states_with_distribution())
@settings(max_examples=300, deadline=None)
def test_tilt_inequalities(arg):
    q, d, mu = arg
    v = classify(d, mu)
    qs = d.q_sorted
    inner = sum(F(x) * y for x, y in zip(qs, delta_vector(d, mu)))
    if v.tilted:
        assert inner <= 0
    if v.delta_tilted:
        assert inner <= -v.delta_witness * (qs[-1] - qs[0])
    assert perp_norm(q) <= math.sqrt(len(q)) * (qs[-1] - qs[0]) + 1e-12


@given(st.lists(st.integers(0, 50), min_size=2, max_size=12))
def test_perp_norm_bound(q):
    assert perp_norm(q) <= math.sqrt(len(q)) * (max(q) - min(q)) + 1e-9


@pytest.mark.parametrize("n,d", [(10, 1), (10, 2), (10, 5), (10, 10), (5, 3), (20, 4)])
def test_jbt_worst_case_witness(n, d):
    q = [9] * n
    q[2] = 4
    dist = theoretical_distribution(parse_policy(f"JBT-{d}"), q)
    w = classify(canonicalize_ties(dist, q), [1] * n).delta_witness
    assert w >= min(F(d, n) * (1 - F(1, n)), F(1, n))


@pytest.mark.parametrize("d", [1, 2, 5])
def test_jbtg_worst_case_witness(d):
    mu = [1] * 5 + [10] * 5
    bound = min(F(d, 10) * (1 - F(10, 55)), F(1, 55))
    for short in range(10):
        q = [9] * 10
        q[short] = 4
        dist = theoretical_distribution(parse_policy(f"JBTG-{d}"), q, mu)
        assert classify(canonicalize_ties(dist, q), mu).delta_witness >= bound


# ---------------------------------------------------------------- drifts

def test_random_drift_closed_form():
    q = [3, 0, 7, 2]
    eps = 0.2
    full, perp = inner_drift(theoretical_distribution(parse_policy("Random"), q), q, [1] * 4, 4 - eps)
    assert full == pytest.approx(-(eps / 4) * sum(q))
    assert perp == pytest.approx(0.0, abs=1e-12)


def test_jsq_drift_against_monte_carlo():
    q = np.array([0, 10])
    mu = [1.0, 1.0]
    eps = 0.3
    lam = 2 - eps
    exact, exact_perp = inner_drift(theoretical_distribution(parse_policy("JSQ"), q), q, mu, lam)
    streams = make_streams(12)
    m = 1_000_000
    arrival = PoissonTruncated(lam)
    a = arrival.sample(streams["arrival"], m)
    s = ServiceSpec.poisson(mu).sample(streams["service"], m)
    u = streams["policy"].random(m)
    state = SystemState.initial(2)
    state.q = q.copy()
    dest, *_ = dispatch(parse_policy("JSQ"), q, state.mem, [u[0]])
    A = np.zeros((m, 2))
    A[:, dest] = a
    samples = (A - s) @ q
    perp_samples = (A - s) @ (q - q.mean())
    assert abs(samples.mean() - exact) <= 3 * samples.std() / math.sqrt(m)
    assert abs(perp_samples.mean() - exact_perp) <= 3 * perp_samples.std() / math.sqrt(m)


@given(st.sampled_from(["JSQ", "SQ(2)", "SQ(3)", "Random", "JBT-2", "JBT-1", "JBTG-2"]),
       st.lists(st.integers(0, 30), min_size=3, max_size=10), st.floats(0.01, 0.5))
@settings(max_examples=200, deadline=None)
def test_drift_bounds_hold(label, q, eps_frac):
    n = len(q)
    policy = parse_policy(label)
    assume(policy.d <= n)
    mu = [1.0] * n
    dist = canonicalize_ties(theoretical_distribution(policy, q, mu), q)
    checks = drift_checks(dist, q, mu, eps_frac * n)
    assert all(c.ok for c in checks), [c for c in checks if not c.ok]


@given(st.lists(st.integers(0, 30), min_size=4, max_size=10), st.floats(0.01, 0.5))
@settings(max_examples=100, deadline=None)
def test_drift_bounds_heterogeneous(q, eps_frac):
    n = len(q)
    mu = [1.0 + 4.0 * (i % 2) for i in range(n)]
    for label in ["JSQ", "JBTG-2", "WRandom"]:
        dist = theoretical_distribution(parse_policy(label), q, mu)
        checks = drift_checks(dist, q, mu, eps_frac * sum(mu))
        assert all(c.ok for c in checks), (label, [c for c in checks if not c.ok])
