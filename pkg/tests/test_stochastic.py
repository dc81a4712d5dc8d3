import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lbsim.stochastic import (ClassA, Constant, PoissonTruncated, ServiceSpec, TwoPoint,
                              default_cap, make_streams, process_from_dict, process_to_dict,
                              sample_arrival, sample_service)

M = 1_000_000


def rng(seed=0):
    return np.random.default_rng(seed)


def test_constant_is_constant():
    x = Constant(3).sample(rng(), 1000)
    assert (x == 3).all()
    assert sample_arrival(Constant(3), rng()) == 3


def test_bursty_arrival_mean():
    p = TwoPoint.with_mean(12, 11.88)
    x = p.sample(rng(1), M)
    assert set(np.unique(x)) <= {0, 12}
    assert abs(x.mean() - 11.88) / 11.88 < 0.01


def test_bursty_service_mean():
    x = TwoPoint(10, 0.1).sample(rng(2), M)
    assert abs(x.mean() - 1.0) < 0.01
    assert x.max() <= 10


def test_poisson_truncated_mean_and_cap():
    p = PoissonTruncated(5.0, 64)
    x = p.sample(rng(3), M)
    assert abs(x.mean() - 5.0) / 5.0 < 0.005
    assert x.max() <= 64
    assert p.truncation_bias < 1e-20


def test_unit_constant_service():
    assert sample_service(Constant(1), rng()) == 1


@pytest.mark.parametrize("p", [
    PoissonTruncated(0.7), PoissonTruncated(11.88), PoissonTruncated(54.0), PoissonTruncated(3.0, 4),
    TwoPoint(12, 0.4), TwoPoint(10, 0.1), ClassA(0.8, 1.98), Constant(2),
])
def test_moments_within_three_standard_errors(p):
    x = p.sample(rng(7), M)
    assert x.min() >= 0 and x.max() <= p.bound
    if p.variance == 0:
        assert (x == p.mean).all()
        return
    se_mean = math.sqrt(p.variance / M)
    assert abs(x.mean() - p.mean) < 3 * se_mean
    # fourth central moment bounds the standard error of the sample variance
    m4 = np.mean((x - p.mean) ** 4)
    se_var = math.sqrt(max(m4 - p.variance**2, 0) / M)
    assert abs(x.var() - p.variance) < 3 * se_var + 1e-12


def test_clamped_moments_account_for_the_cap():
    p = PoissonTruncated(3.0, 4)
    assert p.mean < 3.0
    assert p.truncation_bias > 0


def test_default_cap_grows_with_rate():
    assert default_cap(1.0) == 64
    assert default_cap(54.0) > 64
    assert PoissonTruncated(54.0).truncation_bias < 1e-12


def test_class_a_exact_mean_and_variance_condition():
    a = ClassA(0.8, 1.98)
    assert a.mean == pytest.approx(1.98, abs=1e-12)
    assert a.variance > 8 / 0.8 - 4
    v, lo, hi = a._support
    assert lo + hi == pytest.approx(0.2)
    assert a.bound == v + 1


def test_class_a_rejects_small_variance():
    with pytest.raises(ValueError, match="8/p0"):
        ClassA(0.1, 9.0)


def test_class_a_not_a_service_process():
    with pytest.raises(ValueError):
        ServiceSpec((ClassA(0.8, 2.0),))


def test_service_spec_shape_and_independence():
    spec = ServiceSpec.poisson([1.0, 10.0, 1.0])
    s = spec.sample(rng(4), 200_000)
    assert s.shape == (200_000, 3)
    assert abs(s[:, 1].mean() - 10) < 0.05
    assert abs(np.corrcoef(s[:, 0], s[:, 2])[0, 1]) < 0.01


def test_streams_reproducible_and_distinct():
    a = make_streams(5, 0)["arrival"].random(10)
    b = make_streams(5, 0)["arrival"].random(10)
    c = make_streams(5, 1)["arrival"].random(10)
    d = make_streams(5, 0)["service"].random(10)
    assert (a == b).all()
    assert not np.allclose(a, c)
    assert not np.allclose(a, d)


def test_sampling_is_chunk_invariant():
    p = PoissonTruncated(4.0)
    r1, r2 = rng(9), rng(9)
    whole = p.sample(r1, 1000)
    parts = np.concatenate([p.sample(r2, 300), p.sample(r2, 700)])
    assert (whole == parts).all()


@given(st.floats(0.0, 60.0), st.lists(st.floats(0.0, 1.0, exclude_max=True), min_size=2, max_size=50))
@settings(max_examples=60, deadline=None)
def test_poisson_inverse_cdf_is_monotone(rate, us):
    p = PoissonTruncated(rate)
    us = np.sort(np.array(us))
    x = p.from_uniform(us)
    assert (np.diff(x) >= 0).all()
    assert x.min() >= 0 and x.max() <= p.cap


@pytest.mark.parametrize("p", [PoissonTruncated(2.5, 40), Constant(4), TwoPoint(12, 0.25), ClassA(0.8, 1.98)])
def test_process_dict_roundtrip(p):
    assert process_from_dict(process_to_dict(p)) == p


def test_unknown_process_kind():
    with pytest.raises(ValueError):
        process_from_dict({"kind": "weibull"})
