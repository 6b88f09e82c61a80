import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asd.errors import ConfigurationError, DomainError
from asd.schedule import NoiseSchedule, add_noise, make_schedule, score_from_eps


def test_add_noise_endpoints():
    x0 = np.array([1.0, -2.0, 3.0])
    eps = np.array([0.5, 0.5, 0.5])
    np.testing.assert_array_equal(add_noise(x0, eps, 0.0), x0)
    np.testing.assert_array_equal(add_noise(x0, eps, 1.0), eps)


def test_add_noise_linear_arithmetic():
    out = add_noise(np.array([2.0, 0.0]), np.array([0.0, 2.0]), 0.25)
    np.testing.assert_allclose(out, [1.5, 0.5])


def test_add_noise_rejects_t_outside_unit_interval():
    v = np.zeros(2)
    with pytest.raises(DomainError):
        add_noise(v, v, -0.01)
    with pytest.raises(DomainError):
        add_noise(v, v, 1.01)


def test_add_noise_shape_mismatch():
    with pytest.raises(ConfigurationError):
        add_noise(np.zeros(2), np.zeros(3), 0.5)


def test_add_noise_per_row_t():
    x0 = np.ones((3, 2))
    eps = np.zeros((3, 2))
    out = add_noise(x0, eps, np.array([0.0, 0.5, 1.0]))
    np.testing.assert_allclose(out, [[1.0, 1.0], [0.5, 0.5], [0.0, 0.0]])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 9999), t=st.floats(0.0, 1.0))
def test_add_noise_affine_in_both_arguments(seed, t):
    rng = np.random.default_rng(seed)
    x0, x1, e0, e1 = rng.standard_normal((4, 3))
    a, b = rng.standard_normal(2)
    left = add_noise(a * x0 + b * x1, e0, t)
    right = a * add_noise(x0, e0, t) + b * add_noise(x1, e0, t) - (a + b - 1) * t * e0
    np.testing.assert_allclose(left, right, atol=1e-10)
    left_e = add_noise(x0, a * e0 + b * e1, t)
    right_e = a * add_noise(x0, e0, t) + b * add_noise(x0, e1, t) - (a + b - 1) * (1 - t) * x0
    np.testing.assert_allclose(left_e, right_e, atol=1e-10)


def test_score_from_eps_zero_and_division():
    np.testing.assert_array_equal(score_from_eps(np.zeros(3), 0.7), np.zeros(3))
    np.testing.assert_allclose(score_from_eps(np.array([1.0, -1.0]), 0.5), [-2.0, 2.0])


def test_score_from_eps_rejects_nonpositive_sigma():
    with pytest.raises(DomainError):
        score_from_eps(np.ones(2), 0.0)
    with pytest.raises(DomainError):
        score_from_eps(np.ones(2), -1.0)


def test_make_schedule_four_steps_uniform():
    sched = make_schedule(4)
    assert sched.timesteps == (1.0, 0.75, 0.5, 0.25)


def test_make_schedule_small_cases():
    assert make_schedule(1).timesteps == (1.0,)
    assert make_schedule(2).timesteps == (1.0, 0.5)
    with pytest.raises(DomainError):
        make_schedule(0)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 40))
def test_make_schedule_length_and_strictly_decreasing(n):
    ts = make_schedule(n).timesteps
    assert len(ts) == n
    assert all(ts[i] > ts[i + 1] for i in range(n - 1))
    assert ts[0] == 1.0
    assert all(0.0 < t <= 1.0 for t in ts)


def test_schedule_validation():
    with pytest.raises(ConfigurationError):
        NoiseSchedule((0.9, 0.5))  # must start at 1.0
    with pytest.raises(ConfigurationError):
        NoiseSchedule((1.0, 0.5, 0.5))  # not strictly decreasing
    with pytest.raises(ConfigurationError):
        NoiseSchedule((1.0, 0.0))  # 0 excluded
    with pytest.raises(ConfigurationError):
        NoiseSchedule(())


def test_schedule_format_parse_round_trip():
    sched = make_schedule(4)
    assert sched.format() == "1,0.75,0.5,0.25"
    assert NoiseSchedule.parse(sched.format()) == sched
    assert NoiseSchedule.parse("1.0,0.75,0.5,0.25").timesteps == (1.0, 0.75, 0.5, 0.25)


def test_schedule_prefix():
    sched = make_schedule(4)
    assert sched.prefix(2) == (1.0, 0.75)
    with pytest.raises(DomainError):
        sched.prefix(5)
    with pytest.raises(DomainError):
        sched.prefix(0)
