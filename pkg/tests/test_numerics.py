import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asd.errors import ConfigurationError, NumericError
from asd.numerics import (
    AdamState,
    GradReport,
    MlpSpec,
    ParamVector,
    adam_update,
    backward,
    backward_from_feature,
    check_gradients,
    finite_difference_grad,
    load_checkpoint,
    mlp_forward,
    mlp_forward_with_feature,
    mlp_init,
    save_checkpoint,
)


def hand_rolled_mlp(params, x, spec):
    """Independent forward pass using only segment views and np.dot."""
    a = np.asarray(x, dtype=float)
    for i in range(len(spec.hidden)):
        a = np.tanh(np.dot(params.segment(f"W{i}"), a) + params.segment(f"b{i}"))
    k = len(spec.hidden)
    y = np.dot(params.segment(f"W{k}"), a) + params.segment(f"b{k}")
    if spec.skip:
        y = y + np.dot(params.segment("S"), np.asarray(x, dtype=float))
    return y


# ---------------------------------------------------------------------------
# ParamVector
# ---------------------------------------------------------------------------


def test_param_vector_layout_must_cover_values():
    with pytest.raises(ConfigurationError):
        ParamVector(np.zeros(5), (("w", (2, 2)),))


def test_param_vector_rejects_non_finite():
    with pytest.raises(NumericError):
        ParamVector(np.array([1.0, np.nan]), (("w", (2,)),))


def test_param_vector_segment_views_share_memory():
    pv = ParamVector.zeros((("a", (2, 2)), ("b", (3,))))
    pv.segment("a")[...] = 1.0
    assert pv.values[:4].sum() == 4.0
    assert pv.segment("b").shape == (3,)


# ---------------------------------------------------------------------------
# MLP forward
# ---------------------------------------------------------------------------


def test_zero_weight_net_outputs_bias():
    spec = MlpSpec(4, (5,), 3, skip=True)
    params = ParamVector.zeros(spec.layout())
    params.segment("b1")[...] = [1.0, -2.0, 0.5]
    out = mlp_forward(params, np.array([3.0, 1.0, -1.0, 2.0]), spec)
    np.testing.assert_array_equal(out, [1.0, -2.0, 0.5])


def test_identity_single_linear_layer():
    spec = MlpSpec(3, (), 3, skip=False)
    params = ParamVector.zeros(spec.layout())
    params.segment("W0")[...] = np.eye(3)
    v = np.array([0.3, -1.2, 4.0])
    np.testing.assert_array_equal(mlp_forward(params, v, spec), v)


def test_two_layer_net_matches_hand_rolled_oracle():
    spec = MlpSpec(4, (6,), 2, skip=False)
    params = mlp_init(spec, np.random.default_rng(0))
    x = np.ones(4)
    got = mlp_forward(params, x, spec)
    np.testing.assert_allclose(got, hand_rolled_mlp(params, x, spec), rtol=1e-14)


def test_forward_batched_rows_match_single(rng):
    spec = MlpSpec(4, (5, 5), 2, skip=True)
    params = mlp_init(spec, rng)
    xs = rng.standard_normal((7, 4))
    batched = mlp_forward(params, xs, spec)
    # gemm vs gemv BLAS paths differ in the last bits
    for i in range(7):
        np.testing.assert_allclose(
            batched[i], mlp_forward(params, xs[i], spec), rtol=1e-12, atol=1e-15
        )


def test_forward_shape_mismatch_raises(rng):
    spec = MlpSpec(4, (5,), 2)
    params = mlp_init(spec, rng)
    with pytest.raises(ConfigurationError):
        mlp_forward(params, np.zeros(3), spec)
    other = mlp_init(MlpSpec(4, (6,), 2), rng)
    with pytest.raises(ConfigurationError):
        mlp_forward(other, np.zeros(4), spec)


def test_feature_is_last_hidden_activation(rng):
    spec = MlpSpec(3, (4, 5), 2, skip=True)
    params = mlp_init(spec, rng)
    x = rng.standard_normal(3)
    y, feat = mlp_forward_with_feature(params, x, spec)
    assert feat.shape == (5,)
    # reconstruct the output from the feature by hand
    k = len(spec.hidden)
    expect = params.segment(f"W{k}") @ feat + params.segment(f"b{k}") + params.segment("S") @ x
    np.testing.assert_allclose(y, expect, rtol=1e-14)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def test_linear_layer_gradients_closed_form(rng):
    spec = MlpSpec(3, (), 2, skip=False)
    params = mlp_init(spec, rng)
    x = rng.standard_normal(3)
    u = rng.standard_normal(2)
    grads, dx = backward(params, x, spec, u)
    np.testing.assert_allclose(grads.segment("W0"), np.outer(u, x), rtol=1e-14)
    np.testing.assert_allclose(grads.segment("b0"), u, rtol=1e-14)
    np.testing.assert_allclose(dx, params.segment("W0").T @ u, rtol=1e-14)


def test_zero_upstream_gives_zero_gradients(rng):
    spec = MlpSpec(3, (5,), 2, skip=True)
    params = mlp_init(spec, rng)
    grads, dx = backward(params, rng.standard_normal(3), spec, np.zeros(2))
    assert not grads.values.any()
    assert not dx.any()


def test_backward_matches_finite_differences(rng):
    spec = MlpSpec(3, (6, 4), 2, skip=True)
    params = mlp_init(spec, rng)
    x = rng.standard_normal(3)
    u = rng.standard_normal(2)
    analytic, _ = backward(params, x, spec, u)
    report = check_gradients(lambda p: float(u @ mlp_forward(p, x, spec)), analytic, params)
    assert report.max_rel_err < 1e-4


def test_backward_input_grad_matches_finite_differences(rng):
    spec = MlpSpec(3, (6,), 2, skip=True)
    params = mlp_init(spec, rng)
    x = rng.standard_normal(3)
    u = rng.standard_normal(2)
    _, dx = backward(params, x, spec, u)
    h = 1e-6
    for i in range(3):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        num = (u @ mlp_forward(params, xp, spec) - u @ mlp_forward(params, xm, spec)) / (2 * h)
        assert abs(num - dx[i]) < 1e-6 * max(1.0, abs(dx[i]))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_backward_linear_in_upstream(seed):
    rng = np.random.default_rng(seed)
    spec = MlpSpec(3, (4,), 2, skip=True)
    params = mlp_init(spec, rng)
    x = rng.standard_normal(3)
    u1 = rng.standard_normal(2)
    u2 = rng.standard_normal(2)
    g1, d1 = backward(params, x, spec, u1)
    g2, d2 = backward(params, x, spec, u2)
    g12, d12 = backward(params, x, spec, u1 + u2)
    np.testing.assert_allclose(g12.values, g1.values + g2.values, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(d12, d1 + d2, rtol=1e-12, atol=1e-12)


def test_backward_batched_sums_rows(rng):
    spec = MlpSpec(3, (4,), 2, skip=False)
    params = mlp_init(spec, rng)
    xs = rng.standard_normal((5, 3))
    us = rng.standard_normal((5, 2))
    g_batch, dx_batch = backward(params, xs, spec, us)
    g_sum = np.zeros_like(g_batch.values)
    for i in range(5):
        gi, di = backward(params, xs[i], spec, us[i])
        g_sum += gi.values
        np.testing.assert_allclose(dx_batch[i], di, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(g_batch.values, g_sum, rtol=1e-12, atol=1e-14)


def test_backward_from_feature_matches_finite_differences(rng):
    spec = MlpSpec(3, (5, 4), 2, skip=True)
    params = mlp_init(spec, rng)
    x = rng.standard_normal(3)
    u = rng.standard_normal(4)
    dx = backward_from_feature(params, x, spec, u)
    h = 1e-6
    from asd.numerics import mlp_feature

    for i in range(3):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        num = (u @ mlp_feature(params, xp, spec) - u @ mlp_feature(params, xm, spec)) / (2 * h)
        assert abs(num - dx[i]) < 1e-6 * max(1.0, abs(dx[i]))


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def test_fd_quadratic_gradient_is_p():
    layout = (("p", (6,)),)
    p = ParamVector(np.linspace(-1, 2, 6), layout)
    grad = finite_difference_grad(lambda q: 0.5 * float(q.values @ q.values), p)
    np.testing.assert_allclose(grad.values, p.values, atol=1e-8)


def test_fd_constant_objective_is_zero():
    p = ParamVector(np.ones(4), (("p", (4,)),))
    grad = finite_difference_grad(lambda q: 3.25, p)
    np.testing.assert_array_equal(grad.values, np.zeros(4))


def test_fd_rejects_bad_h_and_nan_objective():
    p = ParamVector(np.ones(2), (("p", (2,)),))
    with pytest.raises(ConfigurationError):
        finite_difference_grad(lambda q: 0.0, p, h=0.0)
    with pytest.raises(NumericError):
        finite_difference_grad(lambda q: float("nan"), p)


def test_grad_report_zero_on_matching_segments():
    layout = (("a", (3,)),)
    r = GradReport(ParamVector(np.ones(3), layout), ParamVector(np.ones(3), layout))
    assert r.max_rel_err == 0.0
    r2 = GradReport(ParamVector(np.zeros(3), layout), ParamVector(np.zeros(3), layout))
    assert r2.max_rel_err == 0.0


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_keeps_params():
    layout = (("p", (4,)),)
    p = ParamVector(np.array([1.0, 2.0, 3.0, 4.0]), layout)
    state = AdamState.zeros(4)
    new_p, new_state = adam_update(p, ParamVector.zeros(layout), state, lr=0.1)
    np.testing.assert_array_equal(new_p.values, p.values)
    assert new_state.step == 1


def test_adam_first_step_closed_form():
    layout = (("p", (3,)),)
    p = ParamVector(np.zeros(3), layout)
    g = np.array([0.5, -2.0, 1e-12])
    eps = 1e-8
    new_p, _ = adam_update(p, ParamVector(g, layout), AdamState.zeros(3), lr=0.01, eps_num=eps)
    # after bias correction m_hat = g, sqrt(v_hat) = |g|
    expect = -0.01 * g / (np.abs(g) + eps)
    np.testing.assert_allclose(new_p.values, expect, rtol=1e-12)


def test_adam_converges_on_quadratic():
    layout = (("p", (5,)),)
    target = np.array([0.3, -1.0, 2.0, 0.0, 0.7])
    p = ParamVector(np.zeros(5), layout)
    state = AdamState.zeros(5)
    for _ in range(300):
        grad = 2.0 * (p.values - target)
        p, state = adam_update(p, ParamVector(grad, layout), state, lr=0.05)
    assert np.max(np.abs(p.values - target)) < 1e-3


def test_adam_aborts_on_non_finite_gradient():
    layout = (("p", (2,)),)
    p = ParamVector(np.zeros(2), layout)
    bad = ParamVector(np.array([1.0, 2.0]), layout)
    bad.values[1] = np.inf  # mutate after construction to simulate a blowup
    with pytest.raises(NumericError) as exc:
        adam_update(p, bad, AdamState.zeros(2), lr=0.1)
    assert exc.value.diagnostics["segments"] == ["p"]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    spec = MlpSpec(3, (4,), 2, skip=True)
    params = mlp_init(spec, rng)
    meta = {"role": "teacher", "frame_dim": 3}
    path = tmp_path / "net.ckpt"
    save_checkpoint(str(path), params, meta)
    loaded, got_meta = load_checkpoint(str(path))
    np.testing.assert_array_equal(loaded.values, params.values)
    assert loaded.layout == params.layout
    assert got_meta == meta


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(ConfigurationError):
        load_checkpoint(str(path))
