import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rawflow import flowmatch as fm
from rawflow import numerics as nx
from rawflow.errors import DimensionError, PreconditionError

TS = [0.0, 0.25, 0.5, 0.9, 0.99]


def scalar(x):
    return float(nx._data(x))


def test_interpolate_examples(rng):
    x0, x1 = rng.standard_normal(5), rng.standard_normal(5)
    np.testing.assert_array_equal(fm.interpolate(x0, x1, 0.0), x0)
    np.testing.assert_array_equal(fm.interpolate(x0, x1, 1.0), x1)
    assert fm.interpolate(np.zeros(1), np.full(1, 2.0), 0.5)[0] == 1.0
    np.testing.assert_allclose(fm.interpolate(x0, x1, 0.3), 0.7 * x0 + 0.3 * x1, atol=1e-7)


def test_interpolate_per_item_t(rng):
    x0, x1 = rng.standard_normal((3, 4, 2)), rng.standard_normal((3, 4, 2))
    t = np.array([0.1, 0.5, 0.9])
    out = fm.interpolate(x0, x1, t)
    for i in range(3):
        np.testing.assert_allclose(out[i], (1 - t[i]) * x0[i] + t[i] * x1[i])


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        fm.interpolate(np.zeros(2), np.zeros(3), 0.5)
    with pytest.raises(DimensionError):
        fm.target_velocity(np.zeros(2), np.zeros(3))


def test_target_velocity_examples(rng):
    x = rng.standard_normal(4)
    np.testing.assert_array_equal(fm.target_velocity(x, x), 0.0)
    assert fm.target_velocity(np.zeros(1), np.full(1, 2.0))[0] == 2.0


@pytest.mark.parametrize("t", TS)
def test_recover_velocity_exact_prediction(t, rng):
    x0, x1 = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    v = fm.recover_velocity(x1, fm.interpolate(x0, x1, t), t)
    np.testing.assert_allclose(v, x1 - x0, atol=1e-5)


def test_recover_velocity_guard_and_zero():
    x = np.array([1.0, -2.0])
    np.testing.assert_array_equal(fm.recover_velocity(x, x, 0.3), 0.0)
    v = fm.recover_velocity(x + 1e-5, x, 1.0)
    assert np.all(np.isfinite(v))
    np.testing.assert_allclose(v, 1.0)


def test_x_from_velocity_inverts_recover(rng):
    x_hat, x_t = rng.standard_normal(6), rng.standard_normal(6)
    v = fm.recover_velocity(x_hat, x_t, 0.4)
    np.testing.assert_allclose(fm.x_from_velocity(v, x_t, 0.4), x_hat)


def test_make_flow_sample(rng):
    s = fm.make_flow_sample(np.ones(5), rng, 0.3)
    np.testing.assert_allclose(s.x_t, 0.7 * s.x0 + 0.3 * s.x1, atol=1e-6)


def test_loss_examples():
    x1 = np.zeros((2, 3))
    assert scalar(fm.loss(x1, x1, x1, 0.5, "v_loss")) == 0.0
    assert scalar(fm.loss(x1, x1, x1, 0.5, "x_loss")) == 0.0
    x_hat = x1 + 1.0
    assert scalar(fm.loss(x_hat, x1, x1, 0.5, "x_loss")) == 1.0
    assert scalar(fm.loss(x_hat, x1, x1, 0.5, "v_loss")) == 4.0


@pytest.mark.parametrize("t", TS)
def test_v_loss_is_weighted_x_loss(t, rng):
    x_hat, x1, x_t = (rng.standard_normal((4, 5)) for _ in range(3))
    xl = scalar(fm.loss(x_hat, x1, x_t, t, "x_loss"))
    vl = scalar(fm.loss(x_hat, x1, x_t, t, "v_loss"))
    assert vl == pytest.approx(xl / (1 - t) ** 2, rel=1e-6)


def test_v_loss_per_item_weights(rng):
    x_hat, x1 = rng.standard_normal((3, 4, 2)), rng.standard_normal((3, 4, 2))
    t = np.array([0.2, 0.5, 0.8])
    per = ((x_hat - x1) ** 2).mean(axis=(1, 2))
    assert scalar(fm.loss(x_hat, x1, x1, t, "v_loss")) == pytest.approx(np.mean(per / (1 - t) ** 2))
    assert scalar(fm.loss(x_hat, x1, x1, t, "x_loss")) == pytest.approx(per.mean())


def test_loss_guard_at_t1():
    assert np.isfinite(scalar(fm.loss(np.ones(2), np.zeros(2), np.zeros(2), 1.0, "v_loss")))


def test_loss_unknown_mode():
    with pytest.raises(ValueError):
        fm.loss(np.ones(2), np.ones(2), np.ones(2), 0.5, "eps_loss")


def test_shift_examples():
    t = np.linspace(0, 1, 11)
    np.testing.assert_array_equal(fm.shift_timestep(t, 1.0), t)
    assert fm.shift_timestep(0.5, 3.0) == 0.25


@given(st.floats(0.001, 0.999), st.floats(1.0, 10.0), st.floats(0.0, 5.0))
def test_shift_monotone_nonincreasing_in_s(t, s, ds):
    assert fm.shift_timestep(t, s + ds) <= fm.shift_timestep(t, s) + 1e-15


def test_sample_timestep_median_and_range():
    t = fm.sample_timestep(np.random.default_rng(0), fm.TimestepConfig(), size=100_000)
    assert np.median(t) == pytest.approx(0.5, abs=0.01)
    assert np.all((t > 0) & (t < 1))
    assert isinstance(fm.sample_timestep(np.random.default_rng(0)), float)


def test_timestep_config_validation():
    with pytest.raises(PreconditionError):
        fm.TimestepConfig(scale=0.0)
    with pytest.raises(PreconditionError):
        fm.TimestepConfig(shift=0.5)


def test_cfg_velocity_examples(rng):
    v = rng.standard_normal(3)
    assert fm.cfg_velocity(v, rng.standard_normal(3), 0.0) is v
    assert fm.cfg_velocity(np.array(2.0), np.array(1.0), 0.5) == 2.5
    np.testing.assert_allclose(fm.cfg_velocity(v, v, 7.0), v)
    with pytest.raises(PreconditionError):
        fm.cfg_velocity(v, v, -1.0)


def test_sampler_config_validation():
    with pytest.raises(PreconditionError):
        fm.SamplerConfig(steps=0)
    with pytest.raises(PreconditionError):
        fm.SamplerConfig(cfg_scale=-0.1)


# Euler sampler ------------------------------------------------------------------------------


def decay(x, t, cond):
    return -x


@pytest.mark.parametrize("n", [1, 7, 50])
def test_euler_constant_field_is_exact(n, rng):
    a = rng.standard_normal(4)
    x0 = rng.standard_normal(4)
    out = fm.euler_sample(lambda x, t, c: a, None, None, fm.SamplerConfig(n, 0.0), rng, x_init=x0)
    np.testing.assert_allclose(out, x0 + a, atol=1e-12)


@pytest.mark.parametrize("n", [10, 100])
def test_euler_linear_decay_closed_form(n, rng):
    x0 = rng.standard_normal(5)
    out = fm.euler_sample(decay, None, None, fm.SamplerConfig(n, 0.0), rng, x_init=x0)
    np.testing.assert_allclose(out, (1 - 1 / n) ** n * x0, atol=1e-9)


def test_euler_first_order_convergence():
    x0 = np.array([1.0])
    err = {}
    for n in (10, 20, 40, 80):
        out = fm.euler_sample(decay, None, None, fm.SamplerConfig(n, 0.0), None, x_init=x0)
        err[n] = abs(out[0] - np.exp(-1.0))
    for n in (10, 20, 40):
        assert err[n] / err[2 * n] == pytest.approx(2.0, rel=0.2)


def test_euler_guidance_combines_branches():
    # v_cond = 1, v_uncond = 0 -> guided velocity (1 + w)
    model = lambda x, t, c: np.full_like(x, float(c))  # noqa: E731
    out = fm.euler_sample(model, 1.0, 0.0, fm.SamplerConfig(4, 2.0), None, x_init=np.zeros(2))
    np.testing.assert_allclose(out, 3.0)


def test_euler_w0_skips_unconditional_branch(rng):
    seen = []

    def model(x, t, c):
        seen.append(c)
        return -x

    fm.euler_sample(model, "c", "null", fm.SamplerConfig(5, 0.0), rng, shape=(2,))
    assert seen == ["c"] * 5


def test_euler_seeded_determinism():
    cfg = fm.SamplerConfig(8, 1.5)
    model = lambda x, t, c: np.sin(x) * (c + 1)  # noqa: E731
    a = fm.euler_sample(model, 1.0, 0.0, cfg, np.random.default_rng(3), shape=(4, 2))
    b = fm.euler_sample(model, 1.0, 0.0, cfg, np.random.default_rng(3), shape=(4, 2))
    assert a.tobytes() == b.tobytes()


def test_euler_needs_shape_or_init():
    with pytest.raises(PreconditionError):
        fm.euler_sample(decay, None, None, fm.SamplerConfig(2), np.random.default_rng(0))


def test_euler_final_jump_near_one():
    # eps large enough that the last grid point t = 0.75 is within it -> x + 0.25 v
    out = fm.euler_sample(lambda x, t, c: np.ones_like(x), None, None, fm.SamplerConfig(4, 0.0, eps=0.3), None,
                          x_init=np.zeros(1))
    np.testing.assert_allclose(out, 1.0)


def test_velocity_from_prediction_modes():
    pred = lambda x, t, c: np.full_like(x, 2.0)  # noqa: E731
    v = fm.velocity_from_prediction(pred, "x_pred")(np.zeros(2), 0.5, None)
    np.testing.assert_allclose(v, 4.0)
    np.testing.assert_allclose(fm.velocity_from_prediction(pred, "v_pred")(np.zeros(2), 0.5, None), 2.0)
    with pytest.raises(ValueError):
        fm.velocity_from_prediction(pred, "eps")


finite = st.floats(-10, 10, allow_nan=False)


@given(st.lists(finite, min_size=2, max_size=2), st.lists(finite, min_size=2, max_size=2),
       st.floats(0.0, 0.999))
def test_velocity_recovery_property(a, b, t):
    x0, x1 = np.array(a), np.array(b)
    v = fm.recover_velocity(x1, fm.interpolate(x0, x1, t), t)
    np.testing.assert_allclose(v, x1 - x0, atol=1e-9 / (1 - t))


@given(st.integers(0, 2**31), st.floats(0.0, 0.999))
def test_v_loss_is_weighted_x_loss_property(seed, t):
    rng = np.random.default_rng(seed)
    x_hat, x1, x_t = rng.standard_normal((3, 2, 5, 3))
    xl = scalar(fm.loss(x_hat, x1, x_t, t, "x_loss"))
    vl = scalar(fm.loss(x_hat, x1, x_t, t, "v_loss"))
    assert vl == pytest.approx(xl / (1 - t) ** 2, rel=1e-12)
