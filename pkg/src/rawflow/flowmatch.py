"""Flow-matching math: linear path, x-/v-parameterizations, losses, timesteps, CFG Euler sampler.

Time runs from t=0 (pure noise x0) to t=1 (clean data x1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .errors import DimensionError, PreconditionError

ONE_MINUS_T_FLOOR = 1e-5
LOSS_MODES = ("v_loss", "x_loss")


@dataclass(frozen=True)
class TimestepConfig:
    """Logit-normal timestep law followed by the noise shift t/(t + s(1-t))."""

    loc: float = 0.0
    scale: float = 1.0
    shift: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise PreconditionError("logit-normal scale must be positive")
        if self.shift < 1:
            raise PreconditionError("noise shift must be >= 1")


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 4.5
    eps: float = ONE_MINUS_T_FLOOR

    def __post_init__(self):
        if self.steps < 1:
            raise PreconditionError("sampler needs at least one step")
        if self.cfg_scale < 0:
            raise PreconditionError("guidance scale must be >= 0")


@dataclass(frozen=True)
class FlowSample:
    x0: np.ndarray
    x1: np.ndarray
    t: float
    x_t: np.ndarray


def _check_same(a, b):
    if np.shape(a) != np.shape(b):
        raise DimensionError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def _per_item(t, ndim):
    """Broadcast scalar or per-batch-item t against an array of rank ``ndim``."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (ndim - t.ndim))


def interpolate(x0, x1, t):
    _check_same(x0, x1)
    t = _per_item(t, np.ndim(x0))
    return (1.0 - t) * x0 + t * x1


def target_velocity(x0, x1):
    _check_same(x0, x1)
    return np.asarray(x1) - np.asarray(x0)


def make_flow_sample(x1, rng: np.random.Generator, t: float) -> FlowSample:
    x0 = rng.standard_normal(np.shape(x1))
    return FlowSample(x0, np.asarray(x1), t, interpolate(x0, x1, t))


def recover_velocity(x_hat1, x_t, t, eps: float = ONE_MINUS_T_FLOOR):
    """(x_hat1 - x_t) / max(1 - t, eps)."""
    _check_same(x_hat1, x_t)
    denom = np.maximum(1.0 - _per_item(t, np.ndim(x_t)), eps)
    return (np.asarray(x_hat1) - np.asarray(x_t)) / denom


def x_from_velocity(v, x_t, t):
    """Inverse of :func:`recover_velocity`: the clean estimate implied by a velocity."""
    return np.asarray(x_t) + (1.0 - _per_item(t, np.ndim(x_t))) * np.asarray(v)


def loss(x_hat1, x1, x_t, t, mode: str = "v_loss", eps: float = ONE_MINUS_T_FLOOR):
    """Mean squared error on x (``x_loss``) or on the implied velocity (``v_loss``).

    With a per-item ``t`` of shape (B,), the first axis is the batch; the
    per-item losses are averaged. Accepts numpy arrays or tensors and returns
    a scalar tensor, so it can sit at the end of a taped forward pass.
    The velocity form uses (x_hat1 - x_t) - (x1 - x_t) == x_hat1 - x1, so it
    is exactly x_loss / (1 - t)^2 per item.
    """
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
    if np.shape(nx._data(x_hat1)) != np.shape(nx._data(x1)):
        raise DimensionError("prediction and target shapes differ")
    t = np.asarray(t, dtype=np.float64)
    err = nx.square(nx.sub(x_hat1, x1))
    ndim = np.ndim(nx._data(x_hat1))
    if t.ndim == 0:
        per_item = nx.mean(err)
        weight = 1.0 / max(1.0 - float(t), eps) ** 2
    else:
        per_item = nx.mean(err, axis=tuple(range(1, ndim)))
        weight = 1.0 / np.maximum(1.0 - t, eps) ** 2
    if mode == "v_loss":
        per_item = nx.mul(per_item, np.asarray(weight, dtype=nx._data(per_item).dtype))
    return nx.mean(per_item)


def shift_timestep(t, s: float):
    t = np.asarray(t, dtype=np.float64)
    if s == 1.0:
        return t
    return t / (t + s * (1.0 - t))


def sample_timestep(rng: np.random.Generator, cfg: TimestepConfig = TimestepConfig(), size=None):
    z = rng.normal(cfg.loc, cfg.scale, size=size)
    t = 1.0 / (1.0 + np.exp(-z))
    t = shift_timestep(t, cfg.shift)
    tiny = np.finfo(np.float64).eps
    t = np.clip(t, tiny, 1.0 - tiny)
    return float(t) if size is None else t


def cfg_velocity(v_cond, v_uncond, w: float):
    """(1 + w) v_cond - w v_uncond; at w == 0 ``v_cond`` is returned as is."""
    if w < 0:
        raise PreconditionError("guidance scale must be >= 0")
    if w == 0:
        return v_cond
    _check_same(v_cond, v_uncond)
    return (1.0 + w) * np.asarray(v_cond) - w * np.asarray(v_uncond)


VelocityFn = Callable[[np.ndarray, float, object], np.ndarray]


def euler_sample(
    model: VelocityFn,
    cond,
    null_cond,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    shape=None,
    x_init=None,
):
    """Integrate dx/dt = guided velocity from noise at t=0 to t=1.

    ``model(x, t, cond)`` returns a velocity. Uniform grid t_i = i/N with step
    1/N. If a grid point gets within ``eps`` of t=1 the state jumps straight to
    the guided clean estimate x + (1 - t) v. Returns the final array.
    """
    if x_init is None:
        if shape is None:
            raise PreconditionError("either shape or x_init is required")
        x = rng.standard_normal(shape)
    else:
        x = np.array(x_init, dtype=np.float64)
    n = cfg.steps
    dt = 1.0 / n
    for i in range(n):
        t = i / n
        v_c = model(x, t, cond)
        if cfg.cfg_scale == 0:
            v = v_c
        else:
            v = cfg_velocity(v_c, model(x, t, null_cond), cfg.cfg_scale)
        if 1.0 - t < cfg.eps:
            x = x + (1.0 - t) * v
            break
        x = x + dt * v
    return x


def velocity_from_prediction(predict: Callable, pred_mode: str = "x_pred", eps: float = ONE_MINUS_T_FLOOR):
    """Adapt a network ``predict(x, t, cond)`` to the sampler's velocity interface."""
    if pred_mode not in ("x_pred", "v_pred"):
        raise ValueError(f"unknown prediction mode {pred_mode!r}")

    def velocity(x, t, cond):
        out = predict(x, t, cond)
        if pred_mode == "v_pred":
            return out
        return recover_velocity(out, x, t, eps)

    return velocity
