"""Toy-scale deterministic training: synthetic tone dataset, AdamW, clipping, warmup, EMA."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import flowmatch as fm
from . import numerics as nx
from .audio_io import LiftConfig, WaveformBuffer, amplitude_lift
from .conditioning import ConditionBatch, EventSpec, FeatureConfig, drop_conditions_batch, make_bundle, stack_bundles
from .errors import ConfigError, NumericError, PreconditionError
from .model import ModelConfig, forward, init_params
from .patch_grid import patchify

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_steps: int = 0
    clip_norm: float = 1.0
    ema_decay: float = 0.9999
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    loss_mode: str = "v_loss"
    p_visual: float = 0.1
    p_text: float = 0.1
    t_loc: float = 0.0
    t_scale: float = 1.0
    t_shift: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in (0, 1)")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.loss_mode not in fm.LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {fm.LOSS_MODES}, got {self.loss_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.batch_size < 1 or self.steps < 0 or self.warmup_steps < 0:
            raise ConfigError("batch_size >= 1, steps >= 0 and warmup_steps >= 0 required")
        if not (0 <= self.p_visual <= 1 and 0 <= self.p_text <= 1):
            raise ConfigError("drop probabilities must lie in [0, 1]")

    @property
    def timesteps(self) -> fm.TimestepConfig:
        return fm.TimestepConfig(self.t_loc, self.t_scale, self.t_shift)


# toy data -----------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyDatasetSpec:
    """Class k is a sine at ``frequencies[k]`` plus short clicks at its event times."""

    num_classes: int = 4
    frequencies: tuple = (500.0, 1000.0, 1500.0, 2000.0)
    tone_amplitude: float = 0.5
    click_amplitude: float = 0.3
    click_samples: int = 4
    max_events: int = 2
    sample_rate: int = 16000
    num_samples: int = 256
    size: int = 512

    def __post_init__(self):
        if len(self.frequencies) != self.num_classes:
            raise PreconditionError("need one frequency per class")
        for f in self.frequencies:
            if not 0 < f < self.sample_rate / 2:
                raise PreconditionError(f"frequency {f} Hz is not below Nyquist ({self.sample_rate / 2} Hz)")

    @property
    def clip_len(self) -> float:
        return self.num_samples / self.sample_rate


def make_toy_dataset(spec: ToyDatasetSpec, seed: int = 0) -> list[tuple[WaveformBuffer, EventSpec]]:
    """Balanced (item i has class i mod K) tone-plus-click clips with random phase and events."""
    rng = np.random.default_rng(seed)
    n = np.arange(spec.num_samples)
    decay = np.exp(-np.arange(spec.click_samples) / max(spec.click_samples / 3.0, 1e-9))
    items = []
    for i in range(spec.size):
        k = i % spec.num_classes
        phase = rng.uniform(0.0, 2 * np.pi)
        x = spec.tone_amplitude * np.sin(2 * np.pi * spec.frequencies[k] * n / spec.sample_rate + phase)
        n_events = int(rng.integers(0, spec.max_events + 1))
        starts = np.sort(rng.integers(0, spec.num_samples - spec.click_samples, size=n_events))
        for s in starts:
            x[s : s + spec.click_samples] += spec.click_amplitude * decay
        times = tuple(float(s) / spec.sample_rate for s in starts)
        items.append((WaveformBuffer(x, spec.sample_rate), EventSpec(k, times, spec.clip_len)))
    return items


def dominant_frequency(samples, sample_rate: float) -> tuple[float, int]:
    """Frequency and bin index of the largest non-DC FFT magnitude."""
    spectrum = np.abs(np.fft.rfft(np.asarray(samples, dtype=np.float64)))
    b = int(np.argmax(spectrum[1:]) + 1)
    return b * sample_rate / len(samples), b


@dataclass
class PreparedData:
    grids: np.ndarray  # (N, C, D) lifted token grids
    conds: ConditionBatch
    labels: np.ndarray

    def __len__(self):
        return self.grids.shape[0]


def prepare_dataset(items, D: int, features: FeatureConfig, lift: LiftConfig = LiftConfig()) -> PreparedData:
    grids = [patchify(amplitude_lift(buf, lift), D).data for buf, _ in items]
    bundles = [make_bundle(spec, features) for _, spec in items]
    labels = np.array([spec.class_id for _, spec in items])
    return PreparedData(np.stack(grids), stack_bundles(bundles), labels)


# optimizer pieces -----------------------------------------------------------------------------


def lr_at(step: int, cfg: TrainConfig) -> float:
    if step < 0:
        raise PreconditionError("step must be >= 0")
    if cfg.warmup_steps == 0:
        return cfg.lr
    return cfg.lr * min(1.0, step / cfg.warmup_steps)


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_grad_norm(grads: dict, max_norm: float = 1.0):
    """Scale all gradients by max_norm / norm when the global L2 norm exceeds max_norm.

    Returns (clipped grads, pre-clip norm).
    """
    if max_norm <= 0:
        raise PreconditionError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, norm


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig, step: int, lr: float | None = None):
    """One AdamW update; ``step`` counts updates from 1 and drives bias correction.

    Weight decay is decoupled: p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps).
    """
    if lr is None:
        lr = lr_at(step, cfg)
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise PreconditionError(f"{k}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        new[k] = (p - lr * cfg.weight_decay * p - lr * update).astype(p.dtype)
    return new, state


def ema_update(ema: dict, params: dict, decay: float = 0.9999) -> dict:
    return {k: (decay * ema[k] + (1.0 - decay) * params[k]).astype(ema[k].dtype) for k in ema}


# training ----------------------------------------------------------------------------------


@dataclass
class TrainState:
    model_cfg: ModelConfig
    params: dict
    ema: dict
    opt: AdamState = field(default_factory=AdamState)
    step: int = 0


def init_state(model_cfg: ModelConfig, train_cfg: TrainConfig) -> TrainState:
    params = init_params(model_cfg, seed=train_cfg.seed, dtype=np.dtype(train_cfg.dtype))
    return TrainState(model_cfg, params, {k: v.copy() for k, v in params.items()})


def batch_loss(params, model_cfg: ModelConfig, x1, conds: ConditionBatch, x0, t, mode: str):
    """Flow-matching loss of one batch; works on arrays or watched tensors."""
    x_t = fm.interpolate(x0, x1, t).astype(x1.dtype)
    out = forward(params, model_cfg, x_t, t, conds)
    if model_cfg.pred_mode == "v_pred":
        # turn the velocity head into a clean estimate so both loss modes share one formula
        out = nx.add(x_t, nx.mul(out, (1.0 - t).reshape(-1, 1, 1).astype(x1.dtype)))
    return fm.loss(out, x1, x_t, t, mode)


def train_step(state: TrainState, x1: np.ndarray, conds: ConditionBatch, cfg: TrainConfig, rng: np.random.Generator):
    """Sample noise/timesteps, drop conditions, backprop, clip, AdamW, EMA.

    Returns (loss, pre-clip grad norm, lr).
    """
    B = x1.shape[0]
    x0 = rng.standard_normal(x1.shape).astype(x1.dtype)
    t = fm.sample_timestep(rng, cfg.timesteps, size=B)
    conds = drop_conditions_batch(conds, rng, cfg.p_visual, cfg.p_text)
    try:
        loss, grads = nx.value_and_grad(
            lambda p: batch_loss(p, state.model_cfg, x1, conds, x0, t, cfg.loss_mode), state.params
        )
    except NumericError as exc:
        raise NumericError(f"step {state.step + 1}: {exc}") from exc
    value = float(nx._data(loss))
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss at step {state.step + 1}")
    grads, norm = clip_grad_norm(grads, cfg.clip_norm)
    state.step += 1
    lr = lr_at(state.step, cfg)
    state.params, state.opt = adamw_step(state.params, grads, state.opt, cfg, state.step, lr)
    state.ema = ema_update(state.ema, state.params, cfg.ema_decay)
    return value, norm, lr


def batch_indices(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    """Yield index arrays drawn from successive shuffled epochs."""
    pool = np.empty(0, dtype=np.int64)
    for _ in range(steps):
        while pool.size < batch_size:
            pool = np.concatenate([pool, rng.permutation(n)])
        yield pool[:batch_size]
        pool = pool[batch_size:]


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    data: PreparedData,
    log_path=None,
    callback: Callable | None = None,
    state: TrainState | None = None,
):
    """Run ``train_cfg.steps`` updates; returns (state, list of per-step losses).

    One generator seeded from ``train_cfg.seed`` drives batching, noise,
    timesteps and dropout, so equal inputs give identical trajectories.
    """
    if state is None:
        state = init_state(model_cfg, train_cfg)
    rng = np.random.default_rng([train_cfg.seed, 1])
    data_rng = np.random.default_rng([train_cfg.seed, 2])
    grids = data.grids.astype(train_cfg.dtype)
    losses = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss", "grad_norm"])
    try:
        for idx in batch_indices(len(data), train_cfg.batch_size, train_cfg.steps, data_rng):
            loss, norm, lr = train_step(state, grids[idx], data.conds.take(idx), train_cfg, rng)
            losses.append(loss)
            if writer is not None:
                writer.writerow([state.step, f"{lr:.8g}", f"{loss:.8g}", f"{norm:.8g}"])
            if callback is not None:
                callback(state, loss)
            if state.step % 200 == 0:
                log.info("step %d loss %.4f grad_norm %.3f", state.step, loss, norm)
    finally:
        if fh is not None:
            fh.close()
    return state, losses
