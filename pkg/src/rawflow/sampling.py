"""Turn a trained network into waveforms: guided Euler sampling, unpatchify, unlift, loudness."""

from __future__ import annotations

import logging

import numpy as np
from PIL import Image
from scipy import signal

from . import flowmatch as fm
from .audio_io import BLOCK_SECONDS, WaveformBuffer, amplitude_unlift, normalize_loudness
from .conditioning import ConditionBatch
from .model import ModelConfig, predict
from .patch_grid import TokenGrid, num_tokens, unpatchify

log = logging.getLogger(__name__)


def model_velocity(params, cfg: ModelConfig):
    """Velocity callable for :func:`rawflow.flowmatch.euler_sample`."""

    def net(x, t, conds):
        return predict(params, cfg, x, np.full(x.shape[0], t), conds)

    return fm.velocity_from_prediction(net, cfg.pred_mode)


def generate_grids(params, cfg: ModelConfig, conds: ConditionBatch, num_samples: int,
                   sampler: fm.SamplerConfig = fm.SamplerConfig(), seed: int = 0) -> np.ndarray:
    """Sample (B, C, D) lifted token grids for clips of ``num_samples`` samples."""
    C = num_tokens(num_samples, cfg.D)
    rng = np.random.default_rng(seed)
    return fm.euler_sample(
        model_velocity(params, cfg), conds, conds.nulled(), sampler, rng, shape=(len(conds), C, cfg.D)
    )


def grid_to_waveform(grid: np.ndarray, num_samples: int, sample_rate: int, s_a: float = 3.0,
                     target_lufs: float | None = -23.0) -> WaveformBuffer:
    """Unpatchify, undo the amplitude scale, and loudness-normalize when the clip is long enough."""
    grid = np.asarray(grid, dtype=np.float64)
    pad = grid.size - num_samples
    buf = amplitude_unlift(unpatchify(TokenGrid(grid, pad, sample_rate)), s_a)
    if target_lufs is None:
        return buf
    if buf.duration < BLOCK_SECONDS:
        log.warning("clip of %.3f s is shorter than one loudness block; skipping normalization", buf.duration)
        return buf
    return normalize_loudness(buf, target_lufs)


def spectrogram_image(buf: WaveformBuffer, nperseg: int = 256) -> Image.Image:
    """Log-magnitude STFT as an 8-bit grayscale image (low frequencies at the bottom)."""
    nperseg = min(nperseg, len(buf))
    _, _, z = signal.stft(buf.samples, fs=buf.sample_rate, nperseg=nperseg, noverlap=nperseg * 3 // 4)
    db = 20 * np.log10(np.abs(z) + 1e-8)
    db = np.clip(db, db.max() - 80.0, None)
    span = max(db.max() - db.min(), 1e-9)
    img = ((db - db.min()) / span * 255).astype(np.uint8)[::-1]
    return Image.fromarray(img, mode="L")


def save_spectrogram_png(buf: WaveformBuffer, path) -> None:
    img = spectrogram_image(buf)
    if img.width < 64 or img.height < 64:
        scale = max(1, 64 // max(min(img.width, img.height), 1))
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    img.save(path)
