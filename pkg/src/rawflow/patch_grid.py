"""Lossless reshaping between waveforms and C x D token grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio_io import WaveformBuffer
from .errors import DimensionError, PreconditionError


@dataclass(frozen=True)
class TokenGrid:
    """Row c holds samples [c*D, (c+1)*D); the last ``pad_len`` samples are zero padding."""

    data: np.ndarray
    pad_len: int = 0
    sample_rate: int = 16000

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise DimensionError(f"token grid must be 2-D, got shape {arr.shape}")
        if not 0 <= self.pad_len < arr.shape[1]:
            raise DimensionError(f"pad_len {self.pad_len} must be in [0, {arr.shape[1]})")

    @property
    def tokens(self) -> int:
        return self.data.shape[0]

    @property
    def token_size(self) -> int:
        return self.data.shape[1]

    @property
    def length(self) -> int:
        return self.data.size - self.pad_len


def num_tokens(T: int, D: int) -> int:
    return -(-T // D)


def patchify(buf: WaveformBuffer, D: int) -> TokenGrid:
    if D < 1:
        raise PreconditionError(f"patch size must be >= 1, got {D}")
    x = buf.samples
    C = num_tokens(x.size, D)
    pad = C * D - x.size
    padded = np.zeros(C * D, dtype=x.dtype)
    padded[: x.size] = x
    return TokenGrid(padded.reshape(C, D), pad, buf.sample_rate)


def unpatchify(grid: TokenGrid) -> WaveformBuffer:
    flat = np.asarray(grid.data).reshape(-1)
    return WaveformBuffer(flat[: flat.size - grid.pad_len], grid.sample_rate)


def token_duration_ms(D: int, sample_rate: float) -> float:
    if D <= 0 or sample_rate <= 0:
        raise PreconditionError("patch size and sample rate must be positive")
    return 1000.0 * D / sample_rate
