"""Waveform container, WAV I/O, amplitude lifting and loudness normalization."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import CapabilityError, ParseError, PreconditionError

SUPPORTED_RATES = (16000, 44100, 48000)

_PCM = 0x0001
_IEEE_FLOAT = 0x0003
_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True)
class WaveformBuffer:
    """Mono signal plus its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64).reshape(-1)
        if x.size == 0:
            raise PreconditionError("waveform must contain at least one sample")
        if self.sample_rate <= 0:
            raise PreconditionError("sample rate must be positive")
        if not np.all(np.isfinite(x)):
            raise PreconditionError("waveform contains non-finite samples")
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def with_samples(self, samples) -> "WaveformBuffer":
        return WaveformBuffer(samples, self.sample_rate)


@dataclass(frozen=True)
class LiftConfig:
    r_star: float = 0.33
    s_a: float = 3.0
    rms_floor: float = 1e-6

    def __post_init__(self):
        if self.r_star <= 0 or self.s_a <= 0:
            raise PreconditionError("r_star and s_a must be positive")


# WAV ------------------------------------------------------------------------


def read_wav(path) -> WaveformBuffer:
    """Read PCM16 or float32 WAV (mono or stereo); stereo is averaged."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise ParseError(f"{path}: not a RIFF/WAVE file")
    riff_size = struct.unpack("<I", raw[4:8])[0]
    if riff_size + 8 > len(raw):
        raise ParseError(f"{path}: RIFF chunk truncated ({len(raw)} of {riff_size + 8} bytes)")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos : pos + 4]
        size = struct.unpack("<I", raw[pos + 4 : pos + 8])[0]
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise ParseError(f"{path}: chunk {cid!r} truncated")
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or len(fmt) < 16:
        raise ParseError(f"{path}: missing or short fmt chunk")
    if data is None:
        raise ParseError(f"{path}: missing data chunk")

    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _EXTENSIBLE:
        if len(fmt) < 26:
            raise ParseError(f"{path}: short extensible fmt chunk")
        tag = struct.unpack("<H", fmt[24:26])[0]
    if channels not in (1, 2):
        raise CapabilityError(f"{path}: {channels} channels not supported")
    if tag == _PCM and bits == 16:
        x = np.frombuffer(data[: len(data) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _IEEE_FLOAT and bits == 32:
        x = np.frombuffer(data[: len(data) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise CapabilityError(f"{path}: format tag {tag:#x} with {bits} bits not supported")
    if rate <= 0:
        raise ParseError(f"{path}: invalid sample rate {rate}")
    frames = x.size // channels
    x = x[: frames * channels].reshape(frames, channels)
    mono = x[:, 0] if channels == 1 else 0.5 * (x[:, 0] + x[:, 1])
    return WaveformBuffer(mono, rate)


def write_wav(buf: WaveformBuffer, path, sample_format: str = "pcm16") -> None:
    """Write mono WAV.

    ``pcm16`` clamps to [-1, 1] first; ``float32`` stores samples unclamped,
    which keeps lifted (scaled beyond unit range) signals intact.
    """
    if buf is None or len(buf) == 0:
        raise PreconditionError("cannot write an empty waveform")
    if sample_format == "pcm16":
        x = np.clip(buf.samples, -1.0, 1.0)
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, width = _PCM, 2
    elif sample_format == "float32":
        payload = buf.samples.astype("<f4").tobytes()
        tag, width = _IEEE_FLOAT, 4
    else:
        raise CapabilityError(f"unsupported sample format {sample_format!r}")
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, tag, 1, buf.sample_rate, buf.sample_rate * width, width, 8 * width)
    data = b"data" + struct.pack("<I", len(payload)) + payload
    Path(path).write_bytes(header + fmt + data)


# level and lifting --------------------------------------------------------------


def rms(buf: WaveformBuffer) -> float:
    x = buf.samples
    return float(np.sqrt(np.mean(x * x)))


def amplitude_lift(buf: WaveformBuffer, cfg: LiftConfig = LiftConfig()) -> WaveformBuffer:
    """RMS-normalize to ``r_star``, clamp to [-1, 1], then scale by ``s_a``.

    Clips quieter than ``rms_floor`` skip the RMS ratio.
    """
    level = rms(buf)
    ratio = cfg.r_star / level if level >= cfg.rms_floor else 1.0
    return buf.with_samples(cfg.s_a * np.clip(ratio * buf.samples, -1.0, 1.0))


def amplitude_unlift(buf: WaveformBuffer, s_a: float = 3.0) -> WaveformBuffer:
    if s_a <= 0:
        raise PreconditionError("s_a must be positive")
    return buf.with_samples(buf.samples / s_a)


# loudness (ITU-R BS.1770-4 gating) -----------------------------------------------

BLOCK_SECONDS = 0.4
BLOCK_OVERLAP = 0.75
ABSOLUTE_GATE_LUFS = -70.0
RELATIVE_GATE_LU = -10.0
SILENCE = float("-inf")


def k_weighting_sos(sample_rate: int) -> np.ndarray:
    """High-shelf then high-pass biquads, designed for the given rate."""
    # shelf: f0, gain (dB), Q fitted to the 48 kHz reference coefficients
    f0, gain_db, q = 1681.974450955533, 3.999843853973347, 0.7071752369554196
    k = math.tan(math.pi * f0 / sample_rate)
    vh = 10.0 ** (gain_db / 20.0)
    vb = vh**0.4996667741545416
    a0 = 1.0 + k / q + k * k
    shelf = [
        (vh + vb * k / q + k * k) / a0,
        2.0 * (k * k - vh) / a0,
        (vh - vb * k / q + k * k) / a0,
        1.0,
        2.0 * (k * k - 1.0) / a0,
        (1.0 - k / q + k * k) / a0,
    ]
    f0, q = 38.13547087602444, 0.5003270373238773
    k = math.tan(math.pi * f0 / sample_rate)
    a0 = 1.0 + k / q + k * k
    highpass = [1.0, -2.0, 1.0, 1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0]
    return np.array([shelf, highpass])


def block_powers(buf: WaveformBuffer) -> np.ndarray:
    """Mean-square of the K-weighted signal over 400 ms blocks, 75 % overlap."""
    sr = buf.sample_rate
    block = int(round(BLOCK_SECONDS * sr))
    hop = int(round(BLOCK_SECONDS * (1.0 - BLOCK_OVERLAP) * sr))
    if len(buf) < block:
        raise PreconditionError(f"loudness needs at least {BLOCK_SECONDS * 1000:.0f} ms of audio")
    y = signal.sosfilt(k_weighting_sos(sr), buf.samples)
    sq = np.concatenate([[0.0], np.cumsum(y * y)])
    starts = np.arange(0, len(buf) - block + 1, hop)
    return (sq[starts + block] - sq[starts]) / block


def _lufs(power):
    return -0.691 + 10.0 * np.log10(power)


def integrated_loudness(buf: WaveformBuffer) -> float:
    """Gated integrated loudness in LUFS; ``-inf`` for silence."""
    z = block_powers(buf)
    with np.errstate(divide="ignore"):
        levels = _lufs(z)
    z = z[levels > ABSOLUTE_GATE_LUFS]
    if z.size == 0:
        return SILENCE
    relative_gate = _lufs(z.mean()) + RELATIVE_GATE_LU
    z = z[_lufs(z) > relative_gate]
    return float(_lufs(z.mean()))


def loudness_gain(measured_lufs: float, target_lufs: float = -23.0) -> float:
    return 10.0 ** ((target_lufs - measured_lufs) / 20.0)


def normalize_loudness(buf: WaveformBuffer, target_lufs: float = -23.0) -> WaveformBuffer:
    """Apply one gain so the clip measures ``target_lufs``; silence passes through.

    No limiter is applied, so peaks may exceed full scale.
    """
    measured = integrated_loudness(buf)
    if measured == SILENCE:
        return buf
    return buf.with_samples(buf.samples * loudness_gain(measured, target_lufs))
