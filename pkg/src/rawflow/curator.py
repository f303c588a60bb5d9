"""Clip curation: segmentation, silence filtering, overlap augmentation, category balancing.

Quality scorers (aesthetics, classifier confidence) are plain callables
``scorer(buf) -> float`` attached to :class:`FilterRules`; none ship by default.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .audio_io import WaveformBuffer
from .errors import ParseError, PreconditionError

log = logging.getLogger(__name__)

CLIP_SECONDS = 8.0
AUGMENT_OFFSETS = (0.0, 1.0)
SILENCE_AMP_THRESHOLD = 1e-3


@dataclass(frozen=True)
class ClipRecord:
    source: str
    offset: float
    duration: float
    label: str | None = None
    waveform: WaveformBuffer | None = field(default=None, repr=False, compare=False)
    reason: str | None = None

    @property
    def accepted(self) -> bool:
        return self.reason is None

    def rejected(self, reason: str) -> "ClipRecord":
        return replace(self, reason=reason)


@dataclass(frozen=True)
class ScoreRule:
    """Reject clips whose score falls below ``min_score``."""

    name: str
    scorer: Callable[[WaveformBuffer], float]
    min_score: float


@dataclass(frozen=True)
class FilterRules:
    max_silence_fraction: float = 0.8
    silence_amp_threshold: float = SILENCE_AMP_THRESHOLD
    scorers: tuple = ()

    def __post_init__(self):
        if not 0.0 <= self.max_silence_fraction <= 1.0:
            raise PreconditionError("max_silence_fraction must lie in [0, 1]")


def _window(buf: WaveformBuffer, offset: float, duration: float) -> WaveformBuffer:
    start = int(round(offset * buf.sample_rate))
    n = int(round(duration * buf.sample_rate))
    return buf.with_samples(buf.samples[start : start + n])


def segment_stream(buf: WaveformBuffer, clip_len: float = CLIP_SECONDS, source: str = "",
                   label: str | None = None) -> list[ClipRecord]:
    """Consecutive non-overlapping windows from offset 0; the remainder is dropped."""
    n = int(round(clip_len * buf.sample_rate))
    count = len(buf) // n
    return [
        ClipRecord(source, i * clip_len, clip_len, label, _window(buf, i * clip_len, clip_len))
        for i in range(count)
    ]


def augment_overlap(buf: WaveformBuffer, clip_len: float = CLIP_SECONDS, source: str = "",
                    label: str | None = None) -> list[ClipRecord]:
    """Two chunks starting at 0 s and 1 s; needs a source of at least clip_len + 1 s."""
    need = int(round((clip_len + AUGMENT_OFFSETS[1]) * buf.sample_rate))
    if len(buf) < need:
        raise PreconditionError(f"overlap augmentation needs >= {clip_len + AUGMENT_OFFSETS[1]} s, got {buf.duration:.3f} s")
    return [ClipRecord(source, off, clip_len, label, _window(buf, off, clip_len)) for off in AUGMENT_OFFSETS]


def silence_fraction(buf: WaveformBuffer, amp_threshold: float = SILENCE_AMP_THRESHOLD) -> float:
    return float(np.mean(np.abs(buf.samples) < amp_threshold))


def apply_rules(record: ClipRecord, rules: FilterRules = FilterRules()) -> ClipRecord:
    if record.waveform is None:
        raise PreconditionError("record has no waveform to inspect")
    if silence_fraction(record.waveform, rules.silence_amp_threshold) > rules.max_silence_fraction:
        return record.rejected("silence")
    for rule in rules.scorers:
        if rule.scorer(record.waveform) < rule.min_score:
            return record.rejected(rule.name)
    return record


def percentile_cut(records, scores, drop_fraction: float = 0.1, reason: str = "confidence"):
    """Reject the lowest-scoring ``drop_fraction`` of the accepted records."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(records) != scores.size:
        raise PreconditionError("one score per record required")
    live = [i for i, r in enumerate(records) if r.accepted]
    n_drop = int(np.floor(drop_fraction * len(live)))
    order = sorted(live, key=lambda i: (scores[i], i))
    drop = set(order[:n_drop])
    return [r.rejected(reason) if i in drop else r for i, r in enumerate(records)]


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    raw = weights / weights.sum() * total
    base = np.floor(raw).astype(int)
    short = total - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:short]] += 1
    return base


def balance_categories(pool, reference_histogram: dict, target_total: int, rng: np.random.Generator):
    """Subsample ``pool`` so category shares follow ``reference_histogram``.

    Per-category quotas are the largest-remainder rounding of
    target_total * share, capped by availability; no redistribution, so a
    capped category leaves the total short. If ``target_total`` covers the
    whole pool, the pool is returned as is. Output keeps pool order.
    """
    pool = list(pool)
    if not pool:
        raise PreconditionError("cannot balance an empty pool")
    if any(r.label is None for r in pool):
        raise PreconditionError("every record needs a label")
    if target_total >= len(pool):
        if target_total > len(pool):
            log.warning("target %d exceeds pool of %d; returning the whole pool", target_total, len(pool))
        return pool
    labels = sorted(reference_histogram)
    weights = np.array([float(reference_histogram[k]) for k in labels])
    if weights.sum() <= 0:
        raise PreconditionError("reference histogram is empty")
    quotas = dict(zip(labels, _largest_remainder(weights, target_total)))
    by_label: dict = {}
    for i, r in enumerate(pool):
        by_label.setdefault(r.label, []).append(i)
    chosen = []
    for label in sorted(by_label):
        idx = by_label[label]
        want = int(quotas.get(label, 0))
        if want > len(idx):
            log.warning("category %s: wanted %d, only %d available", label, want, len(idx))
            want = len(idx)
        chosen.extend(rng.permutation(idx)[:want].tolist())
    return [pool[i] for i in sorted(chosen)]


def category_histogram(records) -> dict:
    out: dict = {}
    for r in records:
        out[r.label] = out.get(r.label, 0) + 1
    return out


def curate(sources, rules: FilterRules = FilterRules(), clip_len: float = CLIP_SECONDS, augment: bool = False):
    """Segment (or overlap-augment) each (name, buf, label) source, then filter every clip."""
    out = []
    for name, buf, label in sources:
        if augment and buf.duration >= clip_len + AUGMENT_OFFSETS[1]:
            clips = augment_overlap(buf, clip_len, name, label)
        else:
            clips = segment_stream(buf, clip_len, name, label)
        if not clips:
            out.append(ClipRecord(name, 0.0, buf.duration, label, None, "too_short"))
        out.extend(apply_rules(c, rules) for c in clips)
    return out


# manifests -------------------------------------------------------------------------------


def read_source_manifest(path) -> list[tuple[Path, str]]:
    """Lines of ``<wav path> <label>``; relative paths resolve against the manifest's folder."""
    path = Path(path)
    out = []
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(f"{path}: expected '<path> <label>', got {raw!r}")
        wav = Path(parts[0])
        if not wav.is_absolute():
            wav = path.parent / wav
        out.append((wav, parts[1]))
    return out


MANIFEST_HEADER = "source\toffset\tduration\tlabel\tstatus\treason"


def format_records(records) -> str:
    lines = [MANIFEST_HEADER]
    for r in records:
        status = "accept" if r.accepted else "reject"
        lines.append(f"{r.source}\t{r.offset:g}\t{r.duration:g}\t{r.label}\t{status}\t{r.reason or '-'}")
    return "\n".join(lines) + "\n"
