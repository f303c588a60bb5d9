"""Synthetic condition features, condition dropout and c_g / c_e assembly.

The deterministic feature generators stand in for frozen visual, sync and
text encoders: visual rows carry the class identity plus a bump on frames
that contain an event, sync rows carry event timing only, and the text
embedding is a fixed per-class table lookup.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import DimensionError, ParseError, PreconditionError

DEFAULT_CLIP_LEN = 8.0


@dataclass(frozen=True)
class EventSpec:
    class_id: int
    event_times: tuple = ()
    clip_len: float = DEFAULT_CLIP_LEN

    def __post_init__(self):
        times = tuple(float(t) for t in self.event_times)
        for t in times:
            if not 0.0 <= t < self.clip_len:
                raise PreconditionError(f"event time {t} outside [0, {self.clip_len})")
        object.__setattr__(self, "event_times", times)


@dataclass(frozen=True)
class ConditionBundle:
    """Raw features for one clip.

    A set null flag means the model substitutes its learned null embedding
    for the flagged streams; the raw features are kept but never read.
    """

    visual_seq: np.ndarray
    sync_seq: np.ndarray
    text_emb: np.ndarray
    visual_null: bool = False
    text_null: bool = False

    def __post_init__(self):
        if np.ndim(self.visual_seq) != 2 or np.shape(self.visual_seq)[0] < 1:
            raise DimensionError("visual_seq must be a non-empty (N_clip, d_v) matrix")
        if np.ndim(self.sync_seq) != 2 or np.shape(self.sync_seq)[0] < 1:
            raise DimensionError("sync_seq must be a non-empty (N_sync, d_s) matrix")
        if np.ndim(self.text_emb) != 1:
            raise DimensionError("text_emb must be a vector")


@dataclass
class ConditionBatch:
    """Stacked bundles: visual (B, N_clip, d_v), sync (B, N_sync, d_s), text (B, d_t)."""

    visual: np.ndarray
    sync: np.ndarray
    text: np.ndarray
    visual_null: np.ndarray = field(default=None)
    text_null: np.ndarray = field(default=None)

    def __post_init__(self):
        B = self.visual.shape[0]
        if self.visual_null is None:
            self.visual_null = np.zeros(B, dtype=bool)
        if self.text_null is None:
            self.text_null = np.zeros(B, dtype=bool)
        self.visual_null = np.asarray(self.visual_null, dtype=bool)
        self.text_null = np.asarray(self.text_null, dtype=bool)
        if not (self.sync.shape[0] == self.text.shape[0] == B == self.visual_null.size == self.text_null.size):
            raise DimensionError("condition batch members disagree on batch size")

    def __len__(self):
        return self.visual.shape[0]

    def take(self, index) -> "ConditionBatch":
        index = np.asarray(index)
        return ConditionBatch(
            self.visual[index], self.sync[index], self.text[index],
            self.visual_null[index], self.text_null[index],
        )

    def nulled(self, visual: bool = True, text: bool = True) -> "ConditionBatch":
        """Copy with the chosen null flags forced on (CFG unconditional branch, T2A)."""
        return replace(
            self,
            visual_null=self.visual_null | visual,
            text_null=self.text_null | text,
        )


def stack_bundles(bundles) -> ConditionBatch:
    return ConditionBatch(
        np.stack([b.visual_seq for b in bundles]),
        np.stack([b.sync_seq for b in bundles]),
        np.stack([b.text_emb for b in bundles]),
        np.array([b.visual_null for b in bundles]),
        np.array([b.text_null for b in bundles]),
    )


# synthetic encoders ------------------------------------------------------------


def _frame_index(t: float, clip_len: float, n: int) -> int:
    return min(int(np.floor(t / clip_len * n)), n - 1)


def synth_visual_features(spec: EventSpec, n_clip: int, d_v: int, seed: int = 0) -> np.ndarray:
    if n_clip < 1:
        raise PreconditionError("N_clip must be >= 1")
    base = np.random.default_rng([seed, 1, spec.class_id]).standard_normal(d_v)
    bump = np.random.default_rng([seed, 2]).standard_normal(d_v)
    out = np.tile(base, (n_clip, 1))
    for t in spec.event_times:
        out[_frame_index(t, spec.clip_len, n_clip)] += bump
    return out


def synth_sync_features(spec: EventSpec, n_sync: int, d_s: int, seed: int = 0) -> np.ndarray:
    if n_sync < 1:
        raise PreconditionError("N_sync must be >= 1")
    offset = 0.1 * np.random.default_rng([seed, 3]).standard_normal(d_s)
    bump = np.zeros(d_s)
    bump[0] = 1.0
    bump[1:] = 0.25 * np.random.default_rng([seed, 4]).standard_normal(d_s - 1)
    out = np.tile(offset, (n_sync, 1))
    for t in spec.event_times:
        out[_frame_index(t, spec.clip_len, n_sync)] += bump
    return out


def text_table(num_classes: int, d_t: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng([seed, 5]).standard_normal((num_classes, d_t))


def encode_text_label(class_id: int, d_t: int, num_classes: int, seed: int = 0) -> np.ndarray:
    if not 0 <= class_id < num_classes:
        raise IndexError(f"class id {class_id} outside [0, {num_classes})")
    return text_table(num_classes, d_t, seed)[class_id]


@dataclass(frozen=True)
class FeatureConfig:
    num_classes: int = 4
    n_clip: int = 8
    n_sync: int = 8
    d_v: int = 16
    d_s: int = 16
    d_t: int = 16
    seed: int = 0


def make_bundle(spec: EventSpec, fc: FeatureConfig) -> ConditionBundle:
    return ConditionBundle(
        synth_visual_features(spec, fc.n_clip, fc.d_v, fc.seed),
        synth_sync_features(spec, fc.n_sync, fc.d_s, fc.seed),
        encode_text_label(spec.class_id, fc.d_t, fc.num_classes, fc.seed),
    )


# dropout --------------------------------------------------------------------------


def drop_conditions(bundle: ConditionBundle, rng: np.random.Generator, p_visual=0.1, p_text=0.1):
    """Independently null the visual pathway (visual and sync together) and the text."""
    if not (0.0 <= p_visual <= 1.0 and 0.0 <= p_text <= 1.0):
        raise PreconditionError("drop probabilities must lie in [0, 1]")
    u_visual, u_text = rng.random(2)
    return replace(
        bundle,
        visual_null=bundle.visual_null or bool(u_visual < p_visual),
        text_null=bundle.text_null or bool(u_text < p_text),
    )


def drop_conditions_batch(batch: ConditionBatch, rng: np.random.Generator, p_visual=0.1, p_text=0.1):
    if not (0.0 <= p_visual <= 1.0 and 0.0 <= p_text <= 1.0):
        raise PreconditionError("drop probabilities must lie in [0, 1]")
    u = rng.random((len(batch), 2))
    return replace(
        batch,
        visual_null=batch.visual_null | (u[:, 0] < p_visual),
        text_null=batch.text_null | (u[:, 1] < p_text),
    )


def t2a(bundle: ConditionBundle) -> ConditionBundle:
    return replace(bundle, visual_null=True)


# assembly -----------------------------------------------------------------------------


def nearest_indices(n_src: int, n_dst: int) -> np.ndarray:
    """Nearest-neighbour upsampling map: destination j reads source floor(j * n_src / n_dst)."""
    j = np.arange(n_dst, dtype=np.int64)
    return (j * n_src) // n_dst


def _linear(x, w, b):
    return nx.add(nx.matmul(x, w), b)


def assemble_conditions(visual, sync, text, projections, timestep_emb, C: int):
    """Build (c_g, c_e) from per-stream features.

    visual (B, N_clip, d_v), sync (B, N_sync, d_s), text (B, d_t) and
    timestep_emb (B, d) may be arrays or tensors. ``projections`` maps
    'visual', 'sync', 'text' to (weight, bias) pairs and may hold 'sync_pos'
    (N_sync, d). Returns c_g of shape (B, 1, d) and c_e of shape (B, C, d).
    """
    wv, bv = projections["visual"]
    ws, bs = projections["sync"]
    wt, bt = projections["text"]
    vd, sd, td = (np.shape(nx._data(a)) for a in (visual, sync, text))
    if vd[-1] != np.shape(nx._data(wv))[0] or sd[-1] != np.shape(nx._data(ws))[0] or td[-1] != np.shape(nx._data(wt))[0]:
        raise DimensionError("projection input widths do not match feature widths")
    pooled = nx.mean(_linear(visual, wv, bv), axis=1)
    c_g = nx.add(nx.add(pooled, _linear(text, wt, bt)), timestep_emb)
    c_g = nx.reshape(c_g, (c_g.shape[0], 1, c_g.shape[-1]))
    sync_h = _linear(sync, ws, bs)
    if "sync_pos" in projections:
        sync_h = nx.add(sync_h, projections["sync_pos"])
    n_sync = sd[1]
    c_e = nx.add(nx.gather_rows(sync_h, nearest_indices(n_sync, C), axis=1), c_g)
    return c_g, c_e


# manifest ---------------------------------------------------------------------------------


def format_manifest_line(spec: EventSpec) -> str:
    times = ",".join(f"{t:g}" for t in spec.event_times) or "-"
    return f"{spec.class_id}\t{times}\t{spec.clip_len:g}"


def parse_manifest_line(line: str, default_clip_len: float = DEFAULT_CLIP_LEN) -> EventSpec:
    parts = line.split()
    if not 1 <= len(parts) <= 3:
        raise ParseError(f"bad manifest line: {line!r}")
    try:
        class_id = int(parts[0])
        times = () if len(parts) < 2 or parts[1] == "-" else tuple(float(x) for x in parts[1].split(","))
        clip_len = float(parts[2]) if len(parts) == 3 else default_clip_len
    except ValueError as exc:
        raise ParseError(f"bad manifest line: {line!r}") from exc
    return EventSpec(class_id, times, clip_len)


def read_event_manifest(path, default_clip_len: float = DEFAULT_CLIP_LEN) -> list[EventSpec]:
    out = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            out.append(parse_manifest_line(line, default_clip_len))
    return out


def write_event_manifest(specs, path) -> None:
    lines = ["# class_id<TAB>event_times(comma-separated seconds or '-')<TAB>clip_len"]
    lines += [format_manifest_line(s) for s in specs]
    Path(path).write_text("\n".join(lines) + "\n")
