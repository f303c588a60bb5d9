"""Miniature multimodal diffusion transformer over waveform token grids.

Parameters are a flat ``{name: ndarray}`` dict. ``forward`` works on plain
arrays for inference and on watched tensors inside a :class:`~rawflow.numerics.Tape`
for training, so the same code path is differentiated and sampled.

Layout of one forward pass::

    audio tokens (B, C, D) --linear+conv--> (B, C, d) --+
    visual rows (B, N_clip, d_v) --linear+conv--> -------+-- joint blocks --> fused blocks (audio) --> output block --> (B, C, D)
    text (B, d_t) --linear--> (B, 1, d) -----------------+

Audio rows are modulated by c_e (one condition row per token); visual and
text rows by c_g.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .conditioning import ConditionBatch, assemble_conditions
from .errors import ConfigError, DimensionError, NumericError, ParseError, VersionError

PRED_MODES = ("x_pred", "v_pred")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    heads: int = 4
    L_joint: int = 1
    L_fused: int = 2
    D: int = 8
    pred_mode: str = "x_pred"
    rope_base: float = 10000.0
    n_clip: int = 8
    n_sync: int = 8
    d_v: int = 16
    d_s: int = 16
    d_t: int = 16
    mlp_ratio: int = 4
    freq_dim: int = 32
    in_kernel: int = 3
    out_kernel: int = 7
    rope_in_fused: bool = True

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"hidden dim {self.d} not divisible by {self.heads} heads")
        if (self.d // self.heads) % 2:
            raise ConfigError("head dimension must be even for rotary embeddings")
        if self.L_joint < 1 or self.L_fused < 1:
            raise ConfigError("need at least one joint and one fused block")
        if self.pred_mode not in PRED_MODES:
            raise ConfigError(f"pred_mode must be one of {PRED_MODES}")
        if self.freq_dim % 2:
            raise ConfigError("freq_dim must be even")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


STREAMS = ("audio", "visual", "text")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, hidden = cfg.d, cfg.d * cfg.mlp_ratio
    shapes = {
        "audio_in.w": (cfg.D, d),
        "audio_in.b": (d,),
        "audio_in.conv_w": (cfg.in_kernel, d, d),
        "audio_in.conv_b": (d,),
        "visual_in.w": (cfg.d_v, d),
        "visual_in.b": (d,),
        "visual_in.conv_w": (cfg.in_kernel, d, d),
        "visual_in.conv_b": (d,),
        "text_in.w": (cfg.d_t, d),
        "text_in.b": (d,),
        "cond_visual.w": (cfg.d_v, d),
        "cond_visual.b": (d,),
        "cond_text.w": (cfg.d_t, d),
        "cond_text.b": (d,),
        "cond_sync.w": (cfg.d_s, d),
        "cond_sync.b": (d,),
        "sync_pos": (cfg.n_sync, d),
        "null_visual": (cfg.d_v,),
        "null_sync": (cfg.d_s,),
        "null_text": (cfg.d_t,),
        "t_embed.w1": (cfg.freq_dim, d),
        "t_embed.b1": (d,),
        "t_embed.w2": (d, d),
        "t_embed.b2": (d,),
    }

    def block(prefix):
        shapes.update({
            f"{prefix}.mod_w": (d, 6 * d),
            f"{prefix}.mod_b": (6 * d,),
            f"{prefix}.qkv_w": (d, 3 * d),
            f"{prefix}.qkv_b": (3 * d,),
            f"{prefix}.proj_w": (d, d),
            f"{prefix}.proj_b": (d,),
            f"{prefix}.fc1_w": (d, hidden),
            f"{prefix}.fc1_b": (hidden,),
            f"{prefix}.fc2_w": (hidden, d),
            f"{prefix}.fc2_b": (d,),
        })

    for i in range(cfg.L_joint):
        for s in STREAMS:
            block(f"joint{i}.{s}")
    for i in range(cfg.L_fused):
        block(f"fused{i}")
    shapes.update({
        "out.mod_w": (d, 2 * d),
        "out.mod_b": (2 * d,),
        "out.conv_w": (cfg.out_kernel, d, cfg.D),
        "out.conv_b": (cfg.D,),
    })
    return shapes


# modulation chunk order inside mod_w / mod_b
_MOD_CHUNKS = ("shift1", "scale1", "gate1", "shift2", "scale2", "gate2")


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fan-in scaled normal weights, zero biases, zero nulls, zero AdaLN gates."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("null_") or leaf.endswith("b") or leaf in ("b1", "b2"):
            arr = np.zeros(shape)
        elif name == "sync_pos":
            arr = 0.02 * rng.standard_normal(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            arr = rng.standard_normal(shape) / math.sqrt(fan_in)
        params[name] = arr
    d = cfg.d
    for name in params:
        if name.endswith(".mod_w") and not name.startswith("out."):
            for k in (2, 5):  # gate1, gate2
                params[name][:, k * d : (k + 1) * d] = 0.0
    return {k: v.astype(dtype) for k, v in params.items()}


def param_count(params) -> int:
    return int(sum(np.asarray(v).size for v in params.values()))


# building blocks ---------------------------------------------------------------------


def linear(x, w, b=None):
    y = nx.matmul(x, w)
    return y if b is None else nx.add(y, b)


def timestep_features(t, freq_dim: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal features of 1000 t, shape (B, freq_dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = freq_dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1).astype(dtype)


def adaln_chunks(c, w, b, n: int):
    """silu(c) @ w + b split into ``n`` equal chunks along the last axis."""
    mod = linear(nx.silu(c), w, b)
    width = np.shape(nx._data(mod))[-1] // n
    return nx.split(mod, [width] * n, axis=-1)


def adaln_modulate(h, scale, shift, gate=None):
    """gate * (scale * layernorm(h) + shift); ``gate=None`` means no gating."""
    out = nx.add(nx.mul(nx.layernorm(h), scale), shift)
    return out if gate is None else nx.mul(gate, out)


def rope_rotate(x, positions, base: float = 10000.0):
    """Rotary transform of (..., len, head_dim) with one position per row."""
    head_dim = np.shape(nx._data(x))[-1]
    return nx.rope(x, nx.rope_angles(positions, head_dim, base))


def visual_rope_positions(visual_index, C: int, n_clip: int):
    """Rotary position of visual row j: its audio-rate position j * C / N_clip."""
    if n_clip < 1:
        raise DimensionError("N_clip must be >= 1")
    return np.asarray(visual_index, dtype=np.float64) * (C / n_clip)


def _heads(x, heads):
    B, L, d = np.shape(nx._data(x))
    return nx.transpose(nx.reshape(x, (B, L, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    B, H, L, hd = np.shape(nx._data(x))
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (B, L, H * hd))


def attention(q, k, v):
    """Bidirectional softmax attention on (B, H, L, hd) inputs."""
    hd = np.shape(nx._data(q))[-1]
    scores = nx.mul(nx.matmul(q, nx.swapaxes(k, -1, -2)), 1.0 / math.sqrt(hd))
    return nx.matmul(nx.softmax_lastdim(scores), v)


def _mlp(p, prefix, x):
    return linear(nx.gelu(linear(x, p[f"{prefix}.fc1_w"], p[f"{prefix}.fc1_b"])), p[f"{prefix}.fc2_w"], p[f"{prefix}.fc2_b"])


def _qkv(p, prefix, x, heads):
    qkv = linear(x, p[f"{prefix}.qkv_w"], p[f"{prefix}.qkv_b"])
    d = np.shape(nx._data(qkv))[-1] // 3
    return [_heads(z, heads) for z in nx.split(qkv, [d, d, d], axis=-1)]


def joint_block(p, prefix, streams, conds, angles, heads):
    """One joint attention block over several token streams.

    ``streams``: list of (name, h) with h (B, L_s, d); ``conds``: matching
    condition tensors (B, L_s or 1, d); ``angles``: rotary angles per stream
    or None to leave that stream unrotated.
    """
    mods, qs, ks, vs, lens = [], [], [], [], []
    for (name, h), c, ang in zip(streams, conds, angles):
        pre = f"{prefix}.{name}" if name else prefix
        m = dict(zip(_MOD_CHUNKS, adaln_chunks(c, p[f"{pre}.mod_w"], p[f"{pre}.mod_b"], 6)))
        mods.append(m)
        x = adaln_modulate(h, nx.add(m["scale1"], 1.0), m["shift1"])
        q, k, v = _qkv(p, pre, x, heads)
        if ang is not None:
            q, k = nx.rope(q, ang), nx.rope(k, ang)
        qs.append(q), ks.append(k), vs.append(v)
        lens.append(np.shape(nx._data(h))[1])
    if len(streams) == 1:
        att = attention(qs[0], ks[0], vs[0])
        parts = [_merge_heads(att)]
    else:
        att = attention(nx.concat(qs, axis=2), nx.concat(ks, axis=2), nx.concat(vs, axis=2))
        parts = nx.split(_merge_heads(att), lens, axis=1)
    out = []
    for (name, h), m, a, c in zip(streams, mods, parts, conds):
        pre = f"{prefix}.{name}" if name else prefix
        h = nx.add(h, nx.mul(m["gate1"], linear(a, p[f"{pre}.proj_w"], p[f"{pre}.proj_b"])))
        x = adaln_modulate(h, nx.add(m["scale2"], 1.0), m["shift2"])
        h = nx.add(h, nx.mul(m["gate2"], _mlp(p, pre, x)))
        out.append(h)
    return out


def input_block(p, prefix, x):
    h = linear(x, p[f"{prefix}.w"], p[f"{prefix}.b"])
    return nx.conv1d(nx.gelu(h), p[f"{prefix}.conv_w"], p[f"{prefix}.conv_b"])


def output_block(p, h, c_e):
    shift, scale = adaln_chunks(c_e, p["out.mod_w"], p["out.mod_b"], 2)
    x = adaln_modulate(h, nx.add(scale, 1.0), shift)
    return nx.conv1d(x, p["out.conv_w"], p["out.conv_b"])


def timestep_embedding(p, t, cfg: ModelConfig, dtype):
    f = timestep_features(t, cfg.freq_dim, dtype)
    h = nx.silu(linear(f, p["t_embed.w1"], p["t_embed.b1"]))
    return linear(h, p["t_embed.w2"], p["t_embed.b2"])


def condition_inputs(p, batch: ConditionBatch, dtype):
    """Raw condition features with learned nulls swapped in where flagged."""
    vnull = batch.visual_null.reshape(-1, 1, 1)
    tnull = batch.text_null.reshape(-1, 1)
    visual = nx.where(vnull, p["null_visual"], batch.visual.astype(dtype))
    sync = nx.where(vnull, p["null_sync"], batch.sync.astype(dtype))
    text = nx.where(tnull, p["null_text"], batch.text.astype(dtype))
    return visual, sync, text


def conditions(p, cfg: ModelConfig, t, batch: ConditionBatch, C: int, dtype):
    visual, sync, text = condition_inputs(p, batch, dtype)
    t_emb = timestep_embedding(p, t, cfg, dtype)
    proj = {
        "visual": (p["cond_visual.w"], p["cond_visual.b"]),
        "sync": (p["cond_sync.w"], p["cond_sync.b"]),
        "text": (p["cond_text.w"], p["cond_text.b"]),
        "sync_pos": p["sync_pos"],
    }
    c_g, c_e = assemble_conditions(visual, sync, text, proj, t_emb, C)
    return visual, text, c_g, c_e


def forward(p, cfg: ModelConfig, x_t, t, batch: ConditionBatch, check_finite: bool = True):
    """Network output for token grids ``x_t`` (B, C, D) at times ``t`` (B,).

    Returns a tensor of shape (B, C, D): the clean-signal estimate in
    ``x_pred`` mode, the velocity in ``v_pred`` mode.
    """
    dtype = nx._data(p["audio_in.w"]).dtype
    x_t = np.asarray(nx._data(x_t), dtype=dtype)
    if x_t.ndim != 3 or x_t.shape[-1] != cfg.D:
        raise DimensionError(f"expected token grids (B, C, {cfg.D}), got {x_t.shape}")
    B, C, _ = x_t.shape
    if len(batch) != B:
        raise DimensionError(f"{B} grids but {len(batch)} condition bundles")
    if batch.visual.shape[1:] != (cfg.n_clip, cfg.d_v) or batch.sync.shape[1:] != (cfg.n_sync, cfg.d_s):
        raise DimensionError("condition feature shapes do not match the model config")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))

    visual, text, c_g, c_e = conditions(p, cfg, t, batch, C, dtype)
    h_a = input_block(p, "audio_in", x_t)
    h_v = input_block(p, "visual_in", visual)
    h_t = nx.reshape(linear(text, p["text_in.w"], p["text_in.b"]), (B, 1, cfg.d))

    hd = cfg.head_dim
    audio_angles = nx.rope_angles(np.arange(C), hd, cfg.rope_base)
    visual_angles = nx.rope_angles(visual_rope_positions(np.arange(cfg.n_clip), C, cfg.n_clip), hd, cfg.rope_base)
    for i in range(cfg.L_joint):
        h_a, h_v, h_t = joint_block(
            p, f"joint{i}",
            [("audio", h_a), ("visual", h_v), ("text", h_t)],
            [c_e, c_g, c_g],
            [audio_angles, visual_angles, None],
            cfg.heads,
        )
    fused_angles = audio_angles if cfg.rope_in_fused else None
    for i in range(cfg.L_fused):
        (h_a,) = joint_block(p, f"fused{i}", [("", h_a)], [c_e], [fused_angles], cfg.heads)
    out = output_block(p, h_a, c_e)
    if check_finite and not np.all(np.isfinite(nx._data(out))):
        raise NumericError("non-finite values in model output")
    return out


def predict(params, cfg: ModelConfig, x_t, t, batch: ConditionBatch) -> np.ndarray:
    return np.array(nx._data(forward(params, cfg, x_t, t, batch)))


# checkpoint container ---------------------------------------------------------------------
#
# little-endian throughout
#   magic    8 bytes  b"RFLWCKPT"
#   version  u32
#   meta_len u32, then meta_len bytes of UTF-8 JSON {"model": ModelConfig, "meta": {...}}
#   count    u32
#   count records of:
#     name_len u32, name (UTF-8), dtype u8 (0 float32, 1 float64), ndim u8,
#     ndim x u32 shape, raw array bytes (C order)

CHECKPOINT_MAGIC = b"RFLWCKPT"
CHECKPOINT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def save_checkpoint(path, cfg: ModelConfig, tensors: dict, meta: dict | None = None) -> None:
    header = json.dumps({"model": asdict(cfg), "meta": meta or {}}, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
    chunks.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode()
        chunks.append(struct.pack("<I", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(_DTYPES[code], copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Return (ModelConfig, tensors, meta)."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a checkpoint file")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise ParseError(f"{path}: truncated checkpoint")
        out = raw[pos : pos + n]
        pos += n
        return out

    version, meta_len = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    header = json.loads(take(meta_len).decode())
    cfg = ModelConfig.from_dict(header["model"])
    if expect is not None and cfg != expect:
        raise VersionError(f"{path}: checkpoint config {cfg} does not match {expect}")
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise ParseError(f"{path}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        size = int(np.prod(shape)) * dt.itemsize
        tensors[name] = np.frombuffer(take(size), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return cfg, tensors, header.get("meta", {})
