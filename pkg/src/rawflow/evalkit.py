"""Distribution metrics with pluggable embedders: Frechet distance, paired KL, Inception Score."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import DimensionError, PreconditionError

KL_FLOOR = 1e-10


@dataclass(frozen=True)
class EmbeddingStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.mean.size


def gaussian_stats(embeddings) -> EmbeddingStats:
    """Mean and biased (1/N) covariance of an (N, d) embedding matrix."""
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if x.shape[0] < 1:
        raise PreconditionError("need at least one embedding")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / x.shape[0]
    return EmbeddingStats(mu, 0.5 * (cov + cov.T), x.shape[0])


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: EmbeddingStats, b: EmbeddingStats) -> float:
    """|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)), clipped at zero.

    The cross term uses the symmetric form sqrt(S_a) S_b sqrt(S_a), whose
    eigenvalues (clipped at 0) have the same square roots' sum.
    """
    if a.dim != b.dim:
        raise DimensionError(f"embedding dims differ: {a.dim} vs {b.dim}")
    root_a = _psd_sqrt(a.cov)
    m = root_a @ b.cov @ root_a
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(0.5 * (m + m.T)), 0.0, None)).sum()
    diff = a.mean - b.mean
    fd = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)
    return max(fd, 0.0)


def check_posteriors(p, atol: float = 1e-6) -> np.ndarray:
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    if (p < 0).any() or not np.allclose(p.sum(axis=1), 1.0, atol=atol):
        raise PreconditionError("posterior rows must be nonnegative and sum to 1")
    return p


def paired_kl(p, q) -> float:
    """Mean over paired rows of KL(p_i || q_i), probabilities floored at 1e-10."""
    p, q = check_posteriors(p), check_posteriors(q)
    if p.shape != q.shape:
        raise DimensionError(f"posterior sets differ in shape: {p.shape} vs {q.shape}")
    p_, q_ = np.maximum(p, KL_FLOOR), np.maximum(q, KL_FLOOR)
    return float(np.mean(np.sum(p * (np.log(p_) - np.log(q_)), axis=1)))


def inception_score(p) -> float:
    """exp(mean_i KL(p_i || marginal))."""
    p = check_posteriors(p)
    marginal = p.mean(axis=0, keepdims=True)
    kl = np.sum(p * (np.log(np.maximum(p, KL_FLOOR)) - np.log(np.maximum(marginal, KL_FLOOR))), axis=1)
    return float(np.exp(kl.mean()))


# embedder ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = 64, fmin: float = 0.0, fmax: float | None = None):
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / np.maximum(mid - lo, 1e-9)
    down = (hi - freqs[None, :]) / np.maximum(hi - mid, 1e-9)
    return np.clip(np.minimum(up, down), 0.0, None)


class MelStatsEmbedder(TransformerMixin, BaseEstimator):
    """Per-band mean and standard deviation of log-mel energies (2 * n_mels features).

    ``fit`` records the clip length; ``transform`` rejects clips of another length.
    """

    def __init__(self, sample_rate=16000, n_fft=512, hop_length=128, n_mels=64, floor=1e-10):
        self.sample_rate = sample_rate
        self.n_fft = n_fft
        self.hop_length = hop_length
        self.n_mels = n_mels
        self.floor = floor

    def fit(self, X, y=None):
        X = check_array(X, ensure_2d=True)
        self.clip_length_ = X.shape[1]
        self.filters_ = mel_filterbank(self.sample_rate, self.n_fft, self.n_mels)
        self.window_ = np.hanning(self.n_fft + 1)[:-1]
        self.n_features_in_ = X.shape[1]
        return self

    def _log_mel(self, x):
        if x.size < self.n_fft:
            x = np.pad(x, (0, self.n_fft - x.size))
        n_frames = 1 + (x.size - self.n_fft) // self.hop_length
        idx = np.arange(self.n_fft)[None, :] + self.hop_length * np.arange(n_frames)[:, None]
        power = np.abs(np.fft.rfft(x[idx] * self.window_, axis=1)) ** 2
        return np.log(power @ self.filters_.T + self.floor)

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X, ensure_2d=True)
        if X.shape[1] != self.clip_length_:
            raise DimensionError(f"clip length {X.shape[1]} != fitted length {self.clip_length_}")
        out = []
        for x in X:
            lm = self._log_mel(x)
            out.append(np.concatenate([lm.mean(axis=0), lm.std(axis=0)]))
        return np.array(out)


def mel_stats_embedder(buf, n_fft=512, hop_length=128, n_mels=64) -> np.ndarray:
    """128-dim (for 64 bands) embedding of one waveform buffer."""
    x = np.asarray(buf.samples)[None, :]
    emb = MelStatsEmbedder(buf.sample_rate, n_fft, hop_length, n_mels).fit(x)
    return emb.transform(x)[0]


class CentroidPosteriorClassifier(ClassifierMixin, BaseEstimator):
    """Softmax over negative squared distances to per-class centroids.

    Distances are divided by ``temperature`` times the mean within-class
    squared spread, so the posterior sharpness does not depend on feature scale.
    """

    def __init__(self, temperature=1.0):
        self.temperature = temperature

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = np.unique(y)
        self.centroids_ = np.stack([X[y == c].mean(axis=0) for c in self.classes_])
        spread = np.mean([np.sum((X[y == c] - m) ** 2, axis=1).mean() for c, m in zip(self.classes_, self.centroids_)])
        self.scale_ = max(float(spread), 1e-12)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self)
        X = check_array(X)
        d2 = ((X[:, None, :] - self.centroids_[None, :, :]) ** 2).sum(axis=-1)
        logits = -d2 / (self.temperature * self.scale_)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


@dataclass
class MetricReport:
    fd: float
    kl: float | None
    inception_score: float | None
    embedder: str
    classifier: str
    n_generated: int
    n_reference: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["is"] = d.pop("inception_score")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)
