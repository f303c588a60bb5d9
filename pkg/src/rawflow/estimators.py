"""scikit-learn style front ends.

``X`` is always an (n_clips, n_samples) array of mono waveforms at one sample
rate, so these compose with sklearn pipelines and ``get_params``/``set_params``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import flowmatch as fm
from .audio_io import LiftConfig, WaveformBuffer, amplitude_lift, amplitude_unlift
from .conditioning import EventSpec, FeatureConfig, make_bundle, stack_bundles, t2a
from .model import ModelConfig
from .patch_grid import num_tokens, patchify
from .sampling import generate_grids, grid_to_waveform
from .trainer import PreparedData, TrainConfig, train


class AmplitudeLifter(TransformerMixin, BaseEstimator):
    """Row-wise RMS normalization to ``r_star``, clamp to [-1, 1], scale by ``s_a``."""

    def __init__(self, r_star=0.33, s_a=3.0, rms_floor=1e-6):
        self.r_star = r_star
        self.s_a = s_a
        self.rms_floor = rms_floor

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X)
        cfg = LiftConfig(self.r_star, self.s_a, self.rms_floor)
        return np.stack([amplitude_lift(WaveformBuffer(x, 16000), cfg).samples for x in X])

    def inverse_transform(self, X):
        """Undo the global scale only; the RMS ratio and clamp are not invertible."""
        X = check_array(X)
        return np.stack([amplitude_unlift(WaveformBuffer(x, 16000), self.s_a).samples for x in X])


class WaveformPatchifier(TransformerMixin, BaseEstimator):
    """Reshape (n, T) waveforms to (n, C, D) token grids, zero-padding the tail."""

    def __init__(self, patch_size=200):
        self.patch_size = patch_size

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_samples_ = X.shape[1]
        self.n_tokens_ = num_tokens(X.shape[1], self.patch_size)
        self.pad_len_ = self.n_tokens_ * self.patch_size - X.shape[1]
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X)
        return np.stack([patchify(WaveformBuffer(x, 16000), self.patch_size).data for x in X])

    def inverse_transform(self, G):
        check_is_fitted(self)
        G = np.asarray(G, dtype=np.float64)
        return G.reshape(G.shape[0], -1)[:, : self.n_samples_]


class FlowMatchingGenerator(BaseEstimator):
    """Class- and event-conditioned waveform generator.

    ``fit(X, y)`` trains on waveforms ``X`` with ``y`` a sequence of
    :class:`EventSpec` (or plain integer class ids, meaning no events).
    ``sample(y)`` draws one waveform per condition.
    """

    def __init__(self, model_config=None, train_config=None, feature_config=None, sample_rate=16000,
                 steps=50, cfg_scale=4.5, r_star=0.33, s_a=3.0, use_ema=True, seed=0):
        self.model_config = model_config
        self.train_config = train_config
        self.feature_config = feature_config
        self.sample_rate = sample_rate
        self.steps = steps
        self.cfg_scale = cfg_scale
        self.r_star = r_star
        self.s_a = s_a
        self.use_ema = use_ema
        self.seed = seed

    def _specs(self, y, clip_len):
        return [s if isinstance(s, EventSpec) else EventSpec(int(s), (), clip_len) for s in y]

    def fit(self, X, y):
        X = check_array(X)
        mc = self.model_config or ModelConfig()
        tc = self.train_config or TrainConfig()
        specs = self._specs(y, X.shape[1] / self.sample_rate)
        fc = self.feature_config or FeatureConfig(
            num_classes=max(s.class_id for s in specs) + 1,
            n_clip=mc.n_clip, n_sync=mc.n_sync, d_v=mc.d_v, d_s=mc.d_s, d_t=mc.d_t,
        )
        lift = LiftConfig(self.r_star, self.s_a)
        grids = np.stack([patchify(amplitude_lift(WaveformBuffer(x, self.sample_rate), lift), mc.D).data for x in X])
        data = PreparedData(grids, stack_bundles([make_bundle(s, fc) for s in specs]), np.array([s.class_id for s in specs]))
        self.state_, self.losses_ = train(mc, tc, data)
        self.model_config_, self.feature_config_ = mc, fc
        self.n_samples_ = X.shape[1]
        self.n_features_in_ = X.shape[1]
        return self

    def sample(self, y, mode="vt2a", normalize=False):
        """Waveforms (len(y), n_samples); ``mode='t2a'`` nulls the visual pathway."""
        check_is_fitted(self)
        specs = self._specs(y, self.n_samples_ / self.sample_rate)
        bundles = [make_bundle(s, self.feature_config_) for s in specs]
        if mode == "t2a":
            bundles = [t2a(b) for b in bundles]
        params = self.state_.ema if self.use_ema else self.state_.params
        grids = generate_grids(params, self.model_config_, stack_bundles(bundles), self.n_samples_,
                               fm.SamplerConfig(self.steps, self.cfg_scale), self.seed)
        target = -23.0 if normalize else None
        return np.stack([
            grid_to_waveform(g, self.n_samples_, self.sample_rate, self.s_a, target).samples for g in grids
        ])
