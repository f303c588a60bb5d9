"""Waveform-domain flow-matching generation of event-synchronized audio at toy scale."""

from .audio_io import LiftConfig, WaveformBuffer, amplitude_lift, amplitude_unlift, integrated_loudness
from .audio_io import normalize_loudness, read_wav, write_wav
from .conditioning import ConditionBatch, ConditionBundle, EventSpec, FeatureConfig, make_bundle, stack_bundles
from .errors import (
    CapabilityError,
    ConfigError,
    DimensionError,
    NumericError,
    ParseError,
    PreconditionError,
    RawflowError,
    VersionError,
)
from .estimators import AmplitudeLifter, FlowMatchingGenerator, WaveformPatchifier
from .evalkit import MelStatsEmbedder, MetricReport, frechet_distance, inception_score, paired_kl
from .flowmatch import SamplerConfig, TimestepConfig, euler_sample
from .model import ModelConfig, forward, init_params, load_checkpoint, save_checkpoint
from .patch_grid import TokenGrid, patchify, unpatchify
from .trainer import ToyDatasetSpec, TrainConfig, train

__version__ = "0.1.0"
