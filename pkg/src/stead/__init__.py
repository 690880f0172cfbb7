"""Spatiotemporal anomaly detection on precomputed clip features, in numpy."""

from .attention import AttentionBundle, FeatureMapParams, draw_feature_map, exact_attention, performer_attention
from .config import RunConfig
from .data import FeatureClip, Manifest, generate_synthetic, load_manifest, read_feature_file, write_feature_file
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    ManifestError,
    NonFiniteError,
    NumericalUnderflowError,
    SteadError,
    UndefinedMetricError,
)
from .losses import LossConfig, bce_loss, combined_loss, triplet_loss
from .metrics import auc_bruteforce, auc_roc
from .model import BASE, FAST, ModelConfig, count_params, forward, init_params
from .optim import OptimState, adamw_step, cosine_lr
from .tensor import Tensor, backward

__version__ = "0.1.0"
