"""Dense matching by test-time optimisation of matching networks on a single image pair."""

from .engine import (
    AugmentConfig,
    DMPModel,
    RunTrace,
    estimate_flow,
    load_pretrained,
    optimize_pair,
    optimize_pair_admp,
    save_weights,
)
from .errors import (
    ConfigurationError,
    DegenerateInputError,
    DMPError,
    FormatError,
    InputError,
    NonFiniteError,
    UndefinedMetricError,
    UsageError,
)
from .features import BackboneConfig
from .formats import read_flo, read_weights, write_flo, write_weights
from .loss import LossConfig
from .matcher import FlowField, Matcher, MatcherConfig
from .metrics import MetricReport, aee, pck
from .optim import OptimSchedule
from .transforms import (
    TransformSpec,
    flow_from_transform,
    random_transform,
    synth_pair,
    textured_image,
)
from .viz import flow_to_color

__version__ = "0.1.0"

__all__ = [
    "aee",
    "AugmentConfig",
    "BackboneConfig",
    "ConfigurationError",
    "DegenerateInputError",
    "DMPError",
    "DMPModel",
    "estimate_flow",
    "flow_from_transform",
    "flow_to_color",
    "FlowField",
    "FormatError",
    "InputError",
    "load_pretrained",
    "LossConfig",
    "Matcher",
    "MatcherConfig",
    "MetricReport",
    "NonFiniteError",
    "optimize_pair",
    "optimize_pair_admp",
    "OptimSchedule",
    "pck",
    "random_transform",
    "read_flo",
    "read_weights",
    "RunTrace",
    "save_weights",
    "synth_pair",
    "textured_image",
    "TransformSpec",
    "UndefinedMetricError",
    "UsageError",
    "write_flo",
    "write_weights",
]
