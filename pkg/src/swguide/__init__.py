"""Strong-weak guidance for unsupervised domain adaptation, desk scale.

Zero-shot class scores steer a small adversarially-aligned classifier in
two ways: a *strong* path that promotes the most confident target samples
into the source set with hard pseudo-labels, and a *weak* path that
distills every prediction toward temperature-calibrated soft labels.
Everything — including reverse-mode differentiation — runs on numpy.
"""

from .calibration import (
    DEFAULT_TAU,
    CalibrationResult,
    LogitMatrix,
    SoftLabelSet,
    mean_winning_probability,
    sharpen,
    solve_temperature,
)
from .data import (
    DomainDataset,
    EpisodeMetrics,
    SyntheticSpec,
    generate,
    make_benchmark,
    read_dataset,
    rng_for,
    simulate_zeroshot,
    write_dataset,
)
from .expansion import (
    ExpansionScore,
    ExpansionSelection,
    expand_dataset,
    mix_scores,
    score_from_soft_labels,
    select_pseudo_source,
)
from .losses import (
    LossReport,
    adversarial_loss,
    classification_loss,
    kd_loss,
    total_loss,
)
from .model import (
    ModelParams,
    NormLayerState,
    discriminate,
    forward,
    init_params,
    multilinear_map,
)
from .norm_adapt import adapt_model, adjust_params, estimate_stats
from .trainer import RunResult, TrainConfig, evaluate, run, run_v2

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_TAU",
    "CalibrationResult",
    "LogitMatrix",
    "SoftLabelSet",
    "mean_winning_probability",
    "sharpen",
    "solve_temperature",
    "DomainDataset",
    "EpisodeMetrics",
    "SyntheticSpec",
    "generate",
    "make_benchmark",
    "read_dataset",
    "rng_for",
    "simulate_zeroshot",
    "write_dataset",
    "ExpansionScore",
    "ExpansionSelection",
    "expand_dataset",
    "mix_scores",
    "score_from_soft_labels",
    "select_pseudo_source",
    "LossReport",
    "adversarial_loss",
    "classification_loss",
    "kd_loss",
    "total_loss",
    "ModelParams",
    "NormLayerState",
    "discriminate",
    "forward",
    "init_params",
    "multilinear_map",
    "adapt_model",
    "adjust_params",
    "estimate_stats",
    "RunResult",
    "TrainConfig",
    "evaluate",
    "run",
    "run_v2",
]
