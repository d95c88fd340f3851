"""
Adversarial Koopman reduced-order modeling toolkit

Simulate reaction-diffusion corpora, train deep Koopman models with an
adversarial critic, and use them for rollout prediction, imputation of
missing snapshots and latent-space control.
"""

__version__ = "0.1.0"
__author__ = "James Mashaka"
__email__ = "j1997ames@gmail.com"

from .control import ControlConfig, ControlInputs, make_control_matrix, optimize_controls
from .corpus import (
    CorpusMetadata,
    NormalizationStats,
    SnapshotCorpus,
    apply_missing_policy,
    load_corpus,
    mask_indices,
    sample_sequence,
    save_corpus,
)
from .evaluation import (
    ABLATION_VARIANTS,
    EvalProtocol,
    impute_missing,
    mean_l1_error,
    persistence_baseline,
    predict_sequence,
    run_ablation,
)
from .exceptions import (
    CheckpointError,
    CorpusError,
    DivergenceError,
    KoopmanError,
    NonFiniteLossError,
    SolverBlowupError,
    ValidationError,
)
from .koopman import LossWeights, koopman_apply, rollout, total_generator_loss
from .networks import KoopmanModel, ModelConfig, Mode
from .solvers import GSConfig, KSConfig, generate_gs_corpus, generate_ks_corpus
from .training import Checkpoint, KoopmanTrainer, TrainConfig, load_checkpoint, train

__all__ = [
    "KSConfig",
    "GSConfig",
    "generate_ks_corpus",
    "generate_gs_corpus",
    "CorpusMetadata",
    "SnapshotCorpus",
    "NormalizationStats",
    "save_corpus",
    "load_corpus",
    "sample_sequence",
    "apply_missing_policy",
    "mask_indices",
    "ModelConfig",
    "KoopmanModel",
    "Mode",
    "LossWeights",
    "koopman_apply",
    "rollout",
    "total_generator_loss",
    "TrainConfig",
    "KoopmanTrainer",
    "Checkpoint",
    "train",
    "load_checkpoint",
    "EvalProtocol",
    "ABLATION_VARIANTS",
    "predict_sequence",
    "persistence_baseline",
    "mean_l1_error",
    "run_ablation",
    "impute_missing",
    "ControlConfig",
    "ControlInputs",
    "make_control_matrix",
    "optimize_controls",
    "KoopmanError",
    "ValidationError",
    "SolverBlowupError",
    "CorpusError",
    "CheckpointError",
    "DivergenceError",
    "NonFiniteLossError",
]
