"""
Long-horizon prediction, error metrics, ablation harness and imputation
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .corpus import CorpusMetadata, SnapshotCorpus, save_corpus
from .exceptions import MissingPredecessorError, ValidationError
from .koopman import DEFAULT_LATENT_BOUND, LossWeights, rollout
from .networks import ModelConfig, Mode, network_mode, to_corpus_layout, to_network_layout
from .training import Checkpoint, TrainConfig, train

# name -> (lambda_gan, lambda_grad)
ABLATION_VARIANTS: Dict[str, Tuple[float, float]] = {
    "koopman": (0.0, 0.0),
    "adv_koopman": (0.01, 0.0),
    "koopman_grad": (0.0, 1.0),
    "adv_koopman_grad": (0.01, 1.0),
}

VARIANT_LABELS = {
    "koopman": "Koopman",
    "adv_koopman": "Adv Koopman",
    "koopman_grad": "Koopman + grad",
    "adv_koopman_grad": "Adv Koopman + grad",
}


@dataclass(frozen=True)
class EvalProtocol:
    """Where a rollout starts and how many steps it predicts"""

    start_index: int
    n_steps: int

    def __post_init__(self):
        if self.start_index < 0 or self.n_steps < 1:
            raise ValidationError(
                f"Invalid protocol: start {self.start_index}, steps {self.n_steps}"
            )

    def truth_slice(self) -> slice:
        return slice(self.start_index + 1, self.start_index + 1 + self.n_steps)


KS_ROLLOUT = EvalProtocol(start_index=0, n_steps=1152)
KS_PROTOCOL = EvalProtocol(start_index=860, n_steps=320)
GS_PROTOCOL = EvalProtocol(start_index=60, n_steps=32)


def variant_weights(name: str, base: LossWeights) -> LossWeights:
    """Gate lambda_GAN / lambda_grad of base for a named ablation variant"""
    if name not in ABLATION_VARIANTS:
        raise ValidationError(
            f"Unknown variant {name!r}; choose from {', '.join(ABLATION_VARIANTS)}"
        )
    lambda_gan, lambda_grad = ABLATION_VARIANTS[name]
    return base.gated(lambda_gan=lambda_gan, lambda_grad=lambda_grad)


# -- prediction --------------------------------------------------------------


def predict_sequence(
    x_start: np.ndarray,
    n_steps: int,
    checkpoint: Checkpoint,
    max_norm: Optional[float] = DEFAULT_LATENT_BOUND,
) -> np.ndarray:
    """Chain rollout cycles of n_S steps from one channels-last snapshot.

    The last decoded snapshot of a cycle is re-encoded to start the next one.
    Returns ``(n_steps, *snapshot_shape)`` in corpus units.
    """
    if n_steps < 1:
        raise ValidationError(f"n_steps must be >= 1, got {n_steps}")
    model = checkpoint.model
    rank = checkpoint.model_config.spatial_rank
    stats = checkpoint.normalization
    cycle = checkpoint.cycle_length

    current = to_network_layout(stats.apply(np.asarray(x_start))[None], rank)
    outputs: List[torch.Tensor] = []
    remaining = n_steps
    with torch.no_grad(), network_mode(model, Mode.EVAL):
        while remaining > 0:
            length = min(cycle, remaining)
            z = model.encode(current)
            latents = rollout(model, z, length, max_norm=max_norm)
            decoded = model.decode(latents[0])
            outputs.append(decoded)
            current = decoded[-1:]
            remaining -= length
    prediction = to_corpus_layout(torch.cat(outputs), rank)
    return stats.invert(prediction)


def persistence_baseline(x_start: np.ndarray, n_steps: int) -> np.ndarray:
    """Predict x_{t+m} = x_t for every m"""
    return np.repeat(np.asarray(x_start)[None], n_steps, axis=0)


def mean_l1_error(
    pred: np.ndarray, truth: np.ndarray, per_step: bool = False
) -> Union[float, np.ndarray]:
    """Mean absolute difference, optionally one value per leading time step"""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValidationError(f"Shape mismatch: {pred.shape} vs {truth.shape}")
    error = np.abs(pred - truth)
    if per_step:
        return error.reshape(error.shape[0], -1).mean(axis=1)
    return float(error.mean())


@dataclass
class RolloutEvaluation:
    """Prediction, ground truth and per-step errors for one protocol"""

    protocol: EvalProtocol
    prediction: np.ndarray
    truth: np.ndarray
    per_step_l1: np.ndarray
    baseline_per_step_l1: np.ndarray

    @property
    def mean_l1(self) -> float:
        return float(self.per_step_l1.mean())


def evaluate_rollout(
    corpus: SnapshotCorpus, checkpoint: Checkpoint, protocol: EvalProtocol
) -> RolloutEvaluation:
    """Predict from corpus[start] and score against the following snapshots"""
    window = protocol.truth_slice()
    if window.stop > len(corpus):
        raise ValidationError(
            f"Protocol needs snapshots up to {window.stop - 1}, corpus has {len(corpus)}"
        )
    x_start = corpus.data[protocol.start_index]
    truth = corpus.data[window]
    prediction = predict_sequence(x_start, protocol.n_steps, checkpoint)
    baseline = persistence_baseline(x_start, protocol.n_steps)
    return RolloutEvaluation(
        protocol=protocol,
        prediction=prediction,
        truth=truth,
        per_step_l1=mean_l1_error(prediction, truth, per_step=True),
        baseline_per_step_l1=mean_l1_error(baseline, truth, per_step=True),
    )


def write_series(path: Union[str, Path], columns: Mapping[str, np.ndarray]) -> Path:
    """Write equal-length series as comma-delimited text with a header"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(columns)
    table = np.column_stack([np.asarray(columns[n], dtype=np.float64) for n in names])
    np.savetxt(path, table, delimiter=",", header=",".join(names), comments="")
    return path


def save_prediction(
    prediction: np.ndarray, metadata: CorpusMetadata, path: Union[str, Path]
) -> None:
    """Store predicted snapshots in the corpus file format"""
    save_corpus(SnapshotCorpus(data=prediction, metadata=replace(metadata)), path)


# -- ablation ----------------------------------------------------------------


@dataclass
class AblationRow:
    variant: str
    weights: LossWeights
    per_step_l1: Optional[np.ndarray] = None
    error: Optional[str] = None

    @property
    def mean_l1(self) -> Optional[float]:
        return None if self.per_step_l1 is None else float(self.per_step_l1.mean())


@dataclass
class AblationResult:
    protocol: EvalProtocol
    rows: List[AblationRow] = field(default_factory=list)
    missing_steps: List[int] = field(default_factory=list)

    def curves(self) -> Dict[str, np.ndarray]:
        return {r.variant: r.per_step_l1 for r in self.rows if r.per_step_l1 is not None}

    def table(self) -> List[Dict[str, object]]:
        return [
            {"variant": r.variant, "mean_l1": r.mean_l1, "error": r.error}
            for r in self.rows
        ]

    def write(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "ablation_table.csv", "w", encoding="utf-8") as fh:
            fh.write("variant,mean_l1,error\n")
            for row in self.table():
                mean = "" if row["mean_l1"] is None else f"{row['mean_l1']:.8e}"
                fh.write(f"{row['variant']},{mean},{row['error'] or ''}\n")
        curves = self.curves()
        if curves:
            steps = np.arange(1, self.protocol.n_steps + 1)
            write_series(out_dir / "ablation_curves.csv", {"step": steps, **curves})
        if self.missing_steps:
            np.savetxt(out_dir / "missing_steps.txt", self.missing_steps, fmt="%d")
        return out_dir


def run_ablation(
    corpus: SnapshotCorpus,
    variants: Union[Sequence[str], Mapping[str, LossWeights]],
    model_config: ModelConfig,
    train_config: TrainConfig,
    protocol: EvalProtocol,
    truth_corpus: Optional[SnapshotCorpus] = None,
    out_dir: Optional[Union[str, Path]] = None,
    logger: Optional[logging.Logger] = None,
) -> AblationResult:
    """Train and evaluate each variant with identical seeds and data order"""
    train_kwargs = {"logger": logger} if logger is not None else {}
    logger = logger or logging.getLogger(__name__)
    truth_corpus = truth_corpus or corpus
    if isinstance(variants, Mapping):
        plan = dict(variants)
    else:
        plan = {name: variant_weights(name, train_config.weights) for name in variants}

    window = protocol.truth_slice()
    result = AblationResult(
        protocol=protocol,
        missing_steps=[
            int(i) - protocol.start_index
            for i in corpus.missing_indices
            if window.start <= i < window.stop
        ],
    )

    logger.info(f"Running ablation over {len(plan)} variant(s): {', '.join(plan)}")
    for index, (name, weights) in enumerate(plan.items(), start=1):
        logger.info(f"Processing variant {index}/{len(plan)}: {name}")
        variant_dir = Path(out_dir) / name if out_dir else None
        try:
            checkpoint = train(
                corpus,
                model_config,
                replace(train_config, weights=weights),
                out_dir=variant_dir,
                **train_kwargs,
            )
            evaluation = evaluate_rollout(truth_corpus, checkpoint, protocol)
            result.rows.append(AblationRow(name, weights, evaluation.per_step_l1))
        except Exception as e:
            logger.error(f"Variant {name} failed: {str(e)}")
            result.rows.append(AblationRow(name, weights, error=str(e)))

    if out_dir:
        result.write(out_dir)
    return result


# -- imputation --------------------------------------------------------------


@dataclass
class ImputedSnapshot:
    index: int
    source_index: int
    steps: int
    values: np.ndarray
    l1_error: Optional[float] = None


def impute_missing(
    corpus: SnapshotCorpus,
    checkpoint: Checkpoint,
    truth_corpus: Optional[SnapshotCorpus] = None,
    logger: Optional[logging.Logger] = None,
) -> List[ImputedSnapshot]:
    """Predict every masked snapshot from the most recent available one"""
    logger = logger or logging.getLogger(__name__)
    results: List[ImputedSnapshot] = []
    available = corpus.available_indices
    for k in corpus.missing_indices:
        earlier = available[available < k]
        if earlier.size == 0:
            raise MissingPredecessorError(
                f"Missing snapshot {k} has no earlier available snapshot"
            )
        j = int(earlier[-1])
        steps = int(k) - j
        values = predict_sequence(corpus.data[j], steps, checkpoint)[-1]
        error = None
        if truth_corpus is not None:
            error = mean_l1_error(values, truth_corpus.data[k])
        results.append(ImputedSnapshot(int(k), j, steps, values, error))
        logger.info(f"Imputed snapshot {k} from {j} ({steps} step(s))")
    return results
