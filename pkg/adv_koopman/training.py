"""
Training loop for the deep adversarial Koopman model
"""

import json
import logging
import pickle
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import torch

from .corpus import (
    NormalizationStats,
    SnapshotCorpus,
    compute_normalization,
    normalize_corpus,
    sample_sequence,
)
from .exceptions import (
    CheckpointError,
    CorpusError,
    CorpusTooShortError,
    NonFiniteLossError,
    ValidationError,
)
from .koopman import (
    LossBreakdown,
    LossWeights,
    forward_sequence,
    gan_losses,
    sequence_pairs,
    total_generator_loss,
)
from .networks import KoopmanModel, ModelConfig, frozen_batch_norm_stats, to_network_layout
from .validators import ConfigValidator

CHECKPOINT_FORMAT = 1
LATEST_CHECKPOINT = "checkpoint_latest.pt"
TRAINING_LOG = "training_log.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule and loss weights"""

    iterations: int = 50000
    learning_rate: float = 5.0e-5
    disc_learning_rate: float = 5.0e-5
    disc_updates_per_gen: int = 4
    n_S: int = 64
    seed: int = 0
    checkpoint_every: int = 5000
    batch_size: int = 1
    log_every: int = 100
    standardize: Optional[bool] = None
    freeze: Tuple[str, ...] = ()
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1.0e-8
    max_anchor_draws: int = 1000
    weights: LossWeights = field(default_factory=LossWeights.for_ks)

    def __post_init__(self):
        for name in (
            "iterations",
            "learning_rate",
            "disc_learning_rate",
            "disc_updates_per_gen",
            "n_S",
            "batch_size",
            "log_every",
            "max_anchor_draws",
        ):
            ConfigValidator.positive(name, getattr(self, name))
        ConfigValidator.non_negative("checkpoint_every", self.checkpoint_every)
        for part in self.freeze:
            ConfigValidator.one_of("freeze", part, KoopmanModel.GENERATOR_PARTS)

    @classmethod
    def for_ks(cls, **overrides: Any) -> "TrainConfig":
        params: Dict[str, Any] = dict(n_S=64, weights=LossWeights.for_ks())
        params.update(overrides)
        return cls(**params)

    @classmethod
    def for_gs(cls, **overrides: Any) -> "TrainConfig":
        params: Dict[str, Any] = dict(n_S=32, weights=LossWeights.for_gs())
        params.update(overrides)
        return cls(**params)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["freeze"] = list(self.freeze)
        data["betas"] = list(self.betas)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        data = dict(data)
        if isinstance(data.get("weights"), dict):
            data["weights"] = LossWeights.from_dict(data["weights"])
        return ConfigValidator.build(cls, data)


@dataclass
class Checkpoint:
    """Trained model plus everything needed to resume or evaluate it"""

    model: KoopmanModel
    model_config: ModelConfig
    train_config: TrainConfig
    iteration: int
    normalization: NormalizationStats
    problem: str = "ks"
    optimizer_state: Dict[str, Any] = field(default_factory=dict)
    rng_state: Dict[str, Any] = field(default_factory=dict)

    @property
    def cycle_length(self) -> int:
        return self.train_config.n_S


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "problem": checkpoint.problem,
            "iteration": checkpoint.iteration,
            "model_config": checkpoint.model_config.to_dict(),
            "train_config": checkpoint.train_config.to_dict(),
            "normalization": checkpoint.normalization.to_dict(),
            "model_state": checkpoint.model.state_dict(),
            "optimizer_state": checkpoint.optimizer_state,
            "rng_state": checkpoint.rng_state,
        },
        path,
    )


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint of format {CHECKPOINT_FORMAT}")

    try:
        model_config = ModelConfig.from_dict(payload["model_config"])
        train_config = TrainConfig.from_dict(payload["train_config"])
        model = KoopmanModel(model_config)
        model.load_state_dict(payload["model_state"])
    except (KeyError, RuntimeError, ValidationError) as e:
        raise CheckpointError(f"Incompatible checkpoint {path}: {e}")

    model.eval()
    return Checkpoint(
        model=model,
        model_config=model_config,
        train_config=train_config,
        iteration=int(payload["iteration"]),
        normalization=NormalizationStats.from_dict(payload["normalization"]),
        problem=payload.get("problem", "ks"),
        optimizer_state=payload.get("optimizer_state", {}),
        rng_state=payload.get("rng_state", {}),
    )


@dataclass
class StepResult:
    """Logged outcome of one train_step"""

    iteration: int
    losses: Dict[str, float]
    disc_updates: int

    def record(self) -> Dict[str, Any]:
        return {"iteration": self.iteration, **self.losses}


class KoopmanTrainer:
    """Alternating critic/generator optimization over one corpus"""

    def __init__(
        self,
        corpus: SnapshotCorpus,
        model_config: ModelConfig,
        train_config: TrainConfig,
        out_dir: Optional[Union[str, Path]] = None,
        logger: Optional[logging.Logger] = None,
        normalization: Optional[NormalizationStats] = None,
    ):
        self._check_compatible(corpus, model_config, train_config)

        self.model_config = model_config
        self.train_config = train_config
        self.problem = corpus.metadata.problem
        self.out_dir = Path(out_dir) if out_dir else None
        self.logger = logger or self._setup_logger()

        torch.manual_seed(train_config.seed)
        self.rng = np.random.default_rng(train_config.seed)
        self.torch_gen = torch.Generator().manual_seed(train_config.seed)

        standardize = train_config.standardize
        if standardize is None:
            standardize = self.problem == "ks"
        if normalization is None:
            normalization = (
                compute_normalization(corpus)
                if standardize
                else NormalizationStats.identity(corpus.metadata.channels)
            )
        self.normalization = normalization
        self.corpus = normalize_corpus(corpus, normalization)

        self.model = KoopmanModel(model_config)
        for part in train_config.freeze:
            for param in getattr(self.model, part).parameters():
                param.requires_grad_(False)

        trainable = [p for p in self.model.generator_parameters() if p.requires_grad]
        self.gen_optimizer = torch.optim.Adam(
            trainable,
            lr=train_config.learning_rate,
            betas=train_config.betas,
            eps=train_config.adam_eps,
        )
        self.disc_optimizer = torch.optim.Adam(
            self.model.disc.parameters(),
            lr=train_config.disc_learning_rate,
            betas=train_config.betas,
            eps=train_config.adam_eps,
        )
        self.iteration = 0
        self._log_file = None
        self._started = time.time()

        self.logger.info(
            f"Koopman trainer initialized: {self.problem} corpus of {len(corpus)} "
            f"snapshots, n_S={train_config.n_S}, M={model_config.latent_dim}, "
            f"{int(corpus.missing_mask.sum())} masked"
        )

    def _setup_logger(self) -> logging.Logger:
        """Setup default logger"""
        logger = logging.getLogger(__name__)
        if not logger.handlers:
            handler = logging.StreamHandler()
            formatter = logging.Formatter(
                "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
            )
            handler.setFormatter(formatter)
            logger.addHandler(handler)
            logger.setLevel(logging.INFO)
        return logger

    @staticmethod
    def _check_compatible(
        corpus: SnapshotCorpus, model_config: ModelConfig, train_config: TrainConfig
    ) -> None:
        expected = tuple(model_config.input_extent) + (model_config.in_channels,)
        if corpus.metadata.snapshot_shape != expected:
            raise ValidationError(
                f"Corpus snapshots {corpus.metadata.snapshot_shape} do not match "
                f"model input {expected}"
            )
        if model_config.sequence_length != train_config.n_S:
            raise ValidationError(
                f"Model sequence_length {model_config.sequence_length} differs from "
                f"n_S {train_config.n_S}"
            )
        if len(corpus) < train_config.n_S + 1:
            raise CorpusTooShortError(
                f"Corpus of length {len(corpus)} cannot hold a window of "
                f"{train_config.n_S + 1}"
            )

    # -- sampling ------------------------------------------------------------

    def _draw_window(self):
        """Sample until the anchor x_t is available"""
        for _ in range(self.train_config.max_anchor_draws):
            sample = sample_sequence(self.corpus, self.train_config.n_S, self.rng)
            if not sample.mask_seq[0]:
                return sample
        self.logger.warning("No window with an available anchor was found")
        raise CorpusError(
            f"No available anchor after {self.train_config.max_anchor_draws} draws"
        )

    def sample_batch(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """(B, n_S + 1, C, *spatial) windows and their (B, n_S + 1) masks"""
        windows = [self._draw_window() for _ in range(self.train_config.batch_size)]
        x = np.stack([w.x_seq for w in windows])
        mask = np.stack([w.mask_seq for w in windows])
        return (
            to_network_layout(x, self.model_config.spatial_rank),
            torch.as_tensor(mask, dtype=torch.bool),
        )

    # -- updates -------------------------------------------------------------

    def _disc_update(self, x_seq: torch.Tensor, mask_seq: torch.Tensor) -> Dict[str, float]:
        self.model.train()
        with torch.no_grad():
            with frozen_batch_norm_stats(*self.model.generator_modules()):
                forward = forward_sequence(self.model, x_seq, mask_seq)
            real_pair, fake_pair = sequence_pairs(forward)

        losses = gan_losses(
            self.model.discriminate,
            real_pair,
            fake_pair,
            gp_coeff=self.train_config.weights.gp_coeff,
            generator=self.torch_gen,
        )
        objective = losses.disc_loss + losses.gp
        if not torch.isfinite(objective):
            self._abort({"disc_loss": losses.disc_loss.item(), "gp": losses.gp.item()},
                        x_seq, mask_seq)
        self.disc_optimizer.zero_grad()
        objective.backward()
        self.disc_optimizer.step()
        return {"disc_loss": losses.disc_loss.item(), "gp": losses.gp.item()}

    def _gen_update(self, x_seq: torch.Tensor, mask_seq: torch.Tensor) -> LossBreakdown:
        self.model.train()
        with frozen_batch_norm_stats(self.model.disc):
            breakdown = total_generator_loss(
                self.model, x_seq, mask_seq, self.train_config.weights
            )
        if not breakdown.is_finite():
            self._abort(breakdown.as_dict(), x_seq, mask_seq)
        self.gen_optimizer.zero_grad()
        breakdown.total.backward()
        self.gen_optimizer.step()
        return breakdown

    def _abort(
        self, components: Dict[str, float], x_seq: torch.Tensor, mask_seq: torch.Tensor
    ) -> None:
        message = f"Non-finite loss at iteration {self.iteration + 1}: {components}"
        if self.out_dir:
            diagnostic = self.out_dir / f"diagnostic_{self.iteration + 1:06d}.pt"
            self.out_dir.mkdir(parents=True, exist_ok=True)
            torch.save(
                {
                    "iteration": self.iteration + 1,
                    "components": components,
                    "x_seq": x_seq,
                    "mask_seq": mask_seq,
                },
                diagnostic,
            )
            message += f"; diagnostic saved to {diagnostic}"
        self.logger.error(message)
        raise NonFiniteLossError(message)

    def train_step(self, sample: Tuple[torch.Tensor, torch.Tensor]) -> StepResult:
        """Critic updates (if adversarial) on fresh windows, then one generator update"""
        disc_record: Dict[str, float] = {"disc_loss": 0.0, "gp": 0.0}
        disc_updates = 0
        if self.train_config.weights.lambda_gan > 0:
            for _ in range(self.train_config.disc_updates_per_gen):
                disc_record = self._disc_update(*self.sample_batch())
                disc_updates += 1

        breakdown = self._gen_update(*sample)
        self.iteration += 1

        losses = breakdown.as_dict()
        losses.update(disc_record)
        losses["elapsed"] = time.time() - self._started
        result = StepResult(self.iteration, losses, disc_updates)
        self._log(result)
        return result

    # -- bookkeeping ---------------------------------------------------------

    def _log(self, result: StepResult) -> None:
        if self.out_dir:
            if self._log_file is None:
                self.out_dir.mkdir(parents=True, exist_ok=True)
                self._log_file = open(self.out_dir / TRAINING_LOG, "a", encoding="utf-8")
            self._log_file.write(json.dumps(result.record()) + "\n")
            self._log_file.flush()
        if result.iteration % self.train_config.log_every == 0:
            losses = result.losses
            self.logger.info(
                f"Iteration {result.iteration}/{self.train_config.iterations}: "
                f"total={losses['total']:.4e} recon={losses['recon']:.4e} "
                f"pred={losses['pred']:.4e} code={losses['code']:.4e} "
                f"disc={losses['disc_loss']:.4e}"
            )

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            model=self.model,
            model_config=self.model_config,
            train_config=self.train_config,
            iteration=self.iteration,
            normalization=self.normalization,
            problem=self.problem,
            optimizer_state={
                "gen": self.gen_optimizer.state_dict(),
                "disc": self.disc_optimizer.state_dict(),
            },
            rng_state={
                "numpy": self.rng.bit_generator.state,
                "torch": torch.get_rng_state(),
                "torch_gen": self.torch_gen.get_state(),
            },
        )

    def save(self, path: Optional[Union[str, Path]] = None) -> Path:
        if path is None:
            if self.out_dir is None:
                raise ValidationError("No output directory to checkpoint into")
            path = self.out_dir / f"checkpoint_{self.iteration:06d}.pt"
        path = Path(path)
        save_checkpoint(self.checkpoint(), path)
        if self.out_dir is not None:
            save_checkpoint(self.checkpoint(), self.out_dir / LATEST_CHECKPOINT)
        self.logger.info(f"Checkpoint written at iteration {self.iteration}: {path}")
        return path

    def restore(self, checkpoint: Checkpoint) -> None:
        """Load model, optimizer and random state from a checkpoint"""
        self.model.load_state_dict(checkpoint.model.state_dict())
        if checkpoint.optimizer_state:
            self.gen_optimizer.load_state_dict(checkpoint.optimizer_state["gen"])
            self.disc_optimizer.load_state_dict(checkpoint.optimizer_state["disc"])
        if checkpoint.rng_state:
            self.rng.bit_generator.state = checkpoint.rng_state["numpy"]
            torch.set_rng_state(checkpoint.rng_state["torch"])
            self.torch_gen.set_state(checkpoint.rng_state["torch_gen"])
        self.iteration = checkpoint.iteration
        self.logger.info(f"Resumed from iteration {self.iteration}")

    @classmethod
    def from_checkpoint(
        cls,
        corpus: SnapshotCorpus,
        path: Union[str, Path],
        out_dir: Optional[Union[str, Path]] = None,
        logger: Optional[logging.Logger] = None,
    ) -> "KoopmanTrainer":
        checkpoint = load_checkpoint(path)
        trainer = cls(
            corpus,
            checkpoint.model_config,
            checkpoint.train_config,
            out_dir=out_dir,
            logger=logger,
            normalization=checkpoint.normalization,
        )
        trainer.restore(checkpoint)
        return trainer

    def train(self, iterations: Optional[int] = None) -> Checkpoint:
        """Run train_step until the configured (or given) iteration count"""
        target = iterations or self.train_config.iterations
        every = self.train_config.checkpoint_every
        while self.iteration < target:
            self.train_step(self.sample_batch())
            if self.out_dir and every and self.iteration % every == 0:
                self.save()
        if self.out_dir:
            self.save()
        return self.checkpoint()

    def close(self) -> None:
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None

    def __enter__(self):
        """Context manager entry"""
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        """Context manager exit"""
        self.close()


def train(
    corpus: SnapshotCorpus,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    resume_from: Optional[Union[str, Path]] = None,
    **kwargs,
) -> Checkpoint:
    """Convenience function to train without managing a trainer instance"""
    if resume_from is not None:
        trainer = KoopmanTrainer.from_checkpoint(corpus, resume_from, out_dir, **kwargs)
        # the caller may extend the run past the checkpointed target
        trainer.train_config = replace(trainer.train_config, iterations=train_config.iterations)
    else:
        trainer = KoopmanTrainer(corpus, model_config, train_config, out_dir, **kwargs)
    with trainer:
        return trainer.train()
