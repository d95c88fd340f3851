"""
Latent-space control: learn forcing inputs U_t under a fixed boolean matrix L

The forced dynamics are z_{t+1} = z_t + K(z_t) z_t + L U_t. Network weights
stay fixed; only U is optimized.
"""

import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import torch

from .corpus import SnapshotCorpus
from .evaluation import mean_l1_error, save_prediction, write_series
from .exceptions import NonFiniteLossError, ValidationError
from .koopman import koopman_apply, rollout
from .networks import KoopmanModel, Mode, network_mode, to_corpus_layout, to_network_layout
from .training import Checkpoint
from .validators import ConfigValidator

CONTROL_OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class ControlConfig:
    """Control experiment settings (defaults follow the Gray-Scott protocol)"""

    t_start: int = 50
    t_desired: int = 80
    delta: int = 16
    L_density: float = 0.4
    L_seed: int = 0
    steps: int = 2000
    lr: float = 1.0e-2
    u_penalty: float = 1.0
    optimizer: str = "adam"
    patience: int = 200
    trace_every: int = 100

    def __post_init__(self):
        ConfigValidator.non_negative("t_start", self.t_start)
        ConfigValidator.non_negative("t_desired", self.t_desired)
        ConfigValidator.positive("delta", self.delta)
        ConfigValidator.in_range("L_density", self.L_density, 0.0, 1.0)
        ConfigValidator.positive("steps", self.steps)
        ConfigValidator.positive("lr", self.lr)
        ConfigValidator.non_negative("u_penalty", self.u_penalty)
        ConfigValidator.one_of("optimizer", self.optimizer, CONTROL_OPTIMIZERS)
        ConfigValidator.positive("patience", self.patience)
        ConfigValidator.positive("trace_every", self.trace_every)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ControlConfig":
        return ConfigValidator.build(cls, data)


@dataclass
class ControlInputs:
    """One control vector per forced step, shape (delta, M)"""

    U: np.ndarray

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=np.float32)
        if self.U.ndim != 2:
            raise ValidationError(f"U must be (delta, M), got shape {self.U.shape}")
        if not np.isfinite(self.U).all():
            raise ValidationError("U contains non-finite values")

    @property
    def delta(self) -> int:
        return self.U.shape[0]


@dataclass
class ControlResult:
    """Optimized inputs plus diagnostics for reporting and plotting"""

    config: ControlConfig
    inputs: ControlInputs
    L: np.ndarray
    gap: float
    penalty: float
    loss_trace: List[Tuple[int, float]]
    converged: bool
    start: np.ndarray
    desired: np.ndarray
    forced: np.ndarray
    natural: np.ndarray
    truth_at_end: Optional[np.ndarray] = None
    metrics: Dict[str, float] = field(default_factory=dict)

    @property
    def loss(self) -> float:
        return self.gap + self.penalty

    @property
    def predicted(self) -> np.ndarray:
        return self.forced[-1]

    def write(self, out_dir: Union[str, Path], corpus: SnapshotCorpus) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        np.savetxt(out_dir / "control_U.txt", self.inputs.U, delimiter=",")
        np.savetxt(out_dir / "control_L.txt", self.L.astype(np.uint8), fmt="%d", delimiter=",")
        if self.loss_trace:
            steps, losses = zip(*self.loss_trace)
            write_series(out_dir / "control_loss.csv", {"step": steps, "loss": losses})
        save_prediction(self.forced, corpus.metadata, out_dir / "control_forced.bin")
        save_prediction(self.natural, corpus.metadata, out_dir / "control_natural.bin")
        np.savez(
            out_dir / "control_panels.npz",
            start=self.start,
            desired=self.desired,
            predicted=self.predicted,
            natural=self.natural[-1],
        )
        return out_dir


def make_control_matrix(config: ControlConfig, latent_dim: int) -> np.ndarray:
    """Boolean M x M matrix with i.i.d. Bernoulli(L_density) entries"""
    ConfigValidator.positive("latent_dim", latent_dim)
    rng = np.random.default_rng(config.L_seed)
    return rng.random((latent_dim, latent_dim)) < config.L_density


def controlled_step(
    model: KoopmanModel,
    z: torch.Tensor,
    U_t: torch.Tensor,
    L: torch.Tensor,
) -> torch.Tensor:
    """z + K(z) z + L U_t for a (B, M) or (M,) latent"""
    squeeze = z.dim() == 1
    if squeeze:
        z = z.unsqueeze(0)
    if U_t.dim() == 1:
        U_t = U_t.unsqueeze(0)
    L = L.to(z.dtype)
    if L.shape != (z.shape[-1], z.shape[-1]) or U_t.shape[-1] != z.shape[-1]:
        raise ValidationError(
            f"Shape mismatch: z {tuple(z.shape)}, U_t {tuple(U_t.shape)}, L {tuple(L.shape)}"
        )
    z_next = koopman_apply(model, z) + U_t @ L.T
    return z_next.squeeze(0) if squeeze else z_next


def forced_rollout(
    model: KoopmanModel, z_start: torch.Tensor, U: torch.Tensor, L: torch.Tensor
) -> torch.Tensor:
    """Latents after each of the len(U) forced steps, shape (delta, M)"""
    z = z_start.reshape(1, -1)
    steps = []
    for t in range(U.shape[0]):
        z = controlled_step(model, z, U[t], L)
        steps.append(z[0])
    return torch.stack(steps)


def control_objective(
    z_end: torch.Tensor, z_target: torch.Tensor, U: torch.Tensor, u_penalty: float
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Squared latent gap and weighted sum of U_t^2"""
    gap = ((z_end - z_target) ** 2).sum()
    penalty = u_penalty * (U**2).sum()
    return gap, penalty


@contextmanager
def frozen_parameters(model: torch.nn.Module) -> Iterator[torch.nn.Module]:
    flags = [p.requires_grad for p in model.parameters()]
    model.requires_grad_(False)
    try:
        yield model
    finally:
        for param, flag in zip(model.parameters(), flags):
            param.requires_grad_(flag)


def _check_indices(corpus: SnapshotCorpus, config: ControlConfig) -> None:
    for name in ("t_start", "t_desired"):
        index = getattr(config, name)
        if index >= len(corpus):
            raise ValidationError(
                f"{name}={index} is outside the corpus of {len(corpus)} snapshots"
            )
        if corpus.missing_mask[index]:
            raise ValidationError(f"{name}={index} refers to a masked snapshot")


def optimize_controls(
    corpus: SnapshotCorpus,
    checkpoint: Checkpoint,
    config: ControlConfig,
    logger: Optional[logging.Logger] = None,
) -> ControlResult:
    """Gradient descent over U with every network parameter frozen"""
    logger = logger or logging.getLogger(__name__)
    _check_indices(corpus, config)

    model = checkpoint.model
    stats = checkpoint.normalization
    rank = checkpoint.model_config.spatial_rank
    M = checkpoint.model_config.latent_dim
    L = make_control_matrix(config, M)
    L_t = torch.as_tensor(L, dtype=torch.float32)

    def encode_index(index: int) -> torch.Tensor:
        x = stats.apply(corpus.data[index])[None]
        return model.encode(to_network_layout(x, rank))[0]

    def decode_latents(latents: torch.Tensor) -> np.ndarray:
        return stats.invert(to_corpus_layout(model.decode(latents), rank))

    with frozen_parameters(model), network_mode(model, Mode.EVAL):
        with torch.no_grad():
            z_start = encode_index(config.t_start)
            z_target = encode_index(config.t_desired)

        U = torch.zeros(config.delta, M, requires_grad=True)
        if config.optimizer == "adam":
            optimizer = torch.optim.Adam([U], lr=config.lr)
        else:
            optimizer = torch.optim.SGD([U], lr=config.lr)

        logger.info(
            f"Optimizing {config.delta}x{M} controls from t={config.t_start} "
            f"towards t={config.t_desired} ({int(L.sum())} active entries in L)"
        )
        trace: List[Tuple[int, float]] = []
        initial = best = None
        best_U = U.detach().clone()
        best_step = 1
        stale = 0
        for step in range(1, config.steps + 1):
            optimizer.zero_grad()
            gap, penalty = control_objective(
                forced_rollout(model, z_start, U, L_t)[-1], z_target, U, config.u_penalty
            )
            loss = gap + penalty
            value = loss.item()
            if not np.isfinite(value):
                logger.error(f"Non-finite control loss at step {step}")
                raise NonFiniteLossError(f"Control loss became {value} at step {step}")
            if step == 1 or step % config.trace_every == 0:
                trace.append((step, value))
            if initial is None:
                initial = best = value
            elif value < best:
                best, stale = value, 0
                best_U, best_step = U.detach().clone(), step
            else:
                stale += 1
                if stale >= config.patience:
                    logger.warning(
                        f"Control loss has not improved for {stale} steps; stopping at {step}"
                    )
                    break
            loss.backward()
            optimizer.step()

        with torch.no_grad():
            final_U = U.detach()
            forced = forced_rollout(model, z_start, final_U, L_t)
            gap, penalty = control_objective(forced[-1], z_target, final_U, config.u_penalty)
            if gap.item() + penalty.item() > best:
                logger.info(f"Keeping the controls from step {best_step} (loss {best:.6e})")
                final_U = best_U
                forced = forced_rollout(model, z_start, final_U, L_t)
                gap, penalty = control_objective(
                    forced[-1], z_target, final_U, config.u_penalty
                )
            natural = rollout(model, z_start[None], config.delta)[0]
            forced_fields = decode_latents(forced)
            natural_fields = decode_latents(natural)

    final = gap.item() + penalty.item()
    converged = final < initial or initial == 0.0
    if not converged:
        logger.warning(f"Control loss did not decrease: {initial:.6e} -> {final:.6e}")
    trace.append((step, final))

    end_index = config.t_start + config.delta
    truth = corpus.data[end_index].copy() if end_index < len(corpus) else None
    desired = corpus.data[config.t_desired].copy()
    metrics = {
        "loss": final,
        "gap": gap.item(),
        "penalty": penalty.item(),
        "l1_forced_vs_desired": mean_l1_error(forced_fields[-1], desired),
        "l1_natural_vs_desired": mean_l1_error(natural_fields[-1], desired),
    }
    logger.info(
        f"Control finished after {step} steps: loss {final:.6e} "
        f"(gap {metrics['gap']:.6e}, penalty {metrics['penalty']:.6e})"
    )
    return ControlResult(
        config=config,
        inputs=ControlInputs(final_U.numpy().copy()),
        L=L,
        gap=metrics["gap"],
        penalty=metrics["penalty"],
        loss_trace=trace,
        converged=converged,
        start=corpus.data[config.t_start].copy(),
        desired=desired,
        forced=forced_fields,
        natural=natural_fields,
        truth_at_end=truth,
        metrics=metrics,
    )
