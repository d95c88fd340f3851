"""
Residual Koopman dynamics, recursive rollout and the training objective

All losses take channels-first sequences ``x_seq`` of shape
``(B, n_S + 1, C, *spatial)`` and a boolean ``mask_seq`` of shape
``(B, n_S + 1)`` where True marks a missing snapshot.
"""

from dataclasses import asdict, dataclass, replace
from typing import Any, Callable, Dict, Optional, Tuple, Union

import numpy as np
import torch

from .exceptions import DivergenceError, ValidationError
from .networks import KoopmanModel, Mode, fold_sequence_pair, network_mode, weight_arrays
from .validators import ConfigValidator

DEFAULT_LATENT_BOUND = 1.0e6
GRADIENT_ORDERS = (1, 2, 4)

Critic = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the total generator objective and the critic penalty"""

    lambda_grad: float = 1.0
    lambda_reg: float = 1.0e-3
    lambda_gan: float = 0.01
    lambda1: float = 1.0
    lambda2: float = 1.0e-5
    lambda4: float = 1.0e-8
    gp_coeff: float = 10.0
    grid_spacing: float = 1.0 / 8.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            ConfigValidator.non_negative(name, value)
        ConfigValidator.positive("grid_spacing", self.grid_spacing)

    @classmethod
    def for_ks(cls, adversarial: bool = True, gradient: bool = True) -> "LossWeights":
        return cls(
            lambda_gan=0.01 if adversarial else 0.0,
            lambda_grad=1.0 if gradient else 0.0,
        )

    @classmethod
    def for_gs(cls, adversarial: bool = True, gradient: bool = True) -> "LossWeights":
        return cls(
            lambda_gan=0.01 if adversarial else 0.0,
            lambda_grad=1.0 if gradient else 0.0,
            lambda2=0.0,
            lambda4=0.0,
            grid_spacing=1.0,
        )

    def gated(self, lambda_gan: float, lambda_grad: float) -> "LossWeights":
        return replace(self, lambda_gan=lambda_gan, lambda_grad=lambda_grad)

    def order_weights(self) -> Dict[int, float]:
        return {1: self.lambda1, 2: self.lambda2, 4: self.lambda4}

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LossWeights":
        return ConfigValidator.build(cls, data)


# -- dynamics ----------------------------------------------------------------


def koopman_apply(
    model: KoopmanModel, z: torch.Tensor, mode: Optional[Mode] = None
) -> torch.Tensor:
    """z_{t+1} = z_t + K(z_t) z_t"""
    if mode is not None:
        with network_mode(model.aux, mode):
            return koopman_apply(model, z)
    K = model.aux_koopman(z)
    return z + torch.bmm(K, z.unsqueeze(-1)).squeeze(-1)


def rollout(
    model: KoopmanModel,
    z1: torch.Tensor,
    m: int,
    mode: Optional[Mode] = None,
    max_norm: Optional[float] = DEFAULT_LATENT_BOUND,
) -> torch.Tensor:
    """Apply the Koopman step m times, recomputing K at every step.

    Returns ``(B, m, M)`` holding K z1, K^2 z1, ..., K^m z1.
    """
    if m < 1:
        raise ValidationError(f"rollout length must be >= 1, got {m}")
    if mode is not None:
        with network_mode(model.aux, mode):
            return rollout(model, z1, m, max_norm=max_norm)

    steps = []
    z = z1
    for step in range(1, m + 1):
        z = koopman_apply(model, z)
        if max_norm is not None:
            peak = z.detach().norm(dim=-1).max().item()
            if not np.isfinite(peak) or peak > max_norm:
                raise DivergenceError(
                    f"Latent norm {peak:.3e} exceeded {max_norm:.1e} at step {step}"
                )
        steps.append(z)
    return torch.stack(steps, dim=1)


@dataclass
class SequenceForward:
    """Everything one forward pass over a training window produces"""

    x_seq: torch.Tensor
    mask_seq: torch.Tensor
    z_true: torch.Tensor
    z_pred: torch.Tensor
    x_pred: torch.Tensor
    x_recon: torch.Tensor

    @property
    def n_S(self) -> int:
        return self.x_seq.shape[1] - 1

    @property
    def step_weights(self) -> torch.Tensor:
        """1 for available targets x_{t+m}, 0 for missing ones, (B, n_S)"""
        return (~self.mask_seq[:, 1:]).to(self.x_seq.dtype)

    @property
    def anchor_weight(self) -> torch.Tensor:
        return (~self.mask_seq[:, 0]).to(self.x_seq.dtype)


def _expand_mask(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return mask.view(*mask.shape, *([1] * (like.dim() - mask.dim())))


def forward_sequence(
    model: KoopmanModel,
    x_seq: torch.Tensor,
    mask_seq: Optional[torch.Tensor] = None,
    max_norm: Optional[float] = None,
) -> SequenceForward:
    """Encode the window, roll the anchor forward n_S steps and decode.

    The latent bound is off unless max_norm is given; a non-finite
    training loss is caught by the trainer instead.
    """
    if x_seq.dim() < 4:
        raise ValidationError(
            f"x_seq must be (B, n_S + 1, C, *spatial), got {tuple(x_seq.shape)}"
        )
    batch, length = x_seq.shape[:2]
    if length < 2:
        raise ValidationError("x_seq must hold at least two snapshots")
    if mask_seq is None:
        mask_seq = torch.zeros(batch, length, dtype=torch.bool, device=x_seq.device)
    mask_seq = mask_seq.to(torch.bool)

    # missing snapshots never reach a network
    x = torch.where(_expand_mask(mask_seq, x_seq), torch.zeros_like(x_seq), x_seq)

    snapshot_shape = x.shape[2:]
    z_true = model.encode(x.reshape(batch * length, *snapshot_shape)).view(
        batch, length, -1
    )
    n_S = length - 1
    z_pred = rollout(model, z_true[:, 0], n_S, max_norm=max_norm)
    x_pred = model.decode(z_pred.reshape(batch * n_S, -1)).view(
        batch, n_S, *snapshot_shape
    )
    x_recon = model.decode(z_true[:, 0])
    return SequenceForward(
        x_seq=x,
        mask_seq=mask_seq,
        z_true=z_true,
        z_pred=z_pred,
        x_pred=x_pred,
        x_recon=x_recon,
    )


# -- loss terms --------------------------------------------------------------


def _per_item_mse(a: torch.Tensor, b: torch.Tensor, item_dims: int) -> torch.Tensor:
    """Mean squared error over all but the leading item_dims axes"""
    diff = (a - b) ** 2
    return diff.flatten(start_dim=item_dims).mean(dim=-1)


def _masked_sequence_mean(per_step: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """(1/n_S) sum_m w_m e_m, averaged over the batch"""
    return (per_step * weights).sum(dim=1).div(per_step.shape[1]).mean()


def loss_recon(
    model: KoopmanModel,
    x_t: Optional[torch.Tensor] = None,
    forward: Optional[SequenceForward] = None,
) -> torch.Tensor:
    """MSE between x_t and decode(encode(x_t))"""
    if forward is not None:
        per_item = _per_item_mse(forward.x_seq[:, 0], forward.x_recon, 1)
        return (per_item * forward.anchor_weight).mean()
    if x_t is None:
        raise ValidationError("loss_recon needs x_t or a forward pass")
    return ((x_t - model.decode(model.encode(x_t))) ** 2).mean()


def loss_pred(
    model: KoopmanModel,
    x_seq: Optional[torch.Tensor] = None,
    mask_seq: Optional[torch.Tensor] = None,
    forward: Optional[SequenceForward] = None,
) -> torch.Tensor:
    """Masked mean over m of MSE(x_{t+m}, decode(K^m encode(x_t)))"""
    forward = forward or forward_sequence(model, x_seq, mask_seq)
    per_step = _per_item_mse(forward.x_seq[:, 1:], forward.x_pred, 2)
    return _masked_sequence_mean(per_step, forward.step_weights)


def loss_code(
    model: KoopmanModel,
    x_seq: Optional[torch.Tensor] = None,
    mask_seq: Optional[torch.Tensor] = None,
    forward: Optional[SequenceForward] = None,
) -> torch.Tensor:
    """Masked mean over m of MSE(encode(x_{t+m}), K^m encode(x_t))"""
    forward = forward or forward_sequence(model, x_seq, mask_seq)
    per_step = _per_item_mse(forward.z_true[:, 1:], forward.z_pred, 2)
    return _masked_sequence_mean(per_step, forward.step_weights)


def fd_axis_derivative(
    field: torch.Tensor, order: int, dx: float, axis: int
) -> torch.Tensor:
    """Central periodic stencil of the given order along one axis"""

    def shift(k: int) -> torch.Tensor:
        # shift(k)[i] = u[i + k]
        return torch.roll(field, shifts=-k, dims=axis)

    if order == 1:
        return (shift(1) - shift(-1)) / (2.0 * dx)
    if order == 2:
        return (shift(1) - 2.0 * field + shift(-1)) / dx**2
    if order == 4:
        return (
            shift(2) - 4.0 * shift(1) + 6.0 * field - 4.0 * shift(-1) + shift(-2)
        ) / dx**4
    raise ValidationError(f"Unsupported derivative order {order}; use 1, 2 or 4")


def fd_gradients(
    field: Union[torch.Tensor, np.ndarray],
    order: int,
    dx: float = 1.0,
    spatial_rank: int = 1,
) -> Union[torch.Tensor, np.ndarray]:
    """Derivative of the given order, summed over the trailing spatial axes"""
    as_numpy = isinstance(field, np.ndarray)
    tensor = torch.as_tensor(field) if as_numpy else field
    if spatial_rank < 1 or spatial_rank > tensor.dim():
        raise ValidationError(f"spatial_rank {spatial_rank} invalid for {tensor.dim()}D field")
    result = sum(
        fd_axis_derivative(tensor, order, dx, axis)
        for axis in range(-spatial_rank, 0)
    )
    return result.numpy() if as_numpy else result


@dataclass
class GradientLoss:
    """Weighted gradient loss and its per-order components"""

    total: torch.Tensor
    by_order: Dict[int, torch.Tensor]


def loss_grad(
    model: KoopmanModel,
    x_seq: Optional[torch.Tensor] = None,
    mask_seq: Optional[torch.Tensor] = None,
    weights: Optional[LossWeights] = None,
    forward: Optional[SequenceForward] = None,
) -> GradientLoss:
    """lambda1 L1 + lambda2 L2 + lambda4 L4 on the prediction residual"""
    weights = weights or LossWeights()
    forward = forward or forward_sequence(model, x_seq, mask_seq)
    residual = forward.x_seq[:, 1:] - forward.x_pred
    spatial_rank = model.config.spatial_rank

    by_order: Dict[int, torch.Tensor] = {}
    total = residual.new_zeros(())
    for order, lam in weights.order_weights().items():
        per_step = sum(
            fd_axis_derivative(residual, order, weights.grid_spacing, axis)
            .pow(2)
            .flatten(start_dim=2)
            .mean(dim=-1)
            for axis in range(-spatial_rank, 0)
        )
        by_order[order] = _masked_sequence_mean(per_step, forward.step_weights)
        total = total + lam * by_order[order]
    return GradientLoss(total=total, by_order=by_order)


def loss_reg(model: KoopmanModel) -> torch.Tensor:
    """Sum of squared conv/dense weights of encoder, decoder and AUX"""
    total = None
    for _, weight in weight_arrays(model):
        term = weight.pow(2).sum()
        total = term if total is None else total + term
    return total if total is not None else torch.zeros(())


@dataclass
class GanLosses:
    gen_loss: torch.Tensor
    disc_loss: torch.Tensor
    gp: torch.Tensor


def gradient_penalty(
    critic: Critic,
    real_pair: torch.Tensor,
    fake_pair: torch.Tensor,
    gp_coeff: float = 10.0,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """gp_coeff * E[(||grad D(x_hat)||_2 - 1)^2] on uniform interpolates"""
    shape = (real_pair.shape[0],) + (1,) * (real_pair.dim() - 1)
    eps = torch.rand(
        shape, generator=generator, dtype=real_pair.dtype, device=real_pair.device
    )
    x_hat = (eps * real_pair.detach() + (1.0 - eps) * fake_pair.detach())
    x_hat.requires_grad_(True)
    out = critic(x_hat)

    grads = None
    if out.requires_grad:
        grads = torch.autograd.grad(
            out.sum(), x_hat, create_graph=True, allow_unused=True
        )[0]
    if grads is None:
        grads = torch.zeros_like(x_hat)
    norms = torch.linalg.vector_norm(grads.flatten(start_dim=1), dim=1)
    return gp_coeff * ((norms - 1.0) ** 2).mean()


def gan_losses(
    critic: Critic,
    real_pair: torch.Tensor,
    fake_pair: torch.Tensor,
    gp_coeff: float = 10.0,
    generator: Optional[torch.Generator] = None,
    with_penalty: bool = True,
) -> GanLosses:
    """Wasserstein generator/critic losses and the WGAN-GP penalty"""
    d_fake = critic(fake_pair).mean()
    d_real = critic(real_pair).mean()
    if with_penalty:
        gp = gradient_penalty(critic, real_pair, fake_pair, gp_coeff, generator)
    else:
        gp = torch.zeros((), dtype=d_fake.dtype)
    return GanLosses(gen_loss=d_fake, disc_loss=d_fake - d_real, gp=gp)


def sequence_pairs(forward: SequenceForward) -> Tuple[torch.Tensor, torch.Tensor]:
    """Folded real (X, X_+1) and fake (X, X_+1^pred) critic inputs"""
    X = forward.x_seq[:, :-1]
    X_plus1 = forward.x_seq[:, 1:]
    missing = _expand_mask(forward.mask_seq[:, 1:], forward.x_pred)
    X_pred = torch.where(missing, torch.zeros_like(forward.x_pred), forward.x_pred)
    return fold_sequence_pair(X, X_plus1), fold_sequence_pair(X, X_pred)


# -- total objective ---------------------------------------------------------


@dataclass
class LossBreakdown:
    """Per-component generator losses; total follows the weighted sum"""

    recon: torch.Tensor
    pred: torch.Tensor
    code: torch.Tensor
    grad: torch.Tensor
    grad_by_order: Dict[int, torch.Tensor]
    reg: torch.Tensor
    gan: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> Dict[str, float]:
        record = {
            "recon": self.recon.item(),
            "pred": self.pred.item(),
            "code": self.code.item(),
            "grad": self.grad.item(),
            "reg": self.reg.item(),
            "gan": self.gan.item(),
            "total": self.total.item(),
        }
        for order, value in self.grad_by_order.items():
            record[f"grad{order}"] = value.item()
        return record

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.total).item())


def total_generator_loss(
    model: KoopmanModel,
    x_seq: torch.Tensor,
    mask_seq: Optional[torch.Tensor],
    weights: LossWeights,
    max_norm: Optional[float] = None,
) -> LossBreakdown:
    """L_recon + L_pred + L_code + l_grad L_grad + l_reg L_reg + l_GAN L_GAN"""
    forward = forward_sequence(model, x_seq, mask_seq, max_norm=max_norm)
    recon = loss_recon(model, forward=forward)
    pred = loss_pred(model, forward=forward)
    code = loss_code(model, forward=forward)
    grad = loss_grad(model, weights=weights, forward=forward)
    reg = loss_reg(model).to(recon.dtype)

    if weights.lambda_gan > 0:
        real_pair, fake_pair = sequence_pairs(forward)
        gan = gan_losses(
            model.discriminate, real_pair, fake_pair, with_penalty=False
        ).gen_loss
    else:
        gan = recon.new_zeros(())

    total = (
        recon
        + pred
        + code
        + weights.lambda_grad * grad.total
        + weights.lambda_reg * reg
        + weights.lambda_gan * gan
    )
    return LossBreakdown(
        recon=recon,
        pred=pred,
        code=code,
        grad=grad.total,
        grad_by_order=grad.by_order,
        reg=reg,
        gan=gan,
        total=total,
    )
