"""
Encoder, decoder, auxiliary Koopman network and Wasserstein critic

Tensors inside this module are channels-first, ``(batch, channels, *spatial)``;
corpora are channels-last and are converted with :func:`to_network_layout`.
Convolutions are 1D for ``spatial_rank=1`` (KS) and 2D for ``spatial_rank=2``
(GS).
"""

import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any, Dict, Iterator, List, Tuple, Union

import numpy as np
import torch
from torch import nn

from .exceptions import ValidationError
from .validators import ConfigValidator

ArrayLike = Union[np.ndarray, torch.Tensor]

LEAKY_SLOPE = 0.2
WEIGHT_LAYERS = (
    nn.Conv1d,
    nn.Conv2d,
    nn.ConvTranspose1d,
    nn.ConvTranspose2d,
    nn.Linear,
)


class Mode(Enum):
    """Network evaluation mode"""

    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class ModelConfig:
    """Shapes and widths of the four networks"""

    latent_dim: int = 64
    spatial_rank: int = 1
    in_channels: int = 1
    input_extent: Tuple[int, ...] = (1024,)
    dropout_keep: float = 0.8
    sequence_length: int = 64
    stage_filters: Tuple[int, ...] = (64, 128, 256, 512, 512)
    aux_hidden: Tuple[int, ...] = (128, 256, 512)
    disc_filters: Tuple[int, ...] = (64, 128, 256, 512)
    output_activation: str = "identity"

    def __post_init__(self):
        ConfigValidator.positive("latent_dim", self.latent_dim)
        ConfigValidator.one_of("spatial_rank", self.spatial_rank, (1, 2))
        ConfigValidator.positive("in_channels", self.in_channels)
        ConfigValidator.positive("sequence_length", self.sequence_length)
        ConfigValidator.in_range("dropout_keep", self.dropout_keep, 0.0, 1.0)
        ConfigValidator.one_of(
            "output_activation", self.output_activation, ("identity", "sigmoid")
        )
        if len(self.input_extent) != self.spatial_rank:
            raise ValidationError(
                f"input_extent {self.input_extent} does not match "
                f"spatial_rank {self.spatial_rank}"
            )
        if not self.stage_filters or not self.disc_filters:
            raise ValidationError("stage_filters and disc_filters cannot be empty")
        for extent in self.input_extent:
            ConfigValidator.divisible(
                "input_extent", extent, 2 ** len(self.stage_filters)
            )
            ConfigValidator.divisible(
                "input_extent", extent, 2 ** len(self.disc_filters)
            )

    @property
    def encoded_extent(self) -> Tuple[int, ...]:
        factor = 2 ** len(self.stage_filters)
        return tuple(e // factor for e in self.input_extent)

    @property
    def flat_dim(self) -> int:
        return self.stage_filters[-1] * math.prod(self.encoded_extent)

    @property
    def disc_in_channels(self) -> int:
        return 2 * self.sequence_length * self.in_channels

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        return ConfigValidator.build(cls, data)

    @classmethod
    def for_ks(cls, **overrides: Any) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def for_gs(cls, **overrides: Any) -> "ModelConfig":
        params: Dict[str, Any] = dict(
            spatial_rank=2,
            in_channels=2,
            input_extent=(128, 128),
            sequence_length=32,
            output_activation="sigmoid",
        )
        params.update(overrides)
        return cls(**params)


def _conv(rank: int):
    return nn.Conv1d if rank == 1 else nn.Conv2d


def _deconv(rank: int):
    return nn.ConvTranspose1d if rank == 1 else nn.ConvTranspose2d


def _batch_norm(rank: int):
    return nn.BatchNorm1d if rank == 1 else nn.BatchNorm2d


class Bottleneck(nn.Module):
    """BN -> Relu -> 1x1 -> BN -> Relu -> 3x3 -> BN -> Relu -> 1x1, channel preserving"""

    def __init__(self, rank: int, channels: int, width: int, transposed: bool = False):
        super().__init__()
        layer = _deconv(rank) if transposed else _conv(rank)
        norm = _batch_norm(rank)
        self.body = nn.Sequential(
            norm(channels),
            nn.ReLU(),
            layer(channels, width, kernel_size=1),
            norm(width),
            nn.ReLU(),
            layer(width, width, kernel_size=3, padding=1),
            norm(width),
            nn.ReLU(),
            layer(width, channels, kernel_size=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class EncoderStage(nn.Module):
    """Stride-2 conv followed by a residually added bottleneck"""

    def __init__(self, rank: int, in_channels: int, filters: int):
        super().__init__()
        self.down = _conv(rank)(in_channels, filters, kernel_size=3, stride=2, padding=1)
        self.bottleneck = Bottleneck(rank, filters, max(filters // 2, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.down(x)
        return h + self.bottleneck(h)


class DecoderStage(nn.Module):
    """Input plus transposed bottleneck, then a stride-2 deconv"""

    def __init__(self, rank: int, in_channels: int, filters: int):
        super().__init__()
        self.bottleneck = Bottleneck(
            rank, in_channels, max(filters // 2, 1), transposed=True
        )
        self.up = _deconv(rank)(
            in_channels, filters, kernel_size=3, stride=2, padding=1, output_padding=1
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.up(x + self.bottleneck(x))


class Encoder(nn.Module):
    """Snapshot -> latent code z in R^M"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        channels = [config.in_channels] + list(config.stage_filters)
        self.stages = nn.Sequential(
            *[
                EncoderStage(config.spatial_rank, c_in, c_out)
                for c_in, c_out in zip(channels[:-1], channels[1:])
            ]
        )
        self.head = nn.Linear(config.flat_dim, config.latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_extent(x, self.config)
        h = torch.relu(self.stages(x))
        return self.head(h.flatten(start_dim=1))


class Decoder(nn.Module):
    """Latent code -> snapshot"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.head = nn.Linear(config.latent_dim, config.flat_dim)
        filters = list(reversed(config.stage_filters[:-1])) + [config.in_channels]
        channels = [config.stage_filters[-1]] + filters
        self.stages = nn.Sequential(
            *[
                DecoderStage(config.spatial_rank, c_in, c_out)
                for c_in, c_out in zip(channels[:-1], channels[1:])
            ]
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        _check_latent(z, self.config)
        h = self.head(z).view(
            z.shape[0], self.config.stage_filters[-1], *self.config.encoded_extent
        )
        out = self.stages(h)
        if self.config.output_activation == "sigmoid":
            out = torch.sigmoid(out)
        return out


class AuxNetwork(nn.Module):
    """Latent code -> Koopman matrix K in R^{M x M}"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        widths = [config.latent_dim] + list(config.aux_hidden)
        layers: List[nn.Module] = []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            layers += [
                nn.Linear(w_in, w_out),
                nn.ReLU(),
                nn.Dropout(p=1.0 - config.dropout_keep),
            ]
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(widths[-1], config.latent_dim**2)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        _check_latent(z, self.config)
        m = self.config.latent_dim
        return self.head(self.body(z)).view(z.shape[0], m, m)


class Discriminator(nn.Module):
    """Wasserstein critic over a channel-folded (X, X_+1) pair"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        rank = config.spatial_rank
        conv = _conv(rank)
        channels = [config.disc_in_channels] + list(config.disc_filters)
        layers: List[nn.Module] = []
        for i, (c_in, c_out) in enumerate(zip(channels[:-1], channels[1:])):
            layers.append(conv(c_in, c_out, kernel_size=5, stride=2, padding=2))
            if i > 0:
                layers.append(_batch_norm(rank)(c_out))
            layers.append(nn.LeakyReLU(LEAKY_SLOPE))
        self.body = nn.Sequential(*layers)
        factor = 2 ** len(config.disc_filters)
        flat = config.disc_filters[-1] * math.prod(
            e // factor for e in config.input_extent
        )
        self.head = nn.Linear(flat, 1)

    def forward(self, pair: torch.Tensor) -> torch.Tensor:
        expected = (self.config.disc_in_channels,) + tuple(self.config.input_extent)
        if tuple(pair.shape[1:]) != expected:
            raise ValidationError(
                f"Critic input shape {tuple(pair.shape[1:])}, expected {expected}"
            )
        return self.head(self.body(pair).flatten(start_dim=1)).squeeze(-1)


def _check_extent(x: torch.Tensor, config: ModelConfig) -> None:
    expected = (config.in_channels,) + tuple(config.input_extent)
    if tuple(x.shape[1:]) != expected:
        raise ValidationError(
            f"Snapshot batch shape {tuple(x.shape[1:])}, expected {expected}"
        )


def _check_latent(z: torch.Tensor, config: ModelConfig) -> None:
    if z.dim() != 2 or z.shape[1] != config.latent_dim:
        raise ValidationError(
            f"Latent batch shape {tuple(z.shape)}, expected (B, {config.latent_dim})"
        )


def init_weights(module: nn.Module) -> None:
    """Fan-in variance scaling for conv/dense weights, zero biases"""
    for layer in module.modules():
        if isinstance(layer, WEIGHT_LAYERS):
            nn.init.kaiming_normal_(layer.weight, mode="fan_in", nonlinearity="linear")
            if layer.bias is not None:
                nn.init.zeros_(layer.bias)


class KoopmanModel(nn.Module):
    """The four networks of the deep adversarial Koopman model"""

    GENERATOR_PARTS = ("encoder", "decoder", "aux")

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)
        self.aux = AuxNetwork(config)
        self.disc = Discriminator(config)
        init_weights(self)
        # K starts at 0 so the first rollouts are the identity
        nn.init.zeros_(self.aux.head.weight)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def aux_koopman(self, z: torch.Tensor) -> torch.Tensor:
        return self.aux(z)

    def discriminate(self, pair: torch.Tensor) -> torch.Tensor:
        return self.disc(pair)

    def generator_modules(self) -> List[nn.Module]:
        return [getattr(self, name) for name in self.GENERATOR_PARTS]

    def generator_parameters(self) -> Iterator[nn.Parameter]:
        for module in self.generator_modules():
            yield from module.parameters()


# -- mode handling -----------------------------------------------------------


@contextmanager
def network_mode(module: nn.Module, mode: Mode) -> Iterator[nn.Module]:
    """Temporarily switch train/eval behaviour of dropout and batch norm"""
    previous = module.training
    module.train(mode is Mode.TRAIN)
    try:
        yield module
    finally:
        module.train(previous)


@contextmanager
def frozen_batch_norm_stats(*modules: nn.Module) -> Iterator[None]:
    """Normalize with batch statistics without updating the running ones"""
    norms = [
        m
        for module in modules
        for m in module.modules()
        if isinstance(m, nn.modules.batchnorm._BatchNorm)
    ]
    saved = [m.momentum for m in norms]
    for m in norms:
        m.momentum = 0.0
    try:
        yield
    finally:
        for m, momentum in zip(norms, saved):
            m.momentum = momentum


def encode(model: KoopmanModel, x: torch.Tensor, mode: Mode = Mode.EVAL) -> torch.Tensor:
    with network_mode(model.encoder, mode):
        return model.encode(x)


def decode(model: KoopmanModel, z: torch.Tensor, mode: Mode = Mode.EVAL) -> torch.Tensor:
    with network_mode(model.decoder, mode):
        return model.decode(z)


def aux_koopman(
    model: KoopmanModel, z: torch.Tensor, mode: Mode = Mode.EVAL
) -> torch.Tensor:
    with network_mode(model.aux, mode):
        return model.aux_koopman(z)


def discriminate(
    model: KoopmanModel, pair: torch.Tensor, mode: Mode = Mode.EVAL
) -> torch.Tensor:
    with network_mode(model.disc, mode):
        return model.discriminate(pair)


# -- layout helpers ----------------------------------------------------------


def to_network_layout(
    x: ArrayLike, spatial_rank: int, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Channels-last (..., *spatial, C) -> channels-first (..., C, *spatial)"""
    tensor = torch.as_tensor(np.asarray(x) if isinstance(x, np.ndarray) else x)
    return tensor.to(dtype).movedim(-1, -(spatial_rank + 1))


def to_corpus_layout(x: torch.Tensor, spatial_rank: int) -> np.ndarray:
    """Channels-first tensor -> channels-last numpy array"""
    return x.detach().movedim(-(spatial_rank + 1), -1).cpu().numpy()


def fold_sequence_pair(X: torch.Tensor, X_next: torch.Tensor) -> torch.Tensor:
    """(B, n_S, C, *sp) x 2 -> (B, 2 n_S C, *sp), time folded into channels"""
    if X.shape != X_next.shape:
        raise ValidationError(
            f"Sequence pair shapes differ: {tuple(X.shape)} vs {tuple(X_next.shape)}"
        )
    pair = torch.cat([X, X_next], dim=1)
    return pair.reshape(pair.shape[0], -1, *pair.shape[3:])


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def weight_arrays(model: KoopmanModel) -> Iterator[Tuple[str, torch.Tensor]]:
    """Conv/dense weight tensors of the generator networks"""
    for part in KoopmanModel.GENERATOR_PARTS:
        for name, layer in getattr(model, part).named_modules():
            if isinstance(layer, WEIGHT_LAYERS):
                yield f"{part}.{name}.weight", layer.weight
