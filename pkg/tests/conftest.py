"""
Pytest configuration and fixtures
"""

import numpy as np
import pytest
import torch

from adv_koopman.corpus import CorpusMetadata, NormalizationStats, SnapshotCorpus
from adv_koopman.koopman import LossWeights
from adv_koopman.networks import KoopmanModel, ModelConfig
from adv_koopman.training import Checkpoint, TrainConfig


def tiny_model_config(**overrides) -> ModelConfig:
    """M=4 on an 8-point 1-D input with n_S=2"""
    params = dict(
        latent_dim=4,
        spatial_rank=1,
        in_channels=1,
        input_extent=(8,),
        sequence_length=2,
        stage_filters=(4, 4),
        aux_hidden=(8,),
        disc_filters=(4, 4),
    )
    params.update(overrides)
    return ModelConfig(**params)


def tiny_gs_model_config(**overrides) -> ModelConfig:
    params = dict(
        latent_dim=4,
        spatial_rank=2,
        in_channels=2,
        input_extent=(8, 8),
        sequence_length=2,
        stage_filters=(4, 4),
        aux_hidden=(8,),
        disc_filters=(4, 4),
        output_activation="sigmoid",
    )
    params.update(overrides)
    return ModelConfig(**params)


def tiny_train_config(**overrides) -> TrainConfig:
    params = dict(
        iterations=3,
        n_S=2,
        checkpoint_every=0,
        log_every=1,
        learning_rate=1e-3,
        disc_learning_rate=1e-3,
        weights=LossWeights.for_ks(),
    )
    params.update(overrides)
    return TrainConfig(**params)


def traveling_wave(n_snapshots: int, n_points: int = 8) -> np.ndarray:
    x = np.arange(n_points)
    t = np.arange(n_snapshots)[:, None]
    return np.sin(2 * np.pi * (x[None, :] - t) / n_points)[..., None].astype(np.float32)


def ks_metadata(n_points: int = 8) -> CorpusMetadata:
    return CorpusMetadata(
        problem="ks",
        snapshot_shape=(n_points, 1),
        dt_solver=1.0 / 16.0,
        dt_koopman=0.25,
        save_every=4,
        grid_spacing=1.0 / 8.0,
    )


def gs_metadata(extent: int = 8) -> CorpusMetadata:
    return CorpusMetadata(
        problem="gs",
        snapshot_shape=(extent, extent, 2),
        dt_solver=1.0,
        dt_koopman=25.0,
        save_every=25,
        rng_seed=0,
    )


def zero_aux(model: KoopmanModel) -> None:
    """Force K(z) = 0 for every z"""
    with torch.no_grad():
        model.aux.head.weight.zero_()
        model.aux.head.bias.zero_()


def constant_aux(model: KoopmanModel, matrix: np.ndarray) -> None:
    """Force K(z) = matrix for every z"""
    with torch.no_grad():
        model.aux.head.weight.zero_()
        model.aux.head.bias.copy_(torch.as_tensor(matrix, dtype=torch.float32).flatten())


def make_checkpoint(model_config: ModelConfig, n_S: int = 2, seed: int = 0) -> Checkpoint:
    torch.manual_seed(seed)
    model = KoopmanModel(model_config)
    model.eval()
    return Checkpoint(
        model=model,
        model_config=model_config,
        train_config=tiny_train_config(n_S=n_S),
        iteration=0,
        normalization=NormalizationStats.identity(model_config.in_channels),
        problem="ks" if model_config.spatial_rank == 1 else "gs",
    )


@pytest.fixture
def model_config():
    return tiny_model_config()


@pytest.fixture
def model(model_config):
    torch.manual_seed(0)
    return KoopmanModel(model_config)


@pytest.fixture
def ks_corpus():
    """Synthetic 8-point traveling wave, 24 snapshots"""
    return SnapshotCorpus(data=traveling_wave(24), metadata=ks_metadata())


@pytest.fixture
def gs_corpus():
    """Smooth 8x8 two-channel fields in [0, 1], 12 snapshots"""
    i, j = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    frames = []
    for t in range(12):
        u = 0.5 + 0.4 * np.cos(2 * np.pi * (i + t) / 8)
        v = 0.3 + 0.2 * np.sin(2 * np.pi * (j - t) / 8)
        frames.append(np.stack([u, v], axis=-1))
    return SnapshotCorpus(data=np.asarray(frames, dtype=np.float32), metadata=gs_metadata())


@pytest.fixture
def checkpoint(model_config):
    return make_checkpoint(model_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
