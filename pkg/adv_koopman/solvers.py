"""
Ground-truth solvers for the Kuramoto-Sivashinsky and Gray-Scott equations

KS: u_t + u u_x + u_xx + u_xxxx = 0 on a periodic domain, Crank-Nicolson for
the linear operator (diagonal in Fourier space) and second-order
Adams-Bashforth for the nonlinear term.

GS: explicit Euler with a 5-point periodic Laplacian in cell units.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np

from .exceptions import SolverBlowupError, ValidationError
from .validators import ArrayValidator, ConfigValidator

logger = logging.getLogger(__name__)

GS_ADMISSIBLE_RANGE = (-0.5, 1.5)


@dataclass(frozen=True)
class KSConfig:
    """Kuramoto-Sivashinsky grid and integration parameters"""

    domain_length: float = 128.0
    dx: float = 1.0 / 8.0
    dt_solver: float = 1.0 / 16.0
    n_steps: int = 4800
    save_every: int = 4
    blowup_bound: float = 1.0e3

    def __post_init__(self):
        ConfigValidator.positive("dx", self.dx)
        ConfigValidator.positive("dt_solver", self.dt_solver)
        ConfigValidator.positive("domain_length", self.domain_length)
        ConfigValidator.positive("save_every", self.save_every)
        ConfigValidator.positive("n_steps", self.n_steps)
        ConfigValidator.divisible("n_steps", self.n_steps, self.save_every)
        ConfigValidator.positive("blowup_bound", self.blowup_bound)

    @property
    def n_points(self) -> int:
        return int(round(self.domain_length / self.dx))

    @property
    def n_snapshots(self) -> int:
        return self.n_steps // self.save_every

    @property
    def dt_koopman(self) -> float:
        return self.dt_solver * self.save_every

    def grid(self) -> np.ndarray:
        """Grid coordinates x_i = i * dx"""
        return np.arange(self.n_points) * self.dx

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "KSConfig":
        return ConfigValidator.build(cls, data)


@dataclass(frozen=True)
class GSConfig:
    """Gray-Scott mesh, chemistry and integration parameters"""

    box_size: float = 2.5
    mesh: Tuple[int, int] = (256, 256)
    dt_solver: float = 1.0
    n_steps: int = 3000
    save_every: int = 25
    Du: float = 0.16
    Dv: float = 0.08
    f: float = 0.035
    k: float = 0.060
    crop: int = 128
    seed_radius_cells: int = 20
    noise_sigma: float = 0.05

    def __post_init__(self):
        if len(self.mesh) != 2:
            raise ValidationError(f"mesh must be a pair, got {self.mesh}")
        for extent in self.mesh:
            ConfigValidator.positive("mesh", extent)
            if self.crop > extent:
                raise ValidationError(
                    f"crop={self.crop} exceeds mesh dimensions {self.mesh}"
                )
        ConfigValidator.positive("crop", self.crop)
        ConfigValidator.positive("Du", self.Du)
        ConfigValidator.positive("Dv", self.Dv)
        ConfigValidator.in_range("f", self.f, 0.0, 1.0, closed=False)
        ConfigValidator.in_range("k", self.k, 0.0, 1.0, closed=False)
        ConfigValidator.positive("dt_solver", self.dt_solver)
        ConfigValidator.positive("save_every", self.save_every)
        ConfigValidator.divisible("n_steps", self.n_steps, self.save_every)
        ConfigValidator.non_negative("noise_sigma", self.noise_sigma)
        ConfigValidator.non_negative("seed_radius_cells", self.seed_radius_cells)

    @property
    def n_snapshots(self) -> int:
        return self.n_steps // self.save_every

    @property
    def dt_koopman(self) -> float:
        return self.dt_solver * self.save_every

    def crop_slices(self) -> Tuple[slice, slice]:
        """Slices selecting the central crop x crop region"""
        starts = [(extent - self.crop) // 2 for extent in self.mesh]
        return tuple(slice(s, s + self.crop) for s in starts)  # type: ignore

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["mesh"] = list(self.mesh)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GSConfig":
        return ConfigValidator.build(cls, data)


@dataclass
class FieldSnapshot:
    """One solver state at one saved time index, channels last"""

    values: np.ndarray
    time_index: int = 0
    channels: int = field(init=False)

    def __post_init__(self):
        if self.time_index < 0:
            raise ValidationError(f"time_index must be >= 0, got {self.time_index}")
        ArrayValidator.finite("snapshot", self.values)
        self.channels = int(self.values.shape[-1])

    @property
    def spatial_shape(self) -> Tuple[int, ...]:
        return tuple(self.values.shape[:-1])


# -- Kuramoto-Sivashinsky ----------------------------------------------------


def ks_initial_condition(config: KSConfig) -> FieldSnapshot:
    """u(x,0) = cos(x) + 0.1 cos(x/16) (1 + 2 sin(x/16))"""
    x = config.grid()
    u = np.cos(x) + 0.1 * np.cos(x / 16.0) * (1.0 + 2.0 * np.sin(x / 16.0))
    return FieldSnapshot(values=u[:, None], time_index=0)


def _ks_wavenumbers(n_points: int, dx: float) -> np.ndarray:
    return 2.0 * np.pi * np.fft.rfftfreq(n_points, d=dx)


def ks_linear_symbol(config: KSConfig) -> np.ndarray:
    """Fourier symbol of -(d2/dx2 + d4/dx4), i.e. k^2 - k^4"""
    k = _ks_wavenumbers(config.n_points, config.dx)
    return k**2 - k**4


def ks_nonlinear(u: np.ndarray, config: KSConfig) -> np.ndarray:
    """N(u) = -u u_x = -(u^2)_x / 2, differentiated spectrally"""
    k = _ks_wavenumbers(u.shape[-1], config.dx)
    return np.fft.irfft(-0.5j * k * np.fft.rfft(u * u), n=u.shape[-1])


def ks_step(
    state: np.ndarray,
    prev_nonlinear: Optional[np.ndarray],
    config: KSConfig,
) -> Tuple[np.ndarray, np.ndarray]:
    """Advance one CNAB2 step, returning the new state and the current N(u).

    With ``prev_nonlinear=None`` the step falls back to CNAB1 (explicit Euler
    on the nonlinear term), which bootstraps the Adams-Bashforth history.
    """
    u = np.asarray(state, dtype=np.float64).reshape(-1)
    if u.shape[0] != config.n_points:
        raise ValidationError(
            f"KS state has {u.shape[0]} points, expected {config.n_points}"
        )
    dt = config.dt_solver
    lin = ks_linear_symbol(config)

    nonlinear = ks_nonlinear(u, config)
    if prev_nonlinear is None:
        explicit = nonlinear
    else:
        explicit = 1.5 * nonlinear - 0.5 * np.asarray(prev_nonlinear).reshape(-1)

    u_hat = np.fft.rfft(u)
    rhs = (1.0 + 0.5 * dt * lin) * u_hat + dt * np.fft.rfft(explicit)
    u_next = np.fft.irfft(rhs / (1.0 - 0.5 * dt * lin), n=config.n_points)

    peak = np.max(np.abs(u_next))
    if not np.isfinite(peak) or peak > config.blowup_bound:
        raise SolverBlowupError(
            f"KS solution exceeded |u| <= {config.blowup_bound} (max {peak:.3e})"
        )
    return u_next, nonlinear


def integrate_ks(
    u0: np.ndarray, config: KSConfig, n_steps: int, save_every: int = 0
) -> np.ndarray:
    """Integrate n_steps from u0.

    Returns the final state, or with ``save_every > 0`` the stack of states at
    steps 0, save_every, 2*save_every, ... < n_steps.
    """
    u = np.asarray(u0, dtype=np.float64).reshape(-1)
    saved = [u.copy()] if save_every else []
    prev = None
    for step in range(1, n_steps + 1):
        u, prev = ks_step(u, prev, config)
        if save_every and step % save_every == 0 and step < n_steps:
            saved.append(u.copy())
    return np.stack(saved) if save_every else u


def generate_ks_corpus(config: Optional[KSConfig] = None):
    """Generate the KS snapshot corpus, one snapshot every save_every steps"""
    from .corpus import CorpusMetadata, SnapshotCorpus

    config = config or KSConfig()
    u0 = ks_initial_condition(config).values[:, 0]
    logger.info(
        f"Integrating KS: {config.n_points} points, {config.n_steps} steps "
        f"of dt={config.dt_solver}"
    )
    states = integrate_ks(u0, config, config.n_steps, save_every=config.save_every)
    data = states[..., None].astype(np.float32)

    metadata = CorpusMetadata(
        problem="ks",
        snapshot_shape=tuple(data.shape[1:]),
        dt_solver=config.dt_solver,
        dt_koopman=config.dt_koopman,
        save_every=config.save_every,
        grid_spacing=config.dx,
        config=config.to_dict(),
    )
    logger.info(f"KS corpus ready: {data.shape[0]} snapshots of {data.shape[1:]}")
    return SnapshotCorpus(data=data, metadata=metadata)


# -- Gray-Scott --------------------------------------------------------------


def gs_initial_condition(config: GSConfig, rng_seed: int) -> FieldSnapshot:
    """(u,v) = (1,0) outside a central disc, (0.5,0.25) + noise inside"""
    rows, cols = config.mesh
    u = np.ones((rows, cols))
    v = np.zeros((rows, cols))

    ii, jj = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    disc = (ii - rows // 2) ** 2 + (jj - cols // 2) ** 2 <= config.seed_radius_cells**2

    rng = np.random.default_rng(rng_seed)
    noise = rng.normal(0.0, config.noise_sigma, size=(2, int(disc.sum())))
    u[disc] = 0.5 + noise[0]
    v[disc] = 0.25 + noise[1]

    values = np.clip(np.stack([u, v], axis=-1), 0.0, 1.0)
    return FieldSnapshot(values=values, time_index=0)


def periodic_laplacian(z: np.ndarray) -> np.ndarray:
    """5-point Laplacian with periodic wrap, in cell units"""
    return (
        np.roll(z, 1, axis=0)
        + np.roll(z, -1, axis=0)
        + np.roll(z, 1, axis=1)
        + np.roll(z, -1, axis=1)
        - 4.0 * z
    )


def gs_step(
    state: Tuple[np.ndarray, np.ndarray], config: GSConfig
) -> Tuple[np.ndarray, np.ndarray]:
    """One explicit Euler step of the Gray-Scott reaction-diffusion system"""
    u, v = state
    dt = config.dt_solver
    reaction = u * v * v
    u_next = u + dt * (config.Du * periodic_laplacian(u) - reaction + config.f * (1.0 - u))
    v_next = v + dt * (
        config.Dv * periodic_laplacian(v) + reaction - (config.f + config.k) * v
    )

    low, high = GS_ADMISSIBLE_RANGE
    for name, arr in (("u", u_next), ("v", v_next)):
        if not np.all(np.isfinite(arr)) or arr.min() < low or arr.max() > high:
            raise SolverBlowupError(
                f"GS field {name} left [{low}, {high}] "
                f"(min {np.nanmin(arr):.3e}, max {np.nanmax(arr):.3e})"
            )
    return u_next, v_next


def generate_gs_corpus(config: Optional[GSConfig] = None, rng_seed: int = 0):
    """Generate the GS snapshot corpus over the central crop"""
    from .corpus import CorpusMetadata, SnapshotCorpus

    config = config or GSConfig()
    initial = gs_initial_condition(config, rng_seed).values
    u, v = initial[..., 0], initial[..., 1]
    window = config.crop_slices()

    logger.info(
        f"Integrating GS: mesh {config.mesh}, {config.n_steps} steps, "
        f"seed {rng_seed}"
    )
    saved = [np.stack([u[window], v[window]], axis=-1)]
    last = (config.n_snapshots - 1) * config.save_every
    for step in range(1, last + 1):
        u, v = gs_step((u, v), config)
        if step % config.save_every == 0:
            saved.append(np.stack([u[window], v[window]], axis=-1))
    data = np.stack(saved).astype(np.float32)

    metadata = CorpusMetadata(
        problem="gs",
        snapshot_shape=tuple(data.shape[1:]),
        dt_solver=config.dt_solver,
        dt_koopman=config.dt_koopman,
        save_every=config.save_every,
        grid_spacing=1.0,
        config=config.to_dict(),
        rng_seed=rng_seed,
    )
    logger.info(f"GS corpus ready: {data.shape[0]} snapshots of {data.shape[1:]}")
    return SnapshotCorpus(data=data, metadata=metadata)
