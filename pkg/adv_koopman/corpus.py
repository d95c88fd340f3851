"""
Snapshot corpora: persistence, sequence sampling and missing-data masks

On disk a corpus is two files: ``<name>`` holding the little-endian float32
snapshot block followed by one byte per snapshot for the missing mask, and
``<name>.json`` holding the metadata sidecar.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from .exceptions import (
    CorpusTooShortError,
    CorruptCorpusError,
    FormatVersionError,
    ValidationError,
)
from .solvers import FieldSnapshot
from .validators import ConfigValidator

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SIDECAR_SUFFIX = ".json"

RegionPredicate = Callable[[int], bool]


@dataclass
class CorpusMetadata:
    """Description of how a corpus was produced"""

    problem: str
    snapshot_shape: Tuple[int, ...]
    dt_solver: float
    dt_koopman: float
    save_every: int
    grid_spacing: float = 1.0
    config: Dict[str, Any] = field(default_factory=dict)
    rng_seed: Optional[int] = None
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        ConfigValidator.one_of("problem", self.problem, ("ks", "gs"))
        self.snapshot_shape = tuple(int(s) for s in self.snapshot_shape)

    @property
    def spatial_rank(self) -> int:
        return len(self.snapshot_shape) - 1

    @property
    def channels(self) -> int:
        return self.snapshot_shape[-1]

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["snapshot_shape"] = list(self.snapshot_shape)
        return data


@dataclass
class SnapshotCorpus:
    """Ordered snapshots (channels last) with metadata and a missing mask"""

    data: np.ndarray
    metadata: CorpusMetadata
    missing_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.missing_mask is None:
            self.missing_mask = np.zeros(len(self.data), dtype=bool)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        if self.missing_mask.shape != (len(self.data),):
            raise ValidationError(
                f"Mask length {self.missing_mask.shape} does not match "
                f"corpus length {len(self.data)}"
            )
        if tuple(self.data.shape[1:]) != self.metadata.snapshot_shape:
            raise ValidationError(
                f"Snapshot shape {self.data.shape[1:]} disagrees with metadata "
                f"{self.metadata.snapshot_shape}"
            )

    def __len__(self) -> int:
        return len(self.data)

    def __getitem__(self, index: int) -> FieldSnapshot:
        return FieldSnapshot(values=self.data[index], time_index=int(index))

    @property
    def snapshots(self) -> List[FieldSnapshot]:
        return [self[i] for i in range(len(self))]

    @property
    def missing_indices(self) -> np.ndarray:
        return np.flatnonzero(self.missing_mask)

    @property
    def available_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.missing_mask)


@dataclass
class SequenceSample:
    """A contiguous window x_t .. x_{t+n_S} and its mask slice"""

    start_index: int
    x_seq: np.ndarray
    mask_seq: np.ndarray

    @property
    def n_S(self) -> int:
        return len(self.x_seq) - 1


@dataclass
class NormalizationStats:
    """Per-channel affine normalization"""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.std).astype(np.float32)

    def invert(self, x: np.ndarray) -> np.ndarray:
        return (x * self.std + self.mean).astype(np.float32)

    def to_dict(self) -> Dict[str, List[float]]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, List[float]]) -> "NormalizationStats":
        return cls(
            mean=np.asarray(data["mean"], dtype=np.float32),
            std=np.asarray(data["std"], dtype=np.float32),
        )

    @classmethod
    def identity(cls, channels: int) -> "NormalizationStats":
        return cls(
            mean=np.zeros(channels, dtype=np.float32),
            std=np.ones(channels, dtype=np.float32),
        )


# -- persistence -------------------------------------------------------------


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + SIDECAR_SUFFIX)


def save_corpus(corpus: SnapshotCorpus, path: Union[str, Path]) -> None:
    """Write the binary block and its metadata sidecar"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    payload = corpus.data.astype("<f4", copy=False).tobytes()
    mask = corpus.missing_mask.astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(mask)

    meta = corpus.metadata.to_dict()
    meta.update(
        n_snapshots=len(corpus),
        data_bytes=len(payload),
        mask_length=len(mask),
        dtype="<f4",
    )
    with open(_sidecar(path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
    logger.info(f"Saved corpus of {len(corpus)} snapshots to {path}")


def load_corpus(path: Union[str, Path]) -> SnapshotCorpus:
    """Read a corpus written by save_corpus, verifying its layout"""
    path = Path(path)
    try:
        with open(_sidecar(path), "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        raw = path.read_bytes()
    except json.JSONDecodeError as e:
        raise CorruptCorpusError(f"Unreadable corpus metadata for {path}: {e}")
    except OSError as e:
        raise CorruptCorpusError(f"Cannot read corpus {path}: {e}")

    version = meta.pop("format_version", None)
    if version != FORMAT_VERSION:
        raise FormatVersionError(
            f"Corpus {path} has format_version {version}, expected {FORMAT_VERSION}"
        )

    try:
        n = int(meta.pop("n_snapshots"))
        data_bytes = int(meta.pop("data_bytes"))
        mask_length = int(meta.pop("mask_length"))
        meta.pop("dtype", None)
        metadata = CorpusMetadata(format_version=version, **meta)
    except (KeyError, TypeError, ValueError, ValidationError) as e:
        raise CorruptCorpusError(f"Inconsistent corpus metadata for {path}: {e}")

    expected = n * int(np.prod(metadata.snapshot_shape)) * 4
    if data_bytes != expected or mask_length != n:
        raise CorruptCorpusError(
            f"Metadata of {path} is inconsistent: {data_bytes} data bytes and "
            f"{mask_length} mask bytes for {n} snapshots of {metadata.snapshot_shape}"
        )
    if len(raw) != data_bytes + mask_length:
        raise CorruptCorpusError(
            f"Corpus {path} holds {len(raw)} bytes, expected "
            f"{data_bytes + mask_length}"
        )

    data = np.frombuffer(raw[:data_bytes], dtype="<f4").reshape(
        (n,) + metadata.snapshot_shape
    )
    mask = np.frombuffer(raw[data_bytes:], dtype=np.uint8).astype(bool)
    return SnapshotCorpus(data=data.astype(np.float32), metadata=metadata, missing_mask=mask)


# -- sampling ----------------------------------------------------------------


def sample_sequence(
    corpus: SnapshotCorpus, n_S: int, rng: np.random.Generator
) -> SequenceSample:
    """Draw a uniformly random window of n_S + 1 consecutive snapshots"""
    if n_S < 1:
        raise ValidationError(f"n_S must be >= 1, got {n_S}")
    if len(corpus) < n_S + 1:
        raise CorpusTooShortError(
            f"Corpus of length {len(corpus)} cannot hold a window of {n_S + 1}"
        )
    start = int(rng.integers(0, len(corpus) - n_S))
    stop = start + n_S + 1
    return SequenceSample(
        start_index=start,
        x_seq=corpus.data[start:stop],
        mask_seq=corpus.missing_mask[start:stop],
    )


# -- missing data ------------------------------------------------------------


def region_all() -> RegionPredicate:
    return lambda index: True


def region_after(threshold: int) -> RegionPredicate:
    """Indices strictly greater than threshold"""
    return lambda index: index > threshold


def parse_region(spec: str) -> RegionPredicate:
    """Parse ``all`` or ``after:<index>``"""
    if spec == "all":
        return region_all()
    kind, _, value = spec.partition(":")
    if kind == "after" and value.lstrip("-").isdigit():
        return region_after(int(value))
    raise ValidationError(f"Unknown mask region {spec!r}; use 'all' or 'after:T'")


def mask_indices(corpus: SnapshotCorpus, indices: Iterable[int]) -> SnapshotCorpus:
    """Return a copy with the given snapshots zeroed and flagged missing"""
    chosen = np.asarray(sorted(set(int(i) for i in indices)), dtype=int)
    if chosen.size and (chosen.min() < 0 or chosen.max() >= len(corpus)):
        raise ValidationError(f"Mask indices out of range for corpus of {len(corpus)}")
    data = corpus.data.copy()
    mask = corpus.missing_mask.copy()
    data[chosen] = 0.0
    mask[chosen] = True
    return replace(corpus, data=data, missing_mask=mask)


def apply_missing_policy(
    corpus: SnapshotCorpus,
    fraction: float,
    region: Optional[RegionPredicate] = None,
    rng_seed: int = 0,
) -> SnapshotCorpus:
    """Mask floor(fraction * |region|) snapshots drawn without replacement"""
    ConfigValidator.in_range("fraction", fraction, 0.0, 1.0)
    region = region or region_all()
    eligible = np.asarray([i for i in range(len(corpus)) if region(i)], dtype=int)
    if eligible.size == 0:
        if fraction > 0:
            raise ValidationError("Missing-data region is empty")
        return replace(corpus, data=corpus.data.copy(), missing_mask=corpus.missing_mask.copy())

    count = int(np.floor(fraction * eligible.size))
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(eligible, size=count, replace=False)
    logger.info(f"Masking {count} of {eligible.size} eligible snapshots")
    return mask_indices(corpus, chosen)


# -- normalization -----------------------------------------------------------


def compute_normalization(corpus: SnapshotCorpus) -> NormalizationStats:
    """Per-channel mean/std over unmasked snapshots only"""
    available = corpus.data[~corpus.missing_mask]
    if len(available) == 0:
        raise ValidationError("Cannot normalize a corpus with no available snapshots")
    axes = tuple(range(available.ndim - 1))
    mean = available.mean(axis=axes, dtype=np.float64)
    std = available.std(axis=axes, dtype=np.float64)
    std = np.where(std > 0, std, 1.0)
    return NormalizationStats(mean=mean.astype(np.float32), std=std.astype(np.float32))


def normalize_corpus(
    corpus: SnapshotCorpus, stats: NormalizationStats
) -> SnapshotCorpus:
    """Apply stats; masked snapshots stay exactly zero"""
    data = stats.apply(corpus.data)
    data[corpus.missing_mask] = 0.0
    return replace(corpus, data=data, missing_mask=corpus.missing_mask.copy())
