"""
Static figures for rollouts, ablations and control experiments
"""

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import VARIANT_LABELS  # noqa: E402
from .exceptions import NothingToPlotError, ValidationError  # noqa: E402

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
DPI = 150


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Wrote figure {path}")
    return path


def _field(snapshot: np.ndarray, channel: int) -> np.ndarray:
    """2-D view of one channel of a channels-last snapshot"""
    snapshot = np.asarray(snapshot)
    if snapshot.ndim == 3:
        return snapshot[..., channel]
    if snapshot.ndim == 2 and snapshot.shape[-1] <= 2:
        return snapshot[..., channel][None]
    return snapshot


def plot_space_time(
    truth: np.ndarray,
    prediction: np.ndarray,
    path: PathLike,
    dt: float = 1.0,
    extent_x: Optional[float] = None,
) -> Path:
    """Truth, prediction and absolute error of a 1-D field as x-t maps"""
    truth = np.asarray(truth)[..., 0]
    prediction = np.asarray(prediction)[..., 0]
    if truth.shape != prediction.shape:
        raise ValidationError(f"Shape mismatch: {truth.shape} vs {prediction.shape}")
    extent = [0.0, extent_x or truth.shape[1], len(truth) * dt, 0.0]
    vmax = float(np.abs(truth).max()) or 1.0

    fig, axs = plt.subplots(nrows=3, ncols=1, figsize=(8, 9), sharex=True)
    panels = (
        ("Ground truth", truth, "RdBu_r", (-vmax, vmax)),
        ("Prediction", prediction, "RdBu_r", (-vmax, vmax)),
        ("Absolute error", np.abs(prediction - truth), "viridis", (0, None)),
    )
    for ax, (title, data, cmap, (lo, hi)) in zip(axs, panels):
        image = ax.imshow(data, aspect="auto", cmap=cmap, vmin=lo, vmax=hi, extent=extent)
        ax.set_title(title)
        ax.set_ylabel("t")
        fig.colorbar(image, ax=ax)
    axs[-1].set_xlabel("x")
    return _save(fig, path)


def plot_profiles(
    truth: np.ndarray,
    prediction: np.ndarray,
    steps: Sequence[int],
    path: PathLike,
) -> Path:
    """Overlay predicted and true 1-D profiles at selected rollout steps"""
    fig, axs = plt.subplots(nrows=len(steps), ncols=1, figsize=(8, 2.2 * len(steps)), squeeze=False)
    for ax, step in zip(axs[:, 0], steps):
        ax.plot(np.asarray(truth)[step, :, 0], "k-", label="truth")
        ax.plot(np.asarray(prediction)[step, :, 0], "r--", label="prediction")
        ax.set_ylabel(f"step {step + 1}")
    axs[0, 0].legend(loc="upper right")
    axs[-1, 0].set_xlabel("grid point")
    return _save(fig, path)


def plot_pattern_grid(
    rows: Mapping[str, np.ndarray],
    steps: Sequence[int],
    path: PathLike,
    channel: int = 0,
    step_labels: Optional[Sequence[str]] = None,
) -> Path:
    """Grid of 2-D patterns, one row per series and one column per step"""
    if not rows:
        raise ValidationError("No series to draw")
    nrows, ncols = len(rows), len(steps)
    fig, axs = plt.subplots(nrows=nrows, ncols=ncols, figsize=(1.8 * ncols, 1.8 * nrows), squeeze=False)
    for r, (label, series) in enumerate(rows.items()):
        for c, step in enumerate(steps):
            ax = axs[r, c]
            ax.imshow(_field(series[step], channel), cmap="viridis", vmin=0.0, vmax=1.0)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(step_labels[c] if step_labels else f"t={step}")
            if c == 0:
                ax.set_ylabel(label)
    plt.subplots_adjust(wspace=0.02, hspace=0.05)
    return _save(fig, path)


def plot_error_curves(
    curves: Mapping[str, np.ndarray],
    path: PathLike,
    missing_steps: Optional[Sequence[int]] = None,
    baseline: Optional[np.ndarray] = None,
    logy: bool = False,
) -> Path:
    """Per-step mean L1 curves, with vertical markers where data were missing"""
    if not curves:
        raise ValidationError("No curves to draw")
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for name, curve in curves.items():
        steps = np.arange(1, len(curve) + 1)
        ax.plot(steps, curve, label=VARIANT_LABELS.get(name, name))
    if baseline is not None:
        ax.plot(np.arange(1, len(baseline) + 1), baseline, "k:", label="persistence")
    for step in missing_steps or ():
        ax.axvline(step, color="grey", linestyle="--", linewidth=0.8)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("prediction step")
    ax.set_ylabel("mean L1 error")
    ax.legend()
    return _save(fig, path)


def plot_control_panels(
    start: np.ndarray,
    desired: np.ndarray,
    predicted: np.ndarray,
    natural: np.ndarray,
    path: PathLike,
    channel: int = 0,
) -> Path:
    """Start, desired, controlled prediction and unforced evolution side by side"""
    fig, axs = plt.subplots(nrows=1, ncols=4, figsize=(12, 3.4))
    panels = (("start", start), ("desired", desired), ("predicted", predicted), ("natural", natural))
    for ax, (title, snapshot) in zip(axs, panels):
        ax.imshow(_field(snapshot, channel), cmap="viridis", vmin=0.0, vmax=1.0)
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)


def plot_error_heatmap(
    predicted: np.ndarray, desired: np.ndarray, path: PathLike, channel: int = 0
) -> Path:
    error = np.abs(_field(predicted, channel) - _field(desired, channel))
    fig, ax = plt.subplots(figsize=(4.5, 4))
    image = ax.imshow(error, cmap="magma")
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_title("absolute error")
    fig.colorbar(image, ax=ax)
    return _save(fig, path)


def _read_series(path: Path) -> Dict[str, np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        names = fh.readline().strip().split(",")
    table = np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))
    return {name: table[:, i] for i, name in enumerate(names)}


def render_directory(metrics_dir: PathLike, out_dir: Optional[PathLike] = None) -> List[Path]:
    """Render every figure whose source artifacts exist under metrics_dir"""
    metrics_dir = Path(metrics_dir)
    out_dir = Path(out_dir) if out_dir else metrics_dir
    written: List[Path] = []

    missing_file = metrics_dir / "missing_steps.txt"
    missing = np.atleast_1d(np.loadtxt(missing_file, dtype=int)).tolist() if missing_file.exists() else None

    ablation = metrics_dir / "ablation_curves.csv"
    if ablation.exists():
        series = _read_series(ablation)
        series.pop("step", None)
        written.append(plot_error_curves(series, out_dir / "ablation_curves.png", missing))

    rollout = metrics_dir / "eval_per_step.csv"
    if rollout.exists():
        series = _read_series(rollout)
        baseline = series.pop("persistence", None)
        series.pop("step", None)
        written.append(
            plot_error_curves(series, out_dir / "eval_error.png", missing, baseline=baseline)
        )

    panels = metrics_dir / "control_panels.npz"
    if panels.exists():
        with np.load(panels) as data:
            written.append(
                plot_control_panels(
                    data["start"], data["desired"], data["predicted"], data["natural"],
                    out_dir / "control_panels.png",
                )
            )
            written.append(
                plot_error_heatmap(data["predicted"], data["desired"], out_dir / "control_error.png")
            )

    if not written:
        raise NothingToPlotError(f"No plottable artifacts found in {metrics_dir}")
    return written
