"""
Command Line Interface for the adversarial Koopman toolkit
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np

from .control import ControlConfig, optimize_controls
from .corpus import (
    SnapshotCorpus,
    apply_missing_policy,
    load_corpus,
    mask_indices,
    parse_region,
    save_corpus,
)
from .evaluation import (
    ABLATION_VARIANTS,
    GS_PROTOCOL,
    KS_PROTOCOL,
    KS_ROLLOUT,
    EvalProtocol,
    evaluate_rollout,
    impute_missing,
    run_ablation,
    save_prediction,
    variant_weights,
    write_series,
)
from .exceptions import ConfigError, KoopmanError, ValidationError
from .koopman import LossWeights
from .networks import ModelConfig
from .plotting import (
    plot_control_panels,
    plot_error_curves,
    plot_error_heatmap,
    plot_pattern_grid,
    plot_profiles,
    plot_space_time,
    render_directory,
)
from .solvers import GSConfig, KSConfig, generate_gs_corpus, generate_ks_corpus
from .training import LATEST_CHECKPOINT, TrainConfig, load_checkpoint, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

CONFIG_SECTIONS = ("ks", "gs", "model", "train", "weights", "control", "eval")
OUTPUT_ROOT_ENV = "ADV_KOOPMAN_OUTPUT_ROOT"
RESOLVED_CONFIG = "resolved_config.json"
PROTOCOLS = {"ks": KS_PROTOCOL, "gs": GS_PROTOCOL, "ks-rollout": KS_ROLLOUT}
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped onto exit code 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_config(config_path: Optional[str] = None) -> Dict[str, Any]:
    """Load configuration from file"""
    if config_path:
        config_file = Path(config_path)
        if not config_file.exists():
            raise ConfigError(f"Config file not found: {config_file}")
    else:
        possible_paths = [
            Path.cwd() / "adv_koopman.json",
            Path.home() / ".adv_koopman.json",
        ]
        config_file = None
        for path in possible_paths:
            if path.exists():
                config_file = path
                break

    if config_file is None:
        return {}
    try:
        with open(config_file, "r") as f:
            config = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read config {config_file}: {e}")
    if not isinstance(config, dict):
        raise ConfigError(f"Config {config_file} must hold a JSON object")
    unknown = sorted(set(config) - set(CONFIG_SECTIONS))
    if unknown:
        raise ConfigError(f"Unknown config section(s): {', '.join(unknown)}")
    return config


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "outputs"))


def write_resolved_config(out_dir: Path, **sections: Any) -> Path:
    """Echo every effective setting, defaults included"""
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {
        name: value.to_dict() if hasattr(value, "to_dict") else value
        for name, value in sections.items()
    }
    path = out_dir / RESOLVED_CONFIG
    with open(path, "w", encoding="utf-8") as f:
        json.dump(resolved, f, indent=2, default=str)
    return path


def _out_dir(args, default_name: str) -> Path:
    return Path(args.out_dir) if args.out_dir else output_root() / default_name


# -- config assembly ---------------------------------------------------------


def build_train_configs(
    corpus: SnapshotCorpus, config: Dict[str, Any], ablate: Optional[str] = None
):
    """Presets for the corpus problem, overridden by the config file"""
    problem = corpus.metadata.problem
    train_preset = TrainConfig.for_ks() if problem == "ks" else TrainConfig.for_gs()
    weights = train_preset.weights.to_dict()
    weights.update(config.get("weights", {}))
    weights = LossWeights.from_dict(weights)
    if ablate:
        weights = variant_weights(ablate, weights)

    train_params = train_preset.to_dict()
    train_params.update(config.get("train", {}))
    train_params["weights"] = weights
    train_config = TrainConfig.from_dict(train_params)

    model_preset = ModelConfig.for_ks() if problem == "ks" else ModelConfig.for_gs()
    model_params = model_preset.to_dict()
    model_params.update(config.get("model", {}))
    model_params.update(
        spatial_rank=corpus.metadata.spatial_rank,
        in_channels=corpus.metadata.channels,
        input_extent=list(corpus.metadata.snapshot_shape[:-1]),
        sequence_length=train_config.n_S,
    )
    return ModelConfig.from_dict(model_params), train_config


def _apply_masks(corpus: SnapshotCorpus, args) -> SnapshotCorpus:
    if getattr(args, "mask_indices", None):
        corpus = mask_indices(corpus, args.mask_indices)
    if getattr(args, "mask_fraction", 0.0):
        corpus = apply_missing_policy(
            corpus,
            args.mask_fraction,
            region=parse_region(args.mask_region),
            rng_seed=args.mask_seed,
        )
    if corpus.missing_mask.any():
        print(
            f"Masked {int(corpus.missing_mask.sum())} snapshot(s): "
            f"{corpus.missing_indices.tolist()}"
        )
    return corpus


def _protocol(args, config: Dict[str, Any], problem: str) -> EvalProtocol:
    name = args.protocol or config.get("eval", {}).get("protocol")
    if name is None:
        name = "ks-rollout" if problem == "ks" else "gs"
    if name not in PROTOCOLS:
        raise ValidationError(f"Unknown protocol {name!r}; choose from {', '.join(PROTOCOLS)}")
    protocol = PROTOCOLS[name]
    return EvalProtocol(
        start_index=protocol.start_index if args.start is None else args.start,
        n_steps=protocol.n_steps if args.steps is None else args.steps,
    )


# -- commands ----------------------------------------------------------------


def gen_data_command(args) -> int:
    """Handle corpus generation command"""
    config = load_config(args.config)
    if args.problem == "ks":
        solver_config = KSConfig.from_dict(config.get("ks", {}))
        corpus = generate_ks_corpus(solver_config)
    else:
        solver_config = GSConfig.from_dict(config.get("gs", {}))
        corpus = generate_gs_corpus(solver_config, rng_seed=args.seed)

    out = Path(args.out) if args.out else output_root() / f"{args.problem}_corpus.bin"
    save_corpus(corpus, out)
    write_resolved_config(out.parent, **{args.problem: solver_config, "seed": args.seed})
    print(f"✓ Wrote {len(corpus)} snapshots of shape {corpus.metadata.snapshot_shape} to {out}")
    return EXIT_OK


def train_command(args) -> int:
    """Handle training command"""
    config = load_config(args.config)
    corpus = _apply_masks(load_corpus(args.corpus), args)
    out_dir = _out_dir(args, "train")
    model_config, train_config = build_train_configs(corpus, config, args.ablate)
    if args.iterations:
        train_config = replace(train_config, iterations=args.iterations)

    resume_from = None
    if args.resume:
        resume_from = out_dir / LATEST_CHECKPOINT
        if not resume_from.exists():
            raise ValidationError(f"No checkpoint to resume from in {out_dir}")

    write_resolved_config(
        out_dir,
        model=model_config,
        train=train_config,
        masked=corpus.missing_indices.tolist(),
        ablate=args.ablate,
    )
    checkpoint = train(corpus, model_config, train_config, out_dir=out_dir, resume_from=resume_from)
    print(f"✓ Training finished at iteration {checkpoint.iteration}; checkpoints in {out_dir}")
    return EXIT_OK


def eval_command(args) -> int:
    """Handle rollout evaluation command"""
    config = load_config(args.config)
    checkpoint = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    protocol = _protocol(args, config, corpus.metadata.problem)
    out_dir = _out_dir(args, "eval")
    write_resolved_config(out_dir, eval={"start_index": protocol.start_index, "n_steps": protocol.n_steps})

    evaluation = evaluate_rollout(corpus, checkpoint, protocol)
    steps = np.arange(1, protocol.n_steps + 1)
    write_series(
        out_dir / "eval_per_step.csv",
        {"step": steps, "model": evaluation.per_step_l1, "persistence": evaluation.baseline_per_step_l1},
    )
    save_prediction(evaluation.prediction, corpus.metadata, out_dir / "prediction.bin")
    with open(out_dir / "eval_summary.json", "w", encoding="utf-8") as f:
        json.dump(
            {
                "start_index": protocol.start_index,
                "n_steps": protocol.n_steps,
                "mean_l1": evaluation.mean_l1,
                "persistence_mean_l1": float(evaluation.baseline_per_step_l1.mean()),
            },
            f,
            indent=2,
        )

    if corpus.metadata.spatial_rank == 1:
        plot_space_time(
            evaluation.truth,
            evaluation.prediction,
            out_dir / "space_time.png",
            dt=corpus.metadata.dt_koopman,
            extent_x=corpus.metadata.grid_spacing * corpus.metadata.snapshot_shape[0],
        )
        picks = sorted({0, protocol.n_steps // 2, protocol.n_steps - 1})
        plot_profiles(evaluation.truth, evaluation.prediction, picks, out_dir / "profiles.png")
    else:
        picks = sorted(set(np.linspace(0, protocol.n_steps - 1, 5).astype(int).tolist()))
        plot_pattern_grid(
            {"truth": evaluation.truth, "prediction": evaluation.prediction},
            picks,
            out_dir / "patterns.png",
            step_labels=[f"t={protocol.start_index + 1 + p}" for p in picks],
        )
    plot_error_curves(
        {"model": evaluation.per_step_l1},
        out_dir / "eval_error.png",
        baseline=evaluation.baseline_per_step_l1,
    )
    print(f"✓ Mean L1 over {protocol.n_steps} steps: {evaluation.mean_l1:.6e}")
    return EXIT_OK


def fill_missing_command(args) -> int:
    """Handle missing-snapshot imputation command"""
    checkpoint = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    truth = load_corpus(args.truth) if args.truth else None
    out_dir = _out_dir(args, "fill_missing")
    write_resolved_config(out_dir, fill_missing={"corpus": str(args.corpus), "truth": args.truth})

    imputed = impute_missing(corpus, checkpoint, truth)
    data = corpus.data.copy()
    mask = corpus.missing_mask.copy()
    for entry in imputed:
        data[entry.index] = entry.values
        mask[entry.index] = False
    save_corpus(replace(corpus, data=data, missing_mask=mask), out_dir / "filled.bin")

    records = [
        {"index": e.index, "source_index": e.source_index, "steps": e.steps, "l1_error": e.l1_error}
        for e in imputed
    ]
    with open(out_dir / "imputed.json", "w", encoding="utf-8") as f:
        json.dump(records, f, indent=2)

    if imputed and corpus.metadata.spatial_rank == 2:
        rows = {"imputed": data}
        if truth is not None:
            rows = {"truth": truth.data, "imputed": data}
        indices = [e.index for e in imputed]
        plot_pattern_grid(rows, indices, out_dir / "imputed.png")

    for record in records:
        error = "" if record["l1_error"] is None else f" (L1 {record['l1_error']:.4e})"
        print(f"✓ Imputed t={record['index']} from t={record['source_index']}{error}")
    return EXIT_OK


def control_command(args) -> int:
    """Handle latent control command"""
    config = load_config(args.config)
    params = ControlConfig().to_dict()
    params.update(config.get("control", {}))
    for name in ("t_start", "t_desired", "delta", "steps", "lr", "u_penalty", "optimizer"):
        value = getattr(args, name)
        if value is not None:
            params[name] = value
    control_config = ControlConfig.from_dict(params)

    checkpoint = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    out_dir = _out_dir(args, "control")
    write_resolved_config(out_dir, control=control_config)

    result = optimize_controls(corpus, checkpoint, control_config)
    result.write(out_dir, corpus)
    with open(out_dir / "control_summary.json", "w", encoding="utf-8") as f:
        json.dump({**result.metrics, "converged": result.converged}, f, indent=2)
    plot_control_panels(
        result.start, result.desired, result.predicted, result.natural[-1], out_dir / "control_panels.png"
    )
    plot_error_heatmap(result.predicted, result.desired, out_dir / "control_error.png")

    status = "✓" if result.converged else "✗"
    print(f"{status} Control loss {result.loss:.6e} (gap {result.gap:.6e}, penalty {result.penalty:.6e})")
    return EXIT_OK


def ablate_command(args) -> int:
    """Handle ablation command"""
    config = load_config(args.config)
    corpus = _apply_masks(load_corpus(args.corpus), args)
    truth = load_corpus(args.truth) if args.truth else None
    protocol = _protocol(args, config, corpus.metadata.problem)
    out_dir = _out_dir(args, "ablation")
    model_config, train_config = build_train_configs(corpus, config)
    if args.iterations:
        train_config = replace(train_config, iterations=args.iterations)
    write_resolved_config(
        out_dir,
        model=model_config,
        train=train_config,
        variants=args.variants,
        eval={"start_index": protocol.start_index, "n_steps": protocol.n_steps},
        masked=corpus.missing_indices.tolist(),
    )

    result = run_ablation(
        corpus, args.variants, model_config, train_config, protocol, truth_corpus=truth, out_dir=out_dir
    )
    if result.curves():
        plot_error_curves(result.curves(), out_dir / "ablation_curves.png", result.missing_steps)

    failed = 0
    for row in result.table():
        if row["error"]:
            failed += 1
            print(f"✗ {row['variant']}: {row['error']}")
        else:
            print(f"✓ {row['variant']}: mean L1 {row['mean_l1']:.6e}")
    return EXIT_RUNTIME if failed == len(result.rows) else EXIT_OK


def plot_command(args) -> int:
    """Handle figure rendering command"""
    written = render_directory(args.metrics_dir, args.out_dir)
    for path in written:
        print(f"✓ {path}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _add_mask_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mask-fraction", type=float, default=0.0, help="Fraction of snapshots to mask")
    parser.add_argument("--mask-region", default="all", help="Region to mask: 'all' or 'after:T'")
    parser.add_argument("--mask-indices", type=int, nargs="+", help="Explicit snapshot indices to mask")
    parser.add_argument("--mask-seed", type=int, default=0, help="Seed for the random mask (default: 0)")


def _add_protocol_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--protocol", choices=sorted(PROTOCOLS), help="Named evaluation protocol")
    group.add_argument("--ks", dest="protocol", action="store_const", const="ks-rollout", help="KS rollout protocol")
    group.add_argument("--gs", dest="protocol", action="store_const", const="gs", help="GS protocol")
    parser.add_argument("--start", type=int, help="Override the protocol start index")
    parser.add_argument("--steps", type=int, help="Override the number of predicted steps")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="adv-koopman",
        description="Adversarial Koopman reduced-order modeling toolkit",
    )
    parser.add_argument("--config", "-c", help="Path to configuration file")
    parser.add_argument("--verbose", "-v", action="store_true", help="Verbose output")

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    gen_parser = subparsers.add_parser("gen-data", help="Simulate a snapshot corpus")
    gen_parser.add_argument("problem", choices=("ks", "gs"), help="Problem to simulate")
    gen_parser.add_argument("--out", "-o", help="Corpus output path")
    gen_parser.add_argument("--seed", type=int, default=0, help="Initial-condition seed (default: 0)")
    gen_parser.set_defaults(func=gen_data_command)

    train_parser = subparsers.add_parser("train", help="Train a model on a corpus")
    train_parser.add_argument("corpus", help="Corpus path")
    train_parser.add_argument("--out-dir", "-o", help="Directory for checkpoints and logs")
    train_parser.add_argument("--ablate", choices=sorted(ABLATION_VARIANTS), help="Train a named variant")
    train_parser.add_argument("--resume", action="store_true", help="Continue from the latest checkpoint")
    train_parser.add_argument("--iterations", type=int, help="Override the iteration count")
    _add_mask_flags(train_parser)
    train_parser.set_defaults(func=train_command)

    eval_parser = subparsers.add_parser("eval", help="Score a long-horizon rollout")
    eval_parser.add_argument("checkpoint", help="Checkpoint path")
    eval_parser.add_argument("corpus", help="Corpus holding the ground truth")
    eval_parser.add_argument("--out-dir", "-o", help="Directory for metrics and figures")
    _add_protocol_flags(eval_parser)
    eval_parser.set_defaults(func=eval_command)

    fill_parser = subparsers.add_parser("fill-missing", help="Impute masked snapshots")
    fill_parser.add_argument("checkpoint", help="Checkpoint path")
    fill_parser.add_argument("corpus", help="Masked corpus path")
    fill_parser.add_argument("--truth", help="Unmasked corpus for error reporting")
    fill_parser.add_argument("--out-dir", "-o", help="Directory for imputed snapshots")
    fill_parser.set_defaults(func=fill_missing_command)

    control_parser = subparsers.add_parser("control", help="Optimize latent control inputs")
    control_parser.add_argument("checkpoint", help="Checkpoint path")
    control_parser.add_argument("corpus", help="Corpus path")
    control_parser.add_argument("--out-dir", "-o", help="Directory for control outputs")
    control_parser.add_argument("--t-start", dest="t_start", type=int)
    control_parser.add_argument("--t-desired", dest="t_desired", type=int)
    control_parser.add_argument("--delta", type=int)
    control_parser.add_argument("--steps", type=int)
    control_parser.add_argument("--lr", type=float)
    control_parser.add_argument("--u-penalty", dest="u_penalty", type=float)
    control_parser.add_argument("--optimizer", choices=("adam", "sgd"))
    control_parser.set_defaults(func=control_command)

    ablate_parser = subparsers.add_parser("ablate", help="Train and score ablation variants")
    ablate_parser.add_argument("corpus", help="Corpus path")
    ablate_parser.add_argument(
        "--variants",
        nargs="+",
        choices=list(ABLATION_VARIANTS),
        default=list(ABLATION_VARIANTS),
        help="Variants to run (default: all)",
    )
    ablate_parser.add_argument("--truth", help="Unmasked corpus to score against")
    ablate_parser.add_argument("--out-dir", "-o", help="Directory for variant outputs")
    ablate_parser.add_argument("--iterations", type=int, help="Override the iteration count")
    _add_protocol_flags(ablate_parser)
    _add_mask_flags(ablate_parser)
    ablate_parser.set_defaults(func=ablate_command)

    plot_parser = subparsers.add_parser("plot", help="Render figures from a metrics directory")
    plot_parser.add_argument("metrics_dir", help="Directory written by eval/ablate/control")
    plot_parser.add_argument("--out-dir", "-o", help="Where to write figures")
    plot_parser.set_defaults(func=plot_command)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point"""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return EXIT_USAGE

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format=LOG_FORMAT
    )
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (KoopmanError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
