import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

# Fix path to include core
sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from core import describe_version
from core.config import ADDA_STAGES, MODEL_KINDS, RunConfig, load_config
from core.console import get_logger, setup_logging, success
from core.errors import ConfigError, PfGanError, PipelineError
from core.losses import ABLATION_VARIANTS

logger = get_logger("cli")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


# ==========================================
#  ARGUMENTS
# ==========================================

def _folds(text: str) -> List[int]:
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated fold indices, got {text!r}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI file with [synthetic] [model] [train] [losses] [run] [paths]")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("--no-color", action="store_true", help="plain log output")


def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", help="dataset manifest (manifest.csv)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int, help="pairs per batch (even)")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--lambda1", type=float, help="GAN weight")
    p.add_argument("--lambda2", type=float, help="perceptual weight")
    p.add_argument("--lambda3", type=float, help="L2 weight")
    p.add_argument("--margin", type=float, help="contrastive margin")
    p.add_argument("--coupling", choices=("contrastive", "euclidean"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--test-folds", type=_folds, help="held-out folds, e.g. 0,1")
    p.add_argument("--encoder", choices=("compact", "resnet18"))
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--zero-skips", action="store_true", default=None,
                   help="decode with zero tensors in place of skip activations")
    p.add_argument("--no-progress", action="store_true", help="hide progress bars")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pfgan",
        description="Coupled conditional GANs for profile/frontal matching (desk scale).",
    )
    parser.add_argument("--version", action="version", version=describe_version())
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth-data", help="render the synthetic paired-domain benchmark")
    _add_common(p)
    p.add_argument("--identities", type=int)
    p.add_argument("--views", type=int, help="views per domain")
    p.add_argument("--size", type=int, help="square image size")
    p.add_argument("--warp", type=float, help="profile warp magnitude in [0, 1]")
    p.add_argument("--jitter", type=float, help="illumination jitter")
    p.add_argument("--folds", type=int, help="number of identity-disjoint folds")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="dataset directory")

    p = sub.add_parser("train", help="train cpgan, cpcnn or adda")
    _add_common(p)
    _add_training(p)
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--stage", choices=ADDA_STAGES, help="adda only")
    p.add_argument("--stage1-checkpoint", help="adda stage-1 checkpoint for --stage 2")
    p.add_argument("--ablation", choices=ABLATION_VARIANTS)
    p.add_argument("--resume", type=Path, metavar="CHECKPOINT", help="continue from a checkpoint")
    p.add_argument("--extra-epochs", type=int, default=None, help="epochs to add when resuming")

    p = sub.add_parser("eval", help="verification and identification on held-out folds")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest")
    p.add_argument("--folds", type=_folds, help="test folds (default: the checkpoint's held-out folds)")
    p.add_argument("--report-out", type=Path, help="report JSON path (CSV/SVG written alongside)")

    p = sub.add_parser("ablate", help="train and compare the three loss variants")
    _add_common(p)
    _add_training(p)
    p.add_argument("--seeds", type=_folds, help="comma-separated seeds")

    p = sub.add_parser("compare", help="train and compare cpgan, cpcnn and adda")
    _add_common(p)
    _add_training(p)
    p.add_argument("--models", type=lambda s: [m for m in s.split(",") if m], help="e.g. cpgan,cpcnn")
    p.add_argument("--seeds", type=_folds, help="comma-separated seeds")

    p = sub.add_parser("kfold", help="k-fold train/test over identity-disjoint fold groups")
    _add_common(p)
    _add_training(p)
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--num-folds", type=int, required=True)

    p = sub.add_parser("frontalize", help="cross-decode images and write a grid")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, help="single PNG (otherwise --manifest and --fold)")
    p.add_argument("--manifest")
    p.add_argument("--fold", type=_folds, help="fold(s) of the manifest to decode")
    p.add_argument("--direction", choices=("p2f", "f2p"), default="p2f")
    p.add_argument("--zero-skips", action="store_true", default=None)
    p.add_argument("--columns", type=int, default=4)
    p.add_argument("--limit", type=int, default=16, help="max images in the grid")
    p.add_argument("--grid-out", type=Path, required=True)
    p.add_argument("--report-out", type=Path, help="identity-proxy JSON (manifest input only)")

    p = sub.add_parser("grad-check", help="finite-difference check of every objective")
    _add_common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    mapping = {
        "manifest": "paths.manifest", "out": "paths.out", "epochs": "train.epochs",
        "batch": "train.batch_size", "lr": "train.learning_rate", "lambda1": "losses.lambda1",
        "lambda2": "losses.lambda2", "lambda3": "losses.lambda3", "margin": "losses.margin_m",
        "coupling": "losses.coupling", "seed": "train.seed", "test_folds": "train.test_folds",
        "encoder": "model.encoder_variant", "steps_per_epoch": "train.steps_per_epoch",
        "zero_skips": "model.zero_skips", "model": "run.model", "stage": "run.stage",
        "stage1_checkpoint": "paths.stage1_checkpoint", "ablation": "run.ablation",
    }
    found = {}
    for attr, dotted in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            found[dotted] = tuple(value) if isinstance(value, list) else value
    if getattr(args, "no_progress", False):
        found["train.progress"] = False
    return found


def _manifest(config: RunConfig):
    from core.datamodel import load_manifest

    if not config.paths.manifest:
        raise ConfigError("a manifest is required (--manifest or [paths] manifest)", field="manifest")
    return load_manifest(Path(config.paths.manifest))


# ==========================================
#  SUBCOMMANDS
# ==========================================

def cmd_synth_data(args: argparse.Namespace, config: RunConfig) -> int:
    from core.datamodel import SyntheticSpec, generate_synthetic

    spec = config.synthetic
    changes = {"num_identities": args.identities, "views_per_domain": args.views,
               "warp_magnitude": args.warp, "illumination_jitter": args.jitter,
               "num_folds": args.folds, "seed": args.seed}
    fields = {k: v for k, v in changes.items() if v is not None}
    if args.size is not None:
        fields["image_size"] = (args.size, args.size)
    spec = SyntheticSpec(**{**spec.__dict__, **fields})
    manifest = generate_synthetic(spec, Path(args.out))
    success(logger, "%d images, %d identities, %d folds -> %s",
            len(manifest.entries), manifest.num_identities, manifest.num_folds, args.out)
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    from core.baselines import load_stage1, train_model
    from core.checkpoint import Checkpoint
    from core.trainer import resume

    if config.run.model == "adda" and config.run.stage == "2" and not args.resume:
        load_stage1(config)
    manifest = _manifest(config)
    if args.resume:
        extra = args.extra_epochs if args.extra_epochs is not None else config.train.epochs
        checkpoint = resume(Checkpoint.load(args.resume), manifest, extra, config=config,
                            out_dir=Path(config.paths.out))
    else:
        checkpoint = train_model(manifest, config)
    success(logger, "%s checkpoint at epoch %d in %s", checkpoint.model, checkpoint.epoch, config.paths.out)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    from core.checkpoint import Checkpoint
    from core.evaluation import evaluate_checkpoint

    checkpoint = Checkpoint.load(args.checkpoint)
    manifest = _manifest(config)
    report = evaluate_checkpoint(checkpoint, manifest, args.folds)
    out = args.report_out or Path(config.paths.out) / "report.json"
    report.write_json(out)
    report.write_csv(out.with_suffix(""))
    try:
        report.write_svg(out.with_suffix(".svg"))
    except ImportError:
        logger.warning("matplotlib unavailable, skipping SVG")
    success(logger, "AUC %.4f  EER %.4f  GAR@0.01 %.4f  rank-1 %.4f -> %s",
            report.auc, report.eer, report.gar_at_far[0.01], report.rank1, out)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, config: RunConfig) -> int:
    from core.evaluation import run_ablation

    run_ablation(_manifest(config), config, seeds=args.seeds)
    return EXIT_OK


def cmd_compare(args: argparse.Namespace, config: RunConfig) -> int:
    from core.evaluation import run_model_comparison

    models = args.models or list(MODEL_KINDS)
    unknown = [m for m in models if m not in MODEL_KINDS]
    if unknown:
        raise ConfigError(f"unknown model(s) {unknown}", field="models")
    run_model_comparison(_manifest(config), config, models=models, seeds=args.seeds)
    return EXIT_OK


def cmd_kfold(args: argparse.Namespace, config: RunConfig) -> int:
    from core.evaluation import kfold_evaluate

    kfold_evaluate(_manifest(config), config, args.num_folds)
    return EXIT_OK


def cmd_frontalize(args: argparse.Namespace, config: RunConfig) -> int:
    from core.checkpoint import Checkpoint
    from core.datamodel import Domain, load_image
    from core.frontalizer import CrossDecoder, as_batch, emit_grid, pair_grid, write_proxy_report

    if args.input is not None and args.report_out:
        raise ConfigError("identity proxies need --manifest and --fold, not --input", field="report_out")
    checkpoint = Checkpoint.load(args.checkpoint)
    decoder = CrossDecoder.from_checkpoint(checkpoint, args.zero_skips)
    cross = decoder.frontalize if args.direction == "p2f" else decoder.profilize
    metadata = {"direction": args.direction, "zero_skips": decoder.zero_skips,
                "checkpoint": str(args.checkpoint), "config": checkpoint.config}

    if args.input is not None:
        size = checkpoint.config["model"]["image_size"]
        channels = checkpoint.config["model"]["channels"]
        pixels = load_image(args.input, (size, size, channels))
        inputs = as_batch(pixels)
    else:
        if not args.fold:
            raise ConfigError("give --input or --manifest with --fold", field="input")
        manifest = _manifest(config)
        source = Domain.PROFILE if args.direction == "p2f" else Domain.FRONTAL
        entries = manifest.select(args.fold, source)[:args.limit]
        if not entries:
            raise ConfigError(f"folds {args.fold} hold no {source.name.lower()} images", field="fold")
        inputs = manifest.tensor(entries)
        if args.report_out:
            write_proxy_report(args.report_out, decoder, manifest, args.fold, checkpoint.config)

    outputs = cross(inputs)
    emit_grid(pair_grid(inputs, outputs), args.columns, args.grid_out, metadata)
    success(logger, "%d image(s) decoded (%s) -> %s", len(inputs), args.direction, args.grid_out)
    return EXIT_OK


def cmd_grad_check(args: argparse.Namespace, config: RunConfig) -> int:
    from core.losses import builtin_gradcheck_suite

    reports = builtin_gradcheck_suite(seed=args.seed, tolerance=args.tolerance)
    for report in reports:
        print(report.summary())
    failed = [r.name for r in reports if not r.passed]
    if failed:
        logger.error("gradient check failed for %s", ", ".join(failed))
        return EXIT_RUNTIME
    success(logger, "all %d gradient checks passed", len(reports))
    return EXIT_OK


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "compare": cmd_compare,
    "kfold": cmd_kfold,
    "frontalize": cmd_frontalize,
    "grad-check": cmd_grad_check,
}


# ==========================================
#  ENTRY POINT
# ==========================================

def parse_and_dispatch(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; 0 success, 1 runtime failure, 2 configuration error"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(logging.DEBUG if args.verbose else logging.INFO,
                  color=False if args.no_color else None)
    try:
        config = load_config(args.config, overrides=_overrides(args))
        return COMMANDS[args.command](args, config)
    except ConfigError as e:
        logger.error("configuration error: %s", e)
        return EXIT_CONFIG
    except PipelineError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_RUNTIME
    except PfGanError as e:
        logger.error("%s", e)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(parse_and_dispatch())


if __name__ == "__main__":
    main()
