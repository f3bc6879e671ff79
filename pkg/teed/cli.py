"""
Command line entry point: `python -m teed {train,predict,eval,curate,inspect} ...`

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
import argparse
import json
import os
from dataclasses import replace
from typing import List, NamedTuple, Optional

from .benchmark import evaluate_directories
from .checkpoint import load_checkpoint, read_manifest
from .data import curate_directory
from .trainer import predict, train
from .utils.config import ModelConfig, RunConfig
from .utils.errors import ConfigError, ContractError, DataError, NonFiniteError
from .utils.layer_table import layer_frame
from .utils.utils import MATCH_TOLERANCE, MAX_CURATION_SIDE

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class CommandResult(NamedTuple):
    exit_code: int
    summary: str


def _coerce_system_exit_code(exc: SystemExit) -> int:
    # argparse exits 0 for --help and 2 for bad usage; bad usage is exit 1 here
    return EXIT_OK if exc.code in (None, 0) else EXIT_USAGE


def cmd_train(args) -> CommandResult:
    if not os.path.isfile(args.config):
        raise ConfigError(f"Run configuration not found: {args.config}")
    config = RunConfig.from_file(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    result = train(config, resume=args.resume, deterministic=args.deterministic, quiet=args.quiet)
    final = result.history["dloss"].iloc[-1] if len(result.history) else float("nan")
    last = result.checkpoints[-1] if result.checkpoints else "no new checkpoint"
    return CommandResult(EXIT_OK, f"Trained {result.state.step} steps, final dloss {final:.4f}, {last}")


def cmd_predict(args) -> CommandResult:
    written = predict(args.ckpt, args.input, args.out, teedup=args.teedup, all_maps=args.all_maps, quiet=args.quiet)
    return CommandResult(EXIT_OK, f"Wrote {len(written)} edge maps to {args.out}")


def cmd_eval(args) -> CommandResult:
    if args.tol <= 0:
        raise ConfigError(f"--tol must be > 0, got {args.tol}")
    report = evaluate_directories(args.pred, args.gt, tol=args.tol, quiet=args.quiet)
    report.write(args.out)
    print(json.dumps(report.summary(), indent=2))
    return CommandResult(EXIT_OK, f"ODS {report.ods:.3f} OIS {report.ois:.3f} over {report.n_images} images, report {args.out}")


def cmd_curate(args) -> CommandResult:
    if args.k < 1:
        raise ConfigError(f"--k must be >= 1, got {args.k}")
    selected = curate_directory(args.images, args.k, max_side=args.max_side, quiet=args.quiet)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    selected.to_csv(args.out, index=False)
    return CommandResult(EXIT_OK, f"Selected {len(selected)} images into {args.out}")


def cmd_inspect(args) -> CommandResult:
    if args.ckpt:
        manifest = read_manifest(args.ckpt)
        params = load_checkpoint(args.ckpt)
        config, total = params.config, params.count()
        epoch = manifest["meta"].get("epoch")
        print(f"Checkpoint {args.ckpt}: format {manifest['format']}, "
              + (f"saved after epoch {epoch + 1}" if epoch is not None else "no training metadata"))
    else:
        config = ModelConfig()
        total = None
    table = layer_frame(config)
    total = int(table["params"].sum()) if total is None else total
    print(table.to_string(index=False))
    print(f"Total parameters: {total}")
    return CommandResult(EXIT_OK, f"{len(table)} layers, {total} parameters")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="teed", description="Train, run and score the TEED edge detector")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train from a TOML/JSON run configuration")
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--deterministic", action="store_true", help="single worker thread, bit-reproducible")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--resume", default=None, help="training checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="Write edge maps of a folder of images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="folder of images")
    p.add_argument("--out", required=True, help="output folder")
    p.add_argument("--teedup", action="store_true", help="run at 1.5x input scale")
    p.add_argument("--all-maps", action="store_true", help="write the three upsampler maps, the fused map and their mean")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="Score predicted edge maps against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="summary JSON; per-image and curve CSVs are written next to it")
    p.add_argument("--tol", type=float, default=MATCH_TOLERANCE, help="matching radius as a fraction of the image diagonal")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("curate", help="Pick images spread over their luminance IQR")
    p.add_argument("--images", required=True)
    p.add_argument("--k", type=int, default=30)
    p.add_argument("--max-side", type=int, default=MAX_CURATION_SIDE)
    p.add_argument("--out", required=True, help="CSV with columns id,iqr,rank")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("inspect", help="Print the layer table and parameter count")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--ckpt", default=None)
    group.add_argument("--arch", action="store_true", help="default architecture, no checkpoint needed")
    p.set_defaults(func=cmd_inspect)

    for name, p in sub.choices.items():
        p.add_argument("--quiet", action="store_true", help="no progress bars")
    return parser


def run(argv: Optional[List[str]] = None) -> CommandResult:
    """Parse argv and run one command, mapping failures to exit codes"""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return CommandResult(_coerce_system_exit_code(exc), "")
    try:
        return args.func(args)
    except ContractError as e:
        return CommandResult(EXIT_USAGE, f"Usage error: {e}")
    except (DataError, FileNotFoundError) as e:
        return CommandResult(EXIT_DATA, f"Data error: {e}")
    except NonFiniteError as e:
        return CommandResult(EXIT_NUMERIC, f"Numeric failure: {e}")


def main(argv: Optional[List[str]] = None) -> int:
    result = run(argv)
    if result.summary:
        print(result.summary)
    return result.exit_code
