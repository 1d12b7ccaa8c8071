"""
Command-line interface for textspot.

Provides the train, evaluate, infer, visualize and gen-data commands.
Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric fault.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

from . import __version__
from .config import config_manager, parse_overrides
from .dataset import write_synthetic_dataset
from .engine import evaluate, infer, train
from .errors import EXIT_OK, EXIT_USAGE, TextSpotError, exit_code_for
from .models import MetricsReport, RunConfig
from .results import load_predictions, save_predictions
from .visualize import visualize

console = Console(stderr=True)


class UsageArgumentParser(argparse.ArgumentParser):
    """Argument errors exit with the usage code."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def setup_logging(verbose: bool = False) -> None:
    logger = logging.getLogger("textspot")
    logger.handlers.clear()
    logger.addHandler(RichHandler(console=console, show_path=False, rich_tracebacks=verbose))
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.propagate = False


def resolve_config(args) -> RunConfig:
    """Profile or config file, then ``--set`` overrides, then the per-run flags."""
    overrides = parse_overrides(args.set or [])
    if getattr(args, "polygon_nms", False):
        overrides["eval.polygon_nms"] = True
    if args.config:
        for key, value in (("seed", args.seed), ("device", args.device), ("output_dir", getattr(args, "out", None))):
            if value is not None:
                overrides[key] = value
        return config_manager.load_from_file(args.config, overrides)
    return config_manager.create_config(
        args.profile, overrides, seed=args.seed, device=args.device, output_dir=getattr(args, "out", None)
    )


def print_report(report: MetricsReport) -> None:
    table = Table(title="Metrics", show_header=True, header_style="bold magenta")
    table.add_column("Metric")
    table.add_column("Value", justify="right")
    table.add_row("Detection P", f"{report.detection.P:.4f}")
    table.add_row("Detection R", f"{report.detection.R:.4f}")
    table.add_row("Detection H", f"[bold]{report.detection.H:.4f}[/bold]")
    table.add_row("E2E H (None)", f"{report.e2e_none:.4f}")
    table.add_row("E2E H (Full)", "n/a" if report.e2e_full is None else f"{report.e2e_full:.4f}")
    table.add_row("1-NED", f"{report.one_minus_ned:.4f}")
    table.add_row("Word accuracy", f"{report.word_accuracy:.4f}")
    table.add_row("Images / GT / Pred", f"{report.num_images} / {report.num_gt} / {report.num_pred}")
    Console().print(table)


def train_cmd(args) -> int:
    config = resolve_config(args)
    result = train(config, progress=not args.no_progress)
    Console().print(Panel(
        f"[bold]Run directory:[/bold] {result.run_dir}\n"
        f"[bold]Checkpoint:[/bold] {result.checkpoint}\n"
        f"[bold]Iterations:[/bold] {result.iterations}",
        title="textspot train",
    ))
    if result.report is not None:
        print_report(result.report)
    return EXIT_OK


def evaluate_cmd(args) -> int:
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent.parent / "eval" / "metrics.json"
    report = evaluate(
        args.checkpoint,
        dataset_path=args.dataset,
        device=args.device or "cpu",
        score_threshold=args.score_threshold,
        use_polygon_nms=True if args.polygon_nms else None,
        lexicon_path=args.lexicon,
        out_path=out,
        seed=args.seed,
    )
    print_report(report)
    console.print(f"Metrics written to {out}")
    return EXIT_OK


def infer_cmd(args) -> int:
    predictions = infer(
        args.checkpoint,
        args.images,
        device=args.device or "cpu",
        with_attention=args.with_attention,
        score_threshold=args.score_threshold,
        use_polygon_nms=True if args.polygon_nms else None,
        seed=args.seed,
    )
    path = save_predictions(predictions, args.out)
    failed = sum(1 for p in predictions.images if p.error)
    console.print(f"Predictions for {len(predictions.images)} image(s) written to {path}"
                  + (f" ({failed} unreadable)" if failed else ""))
    return EXIT_OK


def visualize_cmd(args) -> int:
    predictions = load_predictions(args.predictions)
    written = visualize(predictions, args.out, image_root=args.images, attention=args.attention,
                        seed=args.seed or 0)
    console.print(f"Wrote {len(written)} overlay(s) to {args.out}")
    return EXIT_OK


def gen_data_cmd(args) -> int:
    config = resolve_config(args)
    path = write_synthetic_dataset(args.data_out, args.num_images, config.data.synth, seed=config.seed)
    console.print(f"Wrote {args.num_images} synthetic image(s) and {path}")
    return EXIT_OK


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', help='JSON or TOML configuration file')
    parser.add_argument('--profile', default='toy', help='Built-in profile: toy or full (default: toy)')
    parser.add_argument('--set', action='append', metavar='KEY=VALUE',
                        help='Dotted config override, e.g. detector.num_proposals=10 (repeatable)')
    parser.add_argument('--seed', type=int, help='Random seed')
    parser.add_argument('--device', help='Torch device, e.g. cpu, cuda, auto')


def create_parser() -> argparse.ArgumentParser:
    """Create the argument parser."""

    parser = UsageArgumentParser(
        prog="textspot",
        description="textspot - end-to-end scene text spotting at desk scale",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  textspot gen-data --out data/toy --num-images 20
  textspot train --profile toy --set optimizer.max_iter=2000
  textspot evaluate runs/<run>/checkpoints/last.pt --dataset data/toy/dataset.json
  textspot infer runs/<run>/checkpoints/last.pt img1.png img2.png --out preds.json --with-attention
  textspot visualize preds.json --out overlays --attention
        """
    )

    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('-v', '--verbose', action='store_true', help='Debug logging')

    subparsers = parser.add_subparsers(dest='command', help='Available commands', parser_class=UsageArgumentParser)

    train_parser = subparsers.add_parser('train', help='Train a model and evaluate it on the eval split')
    _add_config_args(train_parser)
    train_parser.add_argument('--out', help='Root directory for run directories')
    train_parser.add_argument('--polygon-nms', action='store_true', help='Polygon NMS in the final evaluation')
    train_parser.add_argument('--no-progress', action='store_true', help='Hide the progress bar')
    train_parser.set_defaults(func=train_cmd)

    eval_parser = subparsers.add_parser('evaluate', help='Score a checkpoint on a dataset')
    eval_parser.add_argument('checkpoint', help='Checkpoint file')
    eval_parser.add_argument('--dataset', help='Dataset JSON (default: the checkpoint config eval split)')
    eval_parser.add_argument('--out', help='metrics.json path (default: <run>/eval/metrics.json)')
    eval_parser.add_argument('--score-threshold', type=float, help='Override eval.score_threshold')
    eval_parser.add_argument('--lexicon', help='Word list for the Full lexicon mode')
    eval_parser.add_argument('--polygon-nms', action='store_true', help='Suppress overlapping polygons')
    eval_parser.add_argument('--device', help='Torch device')
    eval_parser.add_argument('--seed', type=int, help='Random seed (default: the checkpoint config seed)')
    eval_parser.set_defaults(func=evaluate_cmd)

    infer_parser = subparsers.add_parser('infer', help='Spot text in images')
    infer_parser.add_argument('checkpoint', help='Checkpoint file')
    infer_parser.add_argument('images', nargs='*', help='Image files')
    infer_parser.add_argument('--out', default='predictions.json', help='Predictions JSON path')
    infer_parser.add_argument('--with-attention', action='store_true', help='Store decoder attention maps')
    infer_parser.add_argument('--score-threshold', type=float, help='Override eval.score_threshold')
    infer_parser.add_argument('--polygon-nms', action='store_true', help='Suppress overlapping polygons')
    infer_parser.add_argument('--device', help='Torch device')
    infer_parser.add_argument('--seed', type=int, help='Random seed (default: the checkpoint config seed)')
    infer_parser.set_defaults(func=infer_cmd)

    vis_parser = subparsers.add_parser('visualize', help='Draw predictions over their images')
    vis_parser.add_argument('predictions', help='Predictions JSON')
    vis_parser.add_argument('--images', help='Root for relative image paths')
    vis_parser.add_argument('--out', required=True, help='Output directory')
    vis_parser.add_argument('--attention', action='store_true', help='Also write attention panels')
    vis_parser.add_argument('--seed', type=int, help='Color seed')
    vis_parser.set_defaults(func=visualize_cmd)

    gen_parser = subparsers.add_parser('gen-data', help='Write a synthetic dataset')
    _add_config_args(gen_parser)
    gen_parser.add_argument('--out', dest='data_out', required=True, help='Output directory')
    gen_parser.add_argument('--num-images', type=int, default=20, help='Number of images (default: 20)')
    gen_parser.set_defaults(func=gen_data_cmd)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point."""
    parser = create_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)

    if not hasattr(args, 'func'):
        parser.print_help()
        return EXIT_OK

    try:
        return args.func(args)
    except KeyboardInterrupt:
        console.print("[red]Interrupted by user[/red]")
        return EXIT_USAGE
    except TextSpotError as e:
        code = exit_code_for(e)
        console.print(f"[bold red]{type(e).__name__}:[/bold red] {e}")
        return code
    except Exception as e:
        console.print(f"[bold red]Unexpected error:[/bold red] {e}")
        return exit_code_for(e)


if __name__ == '__main__':
    sys.exit(main())
