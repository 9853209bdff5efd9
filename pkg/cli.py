import argparse
import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import List, Optional

import numpy as np

from classifier_attention.config import RunConfig, Settings, load_run_config
from classifier_attention.data import SynthConfig, load_sample, load_split, synth_generate
from classifier_attention.evaluation import (
    ablate_losses,
    ablate_num_classifiers,
    ablate_scales,
    evaluate,
    export_heatmap,
    write_report,
    write_table,
)
from classifier_attention.exceptions import ClassifierAttentionError, ConfigError
from classifier_attention.formats.checkpoint import read_checkpoint, write_checkpoint
from classifier_attention.formats.manifest import SampleRecord
from classifier_attention.multiscale import predict, train_pipeline

LOG_FORMAT = '%(asctime)s %(levelname)s: %(message)s [in %(pathname)s:%(lineno)d]'


# ANSI color codes for better CLI output
class Colors:
    HEADER = '\033[95m'
    GREEN = '\033[92m'
    ENDC = '\033[0m'


def paint(text: str, color: str) -> str:
    if not sys.stdout.isatty():
        return text
    return f"{color}{text}{Colors.ENDC}"


def setup_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else getattr(logging, Settings.LOG_LEVEL, logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT, datefmt='%Y-%m-%d %H:%M:%S')
    if Settings.LOG_FILE:
        file_handler = RotatingFileHandler(Settings.LOG_FILE, maxBytes=10240, backupCount=10)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        file_handler.setLevel(level)
        logging.getLogger().addHandler(file_handler)


def echo_config(command: str, config: RunConfig) -> None:
    """Every run starts by printing its resolved configuration and seed."""
    print(paint(f"# classifier-attention {command}", Colors.HEADER))
    print(f"# seed = {config.seed}")
    print(config.to_text(), end="")


def _displayable(image: np.ndarray) -> np.ndarray:
    # Feature maps are shown as their normalized channel mean.
    if image.shape[0] in (1, 3):
        return image
    mean = image.mean(axis=0, keepdims=True)
    span = float(mean.max() - mean.min())
    return (mean - mean.min()) / span if span > 1e-12 else np.zeros_like(mean)


def cmd_synth(args) -> None:
    config = load_run_config(args.config)
    echo_config("synth", config)
    dataset = synth_generate(SynthConfig.from_run_config(config), args.out)
    print(paint(f"wrote {len(dataset.train)} train and {len(dataset.test)} test images to {dataset.root}", Colors.GREEN))


def cmd_train(args) -> None:
    config = load_run_config(args.config)
    echo_config("train", config)
    samples = load_split(args.data, "train", config.image_size)
    trained = train_pipeline(samples, config, config.seed)
    write_checkpoint(args.out, trained.model)
    write_table(
        f"{args.out}.crops.csv",
        ["sample", "scale", "row0", "col0", "row1", "col1", "height", "width", "fell_back"],
        [
            [r.sample_index, r.scale, *r.source, *r.source_shape, int(r.fell_back)]
            for r in trained.crop_log
        ],
    )
    print(paint(f"saved {len(trained.model.scales)}-scale model to {args.out}", Colors.GREEN))


def cmd_eval(args) -> None:
    config = load_run_config(args.config)
    echo_config("eval", config)
    model = read_checkpoint(args.model)
    samples = load_split(args.data, "test", config.image_size)
    report = evaluate(model, samples, config)
    if args.out:
        write_report(report, args.out)
    header = ["metric"] + [f"scale_{i + 1}" for i in range(report.scales)] + ["ms"]
    print(",".join(header))
    for name, values in report.rows().items():
        print(",".join([name] + [f"{v:.4f}" for v in values]))
    print(f"attention_iou = {report.mean_iou:.4f} (random baseline {report.baseline_iou:.4f})")
    print(f"runtime = {report.runtime:.1f}s")


def cmd_attend(args) -> None:
    config = load_run_config(args.config)
    echo_config("attend", config)
    model = read_checkpoint(args.model)
    path = Path(args.image)
    sample = load_sample(path.parent, SampleRecord(path.name, 0, 0, 0, 0, 0), config.image_size)
    result = predict(model, sample.image, config)
    for s, out in enumerate(result.per_scale, start=1):
        for written in export_heatmap(_displayable(out.image), out.artifacts.map, f"{args.out}_scale{s}"):
            print(written)
    print(paint(f"predicted label {result.label}", Colors.GREEN))


def cmd_ablate(args) -> None:
    config = load_run_config(args.config)
    echo_config(f"ablate {args.which}", config)
    train = load_split(args.data, "train", config.image_size)
    test = load_split(args.data, "test", config.image_size)
    if args.which == "losses":
        header, rows = ["loss_terms", "accuracy"], ablate_losses(train, test, config)
    elif args.which == "nclf":
        header, rows = ["n_classifiers", "accuracy"], ablate_num_classifiers(train, test, config)
    else:
        model = train_pipeline(train, config, config.seed).model
        header, rows = ["scales", "accuracy"], ablate_scales(model, test, config)
    if args.out:
        write_table(args.out, header, rows)
    print(",".join(header))
    for key, acc in rows:
        print(f"{key},{acc:.4f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="classifier-attention",
        description=(
            "Attention from classifier activations for fine-grained recognition. "
            "Defaults are sized for the synthetic benchmark (n_classifiers=4, epochs=15, "
            "lr=1e-2, image_size=64); put 'preset = full' in the config for the full-size "
            "values (n_classifiers=16, epochs=40, lr=1e-4, image_size=448)."
        ),
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable debug logging and tracebacks")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str, handler) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.set_defaults(handler=handler)
        return p

    p = add("synth", "Generate the synthetic fine-grained dataset", cmd_synth)
    p.add_argument("--config", help="key=value run config (defaults when omitted)")
    p.add_argument("--out", required=True, help="Dataset root to create")

    p = add("train", "Train the multi-scale model on <data>/train.csv", cmd_train)
    p.add_argument("--config", help="key=value run config (defaults when omitted)")
    p.add_argument("--data", required=True, help="Dataset root")
    p.add_argument("--out", required=True, help="Checkpoint path; crops go to <out>.crops.csv")

    p = add("eval", "Evaluate a checkpoint on <data>/test.csv", cmd_eval)
    p.add_argument("--config", help="key=value run config (defaults when omitted)")
    p.add_argument("--model", required=True, help="Checkpoint path")
    p.add_argument("--data", required=True, help="Dataset root")
    p.add_argument("--out", help="Directory for report.csv and summary.txt")

    p = add("attend", "Export per-scale attention heatmaps for one image", cmd_attend)
    p.add_argument("--config", help="key=value run config (defaults when omitted)")
    p.add_argument("--model", required=True, help="Checkpoint path")
    p.add_argument("--image", required=True, help="P5/P6 image or .fmap feature file")
    p.add_argument("--out", required=True, help="Output prefix; writes <out>_scale<s>_{raw.pgm,overlay.ppm}")

    p = add("ablate", "Run an ablation study", cmd_ablate)
    p.add_argument("--config", help="key=value run config (defaults when omitted)")
    p.add_argument("--data", required=True, help="Dataset root")
    p.add_argument("--which", required=True, choices=["losses", "nclf", "scales"], help="Which study to run")
    p.add_argument("--out", help="CSV file for the result table")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)

    try:
        args.handler(args)
        return 0
    except KeyboardInterrupt:
        print("\nOperation cancelled by user", file=sys.stderr)
        return 1
    except ClassifierAttentionError as e:
        if args.verbose:
            import traceback
            traceback.print_exc()
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return 2 if isinstance(e, ConfigError) else 1
    except OSError as e:
        if args.verbose:
            import traceback
            traceback.print_exc()
        print(f"error[io]: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
