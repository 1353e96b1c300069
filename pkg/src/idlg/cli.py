"""Command line entry point.

    idlg extract-label --dataset SPEC --index I --model-seed S
    idlg attack --method idlg --dataset SPEC --index I --seed S --out DIR
    idlg bench --dataset SPEC --methods idlg,dlg --trials T --out DIR

Dataset specs: ``mnist:<images>,<labels>``, ``cifar100:<bin>``, ``dir:<root>``,
``synthetic:<count>,<channels>,<classes>``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .attack import DEFAULT_THRESHOLDS, METHODS, OPTIMIZERS
from .data import load_dataset, parse_dataset_spec
from .harness import (
    BenchConfig,
    arch_for,
    export_image,
    run_bench,
    run_trial,
    write_trajectory_csv,
)
from .leakage import extract_label
from .model import backward, init_model
from .tensor import make_rng


def _methods(text: str) -> tuple[str, ...]:
    methods = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in methods if m not in METHODS]
    if not methods or bad:
        raise argparse.ArgumentTypeError(f"methods must be drawn from {METHODS}, got {text!r}")
    return methods


def _dataset(text: str) -> str:
    try:
        parse_dataset_spec(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def _thresholds(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idlg", description="Label and data leakage from shared gradients.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-label", help="recover the label of one sample from its gradients")
    p.add_argument("--dataset", type=_dataset, required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--model-seed", type=int, default=0)

    p = sub.add_parser("attack", help="run one reconstruction and dump trajectory and snapshots")
    p.add_argument("--method", choices=METHODS, default="idlg")
    p.add_argument("--dataset", type=_dataset, required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--optimizer", choices=OPTIMIZERS, default="lbfgs")
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--snapshot-every", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench", help="label accuracy and fidelity over many trials")
    p.add_argument("--dataset", type=_dataset, required=True)
    p.add_argument("--methods", type=_methods, default=METHODS)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--thresholds", type=_thresholds, default=DEFAULT_THRESHOLDS)
    p.add_argument("--optimizer", choices=OPTIMIZERS, default="lbfgs")
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    return parser


def _extract_label(args) -> int:
    dataset = load_dataset(args.dataset)
    x, c = dataset[args.index]
    model = init_model(arch_for(dataset), make_rng(args.model_seed))
    prediction = extract_label(backward(model, x, c)["fc.w"])
    print(prediction.label)
    return 0


def _attack(args) -> int:
    dataset = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_trial(dataset, args.index, args.method, args.seed, args.iters,
                       optimizer=args.optimizer, learning_rate=args.lr,
                       snapshot_every=args.snapshot_every)
    ext = "pgm" if dataset.channels == 1 else "ppm"
    x, c = dataset[args.index]
    export_image(x, out / f"original.{ext}")
    for it, img in report.snapshots:
        export_image(img, out / f"snapshot_{it:04d}.{ext}")
    write_trajectory_csv(report, out / "trajectory.csv")
    print(f"method={report.method} true_label={c} extracted_label={report.extracted_label} "
          f"final_loss={report.loss_trajectory[-1]:.3e} final_mse={report.final_mse:.3e}")
    return 0


def _bench(args) -> int:
    config = BenchConfig(dataset=args.dataset, methods=args.methods, trials=args.trials,
                         iterations=args.iters, base_seed=args.seed, thresholds=args.thresholds,
                         out_dir=args.out, optimizer=args.optimizer, learning_rate=args.lr,
                         workers=args.workers)
    result = run_bench(config)
    for s in result.summaries.values():
        fid = " ".join(f"{tau:g}:{frac:.3f}" for tau, frac in s.fidelity.items())
        print(f"{s.method} trials={s.trials} label_accuracy={s.label_accuracy:.3f} "
              f"aborted={s.aborted} fidelity[{fid}]")
    return 0


COMMANDS = {"extract-label": _extract_label, "attack": _attack, "bench": _bench}


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, IndexError, RuntimeError) as exc:
        print(f"idlg {args.command}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())
