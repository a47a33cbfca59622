"""Command line entry point: ``cascade-det <gen|train|infer|eval|report|hist|curve>``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace

import numpy as np

from . import cascade
from .assign import InsufficientPositivesError, best_match, histogram_from_ious
from .data import DataError, DatasetConfig, generate_dataset, load_config, load_dataset, save_dataset, split_dataset
from .evaluate import coco_ap, gt_index, localization_curve, stage_report
from .model import DivergenceError, FeatureConfig, featurize_boxes, regress_boxes
from .persist import load_detections, load_model, save_detections, save_model

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
THRESHOLD_COLUMNS = (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cascade-det", description="Cascaded detection head over synthetic proposals.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, heldout=True):
        sp.add_argument("--seed", type=int, default=None, help="seed for all randomness (default 42)")
        if heldout:
            sp.add_argument("--heldout", type=int, default=100, help="number of trailing scenes held out for testing")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config", help="dataset config JSON")
    g.add_argument("--out", required=True)
    common(g, heldout=False)

    t = sub.add_parser("train", help="train a detector on the training split")
    t.add_argument("--data", required=True)
    t.add_argument("--stages", type=int, default=3)
    t.add_argument("--ious", type=_floats, default=[0.5, 0.6, 0.7, 0.75])
    t.add_argument("--no-iou-up", action="store_true", help="label every stage at the first threshold")
    t.add_argument("--no-stat", action="store_true", help="identity delta normalization")
    t.add_argument("--mode", choices=["cascade", "iterative", "integral", "baseline"], default="cascade")
    t.add_argument("--iterations", type=int, default=3, help="regressor applications in iterative mode")
    t.add_argument("--out", required=True)
    common(t)

    i = sub.add_parser("infer", help="detect on the held-out split")
    i.add_argument("--model", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--ensemble", action="store_true")
    i.add_argument("--add-gt", action="store_true", help="append ground truth boxes to the proposals")
    i.add_argument("--out", required=True)
    common(i)

    e = sub.add_parser("eval", help="COCO-style AP of a detection file")
    e.add_argument("--dets", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    common(e)

    r = sub.add_parser("report", help="per-stage AP table")
    r.add_argument("--model", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    common(r)

    h = sub.add_parser("hist", help="IoU histograms of the training distribution per stage")
    h.add_argument("--data", required=True)
    h.add_argument("--model", help="replay this model to histogram later stages too")
    h.add_argument("--bin-width", type=float, default=0.05)
    h.add_argument("--fractions-out", help="also write percent of boxes at or above each stage threshold")
    h.add_argument("--out", required=True)
    common(h)

    c = sub.add_parser("curve", help="regressor localization curve")
    c.add_argument("--model", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--stage", type=int, default=1)
    c.add_argument("--bin-width", type=float, default=0.05)
    c.add_argument("--out", required=True)
    common(c)
    return p


def _seed(args) -> int:
    return 42 if args.seed is None else args.seed


def _split(args):
    return split_dataset(load_dataset(args.data), args.heldout)


def cmd_gen(args):
    cfg = load_config(args.config) if args.config else DatasetConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    save_dataset(generate_dataset(cfg), args.out)


def cmd_train(args):
    if args.stages < 1:
        raise UsageError("--stages must be >= 1")
    if args.stages > len(args.ious):
        raise UsageError(f"--stages {args.stages} needs at least that many --ious values")
    ious = args.ious[: args.stages]
    seed = _seed(args)
    fc = FeatureConfig(seed=seed)
    tc = cascade.TrainConfig(seed=seed, iou_up=not args.no_iou_up, use_stats=not args.no_stat)
    train, _ = _split(args)
    if args.mode == "cascade":
        model = cascade.train_cascade(train, ious, fc, tc)
    elif args.mode == "baseline":
        model = cascade.train_baseline(train, ious[0], fc, tc)
    elif args.mode == "iterative":
        model = cascade.train_iterative(train, ious[0], args.iterations, fc, tc)
    else:
        model = cascade.train_integral(train, ious, fc, tc)
    save_model(model, args.out)


def cmd_infer(args):
    model = load_model(args.model)
    _, test = _split(args)
    save_detections(cascade.detect(model, test, ensemble=args.ensemble, add_gt=args.add_gt), args.out)


def cmd_eval(args):
    _, test = _split(args)
    report = coco_ap(load_detections(args.dets), gt_index(test))
    _write_csv(args.out, ["threshold", "ap"], report.csv_rows())


def cmd_report(args):
    model = load_model(args.model)
    _, test = _split(args)
    rows = []
    for name, rep in stage_report(model, test):
        rows.append([name, _fmt(rep.mean_ap)] + [_fmt(rep.ap(t)) for t in THRESHOLD_COLUMNS])
    _write_csv(args.out, ["row", "ap"] + [f"ap{int(round(t * 100))}" for t in THRESHOLD_COLUMNS], rows)


def cmd_hist(args):
    train, _ = _split(args)
    if args.model:
        dists = cascade.stage_distributions(load_model(args.model), train)
    else:
        ious = np.concatenate([best_match(s.proposals, s.gt_boxes)[1] for s in train]) if train else np.zeros(0)
        dists = [cascade.StageDistribution(ious, 0.5)]
    rows, fractions = [], []
    for t, dist in enumerate(dists, 1):
        hist = histogram_from_ious(dist.ious, args.bin_width, [dist.threshold])
        rows += [[t, _fmt(lo), _fmt(hi), n] for lo, hi, n in hist.rows()]
        fractions.append([t, _fmt(dist.threshold), _fmt(hist.fractions[dist.threshold]), dist.n_positive])
    _write_csv(args.out, ["stage", "bin_low", "bin_high", "count"], rows)
    if args.fractions_out:
        _write_csv(args.fractions_out, ["stage", "threshold", "percent_at_or_above", "count_at_or_above"], fractions)


def cmd_curve(args):
    model = load_model(args.model)
    if not 1 <= args.stage <= model.n_stages:
        raise UsageError(f"--stage must lie in [1, {model.n_stages}]")
    _, test = _split(args)
    scenes = test
    if model.mode == "cascade":
        for stage in model.stages[: args.stage - 1]:
            scenes = [
                s.with_proposals(regress_boxes(stage, s.proposals, featurize_boxes(s.proposals, s, model.feature_config), s.width, s.height))
                for s in scenes
            ]
    rows = localization_curve(model.stages[args.stage - 1], scenes, model.feature_config, args.bin_width)
    _write_csv(
        args.out,
        ["bin_low", "bin_high", "mean_input_iou", "mean_output_iou", "count"],
        [[_fmt(lo), _fmt(hi), _fmt(a), _fmt(b), n] for lo, hi, a, b, n in rows],
    )


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "report": cmd_report,
    "hist": cmd_hist,
    "curve": cmd_curve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cascade-det: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, InsufficientPositivesError, DivergenceError, OSError, ValueError) as exc:
        print(f"cascade-det: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
