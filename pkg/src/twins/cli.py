"""Command line entry point: ``twins {gen,train,eval,pseudo}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentPlan, Phase, TwinsConfig, load_config
from .data import SceneSpec, generate_split, list_split, load_split, parse_scene_spec, write_field
from .errors import ConfigError, TwinsError
from .metrics import corr_metrics
from .runner import EXIT_INTERRUPTED, run_plan
from .trainer import check_alpha, evaluate, load_checkpoint, make_pseudo_labels, predict

log = logging.getLogger("twins")

EXIT_ERROR = 1
EXIT_USAGE = 2


def _cmd_gen(args):
    spec = parse_scene_spec(Path(args.spec).read_text()) if args.spec else SceneSpec()
    paths = generate_split(spec, args.count, args.out, args.split, args.mode, start=args.start)
    print(f"wrote {len(paths)} scenes to {Path(args.out) / args.split}")
    return 0


def _build_plan(args):
    plan = load_config(args.config) if args.config else ExperimentPlan([], config=TwinsConfig())
    if not plan.phases:
        if args.mode is None:
            raise ConfigError("config defines no phases; pass --mode")
        plan.phases = [Phase(args.mode, args.split, args.steps if args.steps is not None else 100)]
    else:
        if args.mode is not None:
            log.warning("--mode ignored: the config defines %d phases", len(plan.phases))
        if args.steps is not None:
            for p in plan.phases:
                p.steps = args.steps
    return plan


def _cmd_train(args):
    plan = _build_plan(args)
    result = run_plan(
        plan, args.data, out_dir=args.out, dry_run=args.dry_run, stop_at_step=args.stop_at, init_checkpoint=args.init
    )
    if args.dry_run:
        print("dry run ok")
    for path, report in result.reports:
        print(f"{path}: epe={report.epe:.4f} d1={report.d1:.3f} miou={report.miou:.2f}")
    return result.exit_code


def _cmd_eval(args):
    state, cfg, _ = load_checkpoint(args.ckpt)
    data = load_split(args.data, args.split)
    if args.limit:
        data = data[: args.limit]
    model = state.teacher if args.model == "teacher" else state.student
    sys.stdout.write(evaluate(model, data, cfg.num_classes).to_lines())
    return 0


def _cmd_pseudo(args):
    check_alpha(args.alpha)
    state, _, _ = load_checkpoint(args.ckpt)
    dirs = list_split(args.data, args.split)
    data = load_split(args.data, args.split)
    fields, sigmas, _ = predict(state.teacher, data)
    out = Path(args.out or Path(args.data) / f"{args.split}_pseudo_a{args.alpha:g}")
    lines, coverages = [], []
    sel_pred, sel_gt, sel_valid = [], [], []
    for d, c, f, s in zip(dirs, data, fields, sigmas):
        pl = make_pseudo_labels(torch.from_numpy(f).permute(2, 0, 1), torch.from_numpy(s), args.alpha)
        target = out / d.name
        target.mkdir(parents=True, exist_ok=True)
        write_field(target / "corr.bin", f)
        valid = pl.validity.numpy().astype(np.float32)
        write_field(target / "valid.bin", valid)
        coverages.append(pl.coverage)
        line = f"{d.name}: coverage={pl.coverage:.6f} tau={pl.threshold_used:.6f}"
        if c.gt_correspondence is not None:
            gt_valid = c.valid if c.valid is not None else np.ones(c.shape, np.float32)
            sel_pred.append(f)
            sel_gt.append(c.gt_correspondence)
            sel_valid.append(gt_valid * valid)
        lines.append(line)
    lines.append(f"mean_coverage={float(np.mean(coverages)):.6f}")
    if sel_gt:
        pred, gt = np.stack(sel_pred), np.stack(sel_gt)
        all_valid = np.stack([c.valid if c.valid is not None else np.ones(c.shape) for c in data])
        epe_all, _ = corr_metrics(pred, gt, all_valid)
        epe_sel, _ = corr_metrics(pred, gt, np.stack(sel_valid))
        lines += [f"epe_all={epe_all:.6f}", f"epe_selected={epe_sel:.6f}"]
    report = "\n".join(lines) + "\n"
    (out / "coverage.txt").write_text(report)
    sys.stdout.write(report)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="twins", description="Joint scene parsing and dense correspondence toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="synthesize a dataset split")
    g.add_argument("--spec", help="scene spec file (key = value lines)")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True, help="dataset root")
    g.add_argument("--split", default="train")
    g.add_argument("--mode", choices=("stereo", "flow"), default="stereo")
    g.add_argument("--start", type=int, default=0, help="offset added to the texture seed and scene id")
    g.set_defaults(func=_cmd_gen)

    t = sub.add_parser("train", help="run a training plan")
    t.add_argument("--config", help="config file; may define phase1.*, phase2.* ...")
    t.add_argument("--mode", choices=("supervised", "semi"), help="single-phase mode when the config has no phases")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--split", default="train", help="training split for a single-phase run")
    t.add_argument("--steps", type=int, help="override the step count of every phase")
    t.add_argument("--init", help="checkpoint to start from (required for a semi-only run)")
    t.add_argument("--dry-run", action="store_true", help="validate config, data and model; train nothing")
    t.add_argument("--stop-at", type=int, help=argparse.SUPPRESS)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint; prints key=value lines")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--model", choices=("student", "teacher"), default="student")
    e.add_argument("--limit", type=int, default=0)
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("pseudo", help="write teacher pseudo-labels and a coverage report")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--alpha", type=float, required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--out", help="output root (default <data>/<split>_pseudo_a<alpha>)")
    s.set_defaults(func=_cmd_pseudo)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (TwinsError, FileNotFoundError) as e:
        print(f"twins: error: {e}", file=sys.stderr)
        return EXIT_USAGE if isinstance(e, ConfigError) else EXIT_ERROR
    except KeyboardInterrupt:
        return EXIT_INTERRUPTED


if __name__ == "__main__":
    sys.exit(main())
