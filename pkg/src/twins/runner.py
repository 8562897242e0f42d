"""Sequential execution of multi-phase experiment plans with checkpoint/resume."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentPlan, serialize_plan
from .data import list_split, load_split
from .errors import ConfigError
from .trainer import (
    collate,
    evaluate,
    load_checkpoint,
    make_optimizer,
    make_state,
    make_teacher,
    save_checkpoint,
    scheduled_lr,
    semi_supervised_step,
    set_lr,
    supervised_step,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERRUPTED = 3


@dataclass
class RunResult:
    exit_code: int
    checkpoints: list = field(default_factory=list)
    reports: list = field(default_factory=list)  # (path, MetricReport)
    loss_logs: list = field(default_factory=list)


def batch_rng(seed, phase_index, step):
    """Per-step generator: identical batches and augmentations after a resume."""
    return np.random.default_rng([seed, phase_index, step])


def _check_data(plan, data_root, has_init):
    root = Path(data_root)
    if not root.is_dir():
        raise FileNotFoundError(f"data root not found: {root}")
    splits = {p.split for p in plan.phases}
    for i in range(len(plan.phases)):
        splits.add(plan.phase_config(i).eval_split)
    for split in sorted(splits):
        if not list_split(root, split):
            raise FileNotFoundError(f"split {split!r} under {root} is empty")
    if plan.phases and plan.phases[0].mode == "semi" and not has_init:
        raise ConfigError("a semi phase must be preceded by a supervised phase (no teacher exists)")


def _read_losses(path, upto_step):
    if not path.exists():
        return []
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [r for r in rows if int(r["step"]) <= upto_step]


def _write_losses(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["step", "term", "value"])
        w.writeheader()
        w.writerows(rows)


def run_plan(plan: ExperimentPlan, data_root, out_dir=None, dry_run=False, stop_at_step=None, init_checkpoint=None):
    """Run every phase in order; returns a RunResult.

    ``stop_at_step`` halts (as if interrupted) once the global step counter
    reaches that value, leaving ``last.ckpt`` for a later resume.
    """
    if plan.phases and not (plan.phases[0].mode == "semi" and init_checkpoint):
        plan.validate()
    _check_data(plan, data_root, init_checkpoint is not None)
    out = Path(out_dir or plan.output_dir)
    result = RunResult(EXIT_OK)

    if dry_run:
        for i in range(len(plan.phases)):
            cfg = plan.phase_config(i)
            make_state(cfg)
            sample = load_split(data_root, plan.phases[i].split)[:1]
            if sample and sample[0].gt_segmentation is not None and sample[0].gt_segmentation.max() >= cfg.num_classes:
                raise ConfigError(f"data has classes >= num_classes={cfg.num_classes}")
        log.info("dry run: plan with %d phases validated", len(plan.phases))
        return result

    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.txt").write_text(serialize_plan(plan))
    last = out / "last.ckpt"
    state = None
    if init_checkpoint is not None:
        state, _, _ = load_checkpoint(init_checkpoint, plan.phase_config(0))

    for i, phase in enumerate(plan.phases, start=1):
        cfg = plan.phase_config(i - 1)
        phase_ckpt = out / f"phase{i}.ckpt"
        loss_path = out / f"phase{i}_losses.csv"
        report_path = out / f"phase{i}_report.txt"
        if phase_ckpt.exists() and report_path.exists():
            state, _, _ = load_checkpoint(phase_ckpt, cfg)
            result.checkpoints.append(phase_ckpt)
            result.loss_logs.append(loss_path)
            log.info("phase %d already complete, skipping", i)
            continue

        start = 0
        rows = []
        resumed = False
        if last.exists():
            st, _, extra = load_checkpoint(last, cfg)
            if extra.get("phase") == i:
                state, start, resumed = st, extra["phase_step"], True
                rows = _read_losses(loss_path, start)
                log.info("resuming phase %d at step %d", i, start)
        if not resumed:
            if state is None:
                state = make_state(cfg)
            else:
                state.optimizer = make_optimizer(state.student, cfg)
                if phase.mode == "semi":
                    # the pre-trained model becomes the teacher
                    state.teacher = make_teacher(state.student)
            state.ema_momentum = cfg.ema_momentum

        data = load_split(data_root, phase.split)
        if phase.mode == "semi":
            data = [c.without_correspondence() for c in data]
        for s in range(start, phase.steps):
            if stop_at_step is not None and state.step >= stop_at_step:
                save_checkpoint(state, cfg, last, {"phase": i, "phase_step": s})
                _write_losses(loss_path, rows)
                result.exit_code = EXIT_INTERRUPTED
                return result
            rng = batch_rng(plan.seed, i, s)
            idx = rng.choice(len(data), size=min(cfg.batch_size, len(data)), replace=False)
            batch = collate([data[j] for j in idx])
            set_lr(state, scheduled_lr(cfg, s, phase.steps))
            if phase.mode == "supervised":
                state, report = supervised_step(batch, state, cfg)
            else:
                state, report = semi_supervised_step(batch, state, cfg, rng=rng)
            rows.extend({"step": s + 1, "term": k, "value": repr(v)} for k, v in report.items())
            if (s + 1) % cfg.log_every == 0:
                log.info("phase %d step %d: %s", i, s + 1, ", ".join(f"{k}={v:.4f}" for k, v in report.items()))
            if (s + 1) % cfg.ckpt_every == 0:
                save_checkpoint(state, cfg, last, {"phase": i, "phase_step": s + 1})
                _write_losses(loss_path, rows)

        _write_losses(loss_path, rows)
        save_checkpoint(state, cfg, phase_ckpt, {"phase": i, "phase_step": phase.steps, "complete": True})
        eval_data = load_split(data_root, cfg.eval_split)
        if cfg.eval_limit:
            eval_data = eval_data[: cfg.eval_limit]
        report = evaluate(state.student, eval_data, cfg.num_classes)
        report_path.write_text(report.to_lines())
        result.checkpoints.append(phase_ckpt)
        result.reports.append((report_path, report))
        result.loss_logs.append(loss_path)
        log.info("phase %d done: epe=%.4f d1=%.3f miou=%.2f", i, report.epe, report.d1, report.miou)

    if last.exists():
        last.unlink()
    return result
