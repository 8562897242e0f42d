"""Supervised pre-training and teacher-student semi-supervised training."""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import augment
from .config import TwinsConfig
from .decoder import seg_loss
from .errors import ConfigError, ContractError, FormatError, NumericalError
from .metrics import MetricReport, corr_metrics, seg_metrics
from .model import TwinsNet
from .uncertainty import kl_alignment, l1_residual, laplace_nll

CHECKPOINT_VERSION = 1


# --- pseudo-label selection ----------------------------------------------------


@dataclass
class ThresholdParams:
    mu: float
    b: float
    alpha: float

    @property
    def tau(self):
        return self.mu + self.b * math.log(2 * (1 - self.alpha))


def check_alpha(alpha):
    if not 0.5 < alpha < 1:
        raise ConfigError(f"alpha={alpha} outside (0.5,1); the threshold would not fall below the median")


def threshold_params(sigma, alpha):
    check_alpha(alpha)
    s = torch.as_tensor(sigma).detach().flatten().double()
    if s.numel() == 0:
        raise ContractError("empty uncertainty map")
    srt = s.sort().values
    n = srt.numel()
    mu = srt[n // 2] if n % 2 else 0.5 * (srt[n // 2 - 1] + srt[n // 2])
    b = (s - mu).abs().mean()
    return ThresholdParams(float(mu), float(b), alpha)


def compute_threshold(sigma, alpha):
    """Laplace quantile threshold: median + MAD * log(2 (1 - alpha))."""
    return threshold_params(sigma, alpha).tau


@dataclass
class PseudoLabelSet:
    correspondences: torch.Tensor  # (2, H, W)
    validity: torch.Tensor  # (H, W) float {0,1}
    threshold_used: float
    coverage: float


def make_pseudo_labels(final_field, sigma, alpha):
    """Per-image selection: a pixel becomes a pseudo label iff sigma < tau."""
    tau = compute_threshold(sigma, alpha)
    validity = (sigma < tau).to(final_field.dtype)
    return PseudoLabelSet(final_field.detach(), validity, tau, float(validity.mean()))


# --- trainer state ---------------------------------------------------------------


@dataclass
class TrainerState:
    student: TwinsNet
    teacher: TwinsNet
    optimizer: torch.optim.Optimizer
    step: int = 0
    ema_momentum: float = 0.999
    skipped_batches: int = 0
    history: list = field(default_factory=list)


def make_optimizer(model, cfg):
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)


def scheduled_lr(cfg, step, total_steps):
    """Learning rate at ``step`` of a phase; "linear" decays to zero with a short warm-up."""
    if cfg.lr_schedule == "constant" or total_steps <= 0:
        return cfg.lr
    warmup = max(1, total_steps // 20)
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    return cfg.lr * max(0.0, 1 - (step - warmup) / max(1, total_steps - warmup))


def set_lr(state, lr):
    for group in state.optimizer.param_groups:
        group["lr"] = lr


def make_teacher(student):
    teacher = copy.deepcopy(student)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def make_state(cfg: TwinsConfig, dtype=torch.float32):
    torch.manual_seed(cfg.seed)
    student = TwinsNet(cfg).to(dtype)
    return TrainerState(student, make_teacher(student), make_optimizer(student, cfg), ema_momentum=cfg.ema_momentum)


@torch.no_grad()
def ema_update(state: TrainerState):
    """teacher <- m * teacher + (1 - m) * student, parameter by parameter."""
    m = state.ema_momentum
    t_params = dict(state.teacher.named_parameters())
    s_params = dict(state.student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ContractError("teacher/student parameter sets differ (checkpoint corruption?)")
    for name, s in s_params.items():
        t = t_params[name]
        if t.shape != s.shape:
            raise ContractError(f"teacher/student shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        t.mul_(m).add_((1 - m) * s)
    for tb, sb in zip(state.teacher.buffers(), state.student.buffers()):
        tb.copy_(sb)
    return state


# --- losses ------------------------------------------------------------------------


def sequence_weights(iters, gamma):
    return [gamma ** (iters - 1 - k) for k in range(iters)]


def masked_l1(pred, gt, valid):
    mask = valid > 0.5
    if not mask.any():
        return pred.sum() * 0.0
    return l1_residual(pred, gt)[mask].mean()


def correspondence_losses(out, gt, valid, cfg, with_kl=True):
    fields = out.trace.fields
    weights = sequence_weights(len(fields), cfg.refine_gamma)
    l1 = sum(w * masked_l1(f, gt, valid) for w, f in zip(weights, fields))
    terms = {"l1_seq": l1}
    mask = valid > 0.5
    if mask.any():
        terms["nll"] = laplace_nll(out.final, gt, out.sigma, valid)
        if with_kl and cfg.unc_lambda_kl > 0:
            res = l1_residual(out.final, gt)
            terms["kl"] = cfg.unc_lambda_kl * kl_alignment(out.sigma, res, valid, cfg.unc_bins, cfg.unc_logsig_clamp)
    else:
        zero = out.sigma.sum() * 0.0
        terms["nll"] = zero
        if with_kl and cfg.unc_lambda_kl > 0:
            terms["kl"] = zero
    return terms


def _check_finite(terms, step):
    for name, value in terms.items():
        if not torch.isfinite(value):
            dump = ", ".join(f"{k}={float(v.detach()):.6g}" for k, v in terms.items())
            raise NumericalError(f"non-finite loss term {name!r} at step {step}: {dump}")


def _optimize(state, loss, cfg):
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.student.parameters(), cfg.grad_clip)
    state.optimizer.step()
    if any(p.grad is not None for p in state.teacher.parameters()):
        raise ContractError("teacher parameters received gradients")
    ema_update(state)
    state.step += 1


def supervised_step(batch, state: TrainerState, cfg: TwinsConfig):
    """One step on a batch with dense correspondence and segmentation labels."""
    state.student.train()
    out = state.student(batch["target"], batch["source"])
    terms = correspondence_losses(out, batch["corr"], batch["valid"], cfg)
    terms = {k: cfg.corr_weight * v for k, v in terms.items()}
    s_loss, _ = seg_loss(out.seg, batch["seg"], cfg.num_classes)
    terms["seg"] = cfg.seg_weight * s_loss
    _check_finite(terms, state.step)
    loss = sum(terms.values())
    _optimize(state, loss, cfg)
    report = {k: float(v.detach()) for k, v in terms.items()}
    report["total"] = float(loss.detach())
    return state, report


def _stack(items, key):
    return torch.stack([it[key] for it in items])


def semi_supervised_step(batch, state: TrainerState, cfg: TwinsConfig, rng=None, pairs=None):
    """Teacher labels the weak view, student learns from the strong view.

    ``batch`` holds target/source/seg tensors only. ``pairs`` (one AugmentPair
    per item) may be given explicitly; otherwise they are sampled from ``rng``.
    """
    b = batch["target"].shape[0]
    size = tuple(batch["target"].shape[-2:])
    if pairs is None:
        rng = rng if rng is not None else np.random.default_rng(state.step)
        pairs = [augment.sample_pair(rng, size, cfg.mode) for _ in range(b)]
    samples = [{"target": batch["target"][i], "source": batch["source"][i], "seg": batch["seg"][i]} for i in range(b)]
    weak = [augment.weak_view(s, p) for s, p in zip(samples, pairs)]
    strong = [augment.strong_view(s, p) for s, p in zip(samples, pairs)]

    state.teacher.eval()
    with torch.no_grad():
        t_out = state.teacher(_stack(weak, "target"), _stack(weak, "source"), with_seg=False)
    pseudo, coverage = [], []
    for i, p in enumerate(pairs):
        pl = make_pseudo_labels(t_out.final[i], t_out.sigma[i], cfg.alpha)
        f, v = augment.transfer_labels(pl.correspondences, pl.validity, p.weak, p.strong)
        pseudo.append({"corr": f, "valid": v})
        coverage.append(pl.coverage)
    pseudo_corr = _stack(pseudo, "corr")
    pseudo_valid = _stack(pseudo, "valid")

    state.student.train()
    out = state.student(_stack(strong, "target"), _stack(strong, "source"))
    s_loss, _ = seg_loss(out.seg, _stack(strong, "seg"), cfg.num_classes)
    terms = {"seg": cfg.seg_weight * s_loss}
    if float(pseudo_valid.sum()) == 0:
        state.skipped_batches += 1
        terms["l1_seq"] = out.final.sum() * 0.0
        terms["nll"] = out.sigma.sum() * 0.0
    else:
        corr_terms = correspondence_losses(out, pseudo_corr, pseudo_valid, cfg, with_kl=False)
        terms.update({k: cfg.corr_weight * v for k, v in corr_terms.items()})
    _check_finite(terms, state.step)
    loss = sum(terms.values())
    _optimize(state, loss, cfg)
    report = {k: float(v.detach()) for k, v in terms.items()}
    report["total"] = float(loss.detach())
    report["coverage"] = float(np.mean(coverage))
    return state, report


# --- data plumbing ----------------------------------------------------------------


def collate(collections, with_corr=True, dtype=torch.float32):
    def chw(a):
        return torch.as_tensor(np.ascontiguousarray(a.transpose(2, 0, 1)), dtype=dtype)

    batch = {
        "target": torch.stack([chw(c.target_image) for c in collections]),
        "source": torch.stack([chw(c.source_image) for c in collections]),
    }
    if all(c.gt_segmentation is not None for c in collections):
        batch["seg"] = torch.stack([torch.as_tensor(c.gt_segmentation, dtype=torch.long) for c in collections])
    if with_corr and all(c.gt_correspondence is not None for c in collections):
        batch["corr"] = torch.stack([chw(c.gt_correspondence) for c in collections])
        batch["valid"] = torch.stack(
            [
                torch.as_tensor(c.valid if c.valid is not None else np.ones(c.shape, np.float32), dtype=dtype)
                for c in collections
            ]
        )
    return batch


@torch.no_grad()
def predict(model, collections, batch_size=4):
    model.eval()
    fields, sigmas, segs = [], [], []
    for i in range(0, len(collections), batch_size):
        batch = collate(collections[i : i + batch_size], with_corr=False, dtype=next(model.parameters()).dtype)
        out = model(batch["target"], batch["source"])
        fields.append(out.final.permute(0, 2, 3, 1).cpu().numpy())
        sigmas.append(out.sigma.cpu().numpy())
        segs.append(out.seg.per_pixel_logits.argmax(1).cpu().numpy())
    return np.concatenate(fields), np.concatenate(sigmas), np.concatenate(segs)


def evaluate(model, collections, num_classes, batch_size=4):
    fields, _, segs = predict(model, collections, batch_size)
    report = MetricReport(pixel_count=int(np.prod(fields.shape[:3])))
    if all(c.gt_segmentation is not None for c in collections):
        gt_seg = np.stack([c.gt_segmentation for c in collections])
        report.miou, report.mfsc, report.per_class_iou = seg_metrics(segs, gt_seg, num_classes)
    if all(c.gt_correspondence is not None for c in collections):
        gt = np.stack([c.gt_correspondence for c in collections])
        valid = np.stack([c.valid if c.valid is not None else np.ones(c.shape) for c in collections])
        report.epe, report.d1 = corr_metrics(fields, gt, valid)
    return report


# --- checkpoints ----------------------------------------------------------------------


def save_checkpoint(state: TrainerState, cfg: TwinsConfig, path, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(cfg),
        "student": state.student.state_dict(),
        "teacher": state.teacher.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "step": state.step,
        "ema_momentum": state.ema_momentum,
        "skipped_batches": state.skipped_batches,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path, cfg: TwinsConfig | None = None):
    """Returns (TrainerState, config, extra). ``cfg`` overrides the stored config if given."""
    path = Path(path)
    if not path.exists():
        raise FormatError("missing checkpoint", path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:  # noqa: BLE001 - torch raises many types for corrupt files
        raise FormatError(f"unreadable checkpoint: {e}", path) from e
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise FormatError("unsupported checkpoint version", path)
    stored = payload["config"]
    stored["backbone_channels"] = tuple(stored["backbone_channels"])
    cfg = cfg or TwinsConfig(**stored)
    state = make_state(cfg)
    dtype = next(iter(payload["student"].values())).dtype
    state.student.to(dtype)
    state.teacher.to(dtype)
    try:
        state.student.load_state_dict(payload["student"])
        state.teacher.load_state_dict(payload["teacher"])
    except RuntimeError as e:
        raise FormatError(f"checkpoint does not match the model: {e}", path) from e
    state.optimizer = make_optimizer(state.student, cfg)
    state.optimizer.load_state_dict(payload["optimizer"])
    state.step = payload["step"]
    state.ema_momentum = cfg.ema_momentum
    state.skipped_batches = payload.get("skipped_batches", 0)
    return state, cfg, payload.get("extra", {})
