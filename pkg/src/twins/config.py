"""Flat ``key = value`` configuration and multi-phase experiment plans.

Top-level keys configure model and training. Phase keys look like
``phase1.mode = supervised``, ``phase1.split = train``, ``phase1.steps = 200``;
any other top-level key may be overridden for one phase as ``phase2.lr = 5e-5``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    return tuple(int(x) for x in text.replace(",", " ").split())


def _choice(*options):
    def parse(text):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {options}, got {t!r}")
        return t

    return parse


def _open_interval(lo, hi):
    def check(v):
        if not lo < v < hi:
            raise ValueError(f"{v} outside ({lo},{hi})")

    return check


def _positive(v):
    if v <= 0:
        raise ValueError(f"{v} must be > 0")


def _at_least_two(v):
    if v < 2:
        raise ValueError(f"{v} must be >= 2")


def _nonneg(v):
    if v < 0:
        raise ValueError(f"{v} must be >= 0")


def _unit(v):
    if not 0 <= v <= 1:
        raise ValueError(f"{v} outside [0,1]")


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


# key -> (parser, validator or None)
_SCHEMA = {
    "mode": (_choice("stereo", "flow"), None),
    "num_classes": (int, _at_least_two),
    "backbone.channels": (_ints, None),
    "backbone.groups": (int, _positive),
    "corr.radius": (int, _nonneg),
    "corr.levels": (int, _positive),
    "corr.source": (_choice("stage", "early"), None),
    "refine.iters": (int, _positive),
    "refine.hidden_width": (int, _positive),
    "refine.gamma": (float, _unit),
    "refine.context": (_choice("shared", "independent"), None),
    "cta.enabled": (_bool, None),
    "cta.mode": (_choice("linear", "identity", "add"), None),
    "cta.heads": (int, _positive),
    "cta.eps": (float, _positive),
    "cta.residual": (_choice("query", "context"), None),
    "decoder.num_queries": (int, _nonneg),
    "decoder.dim": (int, _positive),
    "unc.bins": (int, _positive),
    "unc.lambda_kl": (float, _nonneg),
    "unc.logsig_clamp": (float, _positive),
    "unc.width": (int, _positive),
    "unc.log_inputs": (_bool, None),
    "lr": (float, _positive),
    "lr_schedule": (_choice("constant", "linear"), None),
    "weight_decay": (float, _nonneg),
    "adam_eps": (float, _positive),
    "batch_size": (int, _positive),
    "grad_clip": (float, _nonneg),
    "ema_momentum": (float, _unit),
    "alpha": (float, _open_interval(0.5, 1.0)),
    "seg_weight": (float, _nonneg),
    "corr_weight": (float, _nonneg),
    "eval_split": (str, None),
    "eval_limit": (int, _nonneg),
    "log_every": (int, _positive),
    "ckpt_every": (int, _positive),
    "seed": (int, None),
    "output_dir": (str, None),
}

_PHASE_KEYS = {"mode": _choice("supervised", "semi"), "split": str, "steps": int}
_RANGE_HINT = {"alpha": "(0.5,1)", "ema_momentum": "[0,1]"}


@dataclass(frozen=True)
class TwinsConfig:
    mode: str = "stereo"
    num_classes: int = 5
    backbone_channels: tuple = (48, 96, 192, 384)
    backbone_groups: int = 8
    corr_radius: int = 4
    corr_levels: int = 3
    corr_source: str = "stage"
    refine_iters: int = 8
    refine_hidden_width: int = 96
    refine_gamma: float = 0.9
    refine_context: str = "shared"
    cta_enabled: bool = True
    cta_mode: str = "linear"
    cta_heads: int = 1
    cta_eps: float = 1e-6
    cta_residual: str = "query"
    decoder_num_queries: int = 0  # 0 -> 2 * num_classes
    decoder_dim: int = 128
    unc_bins: int = 32
    unc_lambda_kl: float = 0.1
    unc_logsig_clamp: float = 6.0
    unc_width: int = 32
    unc_log_inputs: bool = True
    lr: float = 1e-4
    lr_schedule: str = "constant"
    weight_decay: float = 1e-5
    adam_eps: float = 1e-8
    batch_size: int = 2
    grad_clip: float = 1.0
    ema_momentum: float = 0.999
    alpha: float = 0.75
    seg_weight: float = 1.0
    corr_weight: float = 1.0
    eval_split: str = "val"
    eval_limit: int = 0  # 0 -> whole split
    log_every: int = 10
    ckpt_every: int = 50
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.refine_hidden_width % self.backbone_groups:
            raise ConfigError(
                f"backbone.groups={self.backbone_groups} must divide refine.hidden_width={self.refine_hidden_width}"
            )
        if self.refine_iters < 2:
            raise ConfigError("refine.iters must be >= 2 (uncertainty needs iteration pairs)")
        if len(self.backbone_channels) != 4:
            raise ConfigError("backbone.channels needs 4 values")

    def with_overrides(self, **kw):
        return replace(self, **kw)

    def items(self):
        for key in _SCHEMA:
            yield key, getattr(self, attr_name(key))


def attr_name(key):
    return key.replace(".", "_")


def parse_value(key, text, lineno=None):
    where = f"line {lineno}: " if lineno is not None else ""
    if key not in _SCHEMA:
        raise ConfigError(f"{where}unknown key {key!r}")
    parser, check = _SCHEMA[key]
    try:
        value = parser(text)
        if check is not None:
            check(value)
    except ValueError as e:
        hint = f" (allowed range {_RANGE_HINT[key]})" if key in _RANGE_HINT else ""
        raise ConfigError(f"{where}invalid value for {key}: {e}{hint}") from None
    return value


@dataclass
class Phase:
    mode: str
    split: str = "train"
    steps: int = 100
    overrides: dict = field(default_factory=dict)  # key -> parsed value


@dataclass
class ExperimentPlan:
    phases: list
    seed: int = 0
    output_dir: str = "runs/default"
    config: TwinsConfig = field(default_factory=TwinsConfig)

    def validate(self):
        if not self.phases:
            raise ConfigError("plan needs at least one phase")
        if self.phases[0].mode != "supervised":
            raise ConfigError("a semi phase must be preceded by a supervised phase (no teacher exists)")
        for p in self.phases:
            if p.steps < 0:
                raise ConfigError(f"phase steps must be >= 0, got {p.steps}")
        return self

    def phase_config(self, index):
        p = self.phases[index]
        return replace(self.config, **{attr_name(k): v for k, v in p.overrides.items()})


_PHASE_RE = re.compile(r"^phase(\d+)\.(.+)$")


def parse_config(text, require_phases=False) -> ExperimentPlan:
    values = {}
    phase_raw: dict[int, dict] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = (s.strip() for s in line.partition("="))
        m = _PHASE_RE.match(key)
        if m:
            idx, sub = int(m.group(1)), m.group(2)
            slot = phase_raw.setdefault(idx, {"overrides": {}})
            if sub in _PHASE_KEYS:
                try:
                    slot[sub] = _PHASE_KEYS[sub](value)
                except ValueError as e:
                    raise ConfigError(f"line {lineno}: invalid value for {key}: {e}") from None
            else:
                slot["overrides"][sub] = parse_value(sub, value, lineno)
            continue
        values[attr_name(key)] = parse_value(key, value, lineno)

    cfg = TwinsConfig(**values)
    phases = []
    for idx in sorted(phase_raw):
        slot = phase_raw[idx]
        if "mode" not in slot:
            raise ConfigError(f"phase{idx} has no mode")
        phases.append(Phase(slot["mode"], slot.get("split", "train"), slot.get("steps", 100), slot["overrides"]))
    plan = ExperimentPlan(phases, cfg.seed, cfg.output_dir, cfg)
    if phases or require_phases:
        plan.validate()
    return plan


def serialize_plan(plan: ExperimentPlan) -> str:
    lines = [f"{k} = {_fmt(v)}" for k, v in plan.config.items()]
    for i, p in enumerate(plan.phases, start=1):
        lines += [f"phase{i}.mode = {p.mode}", f"phase{i}.split = {p.split}", f"phase{i}.steps = {p.steps}"]
        lines += [f"phase{i}.{k} = {_fmt(v)}" for k, v in p.overrides.items()]
    return "\n".join(lines) + "\n"


def load_config(path, **kw):
    with open(path) as f:
        return parse_config(f.read(), **kw)


def config_fields():
    return [f.name for f in fields(TwinsConfig)]
