"""Experiment configuration: flat ``section.key = value`` files.

Values are Python/JSON-style literals (numbers, quoted strings, lists,
true/false, none); bare words are read as strings, and ``[a, b]`` lists of
bare words as lists of strings. ``#`` starts a comment.
"""
from __future__ import annotations

import ast
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import nn_core, scm_data, trainer
from . import transforms as T
from .errors import ConfigError

# Learning-rate / weight-decay presets: the default recipe and a slower, more regularized one.
LR_PRESETS = {"main": (1e-4, 1e-5), "appendix": (5e-5, 1e-4)}


@dataclass
class DatasetSection:
    dir: str | None = None  # read an on-disk dataset instead of generating one
    size: int = 32
    confounder_strength: float = 0.9
    train_id: int = 2000
    exposure: str = "95:5"
    shifted_pool: int | None = None
    test_id: int = 300
    test_ood: int = 300
    aux_per_class: int = 300
    texture_amp: float = 0.12


@dataclass
class TransformsSection:
    light: list = field(default_factory=lambda: list(T.LIGHT_REGISTRY))
    hard: list = field(default_factory=lambda: list(T.HARD_REGISTRY))


@dataclass
class OodSection:
    strategy: str = "core"
    alpha_range: list = field(default_factory=lambda: list(trainer.G.ALPHA_RANGE))
    hard_count: int = 2
    regenerate_each_epoch: bool = True


@dataclass
class LossSection:
    variant: str = "ocl"
    gamma: float = 0.2
    ce_targets: str = "teacher"
    use_ce: bool = True
    use_heads: bool = True


@dataclass
class TrainerSection:
    epochs: int = 50
    batch_size: int = 32
    preset: str = "main"
    lr: float | None = None  # None: take it from the preset
    weight_decay: float | None = None
    checkpoint_every: int = 0
    pretrain_epochs: int = 30
    pretrain_lr: float = 2e-3
    pretrain_min_accuracy: float = 0.9
    widths: list = field(default_factory=lambda: [16, 32, 64])


@dataclass
class EvalSection:
    noise: bool = True
    noise_mean: float = 0.5
    noise_std: float = 0.25


@dataclass
class ExperimentConfig:
    seed: int = 0
    output: str = "runs"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    transforms: TransformsSection = field(default_factory=TransformsSection)
    ood: OodSection = field(default_factory=OodSection)
    loss: LossSection = field(default_factory=LossSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- views used by the rest of the package
    def scm(self) -> scm_data.ScmConfig:
        d = self.dataset
        return scm_data.ScmConfig(size=d.size, confounder_strength=d.confounder_strength, train_id=d.train_id,
                                  exposure=d.exposure, shifted_pool=d.shifted_pool, test_id=d.test_id,
                                  test_ood=d.test_ood, aux_per_class=d.aux_per_class,
                                  texture_amp=d.texture_amp, seed=self.seed)

    def encoder(self):
        return nn_core.EncoderConfig(widths=tuple(self.trainer.widths))

    def train_config(self) -> trainer.TrainConfig:
        t, lo, o = self.trainer, self.loss, self.ood
        lr, wd = LR_PRESETS[t.preset]
        return trainer.TrainConfig(
            epochs=t.epochs, batch_size=t.batch_size,
            lr=t.lr if t.lr is not None else lr,
            weight_decay=t.weight_decay if t.weight_decay is not None else wd,
            seed=self.seed, loss_variant=lo.variant, gamma=lo.gamma, use_ce=lo.use_ce, use_heads=lo.use_heads,
            ce_targets=lo.ce_targets, ood_strategy=o.strategy, alpha_range=tuple(o.alpha_range),
            hard_count=o.hard_count, regenerate_each_epoch=o.regenerate_each_epoch,
            light_kinds=_kinds(self.transforms.light, T.LIGHT_REGISTRY),
            hard_kinds=_kinds(self.transforms.hard, T.HARD_REGISTRY),
            checkpoint_every=t.checkpoint_every, encoder=self.encoder())

    def pretrain_config(self) -> trainer.PretrainConfig:
        t = self.trainer
        return trainer.PretrainConfig(epochs=t.pretrain_epochs, lr=t.pretrain_lr, seed=self.seed,
                                      min_accuracy=t.pretrain_min_accuracy, encoder=self.encoder())

    def output_root(self) -> Path:
        return Path(os.environ.get("RND_OUT") or self.output)


def _kinds(kinds, registry):
    # The full registry is passed as None so default runs match the library defaults exactly.
    return None if list(kinds) == list(registry) else tuple(kinds)


_SECTIONS = ("dataset", "transforms", "ood", "loss", "trainer", "eval")


# ------------------------------------------------------------------ parsing

def parse_value(text):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        pass
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        return [parse_value(t) for t in inner.split(",")] if inner else []
    return text


def _coerce(key, value, default, annotation):
    ann = str(annotation)
    if value is None:
        if "None" in ann:
            return None
        if ann == "str":
            return "none"  # a bare word such as ood.strategy = none
        raise ConfigError(f"{key} may not be none", key=key)
    if isinstance(default, bool) or ann == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}", key=key)
        return value
    if ann.startswith("int") or isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{key} expects an integer, got {value!r}", key=key)
        return value
    if ann.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}", key=key)
        return float(value)
    if ann == "list":
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} expects a list, got {value!r}", key=key)
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} expects a string, got {value!r}", key=key)
    return value


def _strip_comment(line):
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def _field_map(obj):
    return {f.name: f for f in fields(obj)}


def parse_text(text, overrides=()) -> ExperimentConfig:
    """Parse config text plus ``key=value`` overrides into a validated config."""
    cfg = ExperimentConfig()
    lines = [(i + 1, ln) for i, ln in enumerate(text.splitlines())]
    lines += [(f"override {j + 1}", ov) for j, ov in enumerate(overrides)]
    seen = {}
    for where, raw in lines:
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {where}: expected 'key = value': {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in seen and isinstance(where, int):
            raise ConfigError(f"line {where}: {key} set twice (first on line {seen[key]})", key=key)
        seen[key] = where
        _assign(cfg, key, parse_value(val), where, raw)
    validate(cfg)
    return cfg


def _assign(cfg, key, value, where, raw):
    parts = key.split(".")
    target = cfg
    if len(parts) == 2 and parts[0] in _SECTIONS:
        target = getattr(cfg, parts[0])
    elif len(parts) != 1 or parts[0] in _SECTIONS:
        raise ConfigError(f"line {where}: unknown key {key!r}: {raw.strip()!r}", key=key)
    name = parts[-1]
    fm = _field_map(target)
    if name not in fm:
        raise ConfigError(f"line {where}: unknown key {key!r}: {raw.strip()!r}", key=key)
    f = fm[name]
    default = getattr(type(target)(), name)
    setattr(target, name, _coerce(key, value, default, f.type))


def validate(cfg: ExperimentConfig):
    """Range checks; raises ConfigError naming the key path."""
    def need(ok, key, msg):
        if not ok:
            raise ConfigError(f"{key}: {msg}", key=key)

    d, o, lo, t, e = cfg.dataset, cfg.ood, cfg.loss, cfg.trainer, cfg.eval
    need(d.dir is None or Path(d.dir).is_dir(), "dataset.dir", f"directory {d.dir!r} does not exist")
    need(d.size >= 8, "dataset.size", "must be >= 8")
    need(0.0 <= d.confounder_strength <= 1.0, "dataset.confounder_strength", "must lie in [0, 1]")
    need(d.exposure in scm_data.EXPOSURES, "dataset.exposure", f"must be one of {sorted(scm_data.EXPOSURES)}")
    for name in ("train_id", "test_id", "test_ood", "aux_per_class"):
        need(getattr(d, name) >= 1, f"dataset.{name}", "must be >= 1")
    need(d.texture_amp >= 0, "dataset.texture_amp", "must be >= 0")
    for fam, reg in (("light", T.LIGHT_REGISTRY), ("hard", T.HARD_REGISTRY)):
        kinds = getattr(cfg.transforms, fam)
        need(len(kinds) > 0, f"transforms.{fam}", "registry may not be empty")
        bad = [k for k in kinds if k not in reg]
        need(not bad, f"transforms.{fam}", f"unknown {fam} transforms {bad}")
    need(o.strategy in ("core", "global", "random_region", "none"), "ood.strategy",
         "must be core, global, random_region or none")
    ar = o.alpha_range
    need(len(ar) == 2 and all(isinstance(a, (int, float)) for a in ar) and 0 < ar[0] <= ar[1] <= 1,
         "ood.alpha_range", "must be [lo, hi] with 0 < lo <= hi <= 1")
    o.alpha_range = [float(a) for a in ar]
    need(o.hard_count in (1, 2), "ood.hard_count", "must be 1 or 2")
    need(lo.variant in trainer.O.VARIANTS, "loss.variant", f"must be one of {trainer.O.VARIANTS}")
    need(lo.gamma > 0, "loss.gamma", "must be > 0")
    need(lo.ce_targets in ("teacher", "both"), "loss.ce_targets", "must be teacher or both")
    need(o.strategy != "none" or (lo.variant == "ts" and not lo.use_ce), "ood.strategy",
         "none requires loss.variant = ts and loss.use_ce = false")
    need(t.epochs >= 1, "trainer.epochs", "must be >= 1")
    need(t.batch_size >= 1, "trainer.batch_size", "must be >= 1")
    need(t.preset in LR_PRESETS, "trainer.preset", f"must be one of {sorted(LR_PRESETS)}")
    need(t.lr is None or t.lr > 0, "trainer.lr", "must be > 0")
    need(t.weight_decay is None or t.weight_decay >= 0, "trainer.weight_decay", "must be >= 0")
    need(t.checkpoint_every >= 0, "trainer.checkpoint_every", "must be >= 0")
    need(t.pretrain_epochs >= 1, "trainer.pretrain_epochs", "must be >= 1")
    need(t.pretrain_lr > 0, "trainer.pretrain_lr", "must be > 0")
    need(0 <= t.pretrain_min_accuracy <= 1, "trainer.pretrain_min_accuracy", "must lie in [0, 1]")
    need(len(t.widths) >= 1 and all(isinstance(w, int) and w > 0 for w in t.widths), "trainer.widths",
         "must be a non-empty list of positive integers")
    need(e.noise_std > 0, "eval.noise_std", "must be > 0")
    need(cfg.seed >= 0, "seed", "must be >= 0")
    return cfg


def load(path, overrides=()) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not readable")
    return parse_text(p.read_text(), overrides)


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


def dump(cfg: ExperimentConfig) -> str:
    """Normalized echo: every key, one per line; parses back to an equal config."""
    lines = [f"seed = {_fmt(cfg.seed)}", f"output = {_fmt(cfg.output)}"]
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        lines += [f"{sec}.{f.name} = {_fmt(getattr(obj, f.name))}" for f in fields(obj)]
    return "\n".join(lines) + "\n"


def write_echo(cfg: ExperimentConfig, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.txt").write_text(dump(cfg))
    return d / "config.txt"
