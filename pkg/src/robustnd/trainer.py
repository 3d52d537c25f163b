"""Teacher pretraining and the joint teacher-student training loop."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import nn_core
from . import objectives as O
from . import ood_synth as G
from . import transforms as T
from .errors import InputError, MissingArtifact, NumericalError, TrainingFailure
from .saliency import style_agnostic_saliency_batch

log = logging.getLogger(__name__)

# Tensors the main loop is allowed to change.
TRAINABLE_PREFIXES = ("student.", "teacher.head.")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-5
    seed: int = 0
    loss_variant: str = "ocl"
    gamma: float = 0.2
    use_ce: bool = True
    use_heads: bool = True
    ce_targets: str = "teacher"
    ood_strategy: str = "core"  # core | global | random_region | none
    alpha_range: tuple = G.ALPHA_RANGE
    hard_count: int = 2
    regenerate_each_epoch: bool = True
    light_kinds: tuple | None = None
    hard_kinds: tuple | None = None
    checkpoint_every: int = 0
    encoder: nn_core.EncoderConfig = field(default_factory=nn_core.EncoderConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if not self.lr > 0:
            raise InputError("lr must be positive")
        if self.weight_decay < 0:
            raise InputError("weight_decay must be non-negative")
        if self.loss_variant not in O.VARIANTS:
            raise InputError(f"loss_variant must be one of {O.VARIANTS}")
        if self.ood_strategy not in ("core", "global", "random_region", "none"):
            raise InputError(f"unknown ood_strategy {self.ood_strategy!r}")
        if self.ce_targets not in ("teacher", "both"):
            raise InputError("ce_targets must be 'teacher' or 'both'")
        if self.ood_strategy == "none" and (self.use_ce or self.loss_variant != "ts"):
            raise InputError("training without A-OOD supports only the ts loss without CE")
        self.alpha_range = tuple(self.alpha_range)

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0
    min_accuracy: float = 0.90
    encoder: nn_core.EncoderConfig = field(default_factory=nn_core.EncoderConfig)


@dataclass
class TrainState:
    teacher: nn_core.TSModel
    student: nn_core.TSModel
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    history: list = field(default_factory=list)


# ---------------------------------------------------------------- pretrain

def _accuracy(model, head, images, labels, batch=256):
    correct = 0
    with torch.no_grad():
        for s in range(0, len(images), batch):
            x = torch.from_numpy(images[s:s + batch])
            logits = head(model(x)[-1].mean(dim=(2, 3)))
            correct += int((logits.argmax(1).numpy() == labels[s:s + batch]).sum())
    return correct / len(images)


def pretrain_teacher(aux, cfg: PretrainConfig, path=None, val=None):
    """Supervised pretraining of the encoder on the auxiliary shape classes.

    Stops once train accuracy reaches ``cfg.min_accuracy`` (checked per epoch);
    raises :class:`TrainingFailure` if it never does. Returns
    ``(state dict of tensors, report)`` and writes the archive to ``path``.
    """
    n_cls = int(aux.labels.max()) + 1
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        enc = nn_core.Encoder(cfg.encoder)
        head = nn_core.BinaryHead(cfg.encoder.widths[-1], n_cls)
    opt = torch.optim.AdamW(list(enc.parameters()) + list(head.parameters()), lr=cfg.lr, weight_decay=1e-4)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    images, labels = aux.images, aux.labels
    acc = 0.0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            x = torch.from_numpy(images[idx])
            y = torch.from_numpy(labels[idx])
            loss = F.cross_entropy(head(enc(x)[-1].mean(dim=(2, 3))), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
        acc = _accuracy(enc, head, images, labels)
        log.info("pretrain epoch %d train acc %.3f", epoch, acc)
        if acc >= cfg.min_accuracy:
            break
    report = {"train_accuracy": acc, "epochs": epoch + 1}
    if val is not None:
        report["val_accuracy"] = _accuracy(enc, head, val.images, val.labels)
    if acc < cfg.min_accuracy:
        raise TrainingFailure(f"teacher pretraining reached {acc:.3f} < {cfg.min_accuracy} train accuracy")
    state = {f"encoder.{k}": v for k, v in enc.state_dict().items()}
    state.update({f"aux_head.{k}": v for k, v in head.state_dict().items()})
    if path is not None:
        nn_core.save_archive(path, state)
    return state, report


# ------------------------------------------------------------- data plumbing

def sample_rng(seed, epoch, index, purpose):
    """Independent stream per (epoch, sample, purpose): order-free reproducibility."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index, purpose]))


_CRAFT, _VIEWS, _SALIENCY = 0, 1, 2


def build_saliency_cache(teacher, images, seed, light_kinds=None, batch=256):
    """Style-agnostic saliency for every training image, computed once."""
    model = nn_core.saliency_model(teacher)
    maps = []
    for s in range(0, len(images), batch):
        chunk = images[s:s + batch]
        lights = [T.sample_light(sample_rng(seed, 0, s + i, _SALIENCY), light_kinds) for i in range(len(chunk))]
        maps.append(style_agnostic_saliency_batch(model, chunk, lights))
    return G.SaliencyCache(np.concatenate(maps) if maps else np.zeros((0,) + images.shape[2:]))


def craft_batch(images, indices, cfg: TrainConfig, cache, epoch):
    """A-OOD counterparts of ``images[indices]``, one per ID sample, in the same order."""
    ep = epoch if cfg.regenerate_each_epoch else 0
    out = np.empty((len(indices),) + images.shape[1:], dtype=np.float32)
    for j, i in enumerate(indices):
        rng = sample_rng(cfg.seed, ep, int(i), _CRAFT)
        if cfg.ood_strategy == "core":
            out[j], _ = G.craft_ood(images[i], None, rng, saliency=cache[i], alpha_range=cfg.alpha_range,
                                    hard_count=cfg.hard_count, light_kinds=cfg.light_kinds,
                                    hard_kinds=cfg.hard_kinds)
        elif cfg.ood_strategy == "global":
            out[j] = G.craft_ood_global(images[i], rng, hard_count=cfg.hard_count, hard_kinds=cfg.hard_kinds)
        else:
            out[j] = G.craft_ood_random_region(images[i], rng, alpha_range=cfg.alpha_range,
                                               hard_count=cfg.hard_count, hard_kinds=cfg.hard_kinds)
    return out


def make_views(images, indices, cfg: TrainConfig, epoch, salt):
    """Two independent light views of each image (ViewGenerator)."""
    s1, s2 = [], []
    for i in indices:
        rng = sample_rng(cfg.seed, epoch, int(i), _VIEWS * 10 + salt)
        s1.append(T.sample_light(rng, cfg.light_kinds))
        s2.append(T.sample_light(rng, cfg.light_kinds))
    return T.apply_batch(s1, images), T.apply_batch(s2, images)


# -------------------------------------------------------------- main loop

def init_state(teacher, cfg: TrainConfig):
    student = nn_core.build_student(cfg.seed, cfg.encoder)
    params = list(student.parameters()) + list(teacher.head.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return TrainState(teacher, student, opt)


def teacher_features(teacher, x, with_head=True):
    """Teacher readout: frozen encoder, trainable head. Also returns the head logits."""
    with torch.no_grad():
        taps = teacher.encoder(x)
    pooled_last = taps[-1].mean(dim=(2, 3))
    logits = teacher.head(pooled_last)
    blocks = [nn_core._unit(t.mean(dim=(2, 3))) for t in taps]
    if with_head:
        blocks.append(nn_core._unit(logits))
    return torch.cat(blocks, dim=1), logits


def student_features(student, x, with_head=True):
    taps = student.encoder(x)
    logits = student.head(taps[-1].mean(dim=(2, 3)))
    blocks = [nn_core._unit(t.mean(dim=(2, 3))) for t in taps]
    if with_head:
        blocks.append(nn_core._unit(logits))
    return torch.cat(blocks, dim=1), logits


def train_step(state: TrainState, images, indices, cfg: TrainConfig, cache, epoch):
    try:
        main, ce = _losses(state, images, indices, cfg, cache, epoch)
    except NumericalError as exc:
        raise TrainingFailure(f"{exc} at epoch {epoch}, batch indices {list(map(int, indices))}") from exc
    loss = main + ce
    if not torch.isfinite(loss):
        raise TrainingFailure(f"non-finite loss at epoch {epoch}, batch indices {list(map(int, indices))}")
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    return {"main": float(main.detach()), "ce": float(ce.detach())}


def _losses(state: TrainState, images, indices, cfg: TrainConfig, cache, epoch):
    n = len(indices)
    id_imgs = images[indices]
    if cfg.ood_strategy == "none":
        v1, v2 = make_views(id_imgs, indices, cfg, epoch, 0)
        x = torch.from_numpy(np.concatenate([v1, v2]))
        fs, _ = student_features(state.student, x, cfg.use_heads)
        ft, _ = teacher_features(state.teacher, x, cfg.use_heads)
        main = O.ts_loss(fs, ft)
        ce = torch.zeros(())
    else:
        ood_imgs = craft_batch(images, indices, cfg, cache, epoch)
        i1, i2 = make_views(id_imgs, indices, cfg, epoch, 0)
        o1, o2 = make_views(ood_imgs, indices, cfg, epoch, 1)
        x = torch.from_numpy(np.concatenate([i1, o1, i2, o2]))
        batch = O.PairedBatch(n, cfg.gamma)
        fs, s_logits = student_features(state.student, x, cfg.use_heads)
        ft, t_logits = teacher_features(state.teacher, x, cfg.use_heads)
        main = O.ablation_loss(cfg.loss_variant, fs, ft, batch)
        ce = torch.zeros(())
        if cfg.use_ce:
            ce = O.ce_loss(t_logits, batch.labels())
            if cfg.ce_targets == "both":
                ce = ce + O.ce_loss(s_logits, batch.labels())
    return main, ce


def epoch_order(cfg: TrainConfig, epoch, n):
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 31337])).permutation(n)


def train(images, teacher, cfg: TrainConfig, cache=None, state=None, until=None, checkpoint_dir=None):
    """Run the joint loop from ``state.epoch`` (or a fresh state) to ``until`` (default cfg.epochs)."""
    torch.set_num_threads(1)
    if cfg.ood_strategy == "core" and cache is None:
        raise MissingArtifact("core-region crafting needs a saliency cache")
    if state is None:
        state = init_state(teacher, cfg)
    until = cfg.epochs if until is None else until
    state.student.train()
    while state.epoch < until:
        order = epoch_order(cfg, state.epoch, len(images))
        for s in range(0, len(order), cfg.batch_size):
            state.history.append(train_step(state, images, order[s:s + cfg.batch_size], cfg, cache, state.epoch))
        state.epoch += 1
        if checkpoint_dir and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(state, cfg, checkpoint_dir)
    return state


def epoch_means(history, steps_per_epoch, key="main"):
    vals = np.array([h[key] for h in history])
    return vals.reshape(-1, steps_per_epoch).mean(axis=1)


# ------------------------------------------------------------- checkpoints

def save_checkpoint(state: TrainState, cfg: TrainConfig, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = {f"student.{k}": v for k, v in state.student.state_dict().items()}
    tensors.update({f"teacher.head.{k}": v for k, v in state.teacher.head.state_dict().items()})
    names = _param_names(state)
    for p, name in zip(_opt_params(state), names):
        st = state.optimizer.state.get(p)
        if st:
            tensors[f"opt.{name}.step"] = np.array(float(st["step"]), dtype=np.float32)
            tensors[f"opt.{name}.exp_avg"] = st["exp_avg"]
            tensors[f"opt.{name}.exp_avg_sq"] = st["exp_avg_sq"]
    nn_core.save_archive(d / "checkpoint.bin", tensors)
    meta = {"epoch": state.epoch, "config_hash": cfg.digest(), "seed": cfg.seed,
            "rng": f"SeedSequence([seed, epoch, index, purpose]) from epoch {state.epoch}"}
    (d / "checkpoint_meta.txt").write_text("".join(f"{k} = {json.dumps(v)}\n" for k, v in meta.items()))
    (d / "history.json").write_text(json.dumps(state.history))


def _opt_params(state):
    return list(state.student.parameters()) + list(state.teacher.head.parameters())


def _param_names(state):
    return ([f"student.{k}" for k, _ in state.student.named_parameters()]
            + [f"teacher.head.{k}" for k, _ in state.teacher.head.named_parameters()])


def load_checkpoint(directory, teacher, cfg: TrainConfig):
    d = Path(directory)
    if not (d / "checkpoint.bin").exists():
        raise MissingArtifact(f"no checkpoint in {d}")
    meta = {}
    for line in (d / "checkpoint_meta.txt").read_text().splitlines():
        k, v = line.split(" = ", 1)
        meta[k] = json.loads(v)
    if meta["config_hash"] != cfg.digest():
        raise InputError("checkpoint was written with a different config")
    tensors = nn_core.load_archive(d / "checkpoint.bin")
    state = init_state(teacher, cfg)
    state.student.load_state_dict({k[8:]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("student.")})
    state.teacher.head.load_state_dict(
        {k[13:]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("teacher.head.")})
    for p, name in zip(_opt_params(state), _param_names(state)):
        key = f"opt.{name}"
        if f"{key}.step" in tensors:
            state.optimizer.state[p] = {
                "step": torch.tensor(float(tensors[f"{key}.step"])),
                "exp_avg": torch.from_numpy(tensors[f"{key}.exp_avg"]),
                "exp_avg_sq": torch.from_numpy(tensors[f"{key}.exp_avg_sq"]),
            }
    state.epoch = int(meta["epoch"])
    state.history = json.loads((d / "history.json").read_text())
    return state
