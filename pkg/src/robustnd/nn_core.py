"""Desk-scale residual encoder, binary heads and the teacher/student feature readout.

Weights are stored in a flat float32 archive:

    RNDW1\\n
    <name>\\t<shape, comma separated>\\tfloat32\\t<byte offset>\\n   (one per tensor)
    \\n
    <raw little-endian float32 data>

Offsets are relative to the start of the data section.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

log = logging.getLogger(__name__)

EPS = 1e-12
MAGIC = b"RNDW1\n"


@dataclass(frozen=True)
class EncoderConfig:
    widths: tuple = (16, 32, 64)
    stem_patch: int = 4
    strides: tuple = (1, 2, 2)
    in_channels: int = 3


class ResBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.skip = None if (cin == cout and stride == 1) else nn.Conv2d(cin, cout, 1, stride, bias=False)

    def forward(self, x):
        y = self.conv2(F.relu(self.conv1(x)))
        return F.relu(y + (x if self.skip is None else self.skip(x)))


class Encoder(nn.Module):
    """Patchify stem followed by three residual stages; ``forward`` returns every stage output."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.stem = nn.Conv2d(cfg.in_channels, w[0], cfg.stem_patch, cfg.stem_patch)
        cins = (w[0],) + tuple(w[:-1])
        self.stages = nn.ModuleList(ResBlock(ci, co, s) for ci, co, s in zip(cins, w, cfg.strides))

    def forward(self, x):
        x = F.relu(self.stem(x))
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return taps

    def forward_from(self, acts, start):
        """Final-stage output given the output of stage ``start``."""
        for stage in self.stages[start + 1:]:
            acts = stage(acts)
        return acts


class BinaryHead(nn.Module):
    """Linear map from the pooled final-stage feature to logits (2 for ID vs A-OOD)."""

    def __init__(self, dim, n_out=2):
        super().__init__()
        self.fc = nn.Linear(dim, n_out)

    def forward(self, pooled):
        return self.fc(pooled)


class TSModel(nn.Module):
    """Encoder plus binary head; the unit both teacher and student are built from."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.encoder = Encoder(cfg)
        self.head = BinaryHead(cfg.widths[-1])

    def layout(self, with_head=True):
        return block_slices(self.encoder.cfg.widths, with_head)


# The final stage of the desk encoder is 2x2, too coarse to localize a core
# region after upsampling; the first stage (8x8) is used instead.
CAM_STAGE = 0


class CamClassifier(nn.Module):
    """Encoder with a classification head, exposing one stage's activations for Grad-CAM.

    Logits always come from the pooled final stage; ``stage`` only picks which
    activations the class-score gradients are taken against.
    """

    def __init__(self, encoder, head, stage=CAM_STAGE):
        super().__init__()
        self.encoder = encoder
        self.head = head
        self.stage = stage

    def cam_forward(self, x):
        taps = self.encoder(x)
        return taps[self.stage], self.head(taps[-1].mean(dim=(2, 3)))

    def forward(self, x):
        return self.cam_forward(x)[1]


def block_slices(widths, with_head=True):
    """Column ranges of each block in the concatenated feature vector."""
    out, start = [], 0
    for d in list(widths) + ([2] if with_head else []):
        out.append(slice(start, start + d))
        start += d
    return out


def _unit(v):
    norm = v.norm(dim=1, keepdim=True)
    if bool((norm == 0).any()):
        log.warning("zero-norm feature block; dividing by eps=%g", EPS)
    return v / (norm + EPS)


def feature_readout(encoder, head, x, with_head=True, taps=None):
    """Pooled, per-block L2-normalized stage features, concatenated with the normalized head logits.

    Returns a tensor of shape (N, sum(widths) + 2) (without the head block if
    ``with_head`` is False). Gradients flow through unless the caller disables them.
    """
    if taps is None:
        taps = encoder(x)
    pooled = [t.mean(dim=(2, 3)) for t in taps]
    blocks = [_unit(p) for p in pooled]
    if with_head:
        blocks.append(_unit(head(pooled[-1])))
    return torch.cat(blocks, dim=1)


def count_params(module):
    return sum(p.numel() for p in module.parameters())


# ------------------------------------------------------------- construction

def build_student(seed, cfg: EncoderConfig = EncoderConfig()):
    """Randomly initialized trainable encoder + head, bit-identical for a given seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = TSModel(cfg)
    return model


def build_teacher(weights_path, cfg: EncoderConfig = EncoderConfig(), head_seed=0):
    """Load a pretrained encoder (frozen) and attach a fresh trainable binary head.

    Any auxiliary classification head stored alongside the encoder is kept
    on ``model.aux_head`` so it can drive Grad-CAM and so saving the teacher
    reproduces the file it was loaded from.
    """
    state = load_archive(weights_path)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(head_seed)
        model = TSModel(cfg)
    enc_state = {k[len("encoder."):]: v for k, v in state.items() if k.startswith("encoder.")}
    try:
        model.encoder.load_state_dict({k: torch.from_numpy(v) for k, v in enc_state.items()})
    except RuntimeError as exc:
        raise ConfigError(f"teacher weights incompatible with encoder config: {exc}") from exc
    aux = {k[len("aux_head."):]: v for k, v in state.items() if k.startswith("aux_head.")}
    model.aux_head = None
    if aux:
        n_out = aux["fc.weight"].shape[0]
        model.aux_head = BinaryHead(cfg.widths[-1], n_out)
        model.aux_head.load_state_dict({k: torch.from_numpy(v) for k, v in aux.items()})
        model.aux_head.requires_grad_(False)
    model.encoder.requires_grad_(False)
    model.encoder.eval()
    model.source_keys = list(state)
    return model


def teacher_state(model):
    """Tensors that make up a teacher weights file, in the order they were loaded."""
    state = {f"encoder.{k}": v for k, v in model.encoder.state_dict().items()}
    if getattr(model, "aux_head", None) is not None:
        state.update({f"aux_head.{k}": v for k, v in model.aux_head.state_dict().items()})
    order = getattr(model, "source_keys", None) or list(state)
    return {k: state[k] for k in order}


def saliency_model(teacher):
    if getattr(teacher, "aux_head", None) is None:
        raise ConfigError("teacher has no auxiliary classification head for saliency")
    return CamClassifier(teacher.encoder, teacher.aux_head)


# ------------------------------------------------------------------ archive

def save_archive(path, tensors):
    """Write ``{name: array-like}`` in the flat float32 archive format."""
    header, blobs, offset = [], [], 0
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.asarray(value, dtype="<f4").copy(order="C")  # ascontiguousarray would promote 0-d to 1-d
        shape = ",".join(str(s) for s in arr.shape)
        header.append(f"{name}\t{shape}\tfloat32\t{offset}\n")
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    data = MAGIC + "".join(header).encode() + b"\n" + b"".join(blobs)
    Path(path).write_bytes(data)


def load_archive(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ConfigError(f"{path}: not a weights archive")
    end = raw.index(b"\n\n", len(MAGIC) - 1)
    lines = raw[len(MAGIC):end].decode().splitlines()
    data = raw[end + 2:]
    out = {}
    for line in lines:
        if not line:
            continue
        name, shape, dtype, offset = line.split("\t")
        if dtype != "float32":
            raise ConfigError(f"{path}: unsupported dtype {dtype} for {name}")
        dims = tuple(int(s) for s in shape.split(",")) if shape else ()
        count = int(np.prod(dims)) if dims else 1
        off = int(offset)
        out[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims).copy()
    return out


def save_teacher(model, path):
    save_archive(path, teacher_state(model))
