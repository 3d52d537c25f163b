"""Contrastive teacher-student objectives.

Feature rows follow one fixed layout for a batch of n ID images and their n
auxiliary-OOD counterparts (B = ID + A-OOD, so G(x_i) = x_{n+i})::

    rows [0, 2n)    view 1 of B   (ID 0..n-1, then A-OOD 0..n-1)
    rows [2n, 4n)   view 2 of B

so the positive partner P of row r is r +/- 2n, and G of an ID row is r + n.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InputError, NumericalError

VARIANTS = ("ocl", "ts", "g_setup_a", "g_setup_b", "g_setup_d")


@dataclass(frozen=True)
class PairedBatch:
    n: int
    gamma: float = 0.2

    def __post_init__(self):
        if self.n < 1:
            raise InputError("a paired batch needs n >= 1 ID samples")
        if not self.gamma > 0:
            raise InputError(f"gamma must be positive, got {self.gamma}")

    @property
    def size(self):
        return 4 * self.n

    def id_rows(self):
        """(view-1 row, view-2 row) for each ID sample."""
        n = self.n
        return torch.arange(n), torch.arange(n) + 2 * n

    def partner(self, rows):
        return torch.where(rows < 2 * self.n, rows + 2 * self.n, rows - 2 * self.n)

    def ood_of(self, rows):
        return rows + self.n

    def labels(self):
        n = self.n
        one = torch.cat([torch.zeros(n, dtype=torch.long), torch.ones(n, dtype=torch.long)])
        return torch.cat([one, one])


def cosine_matrix(a, b):
    return F.normalize(a, dim=1, eps=1e-12) @ F.normalize(b, dim=1, eps=1e-12).T


def _check(sim):
    if not torch.isfinite(sim).all():
        raise NumericalError("non-finite similarity in contrastive loss")


def ocl_direction(fa, fb, batch: PairedBatch):
    """One directional term, summed over the ID samples (``fa`` plays the student role)."""
    return ocl_from_similarity(cosine_matrix(fa, fb), batch)


def ocl_from_similarity(sim, batch: PairedBatch):
    """The directional term as a function of the (4n, 4n) cosine matrix."""
    s = sim / batch.gamma
    _check(s)
    rows = torch.cat(batch.id_rows())
    pos = batch.partner(rows)
    ood = batch.ood_of(rows)
    log_num = torch.logsumexp(torch.stack([s[rows, rows], s[rows, pos]], dim=1), dim=1)
    log_den = torch.logsumexp(torch.cat([s[rows], s[ood]], dim=1), dim=1)
    return (log_den - log_num).sum()


def ocl_loss(student_features, teacher_features, batch: PairedBatch, directions=2):
    """OOD-aware contrastive loss; teacher features are treated as constants."""
    ft = teacher_features.detach()
    loss = ocl_direction(student_features, ft, batch)
    if directions == 2:
        loss = loss + ocl_direction(ft, student_features, batch)
    return loss


def ce_loss(head_logits, labels):
    labels = torch.as_tensor(labels, dtype=torch.long)
    if bool(((labels != 0) & (labels != 1)).any()):
        raise InputError("labels must be 0 (ID) or 1 (A-OOD)")
    return F.cross_entropy(head_logits, labels)


def ts_loss(student_features, teacher_features, batch: PairedBatch = None, id_rows=None):
    """Plain teacher-student alignment: negative mean cosine over ID views."""
    ft = teacher_features.detach()
    cos = F.cosine_similarity(student_features, ft, dim=1, eps=1e-12)
    if id_rows is None:
        id_rows = torch.cat(batch.id_rows()) if batch is not None else torch.arange(len(cos))
    return -cos[id_rows].mean()


def setup_a_loss(student_features, teacher_features, batch: PairedBatch):
    """Mean ID cosine minus mean A-OOD cosine, negated for minimization."""
    ft = teacher_features.detach()
    cos = F.cosine_similarity(student_features, ft, dim=1, eps=1e-12)
    rows = torch.cat(batch.id_rows())
    return -(cos[rows].mean() - cos[batch.ood_of(rows)].mean())


def setup_b_loss(student_features, teacher_features, batch: PairedBatch):
    """Two-term contrastive loss: the ID term minus the same construction on A-OOD rows."""
    s = cosine_matrix(student_features, teacher_features.detach()) / batch.gamma
    _check(s)
    total = 0.0
    for rows in (torch.cat(batch.id_rows()), batch.ood_of(torch.cat(batch.id_rows()))):
        pos = batch.partner(rows)
        log_num = torch.logsumexp(torch.stack([s[rows, rows], s[rows, pos]], dim=1), dim=1)
        log_den = torch.logsumexp(s[rows], dim=1)
        term = (log_den - log_num).sum()
        total = term if isinstance(total, float) else total - term
    return total


def ablation_loss(variant, student_features, teacher_features, batch: PairedBatch):
    if variant == "ocl":
        return ocl_loss(student_features, teacher_features, batch)
    if variant == "ts":
        return ts_loss(student_features, teacher_features, batch)
    if variant == "g_setup_a":
        return setup_a_loss(student_features, teacher_features, batch)
    if variant == "g_setup_b":
        return setup_b_loss(student_features, teacher_features, batch)
    if variant == "g_setup_d":
        return ocl_loss(student_features, teacher_features, batch, directions=1)
    raise InputError(f"unknown loss variant {variant!r}")
