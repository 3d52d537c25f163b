"""OOD scoring, detection metrics and the A-OOD/real-OOD gap diagnostic."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata

from . import nn_core, scm_data
from .errors import InputError, MissingArtifact


@dataclass
class MetricReport:
    auroc: float
    aupr: float
    fpr95: float
    n_id: int
    n_ood: int
    tag: str = "standard"

    def as_dict(self):
        return asdict(self)


# ------------------------------------------------------------------ scores

def block_discrepancy(fs, ft, slices):
    """Sum over feature blocks of (1 - cosine(student block, teacher block)), per row."""
    fs, ft = torch.as_tensor(fs), torch.as_tensor(ft)
    total = torch.zeros(fs.shape[0], dtype=fs.dtype)
    for sl in slices:
        total = total + (1.0 - F.cosine_similarity(fs[:, sl], ft[:, sl], dim=1, eps=1e-12))
    return total


def ood_scores(teacher, student, images, with_head=True, batch=1):
    """Teacher-student discrepancy for each image; higher means more OOD.

    The default of one image per forward pass makes a score depend on its
    image alone: batched convolution kernels can differ in the last float32
    bit depending on a sample's position in the batch.
    """
    slices = nn_core.block_slices(teacher.encoder.cfg.widths, with_head)
    out = []
    with torch.no_grad():
        for s in range(0, len(images), batch):
            x = torch.as_tensor(np.asarray(images[s:s + batch]), dtype=torch.float32)
            ft = nn_core.feature_readout(teacher.encoder, teacher.head, x, with_head)
            fs = nn_core.feature_readout(student.encoder, student.head, x, with_head)
            out.append(block_discrepancy(fs, ft, slices).double().numpy())
    scores = np.concatenate(out) if out else np.zeros(0)
    if not np.isfinite(scores).all():
        raise InputError("non-finite OOD score")
    return scores


def ood_score(teacher, student, img, with_head=True):
    return float(ood_scores(teacher, student, np.asarray(img)[None], with_head)[0])


# ----------------------------------------------------------------- metrics

def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise InputError("scores and labels differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise InputError("labels must be 0 (ID) or 1 (OOD)")
    return scores, labels.astype(int)


def auroc(scores, labels):
    """P(random OOD score > random ID score), ties counted one half."""
    scores, labels = _split(scores, labels)
    n_pos, n_neg = int(labels.sum()), int((1 - labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise InputError("AUROC needs both ID and OOD samples")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _tie_groups(scores, labels):
    """True/false positive counts after each distinct threshold, descending."""
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return tp, fp


def aupr(scores, labels):
    """Area under precision-recall (OOD positive), step-wise over tie-grouped thresholds."""
    scores, labels = _split(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise InputError("AUPR needs at least one OOD sample")
    tp, fp = _tie_groups(scores, labels)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def fpr_at_95_tpr(scores, labels, tpr=0.95):
    """FPR at the highest threshold whose TPR (OOD positive) reaches ``tpr``."""
    scores, labels = _split(scores, labels)
    n_pos, n_neg = int(labels.sum()), int((1 - labels).sum())
    if n_pos == 0:
        raise InputError("FPR95 needs at least one OOD sample")
    if n_neg == 0:
        return 0.0
    tp, fp = _tie_groups(scores, labels)
    k = int(np.flatnonzero(tp / n_pos >= tpr - 1e-12)[0])
    return float(fp[k] / n_neg)


def metric_report(scores, labels, tag="standard"):
    labels = np.asarray(labels)
    return MetricReport(auroc(scores, labels), aupr(scores, labels), fpr_at_95_tpr(scores, labels),
                        int((labels == 0).sum()), int((labels == 1).sum()), tag)


# -------------------------------------------------------------- evaluation

def evaluate(teacher, student, splits, with_head=True, noise=None, score_path=None):
    """Standard (main style) and robust (shifted style) reports, plus optional far-OOD noise."""
    for name in ("test_main", "test_shifted"):
        if getattr(splits, name, None) is None:
            raise InputError(f"split {name} missing")
    rows = []
    reports = {}
    for tag, split in (("standard", splits.test_main), ("robust", splits.test_shifted)):
        sc = ood_scores(teacher, student, split.images, with_head)
        reports[tag] = metric_report(sc, split.labels, tag)
        dom = "main" if tag == "standard" else "shifted"
        rows += [(f"{dom}-{i}", s, int(l), dom) for i, (s, l) in enumerate(zip(sc, split.labels))]
    if noise is not None:
        main = splits.test_main
        id_imgs = main.images[main.labels == scm_data.ID]
        sc_id = ood_scores(teacher, student, id_imgs, with_head)
        sc_noise = ood_scores(teacher, student, noise, with_head)
        reports["far_ood"] = metric_report(np.r_[sc_id, sc_noise],
                                           np.r_[np.zeros(len(sc_id)), np.ones(len(sc_noise))].astype(int),
                                           "far_ood")
        rows += [(f"noise-{i}", s, 1, "noise") for i, s in enumerate(sc_noise)]
    if score_path is not None:
        write_scores(score_path, rows)
    return reports


def write_scores(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "score", "label", "domain"])
        for sid, s, label, dom in rows:
            w.writerow([sid, repr(float(s)), "ood" if label == 1 else "id", dom])


def read_scores(path):
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{p} not found")
    with open(p, newline="") as fh:
        return [(r["id"], float(r["score"]), 1 if r["label"] == "ood" else 0, r["domain"])
                for r in csv.DictReader(fh, delimiter="\t")]


def reports_from_scores(path):
    """Recompute metric reports from a dumped ``scores.tsv``."""
    rows = read_scores(path)
    out = {}
    by_dom = {}
    for _, s, label, dom in rows:
        by_dom.setdefault(dom, []).append((s, label))
    for dom, tag in (("main", "standard"), ("shifted", "robust")):
        if dom in by_dom:
            s, l = map(np.asarray, zip(*by_dom[dom]))
            out[tag] = metric_report(s, l, tag)
    if "noise" in by_dom:
        id_main = [(s, l) for s, l in by_dom["main"] if l == 0]
        s, l = map(np.asarray, zip(*(id_main + by_dom["noise"])))
        out["far_ood"] = metric_report(s, l, "far_ood")
    return out


def write_reports(reports, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "metrics.json").write_text(json.dumps({k: v.as_dict() for k, v in reports.items()}, indent=2))
    with open(d / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tag", "auroc", "aupr", "fpr95", "n_id", "n_ood"])
        for r in reports.values():
            w.writerow([r.tag, r.auroc, r.aupr, r.fpr95, r.n_id, r.n_ood])


# ------------------------------------------------------ gap diagnostic

# Real-OOD core distribution over cross arm-width bins (thin arms likely).
REAL_OOD_BINS = np.array([0.30, 0.25, 0.18, 0.12, 0.08, 0.05, 0.02, 0.0])


def core_distance(p, q):
    """Discrete l2 distance between two core-latent distributions."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    return float(np.sqrt(np.sum((p - q) ** 2)))


def aood_bins(severity, real=REAL_OOD_BINS):
    """A-OOD core distribution at ``severity`` in [0, 1]: mass moves to the far end of the bins."""
    far = real[::-1]
    return (1.0 - severity) * real + severity * far


def _render_set(rng, bins_p, count, cfg, label_shape):
    imgs = []
    for _ in range(count):
        core, style, _, _ = scm_data.sample_latents(rng, 0.0, scm_data.MAIN)
        core["shape"] = label_shape
        if bins_p is not None:
            core["bin"] = int(rng.choice(len(bins_p), p=bins_p))
        imgs.append(scm_data.render(core, style, scm_data.MAIN, cfg))
    return np.stack(imgs).reshape(count, -1)


def _bce(probe, x, y):
    p = np.clip(probe.predict_proba(x)[:, 1], 1e-7, 1 - 1e-7)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def theorem1_diagnostic(severities=(0.0, 0.25, 0.5, 0.75, 1.0), n=300, seed=0, size=32):
    """Rows of (severity, core_distance, eval_gap).

    For each severity a logistic probe (binary cross-entropy) is fit on ID
    versus A-OOD images; ``eval_gap`` is |loss on ID vs real OOD - loss on
    held-out ID vs A-OOD|.
    """
    from sklearn.linear_model import LogisticRegression

    severities = list(severities)
    if len(severities) < 2:
        raise InputError("the diagnostic needs at least two severities")
    cfg = scm_data.ScmConfig(size=size, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 404]))
    id_train = _render_set(rng, None, n, cfg, scm_data.ID_SHAPE)
    id_test = _render_set(rng, None, n, cfg, scm_data.ID_SHAPE)
    real = _render_set(rng, REAL_OOD_BINS, n, cfg, scm_data.OOD_SHAPE)
    y = np.r_[np.zeros(n), np.ones(n)]
    rows = []
    for sev in severities:
        p_aood = aood_bins(sev)
        srng = np.random.default_rng(np.random.SeedSequence([seed, 405, int(round(sev * 1000))]))
        a_train = _render_set(srng, p_aood, n, cfg, scm_data.OOD_SHAPE)
        a_test = _render_set(srng, p_aood, n, cfg, scm_data.OOD_SHAPE)
        probe = LogisticRegression(C=0.05, max_iter=2000)
        probe.fit(np.r_[id_train, a_train], y)
        gap = abs(_bce(probe, np.r_[id_test, real], y) - _bce(probe, np.r_[id_test, a_test], y))
        rows.append((float(sev), core_distance(p_aood, REAL_OOD_BINS), gap))
    return rows
