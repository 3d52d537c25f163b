"""Pipeline setups and the end-to-end run used by the CLI and the acceptance suite."""
from __future__ import annotations

import dataclasses
import logging
import time
from pathlib import Path

import numpy as np

from . import eval as E
from . import nn_core, scm_data, trainer

log = logging.getLogger(__name__)

# Component switches per pipeline setup (A-OOD, core estimation, CE, OCL, TS).
PIPELINE_SETUPS = {
    "A": dict(ood_strategy="none", loss_variant="ts", use_ce=False, use_heads=False),
    "B": dict(ood_strategy="core", loss_variant="ocl", use_ce=False, use_heads=False),
    "C": dict(ood_strategy="core", loss_variant="ts", use_ce=True, use_heads=True),
    "D": dict(ood_strategy="random_region", loss_variant="ocl", use_ce=True, use_heads=True),
    "E": dict(ood_strategy="core", loss_variant="ocl", use_ce=True, use_heads=True),
}

# Loss variants compared with everything else fixed to setup E.
LOSS_SETUPS = {
    "G-A": dict(loss_variant="g_setup_a"),
    "G-B": dict(loss_variant="g_setup_b"),
    "G-C": dict(loss_variant="ocl"),
    "G-D": dict(loss_variant="g_setup_d"),
}

MASK_SWEEP = {"5-20": (0.05, 0.20), "10-30": (0.10, 0.30), "20-40": (0.20, 0.40),
              "20-50": (0.20, 0.50), "30-50": (0.30, 0.50), "40-70": (0.40, 0.70)}

STRATEGIES = {"core": dict(ood_strategy="core"), "global": dict(ood_strategy="global"),
              "random_region": dict(ood_strategy="random_region")}


def setup_config(base: trainer.TrainConfig, setup, seed=None):
    """``base`` with one named setup's overrides applied."""
    table = {**PIPELINE_SETUPS, **LOSS_SETUPS}
    if setup in table:
        over = dict(table[setup])
    elif setup.startswith("mask:"):
        over = dict(alpha_range=MASK_SWEEP[setup[5:]])
    elif setup.startswith("strategy:"):
        over = dict(STRATEGIES[setup[9:]])
    else:
        raise KeyError(setup)
    if seed is not None:
        over["seed"] = seed
    return dataclasses.replace(base, **over)


class Workspace:
    """Datasets, teacher weights and saliency caches shared by many runs, memoized per key."""

    def __init__(self, root=None, pretrain=None):
        self.root = Path(root) if root else None
        self.pretrain = pretrain or trainer.PretrainConfig()
        self._data = {}
        self._teacher = {}
        self._cache = {}

    def data(self, scm: scm_data.ScmConfig):
        key = repr(scm)
        if key not in self._data:
            self._data[key] = scm_data.generate_dataset(scm)
        return self._data[key]

    def put_data(self, scm: scm_data.ScmConfig, splits):
        """Use ``splits`` (e.g. read from disk) wherever ``scm`` is asked for."""
        self._data[repr(scm)] = splits

    def teacher_path(self, scm: scm_data.ScmConfig):
        """Pretrain once per auxiliary dataset; exposure and confounding don't touch the aux split."""
        key = (scm.seed, scm.aux_per_class, scm.size)
        if key not in self._teacher:
            d = Path(self.root or Path.cwd())
            d.mkdir(parents=True, exist_ok=True)
            path = Path(d) / f"teacher_s{scm.seed}_a{scm.aux_per_class}.bin"
            if not path.exists():
                trainer.pretrain_teacher(self.data(scm).aux_pretrain, self.pretrain, path)
            self._teacher[key] = path
        return self._teacher[key]

    def saliency(self, scm, teacher, cfg: trainer.TrainConfig):
        key = (repr(scm), cfg.seed, cfg.light_kinds)
        if key not in self._cache:
            self._cache[key] = trainer.build_saliency_cache(teacher, self.data(scm).train.images, cfg.seed,
                                                            cfg.light_kinds)
        return self._cache[key]


def run_once(ws: Workspace, scm, cfg: trainer.TrainConfig, out_dir=None, noise=True):
    """Train one configuration and evaluate it. Returns a result dict."""
    t0 = time.time()
    data = ws.data(scm)
    tpath = ws.teacher_path(scm)
    teacher = nn_core.build_teacher(tpath, cfg.encoder, head_seed=cfg.seed)
    cache = ws.saliency(scm, teacher, cfg) if cfg.ood_strategy == "core" else None
    state = trainer.train(data.train.images, teacher, cfg, cache=cache,
                          checkpoint_dir=out_dir if cfg.checkpoint_every else None)
    noise_imgs = scm_data.noise_ood(len(data.test_main) // 2, data.train.images.shape[1:], scm.seed) if noise else None
    score_path = Path(out_dir) / "scores.tsv" if out_dir else None
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    reports = E.evaluate(state.teacher, state.student, data, cfg.use_heads, noise_imgs, score_path)
    if out_dir:
        E.write_reports(reports, out_dir)
    steps = int(np.ceil(len(data.train) / cfg.batch_size))
    return {
        "reports": reports,
        "state": state,
        "seconds": time.time() - t0,
        "epoch_loss": trainer.epoch_means(state.history, steps).tolist(),
    }
