"""Command-line entry point: ``python -m robustnd <subcommand> [-c config] [key=value ...]``.

Exit codes: 0 success, 2 config error, 3 training failure, 4 missing artifact.
``RND_OUT`` overrides the output root.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import config as C
from . import eval as E
from . import experiments as X
from . import nn_core, ood_synth, scm_data, trainer
from . import transforms as T
from .errors import ConfigError, InputError, MissingArtifact, TrainingFailure
from .saliency import style_agnostic_saliency

log = logging.getLogger("robustnd")

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN, EXIT_MISSING = 0, 2, 3, 4

SWEEPS = {
    "pipeline": list(X.PIPELINE_SETUPS),
    "loss": list(X.LOSS_SETUPS),
    "mask": [f"mask:{k}" for k in X.MASK_SWEEP],
    "strategy": [f"strategy:{k}" for k in X.STRATEGIES],
    "exposure": [f"exposure:{k}" for k in scm_data.EXPOSURES],
}


# ------------------------------------------------------------------ helpers

def _workspace(cfg: C.ExperimentConfig):
    root = cfg.output_root()
    ws = X.Workspace(root / "teacher", cfg.pretrain_config())
    if cfg.dataset.dir:
        ws.put_data(cfg.scm(), scm_data.read_dataset(cfg.dataset.dir))
    return ws


def _provenance(cfg: C.ExperimentConfig, directory, **extra):
    """Normalized config plus the seeds in use, so a run directory is self-describing."""
    d = Path(directory)
    C.write_echo(cfg, d)
    seeds = {"seed": cfg.seed, "data_seed": cfg.seed, "student_init_seed": cfg.seed, "teacher_head_seed": cfg.seed,
             "teacher_pretrain_seed": cfg.seed,
             "sample_streams": "SeedSequence([seed, epoch, index, purpose])", **extra}
    (d / "seeds.txt").write_text("".join(f"{k} = {json.dumps(v)}\n" for k, v in seeds.items()))


def _teacher(ws, cfg: C.ExperimentConfig):
    """Teacher weights path, pretraining on first use; the directory gets provenance once."""
    path = ws.teacher_path(cfg.scm())
    if not (path.parent / "config.txt").exists():
        _provenance(cfg, path.parent)
    return path


def _row_config(cfg: C.ExperimentConfig, setup):
    """Experiment config for one ablation row (setup names as in experiments, plus exposure:<ratio>)."""
    cfg = C.parse_text(C.dump(cfg))
    if setup.startswith("exposure:"):
        cfg.dataset.exposure = setup[9:]
        return C.validate(cfg)
    tc = X.setup_config(cfg.train_config(), setup)
    cfg.ood.strategy = tc.ood_strategy
    cfg.ood.alpha_range = list(tc.alpha_range)
    cfg.loss.variant = tc.loss_variant
    cfg.loss.use_ce = tc.use_ce
    cfg.loss.use_heads = tc.use_heads
    return C.validate(cfg)


def _safe(name):
    return name.replace(":", "_").replace("/", "_")


# -------------------------------------------------------------- subcommands

def cmd_gen_data(cfg, args):
    out = cfg.output_root() / "data"
    splits = scm_data.generate_dataset(cfg.scm())
    scm_data.write_dataset(splits, out)
    _provenance(cfg, out)
    print(f"wrote {sum(len(s) for _, s in splits.items())} images to {out}")


def cmd_pretrain(cfg, args):
    ws = _workspace(cfg)
    path = _teacher(ws, cfg)
    print(f"teacher weights: {path}")


def _train_dir(cfg, args):
    return Path(args.run) if getattr(args, "run", None) else cfg.output_root() / "train"


def cmd_train(cfg, args):
    ws = _workspace(cfg)
    scm, tc = cfg.scm(), cfg.train_config()
    out = _train_dir(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    _provenance(cfg, out, config_hash=tc.digest())
    data = ws.data(scm)
    teacher = nn_core.build_teacher(_teacher(ws, cfg), tc.encoder, head_seed=tc.seed)
    cache = ws.saliency(scm, teacher, tc) if tc.ood_strategy == "core" else None
    state = None
    if (out / "checkpoint.bin").exists():
        state = trainer.load_checkpoint(out, teacher, tc)
        print(f"resuming from epoch {state.epoch}")
    state = trainer.train(data.train.images, teacher, tc, cache=cache, state=state,
                          checkpoint_dir=out if tc.checkpoint_every else None)
    trainer.save_checkpoint(state, tc, out)
    print(f"trained {state.epoch} epochs; checkpoint in {out}")


def cmd_eval(cfg, args):
    out = _train_dir(cfg, args)
    if not (out / "checkpoint.bin").exists():
        raise MissingArtifact(f"no trained run in {out}")
    if (out / "config.txt").exists():
        cfg = C.load(out / "config.txt", args.overrides)
    ws = _workspace(cfg)
    scm, tc = cfg.scm(), cfg.train_config()
    teacher = nn_core.build_teacher(_teacher(ws, cfg), tc.encoder, head_seed=tc.seed)
    state = trainer.load_checkpoint(out, teacher, tc)
    data = ws.data(scm)
    noise = None
    if cfg.eval.noise:
        noise = scm_data.noise_ood(len(data.test_main) // 2, data.train.images.shape[1:], cfg.seed,
                                   cfg.eval.noise_mean, cfg.eval.noise_std)
    reports = E.evaluate(state.teacher, state.student, data, tc.use_heads, noise, out / "scores.tsv")
    E.write_reports(reports, out)
    for r in reports.values():
        print(f"{r.tag:9s} AUROC {r.auroc:.4f}  AUPR {r.aupr:.4f}  FPR95 {r.fpr95:.4f}")


def cmd_craft_preview(cfg, args):
    from PIL import Image

    ws = _workspace(cfg)
    scm, tc = cfg.scm(), cfg.train_config()
    out = cfg.output_root() / "preview"
    out.mkdir(parents=True, exist_ok=True)
    _provenance(cfg, out)
    data = ws.data(scm)
    teacher = nn_core.build_teacher(_teacher(ws, cfg), tc.encoder, head_seed=tc.seed)
    model = nn_core.saliency_model(teacher)
    n = min(args.count, len(data.train))

    def png(arr, path):
        arr = np.asarray(arr)
        if arr.ndim == 3:
            arr = arr.transpose(1, 2, 0)
        Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(path)

    for i in range(n):
        img = data.train.images[i]
        rng = trainer.sample_rng(tc.seed, 0, i, trainer._CRAFT)
        sm = style_agnostic_saliency(
            model, img, T.sample_light(trainer.sample_rng(tc.seed, 0, i, trainer._SALIENCY), tc.light_kinds))
        crafted, cm = ood_synth.craft_ood(img, None, rng, saliency=sm, alpha_range=tc.alpha_range,
                                          hard_count=tc.hard_count, hard_kinds=tc.hard_kinds)
        png(img, out / f"{i:03d}_input.png")
        png(sm, out / f"{i:03d}_saliency.png")
        png(crafted, out / f"{i:03d}_crafted.png")
        png(cm.mask.astype(np.float32), out / f"{i:03d}_mask.png")
    print(f"wrote {n} preview triplets to {out}")


def run_row(cfg, setup, root):
    """One ablation row in its own directory; returns its metric reports."""
    rc = _row_config(cfg, setup)
    d = Path(root) / _safe(setup)
    d.mkdir(parents=True, exist_ok=True)
    _provenance(rc, d, setup=setup, config_hash=rc.train_config().digest())
    ws = _workspace(rc)
    _teacher(ws, rc)
    res = X.run_once(ws, rc.scm(), rc.train_config(), d, noise=rc.eval.noise)
    return res["reports"]


def cmd_ablate(cfg, args):
    setups = []
    for part in (args.setups or "").split(","):
        part = part.strip()
        if part:
            setups += SWEEPS.get(part, [part])
    if not setups:
        setups = SWEEPS["pipeline"]
    for s in setups:
        base = s.split(":")[0]
        known = s in X.PIPELINE_SETUPS or s in X.LOSS_SETUPS or (
            base == "mask" and s[5:] in X.MASK_SWEEP) or (
            base == "strategy" and s[9:] in X.STRATEGIES) or (
            base == "exposure" and s[9:] in scm_data.EXPOSURES)
        if not known:
            raise ConfigError(f"unknown setup {s!r}", key="setups")
    root = cfg.output_root() / "ablate"
    rows = []
    for s in setups:
        reports = run_row(cfg, s, root)
        rows.append((s, reports))
        print(f"{s:18s} standard {reports['standard'].auroc:.4f}  robust {reports['robust'].auroc:.4f}")
    _write_table(rows, root / "ablation.csv")


def cmd_theory_check(cfg, args):
    out = cfg.output_root() / "theory"
    out.mkdir(parents=True, exist_ok=True)
    _provenance(cfg, out)
    rows = E.theorem1_diagnostic(n=args.n, seed=cfg.seed, size=cfg.dataset.size)
    rho = spearmanr([r[1] for r in rows], [r[2] for r in rows]).statistic
    with open(out / "theory.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["severity", "core_distance", "eval_gap"])
        w.writerows(rows)
    (out / "spearman.txt").write_text(f"{rho!r}\n")
    for sev, dist, gap in rows:
        print(f"severity {sev:.2f}  distance {dist:.4f}  gap {gap:.4f}")
    print(f"spearman {rho:.3f}")


def cmd_report(cfg, args):
    root = Path(args.runs) if args.runs else cfg.output_root() / "ablate"
    dirs = sorted(p.parent for p in root.glob("*/scores.tsv"))
    if (root / "scores.tsv").exists():
        dirs.insert(0, root)
    if not dirs:
        raise MissingArtifact(f"no scores.tsv under {root}")
    rows = [(d.name, E.reports_from_scores(d / "scores.tsv")) for d in dirs]
    out = cfg.output_root() / "report"
    out.mkdir(parents=True, exist_ok=True)
    _write_table(rows, out / "report.csv")
    (out / "report.md").write_text(markdown_table(rows))
    (out / "report.svg").write_text(svg_bars(rows))
    print(markdown_table(rows), end="")


# ------------------------------------------------------------------ reports

def _write_table(rows, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "tag", "auroc", "aupr", "fpr95", "n_id", "n_ood"])
        for name, reports in rows:
            for r in reports.values():
                w.writerow([name, r.tag, repr(r.auroc), repr(r.aupr), repr(r.fpr95), r.n_id, r.n_ood])


def markdown_table(rows):
    lines = ["| Run | Standard | Robust |", "|---|---|---|"]
    for name, rep in rows:
        std = rep.get("standard")
        rob = rep.get("robust")
        lines.append(f"| {name} | {100 * std.auroc:.1f} | {100 * rob.auroc:.1f} |" if std and rob
                     else f"| {name} | - | - |")
    return "\n".join(lines) + "\n"


def svg_bars(rows, width=640, height=320):
    """Grouped Standard/Robust AUROC bars, hand-written SVG."""
    pad, top, bottom = 40, 20, 50
    plot_h = height - top - bottom
    n = max(len(rows), 1)
    group = (width - 2 * pad) / n
    bar = group * 0.35
    colors = {"standard": "#4c72b0", "robust": "#dd8452"}
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="11">',
             f'<line x1="{pad}" y1="{top + plot_h}" x2="{width - pad}" y2="{top + plot_h}" stroke="black"/>',
             f'<line x1="{pad}" y1="{top}" x2="{pad}" y2="{top + plot_h}" stroke="black"/>']
    for t in (0.0, 0.5, 1.0):
        y = top + plot_h * (1 - t)
        parts.append(f'<text x="{pad - 4}" y="{y + 4:.1f}" text-anchor="end">{t:.1f}</text>')
    for i, (name, rep) in enumerate(rows):
        x0 = pad + i * group + group * 0.15
        for j, tag in enumerate(("standard", "robust")):
            if tag not in rep:
                continue
            v = rep[tag].auroc
            h = plot_h * v
            parts.append(f'<rect x="{x0 + j * bar:.1f}" y="{top + plot_h - h:.1f}" width="{bar:.1f}" '
                         f'height="{h:.1f}" fill="{colors[tag]}"><title>{name} {tag} {v:.3f}</title></rect>')
        parts.append(f'<text x="{x0 + bar:.1f}" y="{top + plot_h + 15}" text-anchor="middle">{name}</text>')
    for j, tag in enumerate(("standard", "robust")):
        x = width - pad - 150 + j * 75
        parts.append(f'<rect x="{x}" y="{height - 18}" width="10" height="10" fill="{colors[tag]}"/>')
        parts.append(f'<text x="{x + 14}" y="{height - 9}">{tag.capitalize()}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# --------------------------------------------------------------------- main

COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "craft-preview": cmd_craft_preview,
    "ablate": cmd_ablate,
    "theory-check": cmd_theory_check,
    "report": cmd_report,
}


def build_parser():
    p = argparse.ArgumentParser(prog="robustnd", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("-c", "--config", help="config file (flat section.key = value lines)")
    p.add_argument("--run", help="training run directory (train/eval)")
    p.add_argument("--setups", help="comma list of setups or sweep names for ablate: "
                                    + ", ".join(SWEEPS))
    p.add_argument("--runs", help="directory of run subdirectories for report")
    p.add_argument("--count", type=int, default=8, help="craft-preview: number of triplets")
    p.add_argument("--n", type=int, default=300, help="theory-check: samples per set")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("overrides", nargs="*", help="section.key=value overrides")
    return p


def main(argv=None):
    args = build_parser().parse_intermixed_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.load(args.config, args.overrides) if args.config else C.parse_text("", args.overrides)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, InputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingFailure as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
