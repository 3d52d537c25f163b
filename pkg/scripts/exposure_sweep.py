"""Robust AUROC of the full method as the shifted-domain share of training data grows.

    python scripts/exposure_sweep.py --seeds 0,1,2 --epochs 20
"""
import argparse
from pathlib import Path

import numpy as np
import torch

from robustnd import experiments as X
from robustnd import scm_data, trainer


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--setup", default="E")
    p.add_argument("--out", default="runs/exposure")
    args = p.parse_args()
    torch.set_num_threads(1)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    ws = X.Workspace(out / "teacher")
    lines = ["exposure\tseed\tstandard\trobust"]
    for exposure in ("100:0", "95:5", "90:10", "80:20"):
        robust = []
        for seed in seeds:
            scm = scm_data.ScmConfig(exposure=exposure, seed=seed)
            cfg = X.setup_config(trainer.TrainConfig(epochs=args.epochs), args.setup, seed=seed)
            r = X.run_once(ws, scm, cfg, noise=False)["reports"]
            robust.append(r["robust"].auroc)
            lines.append(f"{exposure}\t{seed}\t{r['standard'].auroc:.6f}\t{r['robust'].auroc:.6f}")
            print(lines[-1], flush=True)
        print(f"{exposure}: mean robust {np.mean(robust):.4f} (std {np.std(robust):.4f})")
    out.mkdir(parents=True, exist_ok=True)
    (out / "exposure.tsv").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
