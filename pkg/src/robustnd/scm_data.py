"""Synthetic causal style-shift benchmark.

A hidden confounder U ~ Uniform[0, 1] feeds both the core latent C (which
decides the concept, and hence the ID/OOD label) and the style latent E
(background hue, texture, brightness)::

    c = s * U + (1 - s) * V_c      label = OOD if c > 0.5 else ID
    e = s * U + (1 - s) * V_e

with ``s = confounder_strength``. The image is rendered as a parametric
shape (core) on a parametric background (style). The main and shifted
domains use disjoint hue bands and different texture families; the shifted
domain also runs its hue/texture mapping in the opposite direction, so
the style cue learned on the main domain points the wrong way there.

All images are quantized to 8-bit levels so PNG round-trips are exact.
"""
from __future__ import annotations

import colorsys
import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, MissingArtifact

MAIN, SHIFTED = "main", "shifted"
ID, OOD = 0, 1
EXPOSURES = {"100:0": 0.0, "95:5": 0.05, "90:10": 0.10, "80:20": 0.20}

ID_SHAPE, OOD_SHAPE = "ellipse", "cross"
AUX_SHAPES = ("triangle", "square", "ring", "diamond")
N_CORE_BINS = 8


@dataclass
class ScmConfig:
    size: int = 32
    confounder_strength: float = 0.9
    train_id: int = 2000
    exposure: str = "95:5"
    shifted_pool: int | None = None  # defaults to 20% of train_id
    test_id: int = 300
    test_ood: int = 300
    aux_per_class: int = 300
    main_hue: tuple = (0.0, 0.30)
    shifted_hue: tuple = (0.50, 0.80)
    texture_amp: float = 0.12
    fg_color: tuple = (0.95, 0.92, 0.85)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.confounder_strength <= 1.0:
            raise InputError("confounder_strength must lie in [0, 1]")
        for name in ("train_id", "test_id", "test_ood"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")
        if self.exposure not in EXPOSURES:
            raise InputError(f"exposure must be one of {sorted(EXPOSURES)}")
        self.main_hue = tuple(self.main_hue)
        self.shifted_hue = tuple(self.shifted_hue)
        self.fg_color = tuple(self.fg_color)
        lo_a, hi_a = self.main_hue
        lo_b, hi_b = self.shifted_hue
        if not (hi_a <= lo_b or hi_b <= lo_a):
            raise InputError("main and shifted hue bands must be disjoint")

    @property
    def pool_shifted(self):
        return self.shifted_pool if self.shifted_pool is not None else int(round(0.2 * self.train_id))


@dataclass
class ScmSample:
    core: dict
    style: dict
    u: float
    label: int
    domain: str
    seed: tuple
    image: np.ndarray = field(repr=False, default=None)


@dataclass
class Split:
    images: np.ndarray  # (N, 3, H, W) float32, 8-bit levels
    labels: np.ndarray  # 0 = ID, 1 = OOD (class index for the aux split)
    domains: np.ndarray  # 0 = main, 1 = shifted
    seeds: list
    latents: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        lat = [self.latents[i] for i in idx] if self.latents else []
        return Split(self.images[idx], self.labels[idx], self.domains[idx], [self.seeds[i] for i in idx], lat)


@dataclass
class DatasetSplits:
    train: Split
    test_main: Split
    test_shifted: Split
    aux_pretrain: Split
    config: ScmConfig = None

    def items(self):
        return [("train", self.train), ("test_main", self.test_main),
                ("test_shifted", self.test_shifted), ("aux_pretrain", self.aux_pretrain)]


# ------------------------------------------------------------------ latents

def sample_latents(rng, strength, domain, want=None):
    """Draw (core, style, U) from the SCM. ``want`` forces the label by rejection."""
    while True:
        u = rng.uniform()
        c = strength * u + (1 - strength) * rng.uniform()
        e = strength * u + (1 - strength) * rng.uniform()
        label = OOD if c > 0.5 else ID
        # The remaining draws are made on every attempt so that the stream
        # position does not depend on acceptance.
        core = {
            "shape": OOD_SHAPE if label == OOD else ID_SHAPE,
            "cx": rng.uniform(-3, 3), "cy": rng.uniform(-3, 3),
            "scale": rng.uniform(0.8, 1.0), "aspect": rng.uniform(0.55, 0.9),
            "angle": rng.uniform(0, np.pi),
            "bin": int(rng.integers(N_CORE_BINS)),
            "tint": rng.uniform(-0.05, 0.05),
        }
        style = {"e": e, "phase": rng.uniform(0, 2 * np.pi), "orient": rng.uniform(0, np.pi),
                 "jitter": rng.uniform(-0.03, 0.03)}
        if want is None or label == want:
            return core, style, u, label


# ---------------------------------------------------------------- rendering

def _grid(size):
    r = np.arange(size) - (size - 1) / 2.0
    return np.meshgrid(r, r, indexing="ij")


def _rotate(y, x, cx, cy, angle):
    y, x = y - cy, x - cx
    ca, sa = np.cos(angle), np.sin(angle)
    return ca * y - sa * x, sa * y + ca * x


def arm_halfwidth(bin_, size):
    # Cross arm half-width grows with the core bin: thin crosses at 0,
    # nearly square blocks at the top bin.
    return size * (0.05 + 0.035 * bin_)


def shape_coverage(core, size):
    """Soft [0, 1] coverage of the foreground shape."""
    y, x = _grid(size)
    u, v = _rotate(y, x, core["cy"], core["cx"], core["angle"])
    s = core["scale"] * size
    kind = core["shape"]
    if kind == "ellipse":
        a, b = 0.36 * s, 0.36 * s * core["aspect"]
        d = (np.sqrt((u / a) ** 2 + (v / b) ** 2) - 1.0) * min(a, b)
    elif kind == "cross":
        arm, t = 0.40 * s, arm_halfwidth(core["bin"], size)
        d1 = np.maximum(np.abs(u) - arm, np.abs(v) - t)
        d2 = np.maximum(np.abs(u) - t, np.abs(v) - arm)
        d = np.minimum(d1, d2)
    elif kind == "triangle":
        r = 0.36 * s
        d = np.full_like(u, -np.inf)
        for k in range(3):
            th = 2 * np.pi * k / 3
            d = np.maximum(d, np.cos(th) * u + np.sin(th) * v - r / 2)
    elif kind == "square":
        r = 0.28 * s
        d = np.maximum(np.abs(u), np.abs(v)) - r
    elif kind == "ring":
        r = 0.32 * s
        d = np.abs(np.sqrt(u ** 2 + v ** 2) - r) - 0.08 * s
    elif kind == "diamond":
        r = 0.38 * s
        d = (np.abs(u) + np.abs(v * 1.4) - r) / 1.4
    else:
        raise InputError(f"unknown shape {kind!r}")
    return 1.0 / (1.0 + np.exp(np.clip(d * 3.0, -50, 50)))


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def background(style, domain, cfg: ScmConfig):
    size = cfg.size
    e = float(np.clip(style["e"], 0.0, 1.0))
    y, x = _grid(size)
    along = np.cos(style["orient"]) * x + np.sin(style["orient"]) * y
    if domain == MAIN:
        lo, hi = cfg.main_hue
        hue = lo + e * (hi - lo)
        freq = 0.06 + 0.08 * e
        tex = np.sin(2 * np.pi * freq * along + style["phase"])
        val = 0.45 + 0.15 * e
    elif domain == SHIFTED:
        lo, hi = cfg.shifted_hue
        hue = hi - e * (hi - lo)
        freq = 0.30 - 0.08 * e
        across = -np.sin(style["orient"]) * x + np.cos(style["orient"]) * y
        tex = np.sign(np.sin(2 * np.pi * freq * along + style["phase"]) * np.sin(2 * np.pi * freq * across))
        val = 0.60 - 0.15 * e
    else:
        raise InputError(f"unknown domain {domain!r}")
    base = _hsv(hue, 0.75, val + style["jitter"])
    return np.clip(base[:, None, None] * (1.0 + cfg.texture_amp * tex[None]), 0, 1)


def render(core, style, domain, cfg: ScmConfig):
    """psi(core, style): composite the shape over the background, quantized to 8 bits."""
    bg = background(style, domain, cfg)
    cov = shape_coverage(core, cfg.size)[None]
    fg = np.clip(np.asarray(cfg.fg_color) + core["tint"], 0, 1)[:, None, None]
    img = cov * fg + (1 - cov) * bg
    return quantize(img)


def quantize(img):
    return np.round(np.clip(img, 0, 1) * 255.0).astype(np.float32) / np.float32(255.0)


# --------------------------------------------------------------- generation

def _seed_stream(seed, *key):
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


_DOMAIN_KEY = {MAIN: 0, SHIFTED: 1}
_PURPOSE_KEY = {"train": 0, "test": 1, "aux": 2}


def _draw_split(cfg, domain, purpose, label, count, offset=0):
    imgs, lats, seeds = [], [], []
    for k in range(offset, offset + count):
        key = (_PURPOSE_KEY[purpose], _DOMAIN_KEY[domain], label, k)
        rng = _seed_stream(cfg.seed, *key)
        core, style, u, lab = sample_latents(rng, cfg.confounder_strength, domain, want=label)
        imgs.append(render(core, style, domain, cfg))
        lats.append(ScmSample(core, style, u, lab, domain, (cfg.seed, *key)))
        seeds.append("-".join(str(v) for v in (cfg.seed, *key)))
    dom = np.full(count, _DOMAIN_KEY[domain], dtype=np.int64)
    return Split(np.stack(imgs) if imgs else np.zeros((0, 3, cfg.size, cfg.size), np.float32),
                 np.full(count, label, dtype=np.int64), dom, seeds, lats)


def concat(*splits):
    return Split(np.concatenate([s.images for s in splits]), np.concatenate([s.labels for s in splits]),
                 np.concatenate([s.domains for s in splits]), sum((s.seeds for s in splits), []),
                 sum((s.latents for s in splits), []))


def mix_exposure(main_ids, shifted_ids, ratio, seed=0, total=None):
    """Select ``total`` training ids, a ``ratio`` share of them from the shifted pool.

    Returns main picks followed by shifted picks; the selection is a pure
    function of ``seed``.
    """
    if ratio not in EXPOSURES:
        raise InputError(f"ratio must be one of {sorted(EXPOSURES)}, got {ratio!r}")
    main_ids, shifted_ids = np.asarray(main_ids), np.asarray(shifted_ids)
    total = len(main_ids) if total is None else int(total)
    n_shift = int(round(total * EXPOSURES[ratio]))
    n_main = total - n_shift
    if n_main > len(main_ids) or n_shift > len(shifted_ids):
        raise InputError(f"exposure {ratio} of {total} needs {n_main} main / {n_shift} shifted ids; "
                         f"pools hold {len(main_ids)} / {len(shifted_ids)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    pick_m = np.sort(rng.choice(len(main_ids), n_main, replace=False))
    pick_s = np.sort(rng.choice(len(shifted_ids), n_shift, replace=False))
    return np.concatenate([main_ids[pick_m], shifted_ids[pick_s]])


def generate_aux(cfg: ScmConfig):
    """Auxiliary 4-class shape split for teacher pretraining (random hue, either texture)."""
    imgs, labels, seeds = [], [], []
    for cls, shape in enumerate(AUX_SHAPES):
        for k in range(cfg.aux_per_class):
            key = (_PURPOSE_KEY["aux"], cls, k)
            rng = _seed_stream(cfg.seed, *key)
            core, style, _, _ = sample_latents(rng, 0.0, MAIN)
            core["shape"] = shape
            domain = MAIN if rng.uniform() < 0.5 else SHIFTED
            # Hue anywhere on the wheel: aux styles are not tied to either domain.
            local = ScmConfig(size=cfg.size, main_hue=(0.0, 0.5), shifted_hue=(0.5, 1.0),
                              texture_amp=cfg.texture_amp, fg_color=cfg.fg_color)
            imgs.append(render(core, style, domain, local))
            labels.append(cls)
            seeds.append("-".join(str(v) for v in (cfg.seed, *key)))
    n = len(labels)
    return Split(np.stack(imgs), np.asarray(labels, dtype=np.int64), np.zeros(n, dtype=np.int64), seeds)


def generate_dataset(cfg: ScmConfig) -> DatasetSplits:
    n_shift = int(round(cfg.train_id * EXPOSURES[cfg.exposure]))
    if n_shift > cfg.pool_shifted:
        raise InputError(f"exposure {cfg.exposure} needs {n_shift} shifted samples, pool is {cfg.pool_shifted}")
    main_pool = _draw_split(cfg, MAIN, "train", ID, cfg.train_id)
    shift_pool = _draw_split(cfg, SHIFTED, "train", ID, cfg.pool_shifted)
    pool = concat(main_pool, shift_pool)
    ids = mix_exposure(np.arange(len(main_pool)), np.arange(len(main_pool), len(pool)),
                       cfg.exposure, seed=cfg.seed, total=cfg.train_id)
    train = pool.subset(ids)
    test_main = concat(_draw_split(cfg, MAIN, "test", ID, cfg.test_id),
                       _draw_split(cfg, MAIN, "test", OOD, cfg.test_ood))
    test_shifted = concat(_draw_split(cfg, SHIFTED, "test", ID, cfg.test_id),
                          _draw_split(cfg, SHIFTED, "test", OOD, cfg.test_ood))
    return DatasetSplits(train, test_main, test_shifted, generate_aux(cfg), cfg)


def swap_style(sample: ScmSample, style, domain, cfg: ScmConfig):
    """Re-render ``sample`` with another style latent; the label is untouched."""
    img = render(sample.core, style, domain, cfg)
    return ScmSample(sample.core, style, sample.u, sample.label, domain, sample.seed, img)


def noise_ood(count, shape, seed, mean=0.5, std=0.25):
    """Pixel-wise Gaussian noise images clipped to [0, 1] (far-OOD sanity set)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    return np.clip(rng.normal(mean, std, (count, *shape)), 0, 1).astype(np.float32)


def raw_style_probe_data(strength, count, seed=0):
    """Unfiltered SCM draws (ID and OOD mixed): style summaries and labels."""
    rng = _seed_stream(seed, 5)
    xs, ys = [], []
    for _ in range(count):
        core, style, _, label = sample_latents(rng, strength, MAIN)
        xs.append([style["e"]])
        ys.append(label)
    return np.asarray(xs), np.asarray(ys)


# ------------------------------------------------------------------ on disk

def write_dataset(splits: DatasetSplits, root):
    from PIL import Image

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for name, split in splits.items():
        for i in range(len(split)):
            rel = f"images/{name}_{i:05d}.png"
            arr = np.round(split.images[i].transpose(1, 2, 0) * 255).astype(np.uint8)
            Image.fromarray(arr, mode="RGB").save(root / rel)
            if name == "aux_pretrain":
                label = str(int(split.labels[i]))
            else:
                label = "ood" if split.labels[i] == OOD else "id"
            domain = SHIFTED if split.domains[i] == 1 else MAIN
            rows.append((rel, name, label, domain, split.seeds[i]))
    with open(root / "manifest.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["path", "split", "label", "domain", "seed"])
        w.writerows(rows)
    if splits.config is not None:
        cfg = asdict(splits.config)
        (root / "scm_config.txt").write_text(
            "".join(f"{k} = {json.dumps(v)}\n" for k, v in cfg.items()))


def read_dataset(root) -> DatasetSplits:
    from PIL import Image

    root = Path(root)
    manifest = root / "manifest.tsv"
    if not manifest.exists():
        raise MissingArtifact(f"{manifest} not found")
    groups = {"train": [], "test_main": [], "test_shifted": [], "aux_pretrain": []}
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            groups[row["split"]].append(row)
    out = {}
    for name, rows in groups.items():
        imgs = [np.asarray(Image.open(root / r["path"]).convert("RGB"), dtype=np.float32).transpose(2, 0, 1)
                / np.float32(255.0) for r in rows]
        if name == "aux_pretrain":
            labels = [int(r["label"]) for r in rows]
        else:
            labels = [OOD if r["label"] == "ood" else ID for r in rows]
        out[name] = Split(np.stack(imgs).astype(np.float32) if imgs else np.zeros((0, 3, 1, 1), np.float32),
                          np.asarray(labels, dtype=np.int64),
                          np.asarray([1 if r["domain"] == SHIFTED else 0 for r in rows], dtype=np.int64),
                          [r["seed"] for r in rows])
    return DatasetSplits(out["train"], out["test_main"], out["test_shifted"], out["aux_pretrain"])
