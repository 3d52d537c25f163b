"""Seedable light (semantics-preserving) and hard (semantics-destroying) image transforms.

Images are float32 arrays shaped (C, H, W) with values in [0, 1]. A
:class:`TransformSpec` fully determines its output: any randomness a
transform needs (elastic fields, grid offsets) is drawn once at sampling
time and stored in ``params`` as a seed, so ``apply`` is a pure function.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InputError

LIGHT = "light"
HARD = "hard"
MIN_SIDE = 8

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    params: dict = field(default_factory=dict)
    family: str = LIGHT

    def __post_init__(self):
        validate_spec(self)


# (kind -> parameter ranges). Continuous ranges are (lo, hi) tuples,
# discrete choices are lists.
LIGHT_REGISTRY = {
    "color-jitter": {"brightness": (-0.4, 0.4), "contrast": (-0.4, 0.4), "saturation": (-0.4, 0.4)},
    "horizontal-flip": {},
    "grayscale": {},
    "blur": {"sigma": (0.1, 1.0)},
    "small-translate": {"dx": (-0.1, 0.1), "dy": (-0.1, 0.1)},
}

_CHANNEL_PERMS = [p for p in itertools.permutations(range(3)) if p != (0, 1, 2)]
_QUAD_PERMS = [p for p in itertools.permutations(range(4)) if p != (0, 1, 2, 3)]

HARD_REGISTRY = {
    "rotation": {"angle": [90, 180, 270]},
    "elastic-deform": {"alpha": (1.5, 3.0), "sigma": (0.08, 0.15), "seed": (0, 2**31 - 1)},
    "grid-distortion": {"limit": (0.35, 0.6), "steps": [3, 4], "seed": (0, 2**31 - 1)},
    "channel-shuffle": {"perm": _CHANNEL_PERMS},
    "cut-shuffle": {"perm": _QUAD_PERMS},
}

GEOMETRIC_LIGHT = ("horizontal-flip", "small-translate")


def _registry(family):
    if family == LIGHT:
        return LIGHT_REGISTRY
    if family == HARD:
        return HARD_REGISTRY
    raise ConfigError(f"unknown transform family {family!r}")


def validate_spec(spec: TransformSpec):
    reg = _registry(spec.family)
    if spec.kind not in reg:
        raise ConfigError(f"{spec.kind!r} is not a registered {spec.family} transform")
    ranges = reg[spec.kind]
    for name, value in spec.params.items():
        if name not in ranges:
            raise ConfigError(f"unknown parameter {name!r} for {spec.kind}")
        rng = ranges[name]
        if isinstance(rng, list):
            ok = (tuple(value) in rng) if isinstance(value, (list, tuple)) else (value in rng)
            if not ok:
                raise ConfigError(f"{spec.kind}.{name}={value!r} not in {rng}")
        else:
            lo, hi = rng
            if not lo <= value <= hi:
                raise ConfigError(f"{spec.kind}.{name}={value!r} outside [{lo}, {hi}]")


def check_kinds(light=None, hard=None):
    """Validate config-supplied kind lists against the registries."""
    for kinds, reg, fam in ((light, LIGHT_REGISTRY, LIGHT), (hard, HARD_REGISTRY, HARD)):
        if kinds is None:
            continue
        for k in kinds:
            if k not in reg:
                raise ConfigError(f"{k!r} is not a registered {fam} transform", key=f"transforms.{fam}")


def _draw_params(ranges, rng):
    params = {}
    for name, r in ranges.items():
        if isinstance(r, list):
            params[name] = r[int(rng.integers(len(r)))]
        elif name == "seed":
            params[name] = int(rng.integers(r[0], r[1]))
        else:
            params[name] = float(rng.uniform(r[0], r[1]))
    return params


def _sample(family, kinds, rng):
    reg = _registry(family)
    kinds = list(reg) if kinds is None else list(kinds)
    if not kinds:
        raise ConfigError(f"{family} transform registry is empty", key=f"transforms.{family}")
    kind = kinds[int(rng.integers(len(kinds)))]
    return TransformSpec(kind, _draw_params(reg[kind], rng), family)


def sample_light(rng: np.random.Generator, kinds=None) -> TransformSpec:
    """Draw one light transform uniformly over ``kinds`` (default: whole registry)."""
    return _sample(LIGHT, kinds, rng)


def sample_hard_pair(rng: np.random.Generator, kinds=None):
    """Draw two independent hard transforms ``(tau1, tau2)``; kinds may repeat."""
    return _sample(HARD, kinds, rng), _sample(HARD, kinds, rng)


def sample_hard(rng: np.random.Generator, kinds=None) -> TransformSpec:
    return _sample(HARD, kinds, rng)


# ---------------------------------------------------------------- kernels
# Light kernels work on batches (N, C, H, W) with one parameter value per
# sample, so single-image and batched application run the same arithmetic.

def _gray_b(x):
    return np.einsum("c,nchw->nhw", _LUMA, x)[:, None]


def _col(v):
    return np.asarray(v, dtype=np.float64).reshape(-1, 1, 1, 1)


def _color_jitter_b(x, brightness, contrast, saturation):
    # Factors are 1 + m; zero magnitude is the identity.
    out = x * (1.0 + _col(brightness))
    mean = _gray_b(out).mean(axis=(2, 3), keepdims=True)
    out = (out - mean) * (1.0 + _col(contrast)) + mean
    gray = _gray_b(out)
    return gray + (out - gray) * (1.0 + _col(saturation))


def _hflip_b(x):
    return x[:, :, :, ::-1].copy()


def _grayscale_b(x):
    return np.repeat(_gray_b(x), x.shape[1], axis=1)


BLUR_RADIUS = 2


def blur_weights(sigma):
    k = np.arange(-BLUR_RADIUS, BLUR_RADIUS + 1, dtype=np.float64)
    w = np.exp(-(k[None] ** 2) / (2.0 * np.asarray(sigma, dtype=np.float64).reshape(-1, 1) ** 2))
    return w / w.sum(axis=1, keepdims=True)


def _blur_b(x, sigma):
    # Separable 5-tap Gaussian with edge replication.
    w = blur_weights(sigma)
    r = BLUR_RADIUS
    h, wd = x.shape[2:]
    p = np.pad(x, ((0, 0), (0, 0), (r, r), (0, 0)), mode="edge")
    y = sum(w[:, k].reshape(-1, 1, 1, 1) * p[:, :, k:k + h] for k in range(2 * r + 1))
    p = np.pad(y, ((0, 0), (0, 0), (0, 0), (r, r)), mode="edge")
    return sum(w[:, k].reshape(-1, 1, 1, 1) * p[:, :, :, k:k + wd] for k in range(2 * r + 1))


def _shift_index(n, shift):
    # shift: (N,) integers -> (N, n) source indices, edge-clamped.
    return np.clip(np.arange(n)[None] - np.asarray(shift).reshape(-1, 1), 0, n - 1)


def _translate_b(x, dx, dy):
    n, c, h, w = x.shape
    sx = np.array([int(round(v * w)) for v in np.atleast_1d(dx)])
    sy = np.array([int(round(v * h)) for v in np.atleast_1d(dy)])
    rows = _shift_index(h, sy)[:, None, :, None]
    cols = _shift_index(w, sx)[:, None, None, :]
    out = np.take_along_axis(x, np.broadcast_to(rows, (n, c, h, w)), axis=2)
    return np.take_along_axis(out, np.broadcast_to(cols, (n, c, h, w)), axis=3)


def translate_map(m, dx, dy):
    """Shift a 2-D map the way ``small-translate`` shifts an image."""
    return _translate_b(np.asarray(m, dtype=np.float64)[None, None], [dx], [dy])[0, 0]


_LIGHT_KERNELS = {
    "color-jitter": _color_jitter_b,
    "horizontal-flip": _hflip_b,
    "grayscale": _grayscale_b,
    "blur": _blur_b,
    "small-translate": _translate_b,
}


def _warp(img, rows, cols):
    coords = np.stack([rows, cols])
    return np.stack([ndimage.map_coordinates(ch, coords, order=1, mode="nearest") for ch in img])


def _rotation(img, angle):
    k = angle // 90
    h, w = img.shape[1:]
    if h == w or k == 2:
        return np.rot90(img, k=k, axes=(1, 2)).copy()
    # Non-square input: rotate about the centre with bilinear sampling.
    theta = np.deg2rad(angle)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    r, c = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    src_r = np.cos(theta) * r - np.sin(theta) * c + cy
    src_c = np.sin(theta) * r + np.cos(theta) * c + cx
    return _warp(img, src_r, src_c)


def _elastic(img, alpha, sigma, seed):
    # alpha and sigma are relative to the image side so crops of any size
    # get a comparable amount of distortion.
    h, w = img.shape[1:]
    side = float(min(h, w))
    rng = np.random.default_rng(seed)
    s = max(sigma * side, 0.5)
    field = ndimage.gaussian_filter(rng.uniform(-1, 1, (2, h, w)), (0, s, s), mode="constant")
    dr, dc = field
    # Rescale so the field's peak displacement is alpha * side / 4.
    peak = max(np.abs(dr).max(), np.abs(dc).max(), 1e-12)
    scale = alpha * side / 4.0 / peak
    r, c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return _warp(img, r + dr * scale, c + dc * scale)


def _grid_axis(n, steps, limit, rng):
    # Piecewise-linear monotone remapping of one axis.
    knots = np.linspace(0, n - 1, steps + 1)
    cell = (n - 1) / steps
    offs = rng.uniform(-limit, limit, steps + 1) * cell
    offs[0] = offs[-1] = 0.0
    moved = np.clip(knots + offs, 0, n - 1)
    moved = np.maximum.accumulate(moved)
    return np.interp(np.arange(n), knots, moved)


def _grid_distortion(img, limit, steps, seed):
    h, w = img.shape[1:]
    rng = np.random.default_rng(seed)
    rows = _grid_axis(h, steps, limit, rng)
    cols = _grid_axis(w, steps, limit, rng)
    # Offsets of the two axes also shear slightly so the warp is 2-D.
    shear = rng.uniform(-limit, limit) * 0.5
    r, c = np.meshgrid(rows, cols, indexing="ij")
    c = c + shear * (r - (h - 1) / 2.0)
    return _warp(img, r, c)


def _channel_shuffle(img, perm):
    if img.shape[0] != len(perm):
        raise InputError(f"channel-shuffle needs {len(perm)} channels, got {img.shape[0]}")
    return img[list(perm)].copy()


def _cut_shuffle(img, perm):
    h, w = img.shape[1:]
    hh, hw = h // 2, w // 2
    quads = [img[:, :hh, :hw], img[:, :hh, hw:2 * hw], img[:, hh:2 * hh, :hw], img[:, hh:2 * hh, hw:2 * hw]]
    out = img.copy()
    for dst, src in enumerate(perm):
        r0, c0 = (dst // 2) * hh, (dst % 2) * hw
        out[:, r0:r0 + hh, c0:c0 + hw] = quads[src]
    return out


_HARD_KERNELS = {
    "rotation": _rotation,
    "elastic-deform": _elastic,
    "grid-distortion": _grid_distortion,
    "channel-shuffle": _channel_shuffle,
    "cut-shuffle": _cut_shuffle,
}


def apply(spec: TransformSpec, img: np.ndarray, min_side: int = MIN_SIDE) -> np.ndarray:
    """Run ``spec`` on ``img``; output has the input's shape, float32, clipped to [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise InputError(f"expected (C, H, W) image, got shape {img.shape}")
    if min(img.shape[1:]) < min_side:
        raise InputError(f"image {img.shape[1:]} below minimum side {min_side}")
    x = img.astype(np.float64)
    if spec.kind in _LIGHT_KERNELS:
        out = _LIGHT_KERNELS[spec.kind](x[None], **{k: [v] for k, v in spec.params.items()})[0]
    else:
        out = _HARD_KERNELS[spec.kind](x, **spec.params)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_batch(specs, imgs, min_side: int = MIN_SIDE) -> np.ndarray:
    """``[apply(s, x) for s, x in zip(specs, imgs)]`` stacked, with light kinds vectorized."""
    imgs = np.asarray(imgs)
    if imgs.ndim != 4:
        raise InputError(f"expected (N, C, H, W) batch, got shape {imgs.shape}")
    if len(specs) != len(imgs):
        raise InputError("one spec per image required")
    if min(imgs.shape[2:]) < min_side:
        raise InputError(f"images {imgs.shape[2:]} below minimum side {min_side}")
    out = np.empty(imgs.shape, dtype=np.float32)
    groups = {}
    for i, spec in enumerate(specs):
        groups.setdefault(spec.kind, []).append(i)
    for kind, idx in groups.items():
        if kind in _LIGHT_KERNELS:
            params = {k: [specs[i].params[k] for i in idx] for k in specs[idx[0]].params}
            y = _LIGHT_KERNELS[kind](imgs[idx].astype(np.float64), **params)
            out[idx] = np.clip(y, 0.0, 1.0).astype(np.float32)
        else:
            for i in idx:
                out[i] = apply(specs[i], imgs[i], min_side)
    return out


def is_geometric(spec: TransformSpec) -> bool:
    return spec.kind in GEOMETRIC_LIGHT


def inverse_warp_map(spec: TransformSpec, m: np.ndarray) -> np.ndarray:
    """Map a 2-D map computed on ``apply(spec, x)`` back into the frame of ``x``."""
    if spec.kind == "horizontal-flip":
        return m[:, ::-1].copy()
    if spec.kind == "small-translate":
        return translate_map(m, -spec.params["dx"], -spec.params["dy"])
    return m
