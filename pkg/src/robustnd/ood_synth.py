"""Auxiliary-OOD synthesis: saliency-guided core-window selection and hard-transform compositing."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import transforms as T
from .errors import InputError
from .saliency import style_agnostic_saliency

ALPHA_RANGE = (0.20, 0.50)
# Window sums within this relative distance of the best count as ties.
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class CoreMask:
    mask: np.ndarray  # (H, W) uint8
    alpha: float
    anchor: tuple  # (row, col) of the top-left corner
    side: int


def window_side(alpha, h, w):
    if not 0 < alpha <= 1:
        raise InputError(f"alpha must lie in (0, 1], got {alpha}")
    return int(min(round(math.sqrt(alpha * h * w)), h, w))


def _mask_from(anchor, side, h, w, alpha):
    m = np.zeros((h, w), dtype=np.uint8)
    r, c = anchor
    m[r:r + side, c:c + side] = 1
    return CoreMask(m, float(alpha), (int(r), int(c)), int(side))


def window_sums(sm, side):
    """Sum of ``sm`` over every side x side window, via a 2-D prefix-sum table."""
    sm = np.asarray(sm, dtype=np.float64)
    p = np.zeros((sm.shape[0] + 1, sm.shape[1] + 1))
    p[1:, 1:] = sm.cumsum(0).cumsum(1)
    return p[side:, side:] - p[:-side, side:] - p[side:, :-side] + p[:-side, :-side]


def best_anchor(sums):
    """Row-major first window whose sum ties the maximum."""
    best = sums.max()
    tol = TIE_RTOL * max(abs(best), 1.0)
    flat = np.flatnonzero(sums.ravel() >= best - tol)[0]
    return divmod(int(flat), sums.shape[1])


def select_core_mask(sm, alpha) -> CoreMask:
    """Square window covering ~alpha of the map with the largest saliency mass."""
    sm = np.asarray(sm)
    h, w = sm.shape
    side = window_side(alpha, h, w)
    if side < 1:
        raise InputError(f"alpha={alpha} covers less than one pixel of a {h}x{w} map")
    return _mask_from(best_anchor(window_sums(sm, side)), side, h, w, alpha)


def _streams(rng):
    # Independent child streams keep each draw (alpha, light, hard pair,
    # anchor) aligned across strategies that share a seed.
    rng = np.random.default_rng(rng)
    return rng.spawn(4)


def composite(img, cm: CoreMask, hard):
    """Crop the window, run the hard transforms on the crop (last one first), paste back."""
    out = np.array(img, dtype=np.float32, copy=True)
    if cm.side == 0:
        return out
    r, c, s = cm.anchor[0], cm.anchor[1], cm.side
    patch = out[:, r:r + s, c:c + s]
    for spec in reversed(hard):
        patch = T.apply(spec, patch, min_side=1)
    out[:, r:r + s, c:c + s] = patch
    return out


def _draw_alpha(rng, alpha, alpha_range):
    return float(rng.uniform(*alpha_range)) if alpha is None else float(alpha)


def _draw_hard(rng, hard_count, hard_kinds):
    if hard_count not in (1, 2):
        raise InputError(f"hard_count must be 1 or 2, got {hard_count}")
    pair = T.sample_hard_pair(rng, hard_kinds)
    return pair[:hard_count]


def _empty_or_side(alpha, h, w):
    # alpha so small the window rounds to nothing: degenerate, no-op mask.
    if alpha <= 0 or round(math.sqrt(alpha * h * w)) < 1:
        return 0
    return window_side(alpha, h, w)


def craft_ood(img, model, rng, *, saliency=None, alpha=None, mask=None,
              alpha_range=ALPHA_RANGE, hard_count=2, light_kinds=None, hard_kinds=None):
    """Turn an ID image into an auxiliary OOD sample by distorting its most salient window.

    ``saliency`` may be a precomputed style-agnostic map (the training cache);
    otherwise it is computed with ``model`` and a sampled light transform.
    ``alpha``/``mask`` override the random draws (test hooks). Returns
    ``(image, CoreMask)``; pixels outside the mask are untouched.
    """
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape[1:]
    a_rng, l_rng, h_rng, _ = _streams(rng)
    a = _draw_alpha(a_rng, alpha, alpha_range)
    hard = _draw_hard(h_rng, hard_count, hard_kinds)
    if mask is None:
        side = _empty_or_side(a, h, w)
        if side == 0:
            mask = _mask_from((0, 0), 0, h, w, a)
        else:
            if saliency is None:
                saliency = style_agnostic_saliency(model, img, T.sample_light(l_rng, light_kinds))
            mask = select_core_mask(saliency, a)
    return composite(img, mask, hard), mask


def craft_ood_global(img, rng, *, hard_count=2, hard_kinds=None):
    """Ablation baseline: the hard transforms applied to the whole image."""
    out = np.asarray(img, dtype=np.float32)
    _, _, h_rng, _ = _streams(rng)
    for spec in reversed(_draw_hard(h_rng, hard_count, hard_kinds)):
        out = T.apply(spec, out, min_side=1)
    return out


def random_anchor(rng, side, h, w):
    n_r, n_c = h - side + 1, w - side + 1
    k = int(rng.integers(n_r * n_c))
    return divmod(k, n_c)


def craft_ood_random_region(img, rng, *, alpha=None, alpha_range=ALPHA_RANGE,
                            hard_count=2, hard_kinds=None, return_mask=False):
    """Like :func:`craft_ood` but the window is placed uniformly at random."""
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape[1:]
    a_rng, _, h_rng, p_rng = _streams(rng)
    a = _draw_alpha(a_rng, alpha, alpha_range)
    hard = _draw_hard(h_rng, hard_count, hard_kinds)
    side = _empty_or_side(a, h, w)
    anchor = (0, 0) if side == 0 else random_anchor(p_rng, side, h, w)
    cm = _mask_from(anchor, side, h, w, a)
    out = composite(img, cm, hard)
    return (out, cm) if return_mask else out


def full_mask(h, w):
    return _mask_from((0, 0), min(h, w), h, w, 1.0)


class SaliencyCache:
    """Write-once store of per-training-image saliency maps."""

    def __init__(self, maps):
        self._maps = np.asarray(maps, dtype=np.float64)
        self._maps.setflags(write=False)

    def __getitem__(self, i):
        return self._maps[i]

    def __len__(self):
        return len(self._maps)

    @property
    def maps(self):
        return self._maps
