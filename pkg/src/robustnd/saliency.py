"""Grad-CAM maps and the style-agnostic saliency product.

``model`` is anything with ``cam_forward(x) -> (activations, logits)``
(see :class:`robustnd.nn_core.CamClassifier`).
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from . import transforms as T
from .errors import InputError, NumericalError


def normalize_map(m):
    """Max-normalize a non-negative map; an all-zero map becomes all ones."""
    m = np.asarray(m, dtype=np.float64)
    peak = m.max()
    if peak <= 0:
        return np.ones_like(m)
    return m / peak


def combine_maps(a, b):
    """Element-wise product of two raw maps, max-normalized, with the zero fallback."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.max() <= 0 or b.max() <= 0:
        return np.ones_like(a)
    return normalize_map(normalize_map(a) * normalize_map(b))


def raw_cam_batch(model, imgs, targets=None):
    """Rectified, upsampled but unnormalized Grad-CAM maps for a batch.

    ``imgs`` is (N, C, H, W). Returns ``(maps (N, H, W) float64, targets)``.
    When ``targets`` is None the argmax class of the head is used.
    """
    # The input carries the graph so frozen encoders still yield activation gradients.
    x = torch.as_tensor(np.asarray(imgs), dtype=torch.float32).clone().requires_grad_(True)
    with torch.enable_grad():
        acts, logits = model.cam_forward(x)
        n_cls = logits.shape[1]
        if targets is None:
            targets = logits.argmax(dim=1).detach()
        else:
            targets = torch.as_tensor(np.atleast_1d(targets), dtype=torch.long)
            if bool(((targets < 0) | (targets >= n_cls)).any()):
                raise InputError(f"target class outside head range [0, {n_cls})")
        score = logits.gather(1, targets.view(-1, 1)).sum()
        # Samples are independent, so one backward over the summed scores
        # yields every per-sample gradient.
        grads, = torch.autograd.grad(score, acts)
    if not torch.isfinite(grads).all():
        raise NumericalError("non-finite Grad-CAM gradients")
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * acts).sum(dim=1, keepdim=True)).detach()
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)
    return cam[:, 0].double().numpy(), targets.numpy()


def grad_cam(model, img, target=None):
    """Normalized Grad-CAM map (H, W) for one (C, H, W) image."""
    raw, _ = raw_cam_batch(model, np.asarray(img)[None], None if target is None else [target])
    return normalize_map(raw[0])


def style_agnostic_saliency(model, img, light: T.TransformSpec):
    """Product of the Grad-CAM maps of ``img`` and ``light(img)``.

    Geometric light transforms are undone on the second map first, so both
    factors live in the frame of ``img``.
    """
    return style_agnostic_saliency_batch(model, np.asarray(img)[None], [light])[0]


def style_agnostic_saliency_batch(model, imgs, lights, targets=None):
    if any(s.family != T.LIGHT for s in lights):
        raise InputError("style-agnostic saliency needs light transforms")
    imgs = np.asarray(imgs, dtype=np.float32)
    views = np.stack([T.apply(s, im) for s, im in zip(lights, imgs)])
    # Each view uses its own argmax class unless targets are given; this keeps
    # the product symmetric under swapping an image with its flipped view.
    first, _ = raw_cam_batch(model, imgs, targets)
    second, _ = raw_cam_batch(model, views, targets)
    out = np.empty_like(first)
    for i, spec in enumerate(lights):
        out[i] = combine_maps(first[i], T.inverse_warp_map(spec, second[i]))
    return out
