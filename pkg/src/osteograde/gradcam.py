"""Gradient-weighted class activation maps over named feature layers.

For a chosen class and convolutional feature map, channel weights are the
spatial averages of the class logit's gradient w.r.t. that map; the
heatmap is the rectified weighted channel sum, normalized by its maximum
(all-zero when nothing activates positively).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import GradingNetwork
from .autodiff import Tensor
from .errors import ConfigError, DataError
from .imageio import bilinear_resize, heat_colormap, HEAT_COLORMAP_ID

DEFAULT_LAYER = "head.merged"


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray  # H x W, in [0, 1]; max is 1 unless all zero
    layer: str
    target_class: int


def gradcam(model: GradingNetwork, image: Tensor, target_class: int, layer: str = DEFAULT_LAYER) -> Heatmap:
    """Class-activation heatmap at the named layer for one input image."""
    if not 0 <= target_class < model.config.num_classes:
        raise DataError(f"target class {target_class} outside 0..{model.config.num_classes - 1}")
    capture: dict[str, Tensor] = {}
    logits = model.forward(image, training=False, capture=capture)
    if layer not in capture:
        raise KeyError(f"unknown layer {layer!r}; available: {', '.join(model.feature_names())}")
    seed = np.zeros(logits.shape, dtype=logits.data.dtype)
    seed[target_class] = 1.0
    logits.backward(seed)
    fmap = capture[layer]
    grads = fmap.grad if fmap.grad is not None else np.zeros_like(fmap.data)
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * fmap.data).sum(axis=0), 0.0)
    peak = float(cam.max())
    values = cam / peak if peak > 0 else np.zeros_like(cam)
    return Heatmap(values=values.astype(np.float64), layer=layer, target_class=target_class)


def render_overlay(heatmap: Heatmap, image: np.ndarray, alpha: float) -> np.ndarray:
    """Blend the colormapped heatmap over a grayscale image.

    ``image`` is a uint8 H x W array; returns uint8 RGB. alpha = 0 returns
    the base image, alpha = 1 the colormapped heatmap.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    if image.ndim != 2 or image.dtype != np.uint8:
        raise DataError(f"overlay base must be uint8 H x W, got {image.dtype} {image.shape}")
    if image.size == 0:
        raise DataError("overlay base image is empty")
    h, w = image.shape
    resampled = np.clip(bilinear_resize(heatmap.values, h, w), 0.0, 1.0)
    colored = heat_colormap(resampled).astype(np.float64)
    base = np.repeat(image[:, :, None], 3, axis=2).astype(np.float64)
    blended = np.round((1.0 - alpha) * base + alpha * colored)
    return np.clip(blended, 0, 255).astype(np.uint8)


OVERLAY_COLORMAP_ID = HEAT_COLORMAP_ID
