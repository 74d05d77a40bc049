"""Weighted masked reconstruction loss.

Image term: mean squared error over every element of every masked patch in the
batch (pooled, not a mean of per-example means). Text term: mean token cross
entropy over every masked real token in the batch. Visible positions never
enter either term.
"""
from dataclasses import dataclass

import numpy as np

from m3ae import tensor as T
from m3ae.errors import ConfigError
from m3ae.tensor import Tensor


class DegenerateLossError(ValueError):
    """No masked image patch anywhere in the batch."""


@dataclass
class LossWeights:
    w_img: float = 1.0
    w_txt: float = 0.5
    norm_pix: bool = False

    def __post_init__(self):
        if self.w_img < 0 or self.w_txt < 0:
            raise ConfigError(f"loss weights must be non-negative, got {self.w_img}, {self.w_txt}")


@dataclass
class LossBreakdown:
    total: Tensor
    image_mse: float
    text_ce: float
    img_masked: int
    txt_masked: int

    @property
    def text_empty(self):
        return self.txt_masked == 0


def _normalize_patches(x, eps=1e-6):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def masked_image_loss(pred, target, plans, norm_pix=False):
    """Returns ``(loss, n_masked_patches)``."""
    if pred.shape != np.shape(target):
        raise T.DimensionError(f"prediction {pred.shape} vs target {np.shape(target)}")
    b, n, pd = pred.shape
    flat = np.concatenate([r * n + np.asarray(p.image_mask, np.int64) for r, p in enumerate(plans)])
    if flat.size == 0:
        raise DegenerateLossError("no masked image patches in the batch")
    tgt = np.asarray(target).reshape(b * n, pd)[flat]
    if norm_pix:
        tgt = _normalize_patches(tgt)
    diff = T.gather_rows(T.reshape(pred, (b * n, pd)), flat) - Tensor(tgt.astype(pred.dtype))
    return T.mean(diff * diff), int(flat.size)


def masked_text_loss(logits, token_ids, plans):
    """Returns ``(loss, n_masked_tokens)``; a zero-token batch yields ``(0, 0)``."""
    rows, targets = [], []
    width = 0 if logits is None else logits.shape[1]
    for r, p in enumerate(plans):
        pos = np.asarray(p.text_mask, np.int64)
        if pos.size:
            rows.append(r * width + pos)
            targets.append(np.asarray(token_ids)[r, pos])
    if not rows:
        dtype = np.float32 if logits is None else logits.dtype
        return Tensor(np.zeros((), dtype)), 0
    flat = np.concatenate(rows)
    b, lb, v = logits.shape
    picked = T.gather_rows(T.reshape(logits, (b * lb, v)), flat)
    return T.mean(T.cross_entropy(picked, np.concatenate(targets))), int(flat.size)


def total_loss(pred, logits, batch, weights):
    img, n_img = masked_image_loss(pred, batch.images, batch.plans, weights.norm_pix)
    txt, n_txt = masked_text_loss(logits, batch.token_ids, batch.plans)
    total = T.scale(img, weights.w_img) + T.scale(txt, weights.w_txt)
    return LossBreakdown(total, float(img.data), float(txt.data), n_img, n_txt)
