"""Pure numpy implementations of the row kernels.

Same signatures and semantics as the compiled module; used when the
extension is not built or when ``M3AE_PURE_PYTHON=1``.
"""
import numpy as np
from scipy.special import erf

_INV_SQRT_2PI = 0.3989422804014327


def gelu_forward(x, out, cdf):
    cdf[...] = 0.5 * (1.0 + erf(x * np.sqrt(0.5)))
    out[...] = x * cdf


def gelu_backward(x, cdf, g, out):
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    out[...] = g * (cdf + x * pdf)


def softmax_forward(x, mask, rows_per_mask, out):
    if mask.shape[0] > 0:
        keep = np.repeat(mask.astype(bool), rows_per_mask, axis=0)
        z = np.where(keep, x, -np.inf)
    else:
        keep = None
        z = x
    m = z.max(axis=1, keepdims=True)
    m[~np.isfinite(m)] = 0.0
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    s[s == 0] = 1.0
    out[...] = e / s


def softmax_backward(y, g, out):
    dot = (g * y).sum(axis=1, keepdims=True)
    out[...] = y * (g - dot)


def layer_norm_forward(x, w, b, eps, y, xhat, rstd):
    mean = x.mean(axis=1, keepdims=True)
    d = x - mean
    var = (d * d).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    rstd[...] = inv[:, 0]
    xhat[...] = d * inv
    y[...] = xhat * w + b


def layer_norm_backward(g, xhat, rstd, w, gx, gw, gb):
    gh = g * w
    a = gh.mean(axis=1, keepdims=True)
    bsum = (gh * xhat).mean(axis=1, keepdims=True)
    gx[...] = rstd[:, None] * (gh - a - xhat * bsum)
    gw += (g * xhat).sum(axis=0, dtype=np.float64)
    gb += g.sum(axis=0, dtype=np.float64)


def scatter_add_rows(idx, g, out):
    np.add.at(out, idx, g)
