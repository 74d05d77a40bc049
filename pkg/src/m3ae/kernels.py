"""Hot row kernels with a compiled backend and a numpy fallback.

The backend is chosen once at import: the Cython extension ``_ckernels`` when
it is importable, otherwise ``_pykernels``. Set ``M3AE_PURE_PYTHON=1`` to force
the fallback. ``use_backend`` switches at runtime (tests and benchmarks).
"""
import os

import numpy as np

from m3ae import _pykernels

try:
    from m3ae import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

if os.environ.get("M3AE_PURE_PYTHON", "") not in ("", "0") or _ckernels is None:
    BACKEND = "python"
else:
    BACKEND = "cython"
_impl = _BACKENDS[BACKEND]

_NO_MASK = np.zeros((0, 0), dtype=np.uint8)


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name):
    """Select the kernel backend; returns the previously active name."""
    global BACKEND, _impl
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {available_backends()}")
    previous = BACKEND
    BACKEND, _impl = name, _BACKENDS[name]
    return previous


def _rows(x):
    x = np.ascontiguousarray(x)
    return x.reshape(-1, x.shape[-1]) if x.ndim else x.reshape(1, 1)


def gelu(x, return_cdf=False):
    """Exact GELU; with ``return_cdf`` also returns ``Phi(x)`` for :func:`gelu_grad`."""
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    cdf = np.empty_like(x)
    _impl.gelu_forward(x.reshape(-1), out.reshape(-1), cdf.reshape(-1))
    return (out, cdf) if return_cdf else out


def gelu_grad(x, g, cdf=None):
    x = np.ascontiguousarray(x)
    if cdf is None:
        cdf = gelu(x, return_cdf=True)[1]
    g = np.ascontiguousarray(g, dtype=x.dtype)
    out = np.empty_like(x)
    _impl.gelu_backward(x.reshape(-1), np.ascontiguousarray(cdf).reshape(-1), g.reshape(-1),
                        out.reshape(-1))
    return out


def softmax(x, mask=None):
    """Softmax over the last axis.

    Args:
        x: array ``[..., C]``.
        mask: optional boolean ``[G, C]`` where ``G`` divides the number of rows
            of ``x``; consecutive blocks of ``rows / G`` rows share one mask row.
            False entries receive probability zero.
    """
    x2 = _rows(x)
    out = np.empty_like(x2)
    if mask is None:
        m, per = _NO_MASK, 1
    else:
        m = np.ascontiguousarray(mask, dtype=np.uint8).reshape(-1, x2.shape[1])
        if x2.shape[0] % m.shape[0]:
            raise ValueError(f"mask rows {m.shape[0]} do not divide {x2.shape[0]} rows")
        per = x2.shape[0] // m.shape[0]
    _impl.softmax_forward(x2, m, per, out)
    return out.reshape(np.shape(x))


def softmax_grad(y, g):
    y2 = _rows(y)
    g2 = _rows(np.asarray(g, dtype=y2.dtype))
    out = np.empty_like(y2)
    _impl.softmax_backward(y2, g2, out)
    return out.reshape(np.shape(y))


def layer_norm(x, w, b, eps):
    """Normalize the last axis; returns ``(y, xhat, rstd)``."""
    x2 = _rows(x)
    d = x2.shape[1]
    w = np.ascontiguousarray(w, dtype=x2.dtype).reshape(d)
    b = np.ascontiguousarray(b, dtype=x2.dtype).reshape(d)
    y = np.empty_like(x2)
    xhat = np.empty_like(x2)
    rstd = np.empty(x2.shape[0], dtype=x2.dtype)
    _impl.layer_norm_forward(x2, w, b, float(eps), y, xhat, rstd)
    return y.reshape(np.shape(x)), xhat, rstd


def layer_norm_grad(g, xhat, rstd, w):
    """Returns ``(gx, gw, gb)``; ``xhat``/``rstd`` come from ``layer_norm``."""
    g2 = _rows(np.asarray(g, dtype=xhat.dtype))
    d = xhat.shape[1]
    w = np.ascontiguousarray(w, dtype=xhat.dtype).reshape(d)
    gx = np.empty_like(xhat)
    gw = np.zeros(d, dtype=np.float64)
    gb = np.zeros(d, dtype=np.float64)
    _impl.layer_norm_backward(g2, xhat, rstd, w, gx, gw, gb)
    return gx.reshape(np.shape(g)), gw.astype(xhat.dtype), gb.astype(xhat.dtype)


def scatter_add_rows(n, idx, g):
    """Zero ``[n, d]`` array with ``g[i]`` added into row ``idx[i]``."""
    g2 = _rows(g)
    idx = np.ascontiguousarray(idx, dtype=np.int64).reshape(-1)
    out = np.zeros((n, g2.shape[1]), dtype=g2.dtype)
    _impl.scatter_add_rows(idx, g2, out)
    return out
