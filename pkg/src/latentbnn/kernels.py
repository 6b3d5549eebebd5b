"""Backend selection for the hot kernels.

The compiled ``_kernels`` extension is used when it was built; otherwise the
numpy implementations in ``_fallback`` take over. Setting the environment
variable ``LATENTBNN_PURE=1`` forces the fallback even when the extension is
available.
"""

import os

import numpy as np

from . import _fallback

_compiled = None
if not os.environ.get("LATENTBNN_PURE"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"


def _impl():
    return _compiled if _compiled is not None else _fallback


def backends():
    """Return the available backends as ``{name: module}``."""
    out = {"numpy": _fallback}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def im2col(x, kh, kw, stride, pad):
    return _impl().im2col(np.ascontiguousarray(x), kh, kw, stride, pad)


def col2im(cols, x_shape, kh, kw, stride, pad):
    return _impl().col2im(np.ascontiguousarray(cols), tuple(int(s) for s in x_shape), kh, kw, stride, pad)


def maxpool2x2(x):
    return _impl().maxpool2x2(np.ascontiguousarray(x))


def maxpool2x2_backward(grad, idx, x_shape):
    return _impl().maxpool2x2_backward(
        np.ascontiguousarray(grad), np.ascontiguousarray(idx), tuple(int(s) for s in x_shape)
    )


def xnor_gemm(a, b, n_bits):
    return _impl().xnor_gemm(np.ascontiguousarray(a), np.ascontiguousarray(b), int(n_bits))
