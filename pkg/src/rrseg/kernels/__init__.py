"""Convolution kernel dispatch: compiled core with a numpy fallback.

The compiled extension (rrseg._core) accelerates the stride-1 3x3x3
convolutions that dominate training time.  If it is missing, or
RRSEG_BACKEND=numpy is set, the im2col/BLAS implementation in
kernels.reference takes over with identical semantics (results agree to
float rounding; accumulation order differs).

    RRSEG_BACKEND=auto      prefer compiled, fall back silently (default)
    RRSEG_BACKEND=compiled  require the extension, raise if unavailable
    RRSEG_BACKEND=numpy     force the fallback
"""
import os

import numpy as np

from .. import errors
from . import reference

try:
    from .. import _core
except ImportError:
    _core = None

_mode = os.environ.get("RRSEG_BACKEND", "auto")
if _mode not in ("auto", "compiled", "numpy"):
    raise errors.InvalidConfig(f"RRSEG_BACKEND must be auto|compiled|numpy, got {_mode!r}")
if _mode == "compiled" and _core is None:
    raise ImportError("RRSEG_BACKEND=compiled but the rrseg._core extension is not built")

_use_compiled = _core is not None and _mode != "numpy"


def backend_name() -> str:
    return "compiled" if _use_compiled else "numpy"


def compiled_available() -> bool:
    return _core is not None


def _check_conv_shapes(x, w, b, stride):
    if x.ndim != 4 or w.ndim != 5 or b.ndim != 1:
        raise errors.ShapeMismatch(
            f"conv3 expects x[C,D,H,W], w[Co,Ci,3,3,3], b[Co]; got {x.shape}, {w.shape}, {b.shape}"
        )
    if w.shape[2:] != (3, 3, 3):
        raise errors.ShapeMismatch(f"conv3 kernel must be 3x3x3, got {w.shape[2:]}")
    if w.shape[1] != x.shape[0]:
        raise errors.ShapeMismatch(
            f"conv3 input has {x.shape[0]} channels but weights expect {w.shape[1]}"
        )
    if b.shape[0] != w.shape[0]:
        raise errors.ShapeMismatch(f"bias length {b.shape[0]} != out channels {w.shape[0]}")
    if stride not in (1, 2):
        raise errors.ShapeMismatch(f"stride must be 1 or 2, got {stride}")


def conv3_forward(x, w, b, stride=1):
    """Padded 3x3x3 convolution; returns (out, xp) with xp cached for backward."""
    _check_conv_shapes(x, w, b, stride)
    xp = reference.pad1(x)
    if stride == 2:
        return reference.s2_forward(xp, w, b), xp
    if _use_compiled:
        outp = np.empty((w.shape[0],) + xp.shape[1:], x.dtype)
        _fwd(xp, np.ascontiguousarray(w), np.ascontiguousarray(b), outp)
        return np.ascontiguousarray(outp[:, 1:-1, 1:-1, 1:-1]), xp
    return reference.s1_forward(xp, w, b), xp


def conv3_grad_x(g, w, in_shape, stride=1):
    if stride == 2:
        return reference.s2_grad_x(g, w, in_shape)
    gop = reference.pad1_zero_halo(g)
    if _use_compiled:
        wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
        gxp = np.empty((w.shape[1],) + gop.shape[1:], g.dtype)
        _fwd(gop, wt, np.zeros(w.shape[1], g.dtype), gxp)
        return np.ascontiguousarray(gxp[:, 1:-1, 1:-1, 1:-1])
    return reference.s1_grad_x(gop, w)


def conv3_grad_w(g, xp, stride=1):
    """Weight and bias gradients; xp is the padded input saved by the forward."""
    gb = g.sum(axis=(1, 2, 3), dtype=g.dtype)
    if stride == 2:
        return reference.s2_grad_w(g, xp), gb
    if _use_compiled:
        gop = reference.pad1_zero_halo(g)
        gw = np.zeros((g.shape[0], xp.shape[0], 3, 3, 3), g.dtype)
        _gradw(gop, xp, gw)
        return gw, gb
    return reference.s1_grad_w(reference.pad1_zero_halo(g), xp), gb


def _fwd(xp, w, b, outp):
    if xp.dtype == np.float32:
        _core.fwd_f32(xp, w, b, outp)
    elif xp.dtype == np.float64:
        _core.fwd_f64(xp, w, b, outp)
    else:
        raise errors.ShapeMismatch(f"unsupported dtype {xp.dtype}")


def _gradw(gop, xp, gw):
    if xp.dtype == np.float32:
        _core.gradw_f32(gop, xp, gw)
    elif xp.dtype == np.float64:
        _core.gradw_f64(gop, xp, gw)
    else:
        raise errors.ShapeMismatch(f"unsupported dtype {xp.dtype}")
