"""Pure-numpy convolution kernels (fallback backend).

Stride-1 convolutions go through im2col plus one BLAS matmul.  The stride-2
path lives here too and is shared by both backends: downsampling convolutions
are a small fraction of the network's work, so they are not worth compiled
treatment.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def pad1(x: np.ndarray) -> np.ndarray:
    """Zero-pad a [C, D, H, W] volume by one voxel on each spatial side."""
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))


def pad1_zero_halo(g: np.ndarray) -> np.ndarray:
    """Embed an output gradient into padded geometry with an exactly-zero halo."""
    gop = np.zeros(
        (g.shape[0], g.shape[1] + 2, g.shape[2] + 2, g.shape[3] + 2), g.dtype
    )
    gop[:, 1:-1, 1:-1, 1:-1] = g
    return gop


def _im2col_s1(xp: np.ndarray) -> np.ndarray:
    cin = xp.shape[0]
    d, h, w = xp.shape[1] - 2, xp.shape[2] - 2, xp.shape[3] - 2
    windows = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))
    return np.ascontiguousarray(
        windows.transpose(0, 4, 5, 6, 1, 2, 3)
    ).reshape(cin * 27, d * h * w)


def s1_forward(xp, w, b):
    cout = w.shape[0]
    d, h, wd = xp.shape[1] - 2, xp.shape[2] - 2, xp.shape[3] - 2
    col = _im2col_s1(xp)
    out = w.reshape(cout, -1) @ col
    out += b[:, None]
    return out.reshape(cout, d, h, wd)


def s1_grad_x(gop, w):
    """Input gradient from the zero-halo padded output gradient.

    The full correlation with the flipped, channel-transposed kernel has the
    same structure as the forward pass, so it reuses s1_forward.
    """
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
    zb = np.zeros(wt.shape[0], gop.dtype)
    return s1_forward(gop, wt, zb)


def s1_grad_w(gop, xp):
    cout, cin = gop.shape[0], xp.shape[0]
    g = gop[:, 1:-1, 1:-1, 1:-1].reshape(cout, -1)
    col = _im2col_s1(xp)
    return (g @ col.T).reshape(cout, cin, 3, 3, 3)


# -- stride 2 (shared by both backends) --------------------------------------

def _s2_out_dims(xp):
    return tuple((s - 2 + 1) // 2 for s in xp.shape[1:])


def _s2_tap_view(xp, k, out_dims):
    kd, kh, kw = k // 9, (k // 3) % 3, k % 3
    do, ho, wo = out_dims
    return xp[:, kd:kd + 2 * do - 1:2, kh:kh + 2 * ho - 1:2, kw:kw + 2 * wo - 1:2]


def s2_forward(xp, w, b):
    cin, cout = xp.shape[0], w.shape[0]
    out_dims = _s2_out_dims(xp)
    r = int(np.prod(out_dims))
    col = np.empty((cin, 27, r), xp.dtype)
    for k in range(27):
        col[:, k, :] = _s2_tap_view(xp, k, out_dims).reshape(cin, r)
    out = w.reshape(cout, cin * 27) @ col.reshape(cin * 27, r)
    out += b[:, None]
    return out.reshape(cout, *out_dims)


def s2_grad_x(g, w, in_shape):
    cout, cin = w.shape[0], w.shape[1]
    out_dims = g.shape[1:]
    r = int(np.prod(out_dims))
    gmat = g.reshape(cout, r)
    gxp = np.zeros((cin, in_shape[1] + 2, in_shape[2] + 2, in_shape[3] + 2), g.dtype)
    for k in range(27):
        wk = w.reshape(cout, cin, 27)[:, :, k]
        _s2_tap_view(gxp, k, out_dims)[...] += (wk.T @ gmat).reshape(cin, *out_dims)
    return gxp[:, 1:-1, 1:-1, 1:-1]


def s2_grad_w(g, xp):
    cout, cin = g.shape[0], xp.shape[0]
    out_dims = g.shape[1:]
    r = int(np.prod(out_dims))
    gmat = g.reshape(cout, r)
    gw = np.empty((cout, cin, 27), g.dtype)
    for k in range(27):
        xs = _s2_tap_view(xp, k, out_dims).reshape(cin, r)
        gw[:, :, k] = gmat @ xs.T
    return gw.reshape(cout, cin, 3, 3, 3)
