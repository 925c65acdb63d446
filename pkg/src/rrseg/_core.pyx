# cython: boundscheck=False, wraparound=False, language_level=3
"""Compiled entry points for the hot 3x3x3 stride-1 convolution kernels.

Thin memoryview wrappers around the C routines in _conv3d.c; array layout
contracts are documented there.  Shape validation and padding happen in
rrseg.kernels, which also provides the numpy fallback with the same
signatures.
"""

cdef extern from "_conv3d.h":
    ctypedef ptrdiff_t rr_idx
    void rr_conv3_fwd_f32(const float* xp, const float* w, const float* b,
                          float* outp, rr_idx cin, rr_idx cout,
                          rr_idx dp, rr_idx hp, rr_idx wp) nogil
    void rr_conv3_fwd_f64(const double* xp, const double* w, const double* b,
                          double* outp, rr_idx cin, rr_idx cout,
                          rr_idx dp, rr_idx hp, rr_idx wp) nogil
    void rr_conv3_gradw_f32(const float* gop, const float* xp, float* gw,
                            rr_idx cin, rr_idx cout,
                            rr_idx dp, rr_idx hp, rr_idx wp) nogil
    void rr_conv3_gradw_f64(const double* gop, const double* xp, double* gw,
                            rr_idx cin, rr_idx cout,
                            rr_idx dp, rr_idx hp, rr_idx wp) nogil


def fwd_f32(const float[:, :, :, ::1] xp, const float[:, :, :, :, ::1] w,
            const float[::1] b, float[:, :, :, ::1] outp):
    with nogil:
        rr_conv3_fwd_f32(&xp[0, 0, 0, 0], &w[0, 0, 0, 0, 0], &b[0],
                         &outp[0, 0, 0, 0], xp.shape[0], w.shape[0],
                         xp.shape[1], xp.shape[2], xp.shape[3])


def fwd_f64(const double[:, :, :, ::1] xp, const double[:, :, :, :, ::1] w,
            const double[::1] b, double[:, :, :, ::1] outp):
    with nogil:
        rr_conv3_fwd_f64(&xp[0, 0, 0, 0], &w[0, 0, 0, 0, 0], &b[0],
                         &outp[0, 0, 0, 0], xp.shape[0], w.shape[0],
                         xp.shape[1], xp.shape[2], xp.shape[3])


def gradw_f32(const float[:, :, :, ::1] gop, const float[:, :, :, ::1] xp,
              float[:, :, :, :, ::1] gw):
    with nogil:
        rr_conv3_gradw_f32(&gop[0, 0, 0, 0], &xp[0, 0, 0, 0],
                           &gw[0, 0, 0, 0, 0], xp.shape[0], gop.shape[0],
                           xp.shape[1], xp.shape[2], xp.shape[3])


def gradw_f64(const double[:, :, :, ::1] gop, const double[:, :, :, ::1] xp,
              double[:, :, :, :, ::1] gw):
    with nogil:
        rr_conv3_gradw_f64(&gop[0, 0, 0, 0], &xp[0, 0, 0, 0],
                           &gw[0, 0, 0, 0, 0], xp.shape[0], gop.shape[0],
                           xp.shape[1], xp.shape[2], xp.shape[3])
