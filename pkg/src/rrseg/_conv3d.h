#ifndef RRSEG_CONV3D_H
#define RRSEG_CONV3D_H

#include <stddef.h>

typedef ptrdiff_t rr_idx;

/* 3x3x3 stride-1 convolution kernels operating on zero-padded volumes.
 *
 * All arrays are C-contiguous.  `xp` is the input padded by one voxel on
 * every spatial side, shape [cin, dp, hp, wp] with dp = D + 2 etc.  The
 * forward output `outp` uses the same padded geometry; its one-voxel halo
 * receives garbage and must be cropped by the caller.  The weight-gradient
 * kernel expects the padded output gradient `gop` to have an exactly-zero
 * halo.  Weights are [cout, cin, 3, 3, 3]. */

void rr_conv3_fwd_f32(const float* xp, const float* w, const float* b,
                      float* outp, rr_idx cin, rr_idx cout,
                      rr_idx dp, rr_idx hp, rr_idx wp);
void rr_conv3_fwd_f64(const double* xp, const double* w, const double* b,
                      double* outp, rr_idx cin, rr_idx cout,
                      rr_idx dp, rr_idx hp, rr_idx wp);

/* Accumulates into gw (caller zero-initialises). */
void rr_conv3_gradw_f32(const float* gop, const float* xp, float* gw,
                        rr_idx cin, rr_idx cout,
                        rr_idx dp, rr_idx hp, rr_idx wp);
void rr_conv3_gradw_f64(const double* gop, const double* xp, double* gw,
                        rr_idx cin, rr_idx cout,
                        rr_idx dp, rr_idx hp, rr_idx wp);

#endif
