/* Templated bodies for the 3x3x3 stride-1 kernels; included twice from
 * _conv3d.c with REAL/RR_FN defined for each precision.
 *
 * Both kernels walk a flat index over the padded volume between band_lo and
 * band_hi, the range that covers every interior voxel.  For a fixed tap the
 * neighbour lives at a constant flat offset, so the inner loop is a plain
 * 27-term fused multiply-add stream that the compiler can vectorise.  Halo
 * positions inside the band accumulate garbage (forward) or contribute
 * nothing (gradw, because the halo of `gop` is zero). */

static void RR_FN(offsets27)(rr_idx hp, rr_idx wp, rr_idx* offs)
{
    rr_idx k = 0;
    for (rr_idx kd = 0; kd < 3; kd++)
        for (rr_idx kh = 0; kh < 3; kh++)
            for (rr_idx kw = 0; kw < 3; kw++)
                offs[k++] = ((kd - 1) * hp + (kh - 1)) * wp + (kw - 1);
}

void RR_FN(rr_conv3_fwd)(const REAL* restrict xp, const REAL* restrict w,
                         const REAL* restrict b, REAL* restrict outp,
                         rr_idx cin, rr_idx cout,
                         rr_idx dp, rr_idx hp, rr_idx wp)
{
    const rr_idx plane = hp * wp;
    const rr_idx vol = dp * plane;
    const rr_idx band_lo = plane + wp + 1;
    const rr_idx band_hi = vol - band_lo;
    rr_idx offs[27];
    RR_FN(offsets27)(hp, wp, offs);

    for (rr_idx co = 0; co < cout; co++) {
        REAL* restrict op = outp + co * vol;
        const REAL bv = b[co];
        for (rr_idx i = 0; i < vol; i++)
            op[i] = bv;
        for (rr_idx ci = 0; ci < cin; ci++) {
            const REAL* restrict ip = xp + ci * vol;
            const REAL* restrict wk = w + (co * cin + ci) * 27;
            for (rr_idx i = band_lo; i < band_hi; i++) {
                REAL acc = 0;
#pragma GCC unroll 27
                for (rr_idx t = 0; t < 27; t++)
                    acc += wk[t] * ip[i + offs[t]];
                op[i] += acc;
            }
        }
    }
}

void RR_FN(rr_conv3_gradw)(const REAL* restrict gop, const REAL* restrict xp,
                           REAL* restrict gw, rr_idx cin, rr_idx cout,
                           rr_idx dp, rr_idx hp, rr_idx wp)
{
    const rr_idx plane = hp * wp;
    const rr_idx vol = dp * plane;
    const rr_idx band_lo = plane + wp + 1;
    const rr_idx band_hi = vol - band_lo;
    rr_idx offs[27];
    RR_FN(offsets27)(hp, wp, offs);

    for (rr_idx co = 0; co < cout; co++) {
        const REAL* restrict gp = gop + co * vol;
        for (rr_idx ci = 0; ci < cin; ci++) {
            const REAL* restrict ip = xp + ci * vol;
            REAL acc[27] = {0};
            for (rr_idx i = band_lo; i < band_hi; i++) {
                const REAL g = gp[i];
#pragma GCC unroll 27
                for (rr_idx t = 0; t < 27; t++)
                    acc[t] += g * ip[i + offs[t]];
            }
            REAL* restrict gwp = gw + (co * cin + ci) * 27;
            for (rr_idx t = 0; t < 27; t++)
                gwp[t] += acc[t];
        }
    }
}
