/* Branch-free double-precision exp for x <= 0, written so that loops calling
 * it auto-vectorize. Cody-Waite reduction x = k ln2 + r, |r| <= ln2/2, then a
 * degree-11 Taylor polynomial; relative error is a few ulp. Inputs below
 * -708 are clamped (result ~1e-308 rather than 0). */
#ifndef GVDIFF_FASTEXP_H
#define GVDIFF_FASTEXP_H
#include <stdint.h>
#include <string.h>

static inline double gv_exp_nonpos(double x)
{
    const double ln2_hi = 6.93147180369123816490e-01;
    const double ln2_lo = 1.90821492927058770002e-10;
    const double inv_ln2 = 1.44269504088896338700e+00;
    x = x < -708.0 ? -708.0 : x;
    double kf = x * inv_ln2 - 0.5;
    int64_t k = (int64_t)kf;               /* truncation; kf < 0 so this rounds up */
    kf = (double)k;
    double r = (x - kf * ln2_hi) - kf * ln2_lo;
    double p = 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    int64_t bits = (k + 1023) << 52;
    double scale;
    memcpy(&scale, &bits, sizeof scale);
    return p * scale;
}
#endif
