#pragma once

#include <cfenv>
#include <cmath>

#include "scd/tensor.hpp"

namespace scd {

// Round a double to the nearest IEEE 754 binary16 value (ties to even) and
// return it widened back to double. |x| above the binary16 midpoint 65520
// saturates to infinity; magnitudes below half the smallest subnormal flush
// to zero. NaN and infinities propagate.
inline double to_binary16(double x) {
    if (std::isnan(x) || std::isinf(x)) return x;
    if (x == 0.0) return x;  // preserves signed zero

    const double a = std::fabs(x);
    const double sign = x < 0.0 ? -1.0 : 1.0;

    // 65504 is the largest finite half; its ulp is 32, so >= 65520 rounds up
    // to 2^16 which does not exist in the format.
    if (a >= 65520.0) return sign * HUGE_VAL;

    int k = 0;
    (void)std::frexp(a, &k);     // a = f * 2^k with f in [0.5, 1)
    const int e = k - 1;         // a in [2^e, 2^{e+1})

    // Normal halves carry 10 fraction bits; below 2^-14 the quantum is fixed
    // at the subnormal step 2^-24.
    const double quantum = (e >= -14) ? std::ldexp(1.0, e - 10) : 0x1.0p-24;
    const double q = a / quantum;          // exact: quantum is a power of two
    const double r = std::nearbyint(q);    // round half to even (default mode)
    return sign * r * quantum;
}

// Elementwise binary16 rounding; idempotent.
inline Tensor4 quantize_tensor(const Tensor4& x) {
    Tensor4 out = x;
    for (double& v : out.vec()) v = to_binary16(v);
    return out;
}

inline void quantize_in_place(Tensor4& x) {
    for (double& v : x.vec()) v = to_binary16(v);
}

}  // namespace scd
