#pragma once

#include <cmath>
#include <cstdint>

#include "treedose/error.hpp"
#include "treedose/rng.hpp"

namespace treedose {

// Hand-rolled scalar samplers. The standard-library distributions are
// stateful or consume a platform-dependent number of engine words; these
// keep draw sequences reproducible under the determinism contract.

inline double draw_uniform(Rng& rng) {
    // 53-bit mantissa in [0, 1)
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline int draw_index(Rng& rng, int n) {
    const int i = static_cast<int>(draw_uniform(rng) * n);
    return i >= n ? n - 1 : i;
}

inline double draw_normal(Rng& rng) {
    // Box-Muller, cosine branch only (no cached second variate).
    double u1 = draw_uniform(rng);
    const double u2 = draw_uniform(rng);
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

// Marsaglia-Tsang; shape boost for shape < 1. Unit scale.
inline double draw_gamma(Rng& rng, double shape) {
    if (!(shape > 0.0)) throw ValidationError("gamma shape must be positive");
    if (shape < 1.0) {
        const double g = draw_gamma(rng, shape + 1.0);
        double u = draw_uniform(rng);
        if (u <= 0.0) u = 0x1.0p-53;
        return g * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x = draw_normal(rng);
        double v = 1.0 + c * x;
        if (v <= 0.0) continue;
        v = v * v * v;
        const double u = draw_uniform(rng);
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
        if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
}

// IG(shape, rate): density proportional to x^{-shape-1} exp(-rate / x).
inline double draw_inverse_gamma(Rng& rng, double shape, double rate) {
    if (!(rate > 0.0)) throw ValidationError("inverse-gamma rate must be positive");
    return rate / draw_gamma(rng, shape);
}

}  // namespace treedose
