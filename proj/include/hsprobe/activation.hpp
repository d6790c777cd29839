#pragma once

#include <cmath>
#include <numbers>

namespace hsprobe {

// tanh approximation of GELU, written as x * sigmoid(2y) with
// y = sqrt(2/pi) (x + 0.044715 x^3); 0.5 (1 + tanh y) == sigmoid(2y) and exp is
// several times cheaper than tanh.
inline double gelu(double x) noexcept {
    constexpr double c = 0.7978845608028654;  // sqrt(2 / pi)
    return x / (1.0 + std::exp(-2.0 * c * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) noexcept {
    constexpr double c = 0.7978845608028654;
    const double s = 1.0 / (1.0 + std::exp(-2.0 * c * (x + 0.044715 * x * x * x)));
    return s + 2.0 * x * s * (1.0 - s) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

inline double sigmoid(double x) noexcept {
    if (x >= 0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double z = std::exp(x);
    return z / (1.0 + z);
}

// log(sigmoid(x)) without overflow
inline double log_sigmoid(double x) noexcept {
    return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

}  // namespace hsprobe
