#pragma once

#include <cmath>

namespace xmq {

// Gaussian-CDF form of GELU.
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_grad(double x) {
    double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

// Phish: x * tanh(GELU(x)).
inline double phish(double x) { return x * std::tanh(gelu(x)); }

inline double phish_grad(double x) {
    double g = gelu(x);
    double t = std::tanh(g);
    return t + x * (1.0 - t * t) * gelu_grad(x);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace xmq
