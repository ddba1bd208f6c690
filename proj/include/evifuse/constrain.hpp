#pragma once

#include <cmath>
#include <stdexcept>

#include "evifuse/math.hpp"
#include "evifuse/nig.hpp"

namespace evifuse {

inline constexpr double kConstrainEps = 1e-6;

/// Maps four raw head activations onto a strictly valid NigParams:
///   delta = raw_d, gamma = softplus(raw_g)+eps,
///   alpha = 1+softplus(raw_a)+eps, beta = softplus(raw_b)+eps.
inline NigParams constrain(double raw_delta, double raw_gamma, double raw_alpha, double raw_beta,
                           double eps = kConstrainEps) {
    if (!std::isfinite(raw_delta) || !std::isfinite(raw_gamma) || !std::isfinite(raw_alpha) ||
        !std::isfinite(raw_beta))
        throw std::invalid_argument("constrain: non-finite raw activation");
    return NigParams{raw_delta, softplus(raw_gamma) + eps, 1.0 + softplus(raw_alpha) + eps,
                     softplus(raw_beta) + eps};
}

/// Chain rule through constrain: raw-space gradient from a parameter-space one.
inline NigGradient constrain_backward(double raw_gamma, double raw_alpha, double raw_beta,
                                      const NigGradient& d_params) {
    NigGradient d_raw;
    d_raw.d_delta = d_params.d_delta;
    d_raw.d_gamma = d_params.d_gamma * sigmoid(raw_gamma);
    d_raw.d_alpha = d_params.d_alpha * sigmoid(raw_alpha);
    d_raw.d_beta = d_params.d_beta * sigmoid(raw_beta);
    return d_raw;
}

}  // namespace evifuse
