#pragma once

#include <cmath>
#include <stdexcept>

#include "evifuse/math.hpp"
#include "evifuse/nig.hpp"

namespace evifuse {

struct LossConfig {
    double lambda = 0.01;                // weight of the evidence regularizer
    double classification_weight = 1.0;  // weight of the classification term
};

inline void require_valid(const LossConfig& cfg) {
    if (!std::isfinite(cfg.lambda) || cfg.lambda < 0.0)
        throw std::invalid_argument("LossConfig: lambda must be finite and >= 0");
    if (!std::isfinite(cfg.classification_weight) || cfg.classification_weight < 0.0)
        throw std::invalid_argument("LossConfig: classification_weight must be finite and >= 0");
}

/// One scalar loss split into its named parts.
/// evidential_total = nll + lambda * regularizer
/// grand_total      = evidential_total + classification_weight * classification
struct LossBreakdown {
    double nll = 0.0;
    double regularizer = 0.0;
    double evidential_total = 0.0;
    double classification = 0.0;
    double grand_total = 0.0;
};

inline LossBreakdown make_breakdown(double nll, double reg, double classification,
                                    const LossConfig& cfg) {
    LossBreakdown b;
    b.nll = nll;
    b.regularizer = reg;
    b.evidential_total = nll + cfg.lambda * reg;
    b.classification = classification;
    b.grand_total = b.evidential_total + cfg.classification_weight * classification;
    return b;
}

namespace detail {

inline void require_finite_target(double target) {
    if (!std::isfinite(target))
        throw std::invalid_argument("loss: target must be finite");
}

}  // namespace detail

/// Negative log marginal likelihood of a target under NIG(delta,gamma,alpha,beta):
///   1/2 log(pi/gamma) - alpha log(Omega) + (alpha+1/2) log((y-delta)^2 gamma + Omega)
///   + lgamma(alpha) - lgamma(alpha+1/2),   Omega = 2 beta (1+gamma).
/// The log-gamma difference is never formed through Gamma ratios, which would
/// overflow past alpha ~ 170.
inline double nll_loss(double target, const NigParams& p) {
    require_valid(p);
    detail::require_finite_target(target);
    const double r = target - p.delta;
    const double omega = 2.0 * p.beta * (1.0 + p.gamma);
    const double v = 0.5 * std::log(kPi / p.gamma) - p.alpha * std::log(omega) +
                     (p.alpha + 0.5) * std::log(r * r * p.gamma + omega) +
                     std::lgamma(p.alpha) - std::lgamma(p.alpha + 0.5);
    if (!std::isfinite(v))
        throw std::invalid_argument("nll_loss: non-finite result");
    return v;
}

/// Evidence regularizer |y - delta| * (2 gamma + alpha).
inline double regularizer(double target, const NigParams& p) {
    require_valid(p);
    detail::require_finite_target(target);
    return std::abs(target - p.delta) * (2.0 * p.gamma + p.alpha);
}

/// nll + lambda * regularizer.
inline double evidential_loss(double target, const NigParams& p, const LossConfig& cfg) {
    require_valid(cfg);
    return nll_loss(target, p) + cfg.lambda * regularizer(target, p);
}

/// evidential + classification_weight * classification.
inline double total_loss(double evidential, double classification, const LossConfig& cfg) {
    require_valid(cfg);
    return evidential + cfg.classification_weight * classification;
}

/// Analytic partials of nll_loss. The digamma pair comes from the
/// log-gamma difference in the alpha direction.
inline NigGradient nll_gradient(double target, const NigParams& p) {
    require_valid(p);
    detail::require_finite_target(target);
    const double r = target - p.delta;
    const double omega = 2.0 * p.beta * (1.0 + p.gamma);
    const double s = r * r * p.gamma + omega;

    NigGradient g;
    g.d_delta = (p.alpha + 0.5) * (-2.0 * r * p.gamma) / s;
    g.d_gamma = -0.5 / p.gamma - p.alpha / (1.0 + p.gamma) +
                (p.alpha + 0.5) * (r * r + 2.0 * p.beta) / s;
    g.d_alpha = -std::log(omega) + std::log(s) + detail::digamma(p.alpha) -
                detail::digamma(p.alpha + 0.5);
    g.d_beta = -p.alpha / p.beta + (p.alpha + 0.5) * 2.0 * (1.0 + p.gamma) / s;
    return g;
}

/// Partials of the regularizer. At target == delta the kink of |.| is
/// resolved with the zero subgradient.
inline NigGradient regularizer_gradient(double target, const NigParams& p) {
    require_valid(p);
    detail::require_finite_target(target);
    const double r = target - p.delta;
    NigGradient g;
    if (r == 0.0) return g;
    const double sign = r > 0.0 ? 1.0 : -1.0;
    g.d_delta = -sign * (2.0 * p.gamma + p.alpha);
    g.d_gamma = 2.0 * std::abs(r);
    g.d_alpha = std::abs(r);
    g.d_beta = 0.0;
    return g;
}

}  // namespace evifuse
