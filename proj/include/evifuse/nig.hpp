#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "evifuse/math.hpp"

namespace evifuse {

/// Parameters of one Normal-Inverse-Gamma predictive distribution.
/// Valid iff delta is finite, gamma > 0, alpha > 1 and beta > 0.
struct NigParams {
    double delta = 0.0;  // location of the predicted mean
    double gamma = 1.0;  // virtual observation count backing delta
    double alpha = 2.0;  // inverse-gamma shape
    double beta = 1.0;   // inverse-gamma scale
};

enum class NigCheck { ok, bad_delta, bad_gamma, bad_alpha, bad_beta };

inline const char* to_string(NigCheck c) {
    switch (c) {
        case NigCheck::ok: return "ok";
        case NigCheck::bad_delta: return "violation(delta)";
        case NigCheck::bad_gamma: return "violation(gamma)";
        case NigCheck::bad_alpha: return "violation(alpha)";
        case NigCheck::bad_beta: return "violation(beta)";
    }
    return "?";
}

// Total function; reports the first violated constraint.
inline NigCheck validate(const NigParams& p) noexcept {
    if (!std::isfinite(p.delta)) return NigCheck::bad_delta;
    if (!(p.gamma > 0.0) || !std::isfinite(p.gamma)) return NigCheck::bad_gamma;
    if (!(p.alpha > 1.0) || !std::isfinite(p.alpha)) return NigCheck::bad_alpha;
    if (!(p.beta > 0.0) || !std::isfinite(p.beta)) return NigCheck::bad_beta;
    return NigCheck::ok;
}

inline bool is_valid(const NigParams& p) noexcept { return validate(p) == NigCheck::ok; }

inline void require_valid(const NigParams& p) {
    const NigCheck c = validate(p);
    if (c != NigCheck::ok)
        throw std::invalid_argument(std::string("invalid NIG parameters: ") + to_string(c));
}

/// E(sigma^2) = beta / (alpha - 1).
inline double expected_sigma2(const NigParams& p) {
    require_valid(p);
    return p.beta / (p.alpha - 1.0);
}

/// Var(mu) = beta / (gamma (alpha - 1)) = expected_sigma2 / gamma.
inline double variance_mu(const NigParams& p) {
    require_valid(p);
    return p.beta / (p.gamma * (p.alpha - 1.0));
}

/// Confidence Phi = 2 gamma + alpha.
inline double confidence(const NigParams& p) {
    require_valid(p);
    return 2.0 * p.gamma + p.alpha;
}

/// Summation operator over two NIG distributions:
///   delta = (g_t d_t + g_i d_i) / (g_t + g_i)
///   gamma = g_t + g_i
///   alpha = a_t + a_i + 1/2
///   beta  = b_t + b_i + 1/2 g_t (d_t - delta)^2 + 1/2 g_i (d_i - delta)^2
/// The fused location stays inside [min(d_t,d_i), max(d_t,d_i)] and the fused
/// gamma is the exact sum of the inputs'.
inline NigParams fuse_pair(const NigParams& t, const NigParams& i) {
    require_valid(t);
    require_valid(i);
    NigParams out;
    out.gamma = t.gamma + i.gamma;
    double delta = (t.gamma * t.delta + i.gamma * i.delta) / out.gamma;
    // keep the location on the hull even when rounding nudges it out
    delta = std::clamp(delta, std::min(t.delta, i.delta), std::max(t.delta, i.delta));
    out.delta = delta;
    out.alpha = t.alpha + i.alpha + 0.5;
    const double dt = t.delta - delta;
    const double di = i.delta - delta;
    out.beta = (t.beta + i.beta) + (0.5 * t.gamma * dt * dt + 0.5 * i.gamma * di * di);
    if (!is_valid(out))
        throw std::invalid_argument("fuse_pair produced a non-finite result");
    return out;
}

/// Uniform mixture of M >= 1 NIG components (Eq. weights are implicit 1/M).
struct NigMixture {
    std::vector<NigParams> components;
};

/// Folds fuse_pair left to right; a single component is returned unchanged.
/// The operator is commutative and associative, so the order is immaterial.
inline NigParams fuse_many(std::span<const NigParams> components) {
    if (components.empty())
        throw std::invalid_argument("fuse_many: empty mixture");
    NigParams acc = components[0];
    if (components.size() == 1) require_valid(acc);
    for (std::size_t k = 1; k < components.size(); ++k)
        acc = fuse_pair(acc, components[k]);
    return acc;
}

inline NigParams fuse_many(const NigMixture& mix) {
    return fuse_many(std::span<const NigParams>(mix.components));
}

/// Partial derivatives of a scalar loss with respect to (delta, gamma, alpha, beta).
struct NigGradient {
    double d_delta = 0.0;
    double d_gamma = 0.0;
    double d_alpha = 0.0;
    double d_beta = 0.0;
};

// Adjoint of fuse_pair: accumulates into dt/di the pullback of dout through
// the operator. Uses the identity g_t (d_t - delta) + g_i (d_i - delta) = 0,
// which collapses the delta-dependence of the beta deviation terms.
inline void fuse_pair_backward(const NigParams& t, const NigParams& i, const NigParams& out,
                               const NigGradient& dout, NigGradient& dt, NigGradient& di) {
    const double g = t.gamma + i.gamma;
    const double devt = t.delta - out.delta;
    const double devi = i.delta - out.delta;

    dt.d_delta += dout.d_delta * (t.gamma / g) + dout.d_beta * (t.gamma * devt);
    dt.d_gamma += dout.d_delta * (devt / g) + dout.d_gamma + dout.d_beta * (0.5 * devt * devt);
    dt.d_alpha += dout.d_alpha;
    dt.d_beta += dout.d_beta;

    di.d_delta += dout.d_delta * (i.gamma / g) + dout.d_beta * (i.gamma * devi);
    di.d_gamma += dout.d_delta * (devi / g) + dout.d_gamma + dout.d_beta * (0.5 * devi * devi);
    di.d_alpha += dout.d_alpha;
    di.d_beta += dout.d_beta;
}

}  // namespace evifuse
