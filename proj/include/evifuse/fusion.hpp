#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "evifuse/constrain.hpp"
#include "evifuse/data.hpp"
#include "evifuse/nig.hpp"

namespace evifuse {

enum class FusionStrategy : int {
    concat_a = 0,           // concatenate input features, single branch
    late_concat_b = 1,      // concatenate branch NIG params into a linear decoder
    uncertainty_gated_c = 2, // per token/class pick the lowest-uncertainty branch
    evidential_nig = 3,      // NIG summation across branches
};

enum class GatingFormula : int {
    beta_over_gamma_alpha = 0,  // beta / (gamma (alpha-1)), a.k.a. var_mu
    beta_over_alpha = 1,        // beta / (alpha-1),          a.k.a. e_sigma2
};

inline const char* to_string(FusionStrategy s) {
    switch (s) {
        case FusionStrategy::concat_a: return "a";
        case FusionStrategy::late_concat_b: return "b";
        case FusionStrategy::uncertainty_gated_c: return "c";
        case FusionStrategy::evidential_nig: return "evidential";
    }
    return "?";
}

inline std::optional<FusionStrategy> strategy_from_name(std::string_view name) {
    if (name == "a") return FusionStrategy::concat_a;
    if (name == "b") return FusionStrategy::late_concat_b;
    if (name == "c") return FusionStrategy::uncertainty_gated_c;
    if (name == "evidential") return FusionStrategy::evidential_nig;
    return std::nullopt;
}

inline const char* to_string(GatingFormula g) {
    return g == GatingFormula::beta_over_gamma_alpha ? "var_mu" : "e_sigma2";
}

inline std::optional<GatingFormula> gating_from_name(std::string_view name) {
    if (name == "var_mu") return GatingFormula::beta_over_gamma_alpha;
    if (name == "e_sigma2") return GatingFormula::beta_over_alpha;
    return std::nullopt;
}

struct FusionConfig {
    FusionStrategy strategy = FusionStrategy::evidential_nig;
    GatingFormula gating = GatingFormula::beta_over_gamma_alpha;
    bool invert_gating = false;  // pick the highest-uncertainty branch instead
                                 // (diagnostic worst case for strategy c)
};

// Uncertainty under the configured formula; assumes valid params.
inline double uncertainty_value(const NigParams& p, GatingFormula g) {
    return g == GatingFormula::beta_over_gamma_alpha ? p.beta / (p.gamma * (p.alpha - 1.0))
                                                     : p.beta / (p.alpha - 1.0);
}

/// Per-token, per-class grid of NIG parameters emitted by one head or fusion.
struct EvidentialOutput {
    std::size_t tokens = 0;
    std::size_t classes = 0;
    std::vector<NigParams> params;

    EvidentialOutput() = default;
    EvidentialOutput(std::size_t t, std::size_t c) : tokens(t), classes(c), params(t * c) {}

    NigParams& at(std::size_t t, std::size_t c) { return params[t * classes + c]; }
    const NigParams& at(std::size_t t, std::size_t c) const { return params[t * classes + c]; }
};

/// Same grid shape, holding loss partials per NIG parameter.
struct OutputGrad {
    std::size_t tokens = 0;
    std::size_t classes = 0;
    std::vector<NigGradient> grads;

    OutputGrad() = default;
    OutputGrad(std::size_t t, std::size_t c) : tokens(t), classes(c), grads(t * c) {}

    NigGradient& at(std::size_t t, std::size_t c) { return grads[t * classes + c]; }
    const NigGradient& at(std::size_t t, std::size_t c) const { return grads[t * classes + c]; }
};

namespace detail {

inline void require_same_shape(std::span<const EvidentialOutput> outputs) {
    if (outputs.empty()) throw std::invalid_argument("fusion: no branch outputs");
    for (const auto& o : outputs)
        if (o.tokens != outputs[0].tokens || o.classes != outputs[0].classes)
            throw std::invalid_argument("fusion: branch output shape mismatch");
}

}  // namespace detail

/// Strategy a: concatenate the channels' per-token vectors in list order.
inline ModalityFeatures fuse_features_concat(std::span<const ModalityFeatures> channels) {
    if (channels.empty()) throw std::invalid_argument("fuse_features_concat: no channels");
    const std::size_t tokens = channels[0].tokens();
    std::size_t width = 0;
    for (const auto& c : channels) {
        if (c.tokens() != tokens)
            throw std::invalid_argument("fuse_features_concat: token count mismatch");
        width += c.width;
    }
    ModalityFeatures out{channels[0].modality, width, {}};
    out.values.resize(tokens * width);
    for (std::size_t t = 0; t < tokens; ++t) {
        double* dst = out.row(t);
        for (const auto& c : channels) {
            const double* src = c.row(t);
            for (std::size_t j = 0; j < c.width; ++j) *dst++ = src[j];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Strategy b: linear decoder over concatenated branch parameters
// ---------------------------------------------------------------------------

/// Single linear layer mapping the 4*B concatenated branch parameters of one
/// token/class onto four raw activations, finished by constrain.
struct LateDecoder {
    std::size_t in = 0;             // 4 * branch count
    std::vector<double> w;          // 4 x in, row-major
    std::array<double, 4> b{};

    double* row(std::size_t k) { return w.data() + k * in; }
    const double* row(std::size_t k) const { return w.data() + k * in; }
};

struct LateFuseCache {
    std::vector<std::array<double, 4>> raws;  // per token*class
};

inline EvidentialOutput fuse_outputs_late(std::span<const EvidentialOutput> outputs,
                                          const LateDecoder& decoder, double eps = kConstrainEps,
                                          LateFuseCache* cache = nullptr) {
    detail::require_same_shape(outputs);
    const std::size_t n_branches = outputs.size();
    if (decoder.in != 4 * n_branches)
        throw std::invalid_argument("fuse_outputs_late: decoder input width mismatch");
    EvidentialOutput out(outputs[0].tokens, outputs[0].classes);
    if (cache) cache->raws.assign(out.tokens * out.classes, {});
    std::vector<double> v(decoder.in);
    for (std::size_t idx = 0; idx < out.params.size(); ++idx) {
        for (std::size_t br = 0; br < n_branches; ++br) {
            const NigParams& p = outputs[br].params[idx];
            v[4 * br + 0] = p.delta;
            v[4 * br + 1] = p.gamma;
            v[4 * br + 2] = p.alpha;
            v[4 * br + 3] = p.beta;
        }
        std::array<double, 4> raw{};
        for (std::size_t k = 0; k < 4; ++k) {
            double acc = decoder.b[k];
            const double* wr = decoder.row(k);
            for (std::size_t j = 0; j < decoder.in; ++j) acc += wr[j] * v[j];
            raw[k] = acc;
        }
        if (cache) cache->raws[idx] = raw;
        out.params[idx] = constrain(raw[0], raw[1], raw[2], raw[3], eps);
    }
    return out;
}

// d_decoder accumulates into a LateDecoder-shaped buffer.
inline void fuse_outputs_late_backward(std::span<const EvidentialOutput> outputs,
                                       const LateDecoder& decoder, const LateFuseCache& cache,
                                       const OutputGrad& d_final,
                                       std::span<OutputGrad> d_branches,
                                       LateDecoder& d_decoder) {
    const std::size_t n_branches = outputs.size();
    if (d_decoder.w.size() != decoder.w.size()) {
        d_decoder.in = decoder.in;
        d_decoder.w.assign(decoder.w.size(), 0.0);
    }
    std::vector<double> v(decoder.in);
    for (std::size_t idx = 0; idx < d_final.grads.size(); ++idx) {
        const auto& raw = cache.raws[idx];
        const NigGradient d_raw = constrain_backward(raw[1], raw[2], raw[3], d_final.grads[idx]);
        const std::array<double, 4> dr{d_raw.d_delta, d_raw.d_gamma, d_raw.d_alpha, d_raw.d_beta};
        for (std::size_t br = 0; br < n_branches; ++br) {
            const NigParams& p = outputs[br].params[idx];
            v[4 * br + 0] = p.delta;
            v[4 * br + 1] = p.gamma;
            v[4 * br + 2] = p.alpha;
            v[4 * br + 3] = p.beta;
        }
        std::array<double, 4> dv_slot{};
        for (std::size_t br = 0; br < n_branches; ++br) {
            dv_slot = {0.0, 0.0, 0.0, 0.0};
            for (std::size_t k = 0; k < 4; ++k) {
                const double* wr = decoder.row(k);
                for (std::size_t j = 0; j < 4; ++j) dv_slot[j] += wr[4 * br + j] * dr[k];
            }
            NigGradient& dg = d_branches[br].grads[idx];
            dg.d_delta += dv_slot[0];
            dg.d_gamma += dv_slot[1];
            dg.d_alpha += dv_slot[2];
            dg.d_beta += dv_slot[3];
        }
        for (std::size_t k = 0; k < 4; ++k) {
            double* dwr = d_decoder.row(k);
            for (std::size_t j = 0; j < decoder.in; ++j) dwr[j] += dr[k] * v[j];
            d_decoder.b[k] += dr[k];
        }
    }
}

// ---------------------------------------------------------------------------
// Strategy c: uncertainty-gated selection
// ---------------------------------------------------------------------------

/// Per token/class, selects the branch whose params score the lowest
/// configured uncertainty (ties to the lowest branch index). The output is
/// always exactly one of the inputs; `selection`, when given, records which.
inline EvidentialOutput fuse_outputs_gated(std::span<const EvidentialOutput> outputs,
                                           const FusionConfig& cfg,
                                           std::vector<int>* selection = nullptr) {
    detail::require_same_shape(outputs);
    if (outputs.size() < 2)
        throw std::invalid_argument("fuse_outputs_gated: need at least 2 branches");
    EvidentialOutput out(outputs[0].tokens, outputs[0].classes);
    if (selection) selection->assign(out.params.size(), 0);
    for (std::size_t idx = 0; idx < out.params.size(); ++idx) {
        std::size_t best = 0;
        double best_u = uncertainty_value(outputs[0].params[idx], cfg.gating);
        for (std::size_t br = 1; br < outputs.size(); ++br) {
            const double u = uncertainty_value(outputs[br].params[idx], cfg.gating);
            const bool better = cfg.invert_gating ? u > best_u : u < best_u;
            if (better) {
                best = br;
                best_u = u;
            }
        }
        out.params[idx] = outputs[best].params[idx];
        if (selection) (*selection)[idx] = static_cast<int>(best);
    }
    return out;
}

inline void fuse_outputs_gated_backward(const std::vector<int>& selection,
                                        const OutputGrad& d_final,
                                        std::span<OutputGrad> d_branches) {
    for (std::size_t idx = 0; idx < d_final.grads.size(); ++idx) {
        NigGradient& dst = d_branches[static_cast<std::size_t>(selection[idx])].grads[idx];
        const NigGradient& src = d_final.grads[idx];
        dst.d_delta += src.d_delta;
        dst.d_gamma += src.d_gamma;
        dst.d_alpha += src.d_alpha;
        dst.d_beta += src.d_beta;
    }
}

// ---------------------------------------------------------------------------
// Evidential fusion: NIG summation across branches
// ---------------------------------------------------------------------------

struct EvidentialFuseCache {
    std::size_t n_branches = 0;
    // partial folds z_k per token*class, k = 0..B-1 (z_{B-1} is the output)
    std::vector<NigParams> partials;
};

/// Applies fuse_many across the branches at every token/class.
inline EvidentialOutput fuse_outputs_evidential(std::span<const EvidentialOutput> outputs,
                                                EvidentialFuseCache* cache = nullptr) {
    detail::require_same_shape(outputs);
    const std::size_t n_branches = outputs.size();
    EvidentialOutput out(outputs[0].tokens, outputs[0].classes);
    if (cache) {
        cache->n_branches = n_branches;
        cache->partials.assign(out.params.size() * n_branches, NigParams{});
    }
    for (std::size_t idx = 0; idx < out.params.size(); ++idx) {
        NigParams acc = outputs[0].params[idx];
        if (cache) cache->partials[idx * n_branches] = acc;
        for (std::size_t br = 1; br < n_branches; ++br) {
            acc = fuse_pair(acc, outputs[br].params[idx]);
            if (cache) cache->partials[idx * n_branches + br] = acc;
        }
        out.params[idx] = acc;
    }
    return out;
}

inline void fuse_outputs_evidential_backward(std::span<const EvidentialOutput> outputs,
                                             const EvidentialFuseCache& cache,
                                             const OutputGrad& d_final,
                                             std::span<OutputGrad> d_branches) {
    const std::size_t n_branches = cache.n_branches;
    for (std::size_t idx = 0; idx < d_final.grads.size(); ++idx) {
        const NigParams* z = cache.partials.data() + idx * n_branches;
        NigGradient dz = d_final.grads[idx];
        for (std::size_t br = n_branches; br-- > 1;) {
            NigGradient dz_prev, dp;
            fuse_pair_backward(z[br - 1], outputs[br].params[idx], z[br], dz, dz_prev, dp);
            NigGradient& dst = d_branches[br].grads[idx];
            dst.d_delta += dp.d_delta;
            dst.d_gamma += dp.d_gamma;
            dst.d_alpha += dp.d_alpha;
            dst.d_beta += dp.d_beta;
            dz = dz_prev;
        }
        NigGradient& d0 = d_branches[0].grads[idx];
        d0.d_delta += dz.d_delta;
        d0.d_gamma += dz.d_gamma;
        d0.d_alpha += dz.d_alpha;
        d0.d_beta += dz.d_beta;
    }
}

/// Per token/class NIG summation across >= 1 branches (single branch is the
/// identity). Shape-checked; no gradient bookkeeping.
inline EvidentialOutput fuse_outputs_evidential(const std::vector<EvidentialOutput>& outputs) {
    return fuse_outputs_evidential(std::span<const EvidentialOutput>(outputs));
}

}  // namespace evifuse
