#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "evifuse/constrain.hpp"
#include "evifuse/data.hpp"
#include "evifuse/errors.hpp"
#include "evifuse/fusion.hpp"
#include "evifuse/loss.hpp"
#include "evifuse/math.hpp"
#include "evifuse/metrics.hpp"
#include "evifuse/nig.hpp"
#include "evifuse/tags.hpp"

namespace evifuse {

// Minimal row-major dense matrix; doubles as a gradient buffer.
struct Mat {
    std::size_t rows = 0, cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}

    double* row(std::size_t i) { return v.data() + i * cols; }
    const double* row(std::size_t i) const { return v.data() + i * cols; }
    double& at(std::size_t i, std::size_t j) { return v[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

struct TrainConfig {
    int epochs = 20;
    std::size_t batch_size = 16;
    double learning_rate = 0.05;
    std::uint64_t seed = 1;
    double epsilon = kConstrainEps;   // constraint interior margin
    std::size_t hidden = 64;
    std::size_t embed_dim = 8;
    double grad_clip = 5.0;           // global gradient norm cap
    bool use_evidential_loss = true;  // off = classification-only baseline
    LossConfig loss;
    FusionConfig fusion;
    std::vector<Modality> channels = {Modality::text, Modality::image};
    int n_classes = kNumTags;
    std::size_t vocab_size = 200;
};

inline void require_valid(const TrainConfig& cfg) {
    if (cfg.epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(cfg.learning_rate > 0.0) || !std::isfinite(cfg.learning_rate))
        throw ConfigError("train: learning_rate must be > 0");
    if (!(cfg.epsilon > 0.0)) throw ConfigError("train: epsilon must be > 0");
    if (cfg.hidden < 1) throw ConfigError("train: hidden must be >= 1");
    if (!(cfg.grad_clip > 0.0)) throw ConfigError("train: grad_clip must be > 0");
    if (cfg.n_classes < 2) throw ConfigError("train: n_classes must be >= 2");
    if (cfg.channels.empty()) throw ConfigError("train: at least one channel required");
    for (std::size_t i = 0; i < cfg.channels.size(); ++i)
        for (std::size_t j = i + 1; j < cfg.channels.size(); ++j)
            if (cfg.channels[i] == cfg.channels[j])
                throw ConfigError("train: duplicate channel");
    require_valid(cfg.loss);
}

// ---------------------------------------------------------------------------
// Model shape and parameters
// ---------------------------------------------------------------------------

struct BranchChannel {
    Modality modality;
    std::size_t width;
};

/// What one branch consumes per token. The text channel contributes the token
/// embedding on top of any precomputed features; under strategy a all channels
/// feed a single branch.
struct BranchSpec {
    Modality label = Modality::text;
    bool uses_embedding = false;
    std::vector<BranchChannel> feature_channels;
    std::size_t input_width = 0;
};

/// Per-branch weights: two tanh layers over the +-1 context window, then four
/// linear head blocks (delta, gamma, alpha, beta), one row per class.
struct BranchParams {
    Mat w1;
    std::vector<double> b1;
    Mat w2;
    std::vector<double> b2;
    Mat head_w[4];                 // each classes x hidden
    std::vector<double> head_b[4]; // each classes
};

struct ModelParameters {
    // shape
    int n_classes = kNumTags;
    std::size_t hidden = 0;
    std::size_t embed_dim = 0;
    std::size_t vocab_size = 0;
    double epsilon = kConstrainEps;
    FusionConfig fusion;
    std::vector<BranchSpec> specs;

    // weights
    Mat embed;  // vocab x embed_dim
    std::vector<BranchParams> branches;
    LateDecoder decoder;  // sized only under strategy b
};

namespace detail {

inline std::size_t channel_width_in(const Dataset& data, Modality m) {
    const ModalityFeatures* f = data.front().channel(m);
    return f ? f->width : 0;
}

}  // namespace detail

inline void validate_dataset(const Dataset& data, const char* what) {
    if (data.empty()) throw DataError(std::string(what) + ": empty dataset");
    for (const auto& seq : data) require_valid(seq);
    for (const auto& c0 : data.front().channels) {
        for (const auto& seq : data) {
            const ModalityFeatures* f = seq.channel(c0.modality);
            if (!f || f->width != c0.width)
                throw DataError(std::string(what) + ": inconsistent channels across sequences");
        }
    }
}

/// Resolves the branch layout from the config and the channels the data
/// actually provides. Text may run on the embedding alone; any other
/// requested channel must be present in the data.
inline std::vector<BranchSpec> make_branch_specs(const TrainConfig& cfg, const Dataset& data) {
    std::vector<BranchChannel> available;
    for (const Modality m : cfg.channels) {
        const std::size_t w = detail::channel_width_in(data, m);
        if (w == 0 && m != Modality::text)
            throw ConfigError(std::string("channel '") + to_string(m) +
                              "' requested but the dataset provides no such features");
        if (w > 0) available.push_back({m, w});
    }
    const bool want_text =
        std::find(cfg.channels.begin(), cfg.channels.end(), Modality::text) != cfg.channels.end();
    const bool embed_on = want_text && cfg.embed_dim > 0;

    std::vector<BranchSpec> specs;
    if (cfg.fusion.strategy == FusionStrategy::concat_a) {
        BranchSpec s;
        s.label = cfg.channels.front();
        s.uses_embedding = embed_on;
        s.feature_channels = available;
        specs.push_back(std::move(s));
    } else {
        for (const Modality m : cfg.channels) {
            BranchSpec s;
            s.label = m;
            s.uses_embedding = m == Modality::text && embed_on;
            const std::size_t w = detail::channel_width_in(data, m);
            if (w > 0) s.feature_channels.push_back({m, w});
            specs.push_back(std::move(s));
        }
    }
    for (BranchSpec& s : specs) {
        s.input_width = s.uses_embedding ? cfg.embed_dim : 0;
        for (const auto& c : s.feature_channels) s.input_width += c.width;
        if (s.input_width == 0)
            throw ConfigError(std::string("branch '") + to_string(s.label) +
                              "' has no inputs (no features and no embedding)");
    }
    return specs;
}

namespace detail {

inline void fill_uniform(std::span<double> dst, double r, Rng& rng) {
    for (double& x : dst) x = rng.uniform(-r, r);
}

inline double fan_in_radius(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

}  // namespace detail

/// Seeded uniform [-r, r] initialization with r = 1/sqrt(fan-in); the draw
/// order is fixed so a seed pins every weight.
inline ModelParameters init_model(const TrainConfig& cfg, std::vector<BranchSpec> specs) {
    ModelParameters m;
    m.n_classes = cfg.n_classes;
    m.hidden = cfg.hidden;
    m.embed_dim = cfg.embed_dim;
    m.vocab_size = cfg.vocab_size;
    m.epsilon = cfg.epsilon;
    m.fusion = cfg.fusion;
    m.specs = std::move(specs);

    Rng rng(derive_seed(cfg.seed, 0x696e6974ULL));
    const std::size_t classes = static_cast<std::size_t>(cfg.n_classes);

    m.embed = Mat(cfg.vocab_size, cfg.embed_dim);
    if (cfg.embed_dim > 0)
        detail::fill_uniform(m.embed.v, detail::fan_in_radius(cfg.embed_dim), rng);

    for (const BranchSpec& s : m.specs) {
        BranchParams p;
        const std::size_t win = 3 * s.input_width;
        p.w1 = Mat(cfg.hidden, win);
        p.b1.assign(cfg.hidden, 0.0);
        p.w2 = Mat(cfg.hidden, cfg.hidden);
        p.b2.assign(cfg.hidden, 0.0);
        detail::fill_uniform(p.w1.v, detail::fan_in_radius(win), rng);
        detail::fill_uniform(p.b1, detail::fan_in_radius(win), rng);
        detail::fill_uniform(p.w2.v, detail::fan_in_radius(cfg.hidden), rng);
        detail::fill_uniform(p.b2, detail::fan_in_radius(cfg.hidden), rng);
        for (int k = 0; k < 4; ++k) {
            p.head_w[k] = Mat(classes, cfg.hidden);
            p.head_b[k].assign(classes, 0.0);
            detail::fill_uniform(p.head_w[k].v, detail::fan_in_radius(cfg.hidden), rng);
            detail::fill_uniform(p.head_b[k], detail::fan_in_radius(cfg.hidden), rng);
        }
        m.branches.push_back(std::move(p));
    }

    if (cfg.fusion.strategy == FusionStrategy::late_concat_b) {
        m.decoder.in = 4 * m.specs.size();
        m.decoder.w.assign(4 * m.decoder.in, 0.0);
        detail::fill_uniform(m.decoder.w, detail::fan_in_radius(m.decoder.in), rng);
        detail::fill_uniform(std::span<double>(m.decoder.b.data(), 4),
                             detail::fan_in_radius(m.decoder.in), rng);
    }
    return m;
}

/// Every weight tensor in a fixed order (also the checkpoint order).
inline std::vector<std::span<double>> collect_tensors(ModelParameters& m) {
    std::vector<std::span<double>> out;
    out.emplace_back(m.embed.v);
    for (BranchParams& p : m.branches) {
        out.emplace_back(p.w1.v);
        out.emplace_back(p.b1);
        out.emplace_back(p.w2.v);
        out.emplace_back(p.b2);
        for (int k = 0; k < 4; ++k) {
            out.emplace_back(p.head_w[k].v);
            out.emplace_back(p.head_b[k]);
        }
    }
    if (!m.decoder.w.empty()) {
        out.emplace_back(m.decoder.w);
        out.emplace_back(std::span<double>(m.decoder.b.data(), 4));
    }
    return out;
}

inline ModelParameters make_zero_like(const ModelParameters& m) {
    ModelParameters z = m;
    for (auto t : collect_tensors(z)) std::fill(t.begin(), t.end(), 0.0);
    return z;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

namespace detail {

struct BranchForward {
    Mat xwin;    // tokens x 3*input
    Mat h1, h2;  // tokens x hidden
    Mat raw[4];  // tokens x classes
};

struct ModelForward {
    std::vector<BranchForward> branch_fwd;
    std::vector<EvidentialOutput> branch_out;
    EvidentialOutput final_out;
    EvidentialFuseCache evidential_cache;
    LateFuseCache late_cache;
    std::vector<int> gate_selection;
};

// Per-token branch input: [embedding | channel features...], zeros off the ends.
inline void fill_branch_input(const ModelParameters& m, const BranchSpec& spec,
                              const TaggedSequence& seq, std::ptrdiff_t t, double* dst) {
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(seq.size());
    if (t < 0 || t >= n) {
        std::fill(dst, dst + spec.input_width, 0.0);
        return;
    }
    if (spec.uses_embedding) {
        const int tok = seq.tokens[static_cast<std::size_t>(t)];
        if (tok < 0 || static_cast<std::size_t>(tok) >= m.vocab_size)
            throw DataError("forward: token id out of vocabulary range");
        const double* e = m.embed.row(static_cast<std::size_t>(tok));
        dst = std::copy(e, e + m.embed_dim, dst);
    }
    for (const BranchChannel& c : spec.feature_channels) {
        const ModalityFeatures* f = seq.channel(c.modality);
        if (!f || f->width != c.width)
            throw DataError(std::string("forward: sequence lacks channel '") +
                            to_string(c.modality) + "' at the trained width");
        const double* src = f->row(static_cast<std::size_t>(t));
        dst = std::copy(src, src + c.width, dst);
    }
}

inline void forward_branch(const ModelParameters& m, std::size_t b, const TaggedSequence& seq,
                           BranchForward& fwd, EvidentialOutput& out) {
    const BranchSpec& spec = m.specs[b];
    const BranchParams& p = m.branches[b];
    const std::size_t tokens = seq.size();
    const std::size_t classes = static_cast<std::size_t>(m.n_classes);
    const std::size_t win = 3 * spec.input_width;

    fwd.xwin = Mat(tokens, win);
    fwd.h1 = Mat(tokens, m.hidden);
    fwd.h2 = Mat(tokens, m.hidden);
    for (int k = 0; k < 4; ++k) fwd.raw[k] = Mat(tokens, classes);
    out = EvidentialOutput(tokens, classes);

    for (std::size_t t = 0; t < tokens; ++t) {
        double* x = fwd.xwin.row(t);
        const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(t);
        fill_branch_input(m, spec, seq, ti - 1, x);
        fill_branch_input(m, spec, seq, ti, x + spec.input_width);
        fill_branch_input(m, spec, seq, ti + 1, x + 2 * spec.input_width);

        double* h1 = fwd.h1.row(t);
        for (std::size_t i = 0; i < m.hidden; ++i) {
            const double* w = p.w1.row(i);
            double acc = p.b1[i];
            for (std::size_t j = 0; j < win; ++j) acc += w[j] * x[j];
            h1[i] = std::tanh(acc);
        }
        double* h2 = fwd.h2.row(t);
        for (std::size_t i = 0; i < m.hidden; ++i) {
            const double* w = p.w2.row(i);
            double acc = p.b2[i];
            for (std::size_t j = 0; j < m.hidden; ++j) acc += w[j] * h1[j];
            h2[i] = std::tanh(acc);
        }
        for (int k = 0; k < 4; ++k) {
            double* raw = fwd.raw[k].row(t);
            for (std::size_t c = 0; c < classes; ++c) {
                const double* w = p.head_w[k].row(c);
                double acc = p.head_b[k][c];
                for (std::size_t j = 0; j < m.hidden; ++j) acc += w[j] * h2[j];
                raw[c] = acc;
            }
        }
        for (std::size_t c = 0; c < classes; ++c)
            out.at(t, c) = constrain(fwd.raw[0].at(t, c), fwd.raw[1].at(t, c),
                                     fwd.raw[2].at(t, c), fwd.raw[3].at(t, c), m.epsilon);
    }
}

inline void forward_model(const ModelParameters& m, const TaggedSequence& seq,
                          ModelForward& fwd, bool want_caches) {
    const std::size_t n_branches = m.specs.size();
    fwd.branch_fwd.resize(n_branches);
    fwd.branch_out.resize(n_branches);
    for (std::size_t b = 0; b < n_branches; ++b)
        forward_branch(m, b, seq, fwd.branch_fwd[b], fwd.branch_out[b]);

    const std::span<const EvidentialOutput> outs(fwd.branch_out);
    switch (m.fusion.strategy) {
        case FusionStrategy::concat_a:
            fwd.final_out = fwd.branch_out[0];
            break;
        case FusionStrategy::late_concat_b:
            fwd.final_out =
                fuse_outputs_late(outs, m.decoder, m.epsilon, want_caches ? &fwd.late_cache : nullptr);
            break;
        case FusionStrategy::uncertainty_gated_c:
            if (n_branches == 1)
                fwd.final_out = fwd.branch_out[0];
            else
                fwd.final_out = fuse_outputs_gated(outs, m.fusion, &fwd.gate_selection);
            break;
        case FusionStrategy::evidential_nig:
            fwd.final_out =
                fuse_outputs_evidential(outs, want_caches ? &fwd.evidential_cache : nullptr);
            break;
    }
}

}  // namespace detail

/// Runs one modality's encoder + heads over a feature sequence. The branch is
/// looked up by the feature's modality; branches that consume the token
/// embedding cannot be driven by features alone.
inline EvidentialOutput forward(const ModalityFeatures& features, const ModelParameters& m) {
    require_valid(features);
    for (std::size_t b = 0; b < m.specs.size(); ++b) {
        const BranchSpec& s = m.specs[b];
        if (s.feature_channels.size() == 1 && s.feature_channels[0].modality == features.modality &&
            !s.uses_embedding) {
            TaggedSequence seq;
            seq.tokens.assign(features.tokens(), 0);
            seq.tags.assign(features.tokens(), kTagO);
            seq.channels.push_back(features);
            detail::BranchForward fwd;
            EvidentialOutput out;
            detail::forward_branch(m, b, seq, fwd, out);
            return out;
        }
    }
    throw std::invalid_argument("forward: no feature-only branch matches this modality");
}

/// Full pipeline: all branch heads plus the configured fusion.
inline EvidentialOutput forward_fused(const ModelParameters& m, const TaggedSequence& seq) {
    detail::ModelForward fwd;
    detail::forward_model(m, seq, fwd, false);
    return fwd.final_out;
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

struct TagPrediction {
    std::vector<int> tags;
    std::vector<double> uncertainty;  // configured formula, winning class
};

/// Argmax over per-class delta; ties go to the lowest class index. The
/// reported uncertainty is the winning class's value under `formula`.
inline TagPrediction predict_tags(const EvidentialOutput& fused,
                                  GatingFormula formula = GatingFormula::beta_over_gamma_alpha) {
    TagPrediction pred;
    pred.tags.resize(fused.tokens);
    pred.uncertainty.resize(fused.tokens);
    for (std::size_t t = 0; t < fused.tokens; ++t) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < fused.classes; ++c)
            if (fused.at(t, c).delta > fused.at(t, best).delta) best = c;
        pred.tags[t] = static_cast<int>(best);
        pred.uncertainty[t] = uncertainty_value(fused.at(t, best), formula);
    }
    return pred;
}

// ---------------------------------------------------------------------------
// Objective and gradients
// ---------------------------------------------------------------------------

namespace detail {

struct LossSums {
    double nll = 0.0;
    double reg = 0.0;
    double ce = 0.0;
    std::size_t entries = 0;  // (branches + 1) * tokens * classes
    std::size_t tokens = 0;
};

// Adds the evidential-loss partials for one output grid; returns summed
// (nll, reg) over its entries.
inline void evidential_slot(const EvidentialOutput& out, const std::vector<int>& tags,
                            const LossConfig& loss_cfg, double scale, OutputGrad* grad,
                            double& nll_sum, double& reg_sum) {
    for (std::size_t t = 0; t < out.tokens; ++t) {
        for (std::size_t c = 0; c < out.classes; ++c) {
            const NigParams& p = out.at(t, c);
            const double target = tags[t] == static_cast<int>(c) ? 1.0 : 0.0;
            nll_sum += nll_loss(target, p);
            reg_sum += regularizer(target, p);
            if (grad) {
                const NigGradient gn = nll_gradient(target, p);
                const NigGradient gr = regularizer_gradient(target, p);
                NigGradient& dst = grad->at(t, c);
                dst.d_delta += scale * (gn.d_delta + loss_cfg.lambda * gr.d_delta);
                dst.d_gamma += scale * (gn.d_gamma + loss_cfg.lambda * gr.d_gamma);
                dst.d_alpha += scale * (gn.d_alpha + loss_cfg.lambda * gr.d_alpha);
                dst.d_beta += scale * (gn.d_beta + loss_cfg.lambda * gr.d_beta);
            }
        }
    }
}

// Cross-entropy of softmax over the final deltas against the gold class.
inline double classification_slot(const EvidentialOutput& out, const std::vector<int>& tags,
                                  double scale, OutputGrad* grad) {
    double ce_sum = 0.0;
    std::vector<double> prob(out.classes);
    for (std::size_t t = 0; t < out.tokens; ++t) {
        double mx = out.at(t, 0).delta;
        for (std::size_t c = 1; c < out.classes; ++c) mx = std::max(mx, out.at(t, c).delta);
        double z = 0.0;
        for (std::size_t c = 0; c < out.classes; ++c) {
            prob[c] = std::exp(out.at(t, c).delta - mx);
            z += prob[c];
        }
        const std::size_t gold = static_cast<std::size_t>(tags[t]);
        ce_sum += -(std::log(prob[gold]) - std::log(z));
        if (grad) {
            for (std::size_t c = 0; c < out.classes; ++c) {
                const double p = prob[c] / z;
                grad->at(t, c).d_delta += scale * (p - (c == gold ? 1.0 : 0.0));
            }
        }
    }
    return ce_sum;
}

inline void backward_branch(const ModelParameters& m, std::size_t b, const BranchForward& fwd,
                            const TaggedSequence& seq, const OutputGrad& d_out,
                            ModelParameters& grads) {
    const BranchSpec& spec = m.specs[b];
    const BranchParams& p = m.branches[b];
    BranchParams& gp = grads.branches[b];
    const std::size_t tokens = seq.size();
    const std::size_t classes = static_cast<std::size_t>(m.n_classes);
    const std::size_t win = 3 * spec.input_width;

    std::vector<double> dh2(m.hidden), dh1(m.hidden), da(m.hidden), dx(win);
    for (std::size_t t = 0; t < tokens; ++t) {
        std::fill(dh2.begin(), dh2.end(), 0.0);
        for (std::size_t c = 0; c < classes; ++c) {
            const NigGradient d_raw =
                constrain_backward(fwd.raw[1].at(t, c), fwd.raw[2].at(t, c), fwd.raw[3].at(t, c),
                                   d_out.at(t, c));
            const double dr[4] = {d_raw.d_delta, d_raw.d_gamma, d_raw.d_alpha, d_raw.d_beta};
            const double* h2 = fwd.h2.row(t);
            for (int k = 0; k < 4; ++k) {
                if (dr[k] == 0.0) continue;
                double* gw = gp.head_w[k].row(c);
                const double* w = p.head_w[k].row(c);
                for (std::size_t j = 0; j < m.hidden; ++j) {
                    gw[j] += dr[k] * h2[j];
                    dh2[j] += dr[k] * w[j];
                }
                gp.head_b[k][c] += dr[k];
            }
        }

        const double* h2 = fwd.h2.row(t);
        const double* h1 = fwd.h1.row(t);
        for (std::size_t i = 0; i < m.hidden; ++i) da[i] = dh2[i] * (1.0 - h2[i] * h2[i]);
        std::fill(dh1.begin(), dh1.end(), 0.0);
        for (std::size_t i = 0; i < m.hidden; ++i) {
            if (da[i] == 0.0) continue;
            double* gw = gp.w2.row(i);
            const double* w = p.w2.row(i);
            for (std::size_t j = 0; j < m.hidden; ++j) {
                gw[j] += da[i] * h1[j];
                dh1[j] += da[i] * w[j];
            }
            gp.b2[i] += da[i];
        }
        for (std::size_t i = 0; i < m.hidden; ++i) da[i] = dh1[i] * (1.0 - h1[i] * h1[i]);
        const double* x = fwd.xwin.row(t);
        std::fill(dx.begin(), dx.end(), 0.0);
        for (std::size_t i = 0; i < m.hidden; ++i) {
            if (da[i] == 0.0) continue;
            double* gw = gp.w1.row(i);
            const double* w = p.w1.row(i);
            for (std::size_t j = 0; j < win; ++j) {
                gw[j] += da[i] * x[j];
                dx[j] += da[i] * w[j];
            }
            gp.b1[i] += da[i];
        }

        if (spec.uses_embedding) {
            for (int o = -1; o <= 1; ++o) {
                const std::ptrdiff_t u = static_cast<std::ptrdiff_t>(t) + o;
                if (u < 0 || u >= static_cast<std::ptrdiff_t>(tokens)) continue;
                const double* slice = dx.data() + static_cast<std::size_t>(o + 1) * spec.input_width;
                double* ge = grads.embed.row(static_cast<std::size_t>(seq.tokens[static_cast<std::size_t>(u)]));
                for (std::size_t j = 0; j < m.embed_dim; ++j) ge[j] += slice[j];
            }
        }
    }
}

// Forward + loss (+ gradient accumulation when grads != nullptr) for one
// sequence. scale_u and scale_p are the per-entry weights of the evidential
// and classification means for the whole batch.
inline void accumulate_sequence(const ModelParameters& m, const TaggedSequence& seq,
                                const LossConfig& loss_cfg, bool use_evidential, double scale_u,
                                double scale_p, ModelParameters* grads, LossSums& sums) {
    ModelForward fwd;
    forward_model(m, seq, fwd, grads != nullptr);
    const std::size_t n_branches = m.specs.size();
    const std::size_t tokens = seq.size();
    const std::size_t classes = static_cast<std::size_t>(m.n_classes);

    std::vector<OutputGrad> d_branches;
    OutputGrad d_final;
    if (grads) {
        d_branches.assign(n_branches, OutputGrad(tokens, classes));
        d_final = OutputGrad(tokens, classes);
    }

    const double evid_scale = use_evidential ? scale_u : 0.0;
    for (std::size_t b = 0; b < n_branches; ++b)
        evidential_slot(fwd.branch_out[b], seq.tags, loss_cfg, evid_scale,
                        grads ? &d_branches[b] : nullptr, sums.nll, sums.reg);
    evidential_slot(fwd.final_out, seq.tags, loss_cfg, evid_scale, grads ? &d_final : nullptr,
                    sums.nll, sums.reg);
    sums.ce += classification_slot(fwd.final_out, seq.tags, scale_p, grads ? &d_final : nullptr);
    sums.entries += (n_branches + 1) * tokens * classes;
    sums.tokens += tokens;

    if (!grads) return;

    const std::span<const EvidentialOutput> outs(fwd.branch_out);
    const std::span<OutputGrad> d_br(d_branches);
    switch (m.fusion.strategy) {
        case FusionStrategy::concat_a:
            for (std::size_t i = 0; i < d_final.grads.size(); ++i) {
                NigGradient& dst = d_branches[0].grads[i];
                const NigGradient& src = d_final.grads[i];
                dst.d_delta += src.d_delta;
                dst.d_gamma += src.d_gamma;
                dst.d_alpha += src.d_alpha;
                dst.d_beta += src.d_beta;
            }
            break;
        case FusionStrategy::late_concat_b:
            fuse_outputs_late_backward(outs, m.decoder, fwd.late_cache, d_final, d_br,
                                       grads->decoder);
            break;
        case FusionStrategy::uncertainty_gated_c:
            if (n_branches == 1) {
                for (std::size_t i = 0; i < d_final.grads.size(); ++i) {
                    NigGradient& dst = d_branches[0].grads[i];
                    const NigGradient& src = d_final.grads[i];
                    dst.d_delta += src.d_delta;
                    dst.d_gamma += src.d_gamma;
                    dst.d_alpha += src.d_alpha;
                    dst.d_beta += src.d_beta;
                }
            } else {
                fuse_outputs_gated_backward(fwd.gate_selection, d_final, d_br);
            }
            break;
        case FusionStrategy::evidential_nig:
            fuse_outputs_evidential_backward(outs, fwd.evidential_cache, d_final, d_br);
            break;
    }
    for (std::size_t b = 0; b < n_branches; ++b)
        backward_branch(m, b, fwd.branch_fwd[b], seq, d_branches[b], *grads);
}

}  // namespace detail

/// Value of the optimized objective over a batch:
///   mean over (branch+final, token, class) of the evidential loss (when on)
///   + classification_weight * mean over tokens of the cross-entropy.
/// When `grads` is non-null the matching gradient is accumulated into it.
inline double batch_objective(const ModelParameters& m, std::span<const TaggedSequence> batch,
                              const TrainConfig& cfg, ModelParameters* grads,
                              detail::LossSums* sums_out = nullptr) {
    const std::size_t n_branches = m.specs.size();
    std::size_t total_tokens = 0;
    for (const auto& seq : batch) total_tokens += seq.size();
    if (total_tokens == 0) throw DataError("batch_objective: empty batch");
    const std::size_t total_entries =
        (n_branches + 1) * total_tokens * static_cast<std::size_t>(m.n_classes);

    const double scale_u = 1.0 / static_cast<double>(total_entries);
    const double scale_p = cfg.loss.classification_weight / static_cast<double>(total_tokens);

    detail::LossSums sums;
    for (const auto& seq : batch)
        detail::accumulate_sequence(m, seq, cfg.loss, cfg.use_evidential_loss, scale_u, scale_p,
                                    grads, sums);
    if (sums_out) *sums_out = sums;

    const double mean_evidential =
        (sums.nll + cfg.loss.lambda * sums.reg) / static_cast<double>(sums.entries);
    const double mean_ce = sums.ce / static_cast<double>(sums.tokens);
    return (cfg.use_evidential_loss ? mean_evidential : 0.0) +
           cfg.loss.classification_weight * mean_ce;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
    SpanScores spans;
    double mean_var_mu = 0.0;
    double mean_e_sigma2 = 0.0;
};

inline EvalResult evaluate(const ModelParameters& m, const Dataset& data) {
    EvalResult r;
    std::vector<std::vector<int>> gold, predicted;
    gold.reserve(data.size());
    predicted.reserve(data.size());
    double sum_vm = 0.0, sum_es = 0.0;
    std::size_t tokens = 0;
    for (const auto& seq : data) {
        const EvidentialOutput out = forward_fused(m, seq);
        TagPrediction pred = predict_tags(out, m.fusion.gating);
        for (std::size_t t = 0; t < out.tokens; ++t) {
            const NigParams& win = out.at(t, static_cast<std::size_t>(pred.tags[t]));
            sum_vm += win.beta / (win.gamma * (win.alpha - 1.0));
            sum_es += win.beta / (win.alpha - 1.0);
        }
        tokens += out.tokens;
        gold.push_back(seq.tags);
        predicted.push_back(std::move(pred.tags));
    }
    r.spans = span_metrics(gold, predicted);
    if (tokens > 0) {
        r.mean_var_mu = sum_vm / static_cast<double>(tokens);
        r.mean_e_sigma2 = sum_es / static_cast<double>(tokens);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainResult {
    ModelParameters model;
    std::vector<MetricsRecord> epochs;
};

/// Mini-batch gradient descent with a fixed learning rate and global
/// gradient-norm clipping. Deterministic: the seed pins initialization and
/// the batch order; reduction order is fixed.
inline TrainResult train(const Dataset& train_data, const Dataset& dev_data,
                         const TrainConfig& cfg) {
    require_valid(cfg);
    validate_dataset(train_data, "train data");
    if (!dev_data.empty()) validate_dataset(dev_data, "dev data");
    for (const auto& seq : train_data)
        for (const int tag : seq.tags)
            if (tag >= cfg.n_classes) throw DataError("train: tag id exceeds n_classes");

    TrainResult result;
    result.model = init_model(cfg, make_branch_specs(cfg, train_data));
    ModelParameters grads = make_zero_like(result.model);
    const auto model_tensors = collect_tensors(result.model);
    const auto grad_tensors = collect_tensors(grads);

    Rng shuffle_rng(derive_seed(cfg.seed, 0x73687566ULL));
    std::vector<std::size_t> order(train_data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<TaggedSequence> batch;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle(order, shuffle_rng);
        detail::LossSums epoch_sums;
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            batch.clear();
            for (std::size_t i = start; i < stop; ++i) batch.push_back(train_data[order[i]]);

            for (auto t : grad_tensors) std::fill(t.begin(), t.end(), 0.0);
            detail::LossSums sums;
            const double value = batch_objective(result.model, batch, cfg, &grads, &sums);
            if (!std::isfinite(value))
                throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) +
                                      ", batch " + std::to_string(batch_index));
            epoch_sums.nll += sums.nll;
            epoch_sums.reg += sums.reg;
            epoch_sums.ce += sums.ce;
            epoch_sums.entries += sums.entries;
            epoch_sums.tokens += sums.tokens;

            double norm2 = 0.0;
            for (auto t : grad_tensors)
                for (const double g : t) norm2 += g * g;
            const double norm = std::sqrt(norm2);
            const double step =
                cfg.learning_rate * (norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0);
            for (std::size_t k = 0; k < model_tensors.size(); ++k) {
                double* w = model_tensors[k].data();
                const double* g = grad_tensors[k].data();
                for (std::size_t j = 0; j < model_tensors[k].size(); ++j) w[j] -= step * g[j];
            }
        }

        MetricsRecord rec;
        rec.epoch = epoch;
        rec.loss = make_breakdown(epoch_sums.nll / static_cast<double>(epoch_sums.entries),
                                  epoch_sums.reg / static_cast<double>(epoch_sums.entries),
                                  epoch_sums.ce / static_cast<double>(epoch_sums.tokens), cfg.loss);
        if (!dev_data.empty()) {
            const EvalResult ev = evaluate(result.model, dev_data);
            rec.spans = ev.spans;
            rec.mean_var_mu = ev.mean_var_mu;
            rec.mean_e_sigma2 = ev.mean_e_sigma2;
        }
        result.epochs.push_back(rec);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace detail {

inline void write_tensor(std::ofstream& out, const char* name, std::size_t rows, std::size_t cols,
                         std::span<const double> v) {
    out << "TENSOR " << name << ' ' << rows << ' ' << cols << '\n';
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            if (j) out << ' ';
            out << format_double(v[i * cols + j]);
        }
        out << '\n';
    }
}

inline void read_tensor(std::ifstream& in, const std::string& want_name, std::size_t want_rows,
                        std::size_t want_cols, std::span<double> v, const std::string& path) {
    std::string kw, name;
    std::size_t rows = 0, cols = 0;
    if (!(in >> kw >> name >> rows >> cols) || kw != "TENSOR" || name != want_name)
        throw DataError("checkpoint: expected tensor '" + want_name + "' in " + path);
    if (rows != want_rows || cols != want_cols)
        throw DataError("checkpoint: tensor '" + want_name + "' has shape " + std::to_string(rows) +
                        "x" + std::to_string(cols) + ", expected " + std::to_string(want_rows) +
                        "x" + std::to_string(want_cols));
    for (double& x : v)
        if (!(in >> x) || !std::isfinite(x))
            throw DataError("checkpoint: bad value in tensor '" + want_name + "' of " + path);
}

}  // namespace detail

/// Text checkpoint: header (version, shapes, seed, config digest) followed by
/// the tensors in collect_tensors order, printed with %.17g so reloading
/// restores bit-identical forward behavior.
inline void save_checkpoint(const std::string& path, const ModelParameters& m, std::uint64_t seed,
                            const std::string& config_digest) {
    std::ofstream out(path);
    if (!out) throw DataError("save_checkpoint: cannot open " + path);
    out << "EVICKPT v1\n";
    out << "seed " << seed << '\n';
    out << "config_digest " << config_digest << '\n';
    out << "classes " << m.n_classes << '\n';
    out << "hidden " << m.hidden << '\n';
    out << "embed_dim " << m.embed_dim << '\n';
    out << "vocab " << m.vocab_size << '\n';
    out << "epsilon " << detail::format_double(m.epsilon) << '\n';
    out << "strategy " << to_string(m.fusion.strategy) << '\n';
    out << "gating " << to_string(m.fusion.gating) << '\n';
    out << "invert_gating " << (m.fusion.invert_gating ? 1 : 0) << '\n';
    out << "branches " << m.specs.size() << '\n';
    for (const BranchSpec& s : m.specs) {
        out << "branch " << to_string(s.label) << " embed " << (s.uses_embedding ? 1 : 0)
            << " channels";
        for (const BranchChannel& c : s.feature_channels)
            out << ' ' << to_string(c.modality) << ':' << c.width;
        out << '\n';
    }
    detail::write_tensor(out, "embed", m.embed.rows, m.embed.cols, m.embed.v);
    for (std::size_t b = 0; b < m.branches.size(); ++b) {
        const BranchParams& p = m.branches[b];
        const std::string prefix = "branch" + std::to_string(b) + ".";
        detail::write_tensor(out, (prefix + "w1").c_str(), p.w1.rows, p.w1.cols, p.w1.v);
        detail::write_tensor(out, (prefix + "b1").c_str(), 1, p.b1.size(), p.b1);
        detail::write_tensor(out, (prefix + "w2").c_str(), p.w2.rows, p.w2.cols, p.w2.v);
        detail::write_tensor(out, (prefix + "b2").c_str(), 1, p.b2.size(), p.b2);
        static const char* head_names[4] = {"delta", "gamma", "alpha", "beta"};
        for (int k = 0; k < 4; ++k) {
            detail::write_tensor(out, (prefix + "head_" + head_names[k] + ".w").c_str(),
                                 p.head_w[k].rows, p.head_w[k].cols, p.head_w[k].v);
            detail::write_tensor(out, (prefix + "head_" + head_names[k] + ".b").c_str(), 1,
                                 p.head_b[k].size(), p.head_b[k]);
        }
    }
    if (!m.decoder.w.empty()) {
        detail::write_tensor(out, "decoder.w", 4, m.decoder.in, m.decoder.w);
        detail::write_tensor(out, "decoder.b", 1, 4, std::span<const double>(m.decoder.b.data(), 4));
    }
    out << "END EVICKPT\n";
    if (!out) throw DataError("save_checkpoint: write failed for " + path);
}

struct CheckpointInfo {
    std::uint64_t seed = 0;
    std::string config_digest;
};

inline ModelParameters load_checkpoint(const std::string& path, CheckpointInfo* info = nullptr) {
    std::ifstream in(path);
    if (!in) throw DataError("load_checkpoint: cannot open " + path);
    std::string magic, version;
    if (!(in >> magic >> version) || magic != "EVICKPT" || version != "v1")
        throw DataError("load_checkpoint: bad header in " + path);

    ModelParameters m;
    CheckpointInfo ci;
    std::string key;
    std::size_t n_branches = 0;
    auto expect_key = [&](const char* want) {
        if (!(in >> key) || key != want)
            throw DataError(std::string("load_checkpoint: expected '") + want + "' in " + path);
    };
    expect_key("seed");
    in >> ci.seed;
    expect_key("config_digest");
    in >> ci.config_digest;
    expect_key("classes");
    in >> m.n_classes;
    expect_key("hidden");
    in >> m.hidden;
    expect_key("embed_dim");
    in >> m.embed_dim;
    expect_key("vocab");
    in >> m.vocab_size;
    expect_key("epsilon");
    in >> m.epsilon;
    expect_key("strategy");
    {
        std::string s;
        in >> s;
        const auto st = strategy_from_name(s);
        if (!st) throw DataError("load_checkpoint: unknown strategy '" + s + "' in " + path);
        m.fusion.strategy = *st;
    }
    expect_key("gating");
    {
        std::string s;
        in >> s;
        const auto g = gating_from_name(s);
        if (!g) throw DataError("load_checkpoint: unknown gating '" + s + "' in " + path);
        m.fusion.gating = *g;
    }
    expect_key("invert_gating");
    {
        int v = 0;
        in >> v;
        m.fusion.invert_gating = v != 0;
    }
    expect_key("branches");
    in >> n_branches;
    if (!in || m.n_classes < 2 || m.hidden == 0 || n_branches == 0)
        throw DataError("load_checkpoint: malformed header in " + path);

    std::string line;
    std::getline(in, line);  // finish the branches line
    for (std::size_t b = 0; b < n_branches; ++b) {
        if (!std::getline(in, line)) throw DataError("load_checkpoint: truncated branch list");
        std::istringstream ls(line);
        std::string kw, label, embed_kw, channels_kw;
        int embed_flag = 0;
        if (!(ls >> kw >> label >> embed_kw >> embed_flag >> channels_kw) || kw != "branch" ||
            embed_kw != "embed" || channels_kw != "channels")
            throw DataError("load_checkpoint: malformed branch line in " + path);
        BranchSpec s;
        const auto mod = modality_from_name(label);
        if (!mod) throw DataError("load_checkpoint: unknown modality '" + label + "'");
        s.label = *mod;
        s.uses_embedding = embed_flag != 0;
        std::string chan;
        while (ls >> chan) {
            const std::size_t colon = chan.find(':');
            if (colon == std::string::npos)
                throw DataError("load_checkpoint: malformed channel '" + chan + "'");
            const auto cm = modality_from_name(chan.substr(0, colon));
            if (!cm) throw DataError("load_checkpoint: unknown channel in '" + chan + "'");
            s.feature_channels.push_back({*cm, std::stoul(chan.substr(colon + 1))});
        }
        s.input_width = s.uses_embedding ? m.embed_dim : 0;
        for (const auto& c : s.feature_channels) s.input_width += c.width;
        m.specs.push_back(std::move(s));
    }

    m.embed = Mat(m.vocab_size, m.embed_dim);
    detail::read_tensor(in, "embed", m.vocab_size, m.embed_dim, m.embed.v, path);
    for (std::size_t b = 0; b < n_branches; ++b) {
        BranchParams p;
        const std::string prefix = "branch" + std::to_string(b) + ".";
        const std::size_t win = 3 * m.specs[b].input_width;
        p.w1 = Mat(m.hidden, win);
        p.b1.assign(m.hidden, 0.0);
        p.w2 = Mat(m.hidden, m.hidden);
        p.b2.assign(m.hidden, 0.0);
        detail::read_tensor(in, prefix + "w1", m.hidden, win, p.w1.v, path);
        detail::read_tensor(in, prefix + "b1", 1, m.hidden, p.b1, path);
        detail::read_tensor(in, prefix + "w2", m.hidden, m.hidden, p.w2.v, path);
        detail::read_tensor(in, prefix + "b2", 1, m.hidden, p.b2, path);
        static const char* head_names[4] = {"delta", "gamma", "alpha", "beta"};
        const std::size_t classes = static_cast<std::size_t>(m.n_classes);
        for (int k = 0; k < 4; ++k) {
            p.head_w[k] = Mat(classes, m.hidden);
            p.head_b[k].assign(classes, 0.0);
            detail::read_tensor(in, prefix + "head_" + head_names[k] + ".w", classes, m.hidden,
                                p.head_w[k].v, path);
            detail::read_tensor(in, prefix + "head_" + head_names[k] + ".b", 1, classes,
                                p.head_b[k], path);
        }
        m.branches.push_back(std::move(p));
    }
    if (m.fusion.strategy == FusionStrategy::late_concat_b) {
        m.decoder.in = 4 * n_branches;
        m.decoder.w.assign(4 * m.decoder.in, 0.0);
        detail::read_tensor(in, "decoder.w", 4, m.decoder.in, m.decoder.w, path);
        detail::read_tensor(in, "decoder.b", 1, 4, std::span<double>(m.decoder.b.data(), 4), path);
    }
    std::string end_kw, end_name;
    if (!(in >> end_kw >> end_name) || end_kw != "END" || end_name != "EVICKPT")
        throw DataError("load_checkpoint: missing END marker in " + path);
    if (info) *info = ci;
    return m;
}

}  // namespace evifuse
