#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "evifuse/errors.hpp"
#include "evifuse/math.hpp"
#include "evifuse/tags.hpp"

namespace evifuse {

enum class Modality : int { text = 0, image = 1, pretrained = 2 };

inline const char* to_string(Modality m) {
    switch (m) {
        case Modality::text: return "text";
        case Modality::image: return "image";
        case Modality::pretrained: return "pretrained";
    }
    return "?";
}

inline std::optional<Modality> modality_from_name(std::string_view name) {
    if (name == "text") return Modality::text;
    if (name == "image") return Modality::image;
    if (name == "pretrained") return Modality::pretrained;
    return std::nullopt;
}

/// Fixed-width feature sequence for one modality; row-major tokens x width.
struct ModalityFeatures {
    Modality modality = Modality::text;
    std::size_t width = 0;
    std::vector<double> values;

    std::size_t tokens() const { return width == 0 ? 0 : values.size() / width; }
    const double* row(std::size_t t) const { return values.data() + t * width; }
    double* row(std::size_t t) { return values.data() + t * width; }
};

inline void require_valid(const ModalityFeatures& f) {
    if (f.width == 0) throw DataError("features: width must be > 0");
    if (f.values.size() % f.width != 0)
        throw DataError("features: value count is not a multiple of the width");
    for (const double v : f.values)
        if (!std::isfinite(v)) throw DataError("features: non-finite value");
}

/// One example: token ids, BIO tags, and per-modality feature channels.
/// Surfaces are kept when the sequence came from a text corpus.
struct TaggedSequence {
    std::vector<int> tokens;
    std::vector<int> tags;
    std::vector<ModalityFeatures> channels;
    std::vector<std::string> surfaces;  // empty unless read from file

    std::size_t size() const { return tokens.size(); }

    const ModalityFeatures* channel(Modality m) const {
        for (const auto& c : channels)
            if (c.modality == m) return &c;
        return nullptr;
    }
};

inline void require_valid(const TaggedSequence& s) {
    if (s.tokens.size() != s.tags.size())
        throw DataError("sequence: token/tag length mismatch");
    if (!s.surfaces.empty() && s.surfaces.size() != s.tokens.size())
        throw DataError("sequence: surface/token length mismatch");
    for (const int t : s.tags)
        if (t < 0 || t >= kNumTags) throw DataError("sequence: tag id out of range");
    if (!bio_well_formed(s.tags)) throw DataError("sequence: ill-formed BIO tags");
    for (const auto& c : s.channels) {
        require_valid(c);
        if (c.tokens() != s.tokens.size())
            throw DataError("sequence: feature length does not match token count");
    }
}

using Dataset = std::vector<TaggedSequence>;

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Controls for the synthetic multimodal benchmark generator.
struct SynthConfig {
    std::size_t vocab_size = 200;
    std::size_t sequence_count = 100;
    std::size_t min_length = 5;
    std::size_t max_length = 20;
    double entity_density = 0.3;   // expected fraction of tokens inside entities
    double sigma_text = 0.0;       // feature corruption std, text channel
    double sigma_image = 0.0;      // feature corruption std, image channel
    double conflict_rate = 0.0;    // rho: fraction of entity spans whose image
                                   // channel encodes a different category
    std::size_t feature_width = 8;
    std::uint64_t seed = 0;
};

namespace detail {

// Entity spans are 1..3 tokens and always followed by at least one O token,
// so a window of +-1 suffices to separate B from I. Mean span length 2 makes
// density infeasible at or above 2/3.
inline constexpr double kMeanSpanLen = 2.0;

inline double span_start_probability(double density) {
    return density / (kMeanSpanLen * (1.0 - density));
}

}  // namespace detail

inline void require_valid(const SynthConfig& cfg) {
    if (cfg.vocab_size == 0) throw ConfigError("synth: vocab_size must be > 0");
    if (cfg.sequence_count == 0) throw ConfigError("synth: sequence_count must be > 0");
    if (cfg.min_length == 0 || cfg.min_length > cfg.max_length)
        throw ConfigError("synth: need 0 < min_length <= max_length");
    if (!(cfg.entity_density >= 0.0) ||
        cfg.entity_density >= detail::kMeanSpanLen / (detail::kMeanSpanLen + 1.0))
        throw ConfigError("synth: entity_density infeasible (must be in [0, 2/3))");
    if (!(cfg.sigma_text >= 0.0) || !(cfg.sigma_image >= 0.0))
        throw ConfigError("synth: noise sigmas must be >= 0");
    if (!(cfg.conflict_rate >= 0.0) || !(cfg.conflict_rate <= 1.0))
        throw ConfigError("synth: conflict_rate must be in [0, 1]");
    if (cfg.feature_width == 0) throw ConfigError("synth: feature_width must be > 0");
}

// Class-informative prototype: one fixed random unit vector per (modality,
// feature class), drawn once from the dataset seed. Feature class 0 is O,
// classes 1..4 are the entity categories.
inline std::vector<double> category_prototype(std::uint64_t seed, Modality m, int feature_class,
                                              std::size_t width) {
    Rng rng(derive_seed(derive_seed(seed, 0x70726f74ULL + static_cast<std::uint64_t>(m)),
                        static_cast<std::uint64_t>(feature_class)));
    std::vector<double> v(width);
    double norm2 = 0.0;
    for (double& x : v) {
        x = rng.normal();
        norm2 += x * x;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (double& x : v) x *= inv;
    return v;
}

/// Deterministic synthetic dataset: gold BIO tags, uniform token ids, and per
/// modality features built from category prototypes plus Gaussian noise. At
/// conflict spans the image channel is built from a wrong category's prototype
/// for the whole span. `first_index` offsets the per-sequence seed stream so
/// disjoint splits can share one config.
inline Dataset generate(const SynthConfig& cfg, std::size_t first_index = 0) {
    require_valid(cfg);
    const double p_start = detail::span_start_probability(cfg.entity_density);

    std::vector<std::vector<double>> proto_text, proto_image;
    for (int fc = 0; fc < 1 + kNumCategories; ++fc) {
        proto_text.push_back(category_prototype(cfg.seed, Modality::text, fc, cfg.feature_width));
        proto_image.push_back(category_prototype(cfg.seed, Modality::image, fc, cfg.feature_width));
    }

    Dataset out;
    out.reserve(cfg.sequence_count);
    for (std::size_t s = 0; s < cfg.sequence_count; ++s) {
        Rng rng(derive_seed(cfg.seed, first_index + s));
        const std::size_t len =
            cfg.min_length + static_cast<std::size_t>(rng.below(cfg.max_length - cfg.min_length + 1));

        TaggedSequence seq;
        seq.tokens.resize(len);
        seq.tags.assign(len, kTagO);
        // feature class per token (0 = O, 1..4 = category + 1), and the class
        // the image channel actually encodes (differs at conflict spans)
        std::vector<int> gold_fc(len, 0), image_fc(len, 0);

        std::size_t pos = 0;
        while (pos < len) {
            if (rng.uniform() < p_start) {
                const int cat = static_cast<int>(rng.below(kNumCategories));
                std::size_t span_len = 1 + static_cast<std::size_t>(rng.below(3));
                span_len = std::min(span_len, len - pos);
                int shown = cat;
                if (rng.uniform() < cfg.conflict_rate) {
                    // pick a different entity category for the whole span
                    shown = static_cast<int>(rng.below(kNumCategories - 1));
                    if (shown >= cat) ++shown;
                }
                for (std::size_t k = 0; k < span_len; ++k) {
                    seq.tags[pos + k] = k == 0 ? b_tag(static_cast<Category>(cat))
                                               : i_tag(static_cast<Category>(cat));
                    gold_fc[pos + k] = cat + 1;
                    image_fc[pos + k] = shown + 1;
                }
                pos += span_len;
                if (pos < len) ++pos;  // enforced O gap after a span
            } else {
                ++pos;
            }
        }

        for (std::size_t t = 0; t < len; ++t)
            seq.tokens[t] = static_cast<int>(rng.below(cfg.vocab_size));

        ModalityFeatures text{Modality::text, cfg.feature_width, {}};
        ModalityFeatures image{Modality::image, cfg.feature_width, {}};
        text.values.resize(len * cfg.feature_width);
        image.values.resize(len * cfg.feature_width);
        for (std::size_t t = 0; t < len; ++t) {
            const auto& pt = proto_text[static_cast<std::size_t>(gold_fc[t])];
            const auto& pi = proto_image[static_cast<std::size_t>(image_fc[t])];
            for (std::size_t j = 0; j < cfg.feature_width; ++j)
                text.row(t)[j] = pt[j] + cfg.sigma_text * rng.normal();
            for (std::size_t j = 0; j < cfg.feature_width; ++j)
                image.row(t)[j] = pi[j] + cfg.sigma_image * rng.normal();
        }
        seq.channels.push_back(std::move(text));
        seq.channels.push_back(std::move(image));
        out.push_back(std::move(seq));
    }
    return out;
}

/// The benchmark splits generated by one config: disjoint seed-stream ranges,
/// shared prototypes.
struct SynthSplits {
    Dataset train, dev, test;
};

inline SynthSplits generate_splits(const SynthConfig& cfg, std::size_t dev_count,
                                   std::size_t test_count) {
    SynthSplits s;
    s.train = generate(cfg, 0);
    SynthConfig c = cfg;
    c.sequence_count = dev_count;
    s.dev = generate(c, cfg.sequence_count);
    c.sequence_count = test_count;
    s.test = generate(c, cfg.sequence_count + dev_count);
    return s;
}

/// Default benchmark: 2000/400/400 sequences, lengths 5-20, density 0.3,
/// sigma 0.6 on both channels, conflict rate 0.3, seed 17.
inline SynthConfig synth_standard_config() {
    SynthConfig cfg;
    cfg.vocab_size = 200;
    cfg.sequence_count = 2000;
    cfg.min_length = 5;
    cfg.max_length = 20;
    cfg.entity_density = 0.3;
    cfg.sigma_text = 0.6;
    cfg.sigma_image = 0.6;
    cfg.conflict_rate = 0.3;
    cfg.feature_width = 8;
    cfg.seed = 17;
    return cfg;
}

// ---------------------------------------------------------------------------
// CoNLL-style text format
// ---------------------------------------------------------------------------

enum class BioPolicy { repair, reject };

// Token surface -> vocabulary id. Canonical synthetic surfaces "w<id>" map
// back to their id so write/read round-trips; everything else is hashed.
inline int token_id_from_surface(std::string_view surface, std::size_t vocab_size) {
    if (surface.size() >= 2 && surface[0] == 'w') {
        std::uint64_t value = 0;
        const auto* begin = surface.data() + 1;
        const auto* end = surface.data() + surface.size();
        const auto [ptr, ec] = std::from_chars(begin, end, value);
        if (ec == std::errc() && ptr == end && value < vocab_size)
            return static_cast<int>(value);
    }
    return static_cast<int>(fnv1a64(surface) % vocab_size);
}

inline std::string surface_from_token_id(int id) { return "w" + std::to_string(id); }

/// Reads a space-separated CoNLL-style file: one token per line, first column
/// the token text, last column the BIO tag, blank line between sequences.
/// Returns tokens+tags only (no feature channels).
inline Dataset read_conll(const std::string& path, std::size_t vocab_size,
                          BioPolicy policy = BioPolicy::repair) {
    std::ifstream in(path);
    if (!in) throw DataError("read_conll: cannot open " + path);

    Dataset out;
    TaggedSequence seq;
    std::string line;
    std::size_t line_no = 0;

    const auto flush = [&]() {
        if (seq.tokens.empty()) return;
        if (!bio_well_formed(seq.tags)) {
            if (policy == BioPolicy::reject)
                throw DataError("read_conll: ill-formed BIO near line " + std::to_string(line_no) +
                                " in " + path);
            repair_bio(seq.tags);
        }
        out.push_back(std::move(seq));
        seq = TaggedSequence{};
    };

    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) {
            flush();
            continue;
        }
        const std::size_t first_sp = line.find(' ');
        const std::size_t last_sp = line.rfind(' ');
        if (first_sp == std::string::npos || first_sp == 0 || last_sp + 1 >= line.size())
            throw DataError("read_conll: malformed line " + std::to_string(line_no) + " in " +
                            path);
        const std::string_view token = std::string_view(line).substr(0, first_sp);
        const std::string_view tag_text = std::string_view(line).substr(last_sp + 1);
        const auto tag = tag_from_name(tag_text);
        if (!tag)
            throw DataError("read_conll: unknown tag '" + std::string(tag_text) + "' at line " +
                            std::to_string(line_no) + " in " + path);
        seq.tokens.push_back(token_id_from_surface(token, vocab_size));
        seq.tags.push_back(*tag);
        seq.surfaces.emplace_back(token);
    }
    flush();
    return out;
}

inline void write_conll(const std::string& path, const Dataset& data) {
    std::ofstream out(path);
    if (!out) throw DataError("write_conll: cannot open " + path);
    for (const auto& seq : data) {
        for (std::size_t t = 0; t < seq.size(); ++t) {
            const std::string surface = seq.surfaces.empty() ? surface_from_token_id(seq.tokens[t])
                                                             : seq.surfaces[t];
            out << surface << ' ' << tag_name(seq.tags[t]) << '\n';
        }
        out << '\n';
    }
    if (!out) throw DataError("write_conll: write failed for " + path);
}

// ---------------------------------------------------------------------------
// EVIFEAT v1 feature files
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

/// Reads an `EVIFEAT v1 <count> <width>` feature file: per sequence a line
/// `SEQ <length>` followed by `length` lines of `width` decimal reals.
inline std::vector<ModalityFeatures> read_features(const std::string& path,
                                                   Modality modality = Modality::pretrained) {
    std::ifstream in(path);
    if (!in) throw DataError("read_features: cannot open " + path);

    std::string magic, version;
    std::size_t count = 0, width = 0;
    if (!(in >> magic >> version >> count >> width) || magic != "EVIFEAT" || version != "v1")
        throw DataError("read_features: bad header in " + path + " (want 'EVIFEAT v1 <count> <width>')");
    if (width == 0) throw DataError("read_features: width must be > 0 in " + path);

    std::vector<ModalityFeatures> out;
    out.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
        std::string kw;
        std::size_t len = 0;
        if (!(in >> kw >> len) || kw != "SEQ")
            throw DataError("read_features: expected 'SEQ <length>' for sequence " +
                            std::to_string(s) + " in " + path);
        ModalityFeatures f{modality, width, {}};
        f.values.resize(len * width);
        for (double& v : f.values) {
            if (!(in >> v))
                throw DataError("read_features: truncated values in sequence " + std::to_string(s) +
                                " of " + path);
            if (!std::isfinite(v))
                throw DataError("read_features: non-finite value in sequence " + std::to_string(s) +
                                " of " + path);
        }
        out.push_back(std::move(f));
    }
    return out;
}

inline void write_features(const std::string& path, const Dataset& data, Modality modality) {
    std::ofstream out(path);
    if (!out) throw DataError("write_features: cannot open " + path);
    std::size_t width = 0;
    for (const auto& seq : data) {
        const ModalityFeatures* f = seq.channel(modality);
        if (!f) throw DataError("write_features: a sequence is missing the requested channel");
        if (width == 0) width = f->width;
        if (f->width != width) throw DataError("write_features: inconsistent widths");
    }
    out << "EVIFEAT v1 " << data.size() << ' ' << width << '\n';
    for (const auto& seq : data) {
        const ModalityFeatures* f = seq.channel(modality);
        out << "SEQ " << f->tokens() << '\n';
        for (std::size_t t = 0; t < f->tokens(); ++t) {
            for (std::size_t j = 0; j < width; ++j) {
                if (j) out << ' ';
                out << detail::format_double(f->row(t)[j]);
            }
            out << '\n';
        }
    }
    if (!out) throw DataError("write_features: write failed for " + path);
}

/// Pairs a feature stream with a dataset as channel `modality`. Counts and
/// per-sequence lengths must match; widths must agree with `expect_width`
/// when nonzero.
inline void attach_features(Dataset& data, std::vector<ModalityFeatures> features,
                            Modality modality, std::size_t expect_width = 0) {
    if (features.size() != data.size())
        throw DataError("attach_features: have " + std::to_string(features.size()) +
                        " feature sequences for " + std::to_string(data.size()) + " examples");
    for (std::size_t s = 0; s < data.size(); ++s) {
        ModalityFeatures& f = features[s];
        f.modality = modality;
        if (expect_width != 0 && f.width != expect_width)
            throw DataError("attach_features: declared width " + std::to_string(expect_width) +
                            " but found " + std::to_string(f.width));
        if (f.tokens() != data[s].size())
            throw DataError("attach_features: sequence " + std::to_string(s) + " has " +
                            std::to_string(data[s].size()) + " tokens but " +
                            std::to_string(f.tokens()) + " feature rows");
        require_valid(f);
        data[s].channels.push_back(std::move(f));
    }
}

}  // namespace evifuse
