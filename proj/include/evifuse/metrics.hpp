#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "evifuse/loss.hpp"
#include "evifuse/tags.hpp"

#include <json.hpp>

namespace evifuse {

struct SpanCounts {
    std::int64_t correct = 0;
    std::int64_t predicted = 0;
    std::int64_t gold = 0;
};

struct Prf {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

// Zero-denominator convention: P (resp. R) is 0 when nothing was predicted
// (resp. no gold spans); F1 is 0 when P+R is 0.
inline Prf prf_from_counts(const SpanCounts& c) {
    Prf m;
    m.precision = c.predicted > 0 ? static_cast<double>(c.correct) / static_cast<double>(c.predicted) : 0.0;
    m.recall = c.gold > 0 ? static_cast<double>(c.correct) / static_cast<double>(c.gold) : 0.0;
    m.f1 = (m.precision + m.recall) > 0.0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    return m;
}

/// Exact-match span scores per entity category plus the overall micro counts.
struct SpanScores {
    std::array<SpanCounts, kNumCategories> per_category{};
    SpanCounts overall;

    Prf category_prf(Category c) const { return prf_from_counts(per_category[static_cast<std::size_t>(c)]); }
    Prf overall_prf() const { return prf_from_counts(overall); }
};

/// Exact-match span scoring: a predicted span counts iff category AND
/// boundaries both match a gold span.
inline SpanScores span_metrics(std::span<const std::vector<int>> gold,
                               std::span<const std::vector<int>> predicted) {
    if (gold.size() != predicted.size())
        throw std::invalid_argument("span_metrics: sequence count mismatch");
    SpanScores s;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        if (gold[i].size() != predicted[i].size())
            throw std::invalid_argument("span_metrics: sequence length mismatch");
        const auto gold_spans = extract_spans(gold[i]);
        const auto pred_spans = extract_spans(predicted[i]);
        for (const Span& g : gold_spans) ++s.per_category[static_cast<std::size_t>(g.category)].gold;
        for (const Span& p : pred_spans) {
            auto& cat = s.per_category[static_cast<std::size_t>(p.category)];
            ++cat.predicted;
            for (const Span& g : gold_spans) {
                if (g == p) {
                    ++cat.correct;
                    break;
                }
            }
        }
    }
    for (const SpanCounts& c : s.per_category) {
        s.overall.correct += c.correct;
        s.overall.predicted += c.predicted;
        s.overall.gold += c.gold;
    }
    return s;
}

/// One evaluation snapshot: span scores, mean uncertainty under both
/// formulas, and the loss breakdown for the epoch.
struct MetricsRecord {
    int epoch = 0;
    SpanScores spans;
    double mean_var_mu = 0.0;     // beta / (gamma (alpha-1)), winning class
    double mean_e_sigma2 = 0.0;   // beta / (alpha-1), winning class
    LossBreakdown loss;
};

inline constexpr const char* kMetricsSchema = "evifuse-metrics-v1";

inline nlohmann::json to_json(const SpanCounts& c, const Prf& m) {
    return {{"correct", c.correct}, {"predicted", c.predicted}, {"gold", c.gold},
            {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}};
}

inline nlohmann::json to_json(const MetricsRecord& r) {
    nlohmann::json cats;
    for (int c = 0; c < kNumCategories; ++c) {
        const auto cat = static_cast<Category>(c);
        cats[std::string(kCategoryNames[static_cast<std::size_t>(c)])] =
            to_json(r.spans.per_category[static_cast<std::size_t>(c)], r.spans.category_prf(cat));
    }
    return {{"schema", kMetricsSchema},
            {"epoch", r.epoch},
            {"overall", to_json(r.spans.overall, r.spans.overall_prf())},
            {"categories", cats},
            {"uncertainty", {{"var_mu", r.mean_var_mu}, {"e_sigma2", r.mean_e_sigma2}}},
            {"loss",
             {{"nll", r.loss.nll},
              {"regularizer", r.loss.regularizer},
              {"evidential_total", r.loss.evidential_total},
              {"classification", r.loss.classification},
              {"grand_total", r.loss.grand_total}}}};
}

}  // namespace evifuse
