#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace evifuse {

// BIO inventory over the four entity categories.
// Order is fixed: it doubles as the class index of the tagger heads.
inline constexpr int kNumTags = 9;
inline constexpr int kNumCategories = 4;
inline constexpr int kTagO = 0;

enum class Category : int { PER = 0, LOC = 1, ORG = 2, MISC = 3 };

inline constexpr std::array<std::string_view, kNumTags> kTagNames = {
    "O", "B-PER", "I-PER", "B-LOC", "I-LOC", "B-ORG", "I-ORG", "B-MISC", "I-MISC"};

inline constexpr std::array<std::string_view, kNumCategories> kCategoryNames = {"PER", "LOC",
                                                                                "ORG", "MISC"};

inline int b_tag(Category c) { return 1 + 2 * static_cast<int>(c); }
inline int i_tag(Category c) { return 2 + 2 * static_cast<int>(c); }
inline bool is_b(int tag) { return tag > 0 && tag % 2 == 1; }
inline bool is_i(int tag) { return tag > 0 && tag % 2 == 0; }
inline bool is_o(int tag) { return tag == kTagO; }
inline Category category_of(int tag) { return static_cast<Category>((tag - 1) / 2); }

inline std::string_view tag_name(int tag) { return kTagNames[static_cast<std::size_t>(tag)]; }

inline std::optional<int> tag_from_name(std::string_view name) {
    for (int t = 0; t < kNumTags; ++t)
        if (kTagNames[static_cast<std::size_t>(t)] == name) return t;
    return std::nullopt;
}

/// Entity span [start, end) of one category.
struct Span {
    int start = 0;
    int end = 0;
    Category category = Category::PER;

    friend bool operator==(const Span&, const Span&) = default;
};

/// Extracts spans with the conlleval convention: a span opens at B-X, extends
/// through consecutive I-X of the same category, and a stray I-X (no live span
/// of its category) opens a new span.
inline std::vector<Span> extract_spans(std::span<const int> tags) {
    std::vector<Span> spans;
    int open_start = -1;
    Category open_cat = Category::PER;
    const auto close = [&](int end) {
        if (open_start >= 0) spans.push_back({open_start, end, open_cat});
        open_start = -1;
    };
    for (int t = 0; t < static_cast<int>(tags.size()); ++t) {
        const int tag = tags[static_cast<std::size_t>(t)];
        if (is_o(tag)) {
            close(t);
        } else if (is_b(tag)) {
            close(t);
            open_start = t;
            open_cat = category_of(tag);
        } else {  // I-X
            if (open_start >= 0 && open_cat == category_of(tag)) continue;
            close(t);
            open_start = t;
            open_cat = category_of(tag);
        }
    }
    close(static_cast<int>(tags.size()));
    return spans;
}

/// True iff no I-X appears without a preceding B-X or I-X of the same category.
inline bool bio_well_formed(std::span<const int> tags) {
    int prev = kTagO;
    for (const int tag : tags) {
        if (is_i(tag)) {
            const bool continues = (is_b(prev) || is_i(prev)) && category_of(prev) == category_of(tag);
            if (!continues) return false;
        }
        prev = tag;
    }
    return true;
}

/// Rewrites every stray I-X into B-X, in place.
inline void repair_bio(std::vector<int>& tags) {
    int prev = kTagO;
    for (int& tag : tags) {
        if (is_i(tag)) {
            const bool continues = (is_b(prev) || is_i(prev)) && category_of(prev) == category_of(tag);
            if (!continues) tag = b_tag(category_of(tag));
        }
        prev = tag;
    }
}

}  // namespace evifuse
