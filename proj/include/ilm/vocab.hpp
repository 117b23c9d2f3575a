#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace ilm {

// Shared token vocabulary. Ids are dense: specials first, then content
// tokens, then markup tokens. Attribute pairs are drawn from the content
// range, so pair ids are disjoint from markup and special ids.
struct Vocabulary {
    static constexpr int32_t kPad = 0;
    static constexpr int32_t kMask = 1;
    static constexpr int32_t kUnk = 2;
    static constexpr int32_t kNumSpecials = 3;

    std::vector<std::string> tokens; // index == id
    std::vector<std::pair<int32_t, int32_t>> pairs;
    std::vector<int32_t> markup_ids;
    int32_t n_content = 0;

    int32_t size() const { return static_cast<int32_t>(tokens.size()); }
    int32_t content_begin() const { return kNumSpecials; }
    int32_t content_end() const { return kNumSpecials + n_content; }
    bool is_special(int32_t id) const { return id >= 0 && id < kNumSpecials; }
    bool is_content(int32_t id) const { return id >= content_begin() && id < content_end(); }
    bool is_markup(int32_t id) const { return id >= content_end() && id < size(); }

    // Partner token of a pair member, or -1.
    int32_t pair_partner(int32_t id) const;

    std::string to_json() const; // canonical serialization
    static Vocabulary from_json(const std::string& text);
    std::string hash() const; // fnv1a64 hex of the canonical serialization
};

// Deterministic synthetic vocabulary. Content tokens get seeded-permuted
// names; the first 2*n_pairs content ids form the attribute pairs.
// Requires n_content >= 2*n_pairs and all counts >= 0.
Vocabulary build_vocabulary(int n_content, int n_pairs, int n_markup, uint64_t seed);

} // namespace ilm
