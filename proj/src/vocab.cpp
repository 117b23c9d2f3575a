#include "ilm/vocab.hpp"

#include <json.hpp>

#include "ilm/errors.hpp"
#include "ilm/rng.hpp"

namespace ilm {

int32_t Vocabulary::pair_partner(int32_t id) const {
    for (const auto& [f, m] : pairs) {
        if (id == f) {
            return m;
        }
        if (id == m) {
            return f;
        }
    }
    return -1;
}

std::string Vocabulary::to_json() const {
    nlohmann::json j;
    j["tokens"] = tokens;
    auto& jp = j["pairs"] = nlohmann::json::array();
    for (const auto& [f, m] : pairs) {
        jp.push_back({f, m});
    }
    j["markup"] = markup_ids;
    j["specials"] = {{"pad", kPad}, {"mask", kMask}, {"unk", kUnk}};
    j["n_content"] = n_content;
    return j.dump(2) + "\n";
}

Vocabulary Vocabulary::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("vocabulary json: ") + e.what());
    }
    Vocabulary v;
    v.tokens = j.at("tokens").get<std::vector<std::string>>();
    for (const auto& p : j.at("pairs")) {
        v.pairs.emplace_back(p.at(0).get<int32_t>(), p.at(1).get<int32_t>());
    }
    v.markup_ids = j.at("markup").get<std::vector<int32_t>>();
    v.n_content = j.at("n_content").get<int32_t>();
    return v;
}

std::string Vocabulary::hash() const {
    return hash_hex(fnv1a64(to_json()));
}

Vocabulary build_vocabulary(int n_content, int n_pairs, int n_markup, uint64_t seed) {
    if (n_content < 0 || n_pairs < 0 || n_markup < 0) {
        throw ContractError("build_vocabulary: counts must be >= 0");
    }
    if (n_content < 2 * n_pairs) {
        throw ContractError("build_vocabulary: n_content " + std::to_string(n_content) +
                            " < 2*n_pairs " + std::to_string(2 * n_pairs));
    }
    Vocabulary v;
    v.n_content = n_content;
    v.tokens = {"<pad>", "<mask>", "<unk>"};

    // Names are fixed; the seed permutes which name lands on which id.
    Rng rng(mix_seed(seed, "vocab"));
    std::vector<std::string> content_names;
    content_names.reserve(static_cast<size_t>(n_content));
    for (int i = 0; i < n_content; ++i) {
        content_names.push_back("w" + std::to_string(i));
    }
    rng.shuffle(content_names);
    for (auto& name : content_names) {
        v.tokens.push_back(std::move(name));
    }

    std::vector<std::string> markup_names;
    for (int i = 0; i < n_markup; ++i) {
        const int tag = i / 2;
        markup_names.push_back(i % 2 == 0 ? "<t" + std::to_string(tag) + ">"
                                          : "</t" + std::to_string(tag) + ">");
    }
    for (const auto& name : markup_names) {
        v.markup_ids.push_back(v.size());
        v.tokens.push_back(name);
    }

    for (int p = 0; p < n_pairs; ++p) {
        v.pairs.emplace_back(Vocabulary::kNumSpecials + 2 * p, Vocabulary::kNumSpecials + 2 * p + 1);
    }
    return v;
}

} // namespace ilm
