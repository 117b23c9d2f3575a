#include "ilm/corpus.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "ilm/errors.hpp"

namespace ilm {

namespace {

// Blend weights for domain chains: from a core token, kCoreStay of the mass
// follows the shared core chain; from a specific token, kCoreReturn of the
// mass re-enters the core through the shared initial distribution.
constexpr float kCoreStay = 0.55f;
constexpr float kCoreReturn = 0.5f;

int32_t sample_from(const float* dist, size_t n, Rng& rng) {
    const double u = rng.uniform01();
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        acc += dist[i];
        if (u < acc) {
            return static_cast<int32_t>(i);
        }
    }
    return static_cast<int32_t>(n - 1);
}

} // namespace

std::string Environment::to_json(const std::string& vocab_hash) const {
    nlohmann::json j;
    j["env_id"] = env_id;
    j["descriptor"] = descriptor;
    j["vocab_hash"] = vocab_hash;
    j["sequences"] = sequences;
    return j.dump() + "\n";
}

Environment Environment::from_json(const std::string& text, std::string* vocab_hash_out) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("environment json: ") + e.what());
    }
    Environment env;
    env.env_id = j.at("env_id").get<int32_t>();
    env.descriptor = j.at("descriptor").get<std::string>();
    env.sequences = j.at("sequences").get<std::vector<std::vector<int32_t>>>();
    if (vocab_hash_out) {
        *vocab_hash_out = j.at("vocab_hash").get<std::string>();
    }
    return env;
}

// ---------------------------------------------------------------------------
// Markov chains

MarkovChain MarkovChain::make(std::span<const int32_t> support_ids, uint64_t seed) {
    if (support_ids.empty()) {
        throw ContractError("MarkovChain: empty support");
    }
    const size_t s = support_ids.size();
    MarkovChain c;
    c.support.assign(support_ids.begin(), support_ids.end());
    c.transition.assign(s * s, 0.0f);
    c.initial.assign(s, 1.0f / static_cast<float>(s));

    Rng rng(mix_seed(seed, "chain"));
    const size_t n_pref = std::min<size_t>(4, s);
    const float weights[4] = {0.45f, 0.30f, 0.15f, 0.10f};
    const float smooth = 0.05f;
    for (size_t i = 0; i < s; ++i) {
        float* row = c.transition.data() + i * s;
        // distinct preferred successors
        std::vector<size_t> pool(s);
        for (size_t j = 0; j < s; ++j) {
            pool[j] = j;
        }
        float wsum = 0.0f;
        for (size_t p = 0; p < n_pref; ++p) {
            wsum += weights[p];
        }
        for (size_t p = 0; p < n_pref; ++p) {
            const size_t pick = static_cast<size_t>(rng.below(pool.size()));
            row[pool[pick]] += (1.0f - smooth) * weights[p] / wsum;
            pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
        }
        for (size_t j = 0; j < s; ++j) {
            row[j] += smooth / static_cast<float>(s);
        }
    }
    return c;
}

size_t MarkovChain::index_of(int32_t id) const {
    for (size_t i = 0; i < support.size(); ++i) {
        if (support[i] == id) {
            return i;
        }
    }
    throw ContractError("MarkovChain: token " + std::to_string(id) + " not in support");
}

std::vector<int32_t> MarkovChain::sample_sequence(int len, Rng& rng) const {
    const size_t s = support.size();
    std::vector<int32_t> out;
    out.reserve(static_cast<size_t>(len));
    int32_t state = sample_from(initial.data(), s, rng);
    out.push_back(support[static_cast<size_t>(state)]);
    for (int i = 1; i < len; ++i) {
        state = sample_from(transition.data() + static_cast<size_t>(state) * s, s, rng);
        out.push_back(support[static_cast<size_t>(state)]);
    }
    return out;
}

MarkovChain clean_corpus_chain(const Vocabulary& vocab, uint64_t seed) {
    if (vocab.n_content == 0) {
        throw ContractError("clean_corpus_chain: vocabulary has no content tokens");
    }
    std::vector<int32_t> content;
    for (int32_t id = vocab.content_begin(); id < vocab.content_end(); ++id) {
        content.push_back(id);
    }
    return MarkovChain::make(content, mix_seed(seed, "clean"));
}

std::vector<std::vector<int32_t>> gen_from_chain(const MarkovChain& chain, int n_sentences,
                                                 int seq_len, uint64_t seed) {
    if (seq_len < 2) {
        throw ContractError("gen_from_chain: seq_len must be >= 2");
    }
    Rng rng(mix_seed(seed, "sample"));
    std::vector<std::vector<int32_t>> out;
    out.reserve(static_cast<size_t>(n_sentences));
    for (int i = 0; i < n_sentences; ++i) {
        out.push_back(chain.sample_sequence(seq_len, rng));
    }
    return out;
}

std::vector<std::vector<int32_t>> gen_clean_corpus(const Vocabulary& vocab, int n_sentences,
                                                   int seq_len, uint64_t seed) {
    return gen_from_chain(clean_corpus_chain(vocab, seed), n_sentences, seq_len, seed);
}

// ---------------------------------------------------------------------------
// markup wrapping

std::vector<std::vector<int32_t>> wrap_with_markup(const std::vector<std::vector<int32_t>>& seqs,
                                                   const Vocabulary& vocab, double markup_rate,
                                                   uint64_t seed) {
    if (!(markup_rate > 0.0 && markup_rate < 1.0)) {
        throw ContractError("wrap_with_markup: markup_rate must lie in (0,1), got " +
                            std::to_string(markup_rate));
    }
    if (vocab.markup_ids.size() < 2) {
        throw ContractError("wrap_with_markup: vocabulary needs >= 2 markup tokens");
    }
    const size_t n_tags = vocab.markup_ids.size() / 2;
    // Each content token is wrapped in k nested tag pairs with E[2k] chosen
    // so markup tokens are a markup_rate fraction of the output.
    const double w = markup_rate / (2.0 * (1.0 - markup_rate));
    const int w_floor = static_cast<int>(std::floor(w));
    const double w_frac = w - w_floor;

    Rng rng(mix_seed(seed, "markup"));
    std::vector<std::vector<int32_t>> out;
    out.reserve(seqs.size());
    for (const auto& seq : seqs) {
        std::vector<int32_t> wrapped;
        wrapped.reserve(seq.size() * (1 + 2 * static_cast<size_t>(w_floor + 1)));
        for (int32_t tok : seq) {
            int k = w_floor + (rng.uniform01() < w_frac ? 1 : 0);
            std::vector<int32_t> closers;
            for (int i = 0; i < k; ++i) {
                const size_t tag = static_cast<size_t>(rng.below(n_tags));
                wrapped.push_back(vocab.markup_ids[2 * tag]);
                closers.push_back(vocab.markup_ids[2 * tag + 1]);
            }
            wrapped.push_back(tok);
            for (size_t i = closers.size(); i-- > 0;) {
                wrapped.push_back(closers[i]);
            }
        }
        out.push_back(std::move(wrapped));
    }
    return out;
}

// ---------------------------------------------------------------------------
// correlation corpus

std::vector<int32_t> correlation_context_ids(const Vocabulary& vocab, int n_contexts) {
    const int32_t first = vocab.content_begin() + 2 * static_cast<int32_t>(vocab.pairs.size());
    if (first + n_contexts > vocab.content_end()) {
        throw ContractError("correlation_context_ids: not enough content tokens for " +
                            std::to_string(n_contexts) + " contexts");
    }
    std::vector<int32_t> out;
    for (int i = 0; i < n_contexts; ++i) {
        out.push_back(first + i);
    }
    return out;
}

std::vector<int32_t> swap_pairs(std::span<const int32_t> seq, const Vocabulary& vocab) {
    std::vector<int32_t> out(seq.begin(), seq.end());
    for (int32_t& tok : out) {
        const int32_t partner = vocab.pair_partner(tok);
        if (partner >= 0) {
            tok = partner;
        }
    }
    return out;
}

namespace {

struct CorrelationSampler {
    std::vector<int32_t> contexts;
    std::vector<int32_t> fillers;
    const Vocabulary* vocab;
    const CorrelationSplitConfig* cfg;

    CorrelationSampler(const Vocabulary& v, const CorrelationSplitConfig& c) : vocab(&v), cfg(&c) {
        if (v.pairs.empty()) {
            throw ContractError("correlation corpus: vocabulary declares no pairs");
        }
        if (!(c.p >= 0.0 && c.p <= 1.0)) {
            throw ContractError("correlation corpus: p must lie in [0,1]");
        }
        if (!(c.pair_bias > 0.5 && c.pair_bias <= 1.0)) {
            throw ContractError("correlation corpus: pair_bias must lie in (0.5,1]");
        }
        if (c.seq_len < 3) {
            throw ContractError("correlation corpus: seq_len must be >= 3");
        }
        contexts = correlation_context_ids(v, c.n_contexts);
        const int32_t filler_first = contexts.back() + 1;
        for (int32_t id = filler_first; id < v.content_end(); ++id) {
            fillers.push_back(id);
        }
        if (fillers.empty()) {
            throw ContractError("correlation corpus: no filler tokens left in vocabulary");
        }
    }

    std::vector<int32_t> sentence(Rng& rng) const {
        const size_t k = static_cast<size_t>(rng.below(contexts.size()));
        const auto& pair = vocab->pairs[static_cast<size_t>(rng.below(vocab->pairs.size()))];
        const bool prefer_f = (k % 2 == 0);
        const bool take_preferred = rng.uniform01() < cfg->pair_bias;
        const int32_t attr = (prefer_f == take_preferred) ? pair.first : pair.second;
        const int attr_pos = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(cfg->seq_len - 1)));
        std::vector<int32_t> s(static_cast<size_t>(cfg->seq_len));
        s[0] = contexts[k];
        for (int i = 1; i < cfg->seq_len; ++i) {
            s[static_cast<size_t>(i)] =
                (i == attr_pos) ? attr
                                : fillers[static_cast<size_t>(rng.below(fillers.size()))];
        }
        return s;
    }
};

} // namespace

std::pair<Environment, Environment> gen_correlation_corpus(const Vocabulary& vocab,
                                                           const CorrelationSplitConfig& cfg,
                                                           uint64_t seed) {
    CorrelationSampler sampler(vocab, cfg);
    Rng rng(mix_seed(seed, "corr"));
    std::vector<std::vector<int32_t>> sentences;
    sentences.reserve(static_cast<size_t>(cfg.n_sentences));
    for (int i = 0; i < cfg.n_sentences; ++i) {
        sentences.push_back(sampler.sentence(rng));
    }
    // Seeded shuffle, then prefix split: Env-A keeps ceil(p*N) untouched.
    Rng split_rng(mix_seed(seed, "split"));
    split_rng.shuffle(sentences);
    const size_t n_a =
        static_cast<size_t>(std::ceil(cfg.p * static_cast<double>(cfg.n_sentences)));
    Environment env_a{0, "original", {}};
    Environment env_b{1, "swapped", {}};
    for (size_t i = 0; i < sentences.size(); ++i) {
        if (i < n_a) {
            env_a.sequences.push_back(std::move(sentences[i]));
        } else {
            env_b.sequences.push_back(swap_pairs(sentences[i], vocab));
        }
    }
    return {std::move(env_a), std::move(env_b)};
}

std::vector<std::vector<int32_t>> gen_correlation_test(const Vocabulary& vocab,
                                                       const CorrelationSplitConfig& cfg,
                                                       int n_sentences, uint64_t seed) {
    CorrelationSampler sampler(vocab, cfg);
    Rng rng(mix_seed(seed, "corr-test"));
    std::vector<std::vector<int32_t>> out;
    out.reserve(static_cast<size_t>(n_sentences));
    for (int i = 0; i < n_sentences; ++i) {
        out.push_back(sampler.sentence(rng));
    }
    return out;
}

// ---------------------------------------------------------------------------
// multi-domain corpus

DomainLayout make_domain_layout(const Vocabulary& vocab, int n_domains, double overlap,
                                uint64_t seed) {
    if (n_domains < 2) {
        throw ContractError("make_domain_layout: need >= 2 domains");
    }
    if (!(overlap >= 0.0 && overlap <= 1.0)) {
        throw ContractError("make_domain_layout: overlap must lie in [0,1]");
    }
    const int n_content = vocab.n_content;
    const double support_f =
        static_cast<double>(n_content) / (overlap + (1.0 - overlap) * n_domains);
    const int core_size = static_cast<int>(std::lround(support_f * overlap));
    const int spec_each = (n_content - core_size) / n_domains;
    if (core_size + spec_each < 4) {
        throw ContractError("make_domain_layout: per-domain support " +
                            std::to_string(core_size + spec_each) +
                            " too small for sequence generation");
    }
    std::vector<int32_t> content;
    for (int32_t id = vocab.content_begin(); id < vocab.content_end(); ++id) {
        content.push_back(id);
    }
    Rng rng(mix_seed(seed, "layout"));
    rng.shuffle(content);
    DomainLayout layout;
    size_t cursor = 0;
    for (int i = 0; i < core_size; ++i) {
        layout.core.push_back(content[cursor++]);
    }
    for (int d = 0; d < n_domains; ++d) {
        std::vector<int32_t> spec;
        for (int i = 0; i < spec_each; ++i) {
            spec.push_back(content[cursor++]);
        }
        layout.specific.push_back(std::move(spec));
    }
    return layout;
}

MarkovChain domain_core_chain(const Vocabulary& vocab, int n_domains, double overlap,
                              uint64_t seed) {
    const DomainLayout layout = make_domain_layout(vocab, n_domains, overlap, seed);
    if (layout.core.empty()) {
        throw ContractError("domain_core_chain: layout has an empty core (overlap too small)");
    }
    return MarkovChain::make(layout.core, mix_seed(seed, "core"));
}

namespace {

MarkovChain build_domain_chain(const DomainLayout& layout, const MarkovChain* core_chain,
                               int domain, uint64_t seed) {
    std::vector<int32_t> support = layout.core;
    const auto& spec = layout.specific[static_cast<size_t>(domain)];
    support.insert(support.end(), spec.begin(), spec.end());
    MarkovChain pref =
        MarkovChain::make(support, mix_seed(seed, "domain", static_cast<uint64_t>(domain)));
    if (!core_chain) {
        return pref; // overlap == 0: purely domain-specific structure
    }
    const size_t s = support.size();
    const size_t nc = layout.core.size();
    // Blend: core rows follow the shared core chain with weight kCoreStay;
    // specific rows re-enter the core via the shared initial distribution
    // with weight kCoreReturn. The shared component is identical in every
    // domain, the rest is domain-specific.
    for (size_t i = 0; i < s; ++i) {
        float* row = pref.transition.data() + i * s;
        const float lam = i < nc ? kCoreStay : kCoreReturn;
        for (size_t j = 0; j < s; ++j) {
            row[j] *= (1.0f - lam);
        }
        if (i < nc) {
            const float* crow = core_chain->transition.data() + i * nc;
            for (size_t j = 0; j < nc; ++j) {
                row[j] += lam * crow[j];
            }
        } else {
            for (size_t j = 0; j < nc; ++j) {
                row[j] += lam * core_chain->initial[j];
            }
        }
    }
    return pref;
}

} // namespace

std::vector<Environment> gen_domain_envs(const Vocabulary& vocab, int n_domains, int n_sentences,
                                         int seq_len, double overlap, uint64_t seed) {
    const DomainLayout layout = make_domain_layout(vocab, n_domains, overlap, seed);
    MarkovChain core;
    const bool has_core = !layout.core.empty();
    if (has_core) {
        core = MarkovChain::make(layout.core, mix_seed(seed, "core"));
    }
    std::vector<Environment> envs;
    for (int d = 0; d < n_domains; ++d) {
        const MarkovChain chain =
            build_domain_chain(layout, has_core ? &core : nullptr, d, seed);
        Environment env;
        env.env_id = d;
        env.descriptor = "domain-" + std::to_string(d);
        env.sequences =
            gen_from_chain(chain, n_sentences, seq_len, mix_seed(seed, "domain-sample", static_cast<uint64_t>(d)));
        envs.push_back(std::move(env));
    }
    return envs;
}

// ---------------------------------------------------------------------------
// masking

MaskedBatch mask_tokens(std::span<const std::vector<int32_t>> sequences, double mask_rate,
                        Rng& rng, const Vocabulary& vocab) {
    if (!(mask_rate > 0.0 && mask_rate < 1.0)) {
        throw ContractError("mask_tokens: mask_rate must lie in (0,1), got " +
                            std::to_string(mask_rate));
    }
    if (sequences.empty()) {
        throw ContractError("mask_tokens: empty batch");
    }
    int64_t max_len = 0;
    for (const auto& s : sequences) {
        max_len = std::max<int64_t>(max_len, static_cast<int64_t>(s.size()));
    }
    const int64_t rows = static_cast<int64_t>(sequences.size());
    MaskedBatch batch;
    batch.input_ids = IdMatrix(rows, max_len, Vocabulary::kPad);
    batch.targets = IdMatrix(rows, max_len, Tape::kIgnoreId);

    std::vector<std::pair<int64_t, int64_t>> eligible;
    for (int64_t r = 0; r < rows; ++r) {
        const auto& s = sequences[static_cast<size_t>(r)];
        for (int64_t c = 0; c < static_cast<int64_t>(s.size()); ++c) {
            batch.input_ids.at(r, c) = s[static_cast<size_t>(c)];
            if (!vocab.is_special(s[static_cast<size_t>(c)])) {
                eligible.emplace_back(r, c);
            }
        }
    }
    if (eligible.empty()) {
        throw ContractError("mask_tokens: batch has no eligible (non-special) positions");
    }

    int64_t n_selected = 0;
    auto apply = [&](int64_t r, int64_t c) {
        const int32_t original = batch.input_ids.at(r, c);
        batch.targets.at(r, c) = original;
        const double u = rng.uniform01();
        if (u < 0.8) {
            batch.input_ids.at(r, c) = Vocabulary::kMask;
        } else if (u < 0.9) {
            batch.input_ids.at(r, c) =
                vocab.content_begin() + static_cast<int32_t>(rng.below(static_cast<uint64_t>(vocab.n_content)));
        } // else: keep the original token
        ++n_selected;
    };
    for (const auto& [r, c] : eligible) {
        if (rng.uniform01() < mask_rate) {
            apply(r, c);
        }
    }
    if (n_selected == 0) {
        const auto& [r, c] = eligible[static_cast<size_t>(rng.below(eligible.size()))];
        apply(r, c);
    }
    return batch;
}

} // namespace ilm
