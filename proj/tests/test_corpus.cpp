#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "ilm/corpus.hpp"
#include "ilm/errors.hpp"
#include "ilm/vocab.hpp"

using namespace ilm;

TEST_CASE("build_vocabulary: sizes, specials, pairs") {
    const Vocabulary v0 = build_vocabulary(10, 0, 0, 42);
    CHECK(v0.size() == 13); // 10 content + 3 specials
    CHECK(v0.pairs.empty());
    CHECK(v0.tokens[Vocabulary::kPad] == "<pad>");

    const Vocabulary v1 = build_vocabulary(20, 3, 0, 42);
    CHECK(v1.pairs.size() == 3);
    std::set<int32_t> ids;
    for (const auto& [f, m] : v1.pairs) {
        ids.insert(f);
        ids.insert(m);
        CHECK(v1.is_content(f));
        CHECK(v1.is_content(m));
        CHECK(v1.pair_partner(f) == m);
        CHECK(v1.pair_partner(m) == f);
    }
    CHECK(ids.size() == 6); // all distinct

    const Vocabulary v2 = build_vocabulary(8, 0, 4, 7);
    CHECK(v2.markup_ids.size() == 4);
    for (int32_t id : v2.markup_ids) {
        CHECK(v2.is_markup(id));
        CHECK(!v2.is_content(id));
    }

    CHECK_THROWS_AS(build_vocabulary(5, 3, 0, 1), ContractError);
    CHECK_THROWS_AS(build_vocabulary(-1, 0, 0, 1), ContractError);
}

TEST_CASE("build_vocabulary: deterministic per seed, bijection holds") {
    const Vocabulary a = build_vocabulary(30, 2, 6, 99);
    const Vocabulary b = build_vocabulary(30, 2, 6, 99);
    CHECK(a.tokens == b.tokens);
    CHECK(a.hash() == b.hash());
    const Vocabulary c = build_vocabulary(30, 2, 6, 100);
    CHECK(a.tokens != c.tokens);

    std::set<std::string> uniq(a.tokens.begin(), a.tokens.end());
    CHECK(uniq.size() == a.tokens.size());
}

TEST_CASE("vocabulary json round-trip") {
    const Vocabulary a = build_vocabulary(12, 2, 4, 5);
    const Vocabulary b = Vocabulary::from_json(a.to_json());
    CHECK(a.tokens == b.tokens);
    CHECK(a.pairs == b.pairs);
    CHECK(a.markup_ids == b.markup_ids);
    CHECK(a.hash() == b.hash());
}

TEST_CASE("gen_clean_corpus: basic contracts") {
    const Vocabulary v = build_vocabulary(24, 0, 4, 11);
    CHECK(gen_clean_corpus(v, 0, 8, 1).empty());
    const auto seqs = gen_clean_corpus(v, 50, 8, 1);
    CHECK(seqs.size() == 50);
    for (const auto& s : seqs) {
        CHECK(s.size() == 8);
        for (int32_t id : s) {
            CHECK(v.is_content(id)); // no markup, no specials
        }
    }
    CHECK(gen_clean_corpus(v, 5, 8, 3) == gen_clean_corpus(v, 5, 8, 3));
    CHECK_THROWS_AS(gen_clean_corpus(v, 5, 1, 3), ContractError);
}

TEST_CASE("gen_clean_corpus: bigram statistics match the generating chain") {
    const Vocabulary v = build_vocabulary(20, 0, 0, 4);
    const uint64_t seed = 123;
    const MarkovChain chain = clean_corpus_chain(v, seed);
    const int n_sentences = 10000;
    const int seq_len = 12;
    const auto seqs = gen_clean_corpus(v, n_sentences, seq_len, seed);

    const size_t s = chain.support.size();
    std::vector<double> counts(s * s, 0.0);
    std::vector<double> row_totals(s, 0.0);
    for (const auto& seq : seqs) {
        for (size_t i = 0; i + 1 < seq.size(); ++i) {
            const size_t a = chain.index_of(seq[i]);
            const size_t b = chain.index_of(seq[i + 1]);
            counts[a * s + b] += 1.0;
            row_totals[a] += 1.0;
        }
    }
    // visit-weighted mean L1 distance between empirical and true rows
    double total_transitions = 0.0;
    double weighted_l1 = 0.0;
    for (size_t i = 0; i < s; ++i) {
        if (row_totals[i] == 0.0) {
            continue;
        }
        double l1 = 0.0;
        for (size_t j = 0; j < s; ++j) {
            l1 += std::abs(counts[i * s + j] / row_totals[i] - chain.transition[i * s + j]);
        }
        weighted_l1 += l1 * row_totals[i];
        total_transitions += row_totals[i];
    }
    CHECK(weighted_l1 / total_transitions < 0.05);
}

TEST_CASE("wrap_with_markup: stripping markup recovers the input exactly") {
    const Vocabulary v = build_vocabulary(16, 0, 6, 2);
    const auto clean = gen_clean_corpus(v, 100, 10, 9);
    const auto wrapped = wrap_with_markup(clean, v, 0.4, 77);
    REQUIRE(wrapped.size() == clean.size());
    for (size_t i = 0; i < clean.size(); ++i) {
        std::vector<int32_t> stripped;
        for (int32_t id : wrapped[i]) {
            if (!v.is_markup(id)) {
                stripped.push_back(id);
            }
        }
        CHECK(stripped == clean[i]);
    }
    CHECK_THROWS_AS(wrap_with_markup(clean, v, 0.0, 1), ContractError);
    CHECK_THROWS_AS(wrap_with_markup(clean, v, 1.0, 1), ContractError);
}

TEST_CASE("wrap_with_markup: measured markup fraction matches the rate") {
    const Vocabulary v = build_vocabulary(16, 0, 8, 3);
    const auto clean = gen_clean_corpus(v, 1000, 12, 21);
    for (double rate : {0.25, 0.4, 0.6}) {
        const auto wrapped = wrap_with_markup(clean, v, rate, 31);
        int64_t markup = 0, total = 0;
        for (const auto& s : wrapped) {
            for (int32_t id : s) {
                markup += v.is_markup(id) ? 1 : 0;
                ++total;
            }
        }
        const double measured = static_cast<double>(markup) / static_cast<double>(total);
        CHECK(std::abs(measured - rate) < 0.03);
    }
}

TEST_CASE("wrap_with_markup: open/close tokens are matched") {
    const Vocabulary v = build_vocabulary(10, 0, 6, 5);
    const auto wrapped = wrap_with_markup(gen_clean_corpus(v, 50, 8, 1), v, 0.5, 13);
    for (const auto& s : wrapped) {
        std::vector<int32_t> stack;
        for (int32_t id : s) {
            if (!v.is_markup(id)) {
                continue;
            }
            const size_t pos = static_cast<size_t>(id - v.content_end());
            if (pos % 2 == 0) {
                stack.push_back(id);
            } else {
                REQUIRE(!stack.empty());
                CHECK(stack.back() == id - 1); // closes the innermost open tag
                stack.pop_back();
            }
        }
        CHECK(stack.empty());
    }
}

TEST_CASE("swap_pairs: involution, identity without pairs, definition") {
    const Vocabulary v = build_vocabulary(20, 3, 0, 8);
    const auto [f0, m0] = v.pairs[0];
    const int32_t filler = v.content_end() - 1;

    std::vector<int32_t> no_pairs = {filler, filler};
    CHECK(swap_pairs(no_pairs, v) == no_pairs);

    std::vector<int32_t> one = {filler, f0, filler};
    const auto swapped = swap_pairs(one, v);
    CHECK(swapped == std::vector<int32_t>{filler, m0, filler});
    CHECK(swap_pairs(swapped, v) == one);
    CHECK(swapped.size() == one.size());
}

TEST_CASE("gen_correlation_corpus: split sizes follow the ceil convention") {
    const Vocabulary v = build_vocabulary(40, 4, 0, 6);
    CorrelationSplitConfig cfg;
    cfg.p = 0.5;
    cfg.n_sentences = 999;
    cfg.n_contexts = 8;
    cfg.seq_len = 10;
    auto [a, b] = gen_correlation_corpus(v, cfg, 17);
    CHECK(a.sequences.size() == 500); // ceil(0.5 * 999)
    CHECK(b.sequences.size() == 499);
    CHECK(a.env_id == 0);
    CHECK(b.env_id == 1);

    cfg.p = 0.8;
    cfg.n_sentences = 1000;
    auto [a8, b8] = gen_correlation_corpus(v, cfg, 17);
    CHECK(a8.sequences.size() == 800);
    CHECK(b8.sequences.size() == 200);
    for (const auto& seq : b8.sequences) {
        const auto restored = swap_pairs(seq, v);
        CHECK(swap_pairs(restored, v) == seq); // swap stays an involution on env data
    }
}

TEST_CASE("gen_correlation_corpus: empirical bias is pair_bias in A and 1-pair_bias in B") {
    const Vocabulary v = build_vocabulary(40, 4, 0, 6);
    CorrelationSplitConfig cfg;
    cfg.p = 0.5;
    cfg.pair_bias = 0.9;
    cfg.n_sentences = 20000;
    cfg.n_contexts = 8;
    cfg.seq_len = 10;
    auto [a, b] = gen_correlation_corpus(v, cfg, 23);
    const auto contexts = correlation_context_ids(v, cfg.n_contexts);

    auto preferred_rate = [&](const Environment& env) {
        int64_t preferred = 0, total = 0;
        for (const auto& seq : env.sequences) {
            const auto ctx_it = std::find(contexts.begin(), contexts.end(), seq[0]);
            REQUIRE(ctx_it != contexts.end());
            const size_t k = static_cast<size_t>(ctx_it - contexts.begin());
            for (int32_t id : seq) {
                for (const auto& [f, m] : v.pairs) {
                    if (id == f || id == m) {
                        const bool is_f = id == f;
                        const bool prefer_f = k % 2 == 0;
                        preferred += (is_f == prefer_f) ? 1 : 0;
                        ++total;
                    }
                }
            }
        }
        return static_cast<double>(preferred) / static_cast<double>(total);
    };
    CHECK(std::abs(preferred_rate(a) - 0.9) < 0.02);
    CHECK(std::abs(preferred_rate(b) - 0.1) < 0.02);
}

TEST_CASE("gen_correlation_corpus: precondition failures") {
    const Vocabulary no_pairs = build_vocabulary(20, 0, 0, 1);
    CorrelationSplitConfig cfg;
    CHECK_THROWS_AS(gen_correlation_corpus(no_pairs, cfg, 1), ContractError);
    const Vocabulary v = build_vocabulary(20, 2, 0, 1);
    CorrelationSplitConfig bad = cfg;
    bad.pair_bias = 0.4;
    CHECK_THROWS_AS(gen_correlation_corpus(v, bad, 1), ContractError);
}

TEST_CASE("gen_domain_envs: support layout honors overlap") {
    const Vocabulary v = build_vocabulary(60, 0, 0, 2);

    // overlap 1: identical supports, distinct chains
    const auto full = gen_domain_envs(v, 3, 300, 10, 1.0, 5);
    std::vector<std::set<int32_t>> supports;
    for (const auto& env : full) {
        std::set<int32_t> sup;
        for (const auto& seq : env.sequences) {
            sup.insert(seq.begin(), seq.end());
        }
        supports.push_back(std::move(sup));
    }
    CHECK(supports[0] == supports[1]);
    CHECK(supports[1] == supports[2]);
    CHECK(full[0].sequences != full[1].sequences);

    // overlap 0: disjoint supports
    const auto disjoint = gen_domain_envs(v, 2, 300, 10, 0.0, 5);
    std::set<int32_t> s0, s1;
    for (const auto& seq : disjoint[0].sequences) {
        s0.insert(seq.begin(), seq.end());
    }
    for (const auto& seq : disjoint[1].sequences) {
        s1.insert(seq.begin(), seq.end());
    }
    std::vector<int32_t> inter;
    std::set_intersection(s0.begin(), s0.end(), s1.begin(), s1.end(), std::back_inserter(inter));
    CHECK(inter.empty());
}

TEST_CASE("gen_domain_envs: unigram distributions separate at low overlap") {
    const Vocabulary v = build_vocabulary(60, 0, 0, 9);
    const auto envs = gen_domain_envs(v, 2, 10000, 10, 0.3, 41);
    std::map<int32_t, double> u0, u1;
    int64_t n0 = 0, n1 = 0;
    for (const auto& seq : envs[0].sequences) {
        for (int32_t id : seq) {
            u0[id] += 1.0;
            ++n0;
        }
    }
    for (const auto& seq : envs[1].sequences) {
        for (int32_t id : seq) {
            u1[id] += 1.0;
            ++n1;
        }
    }
    double tv = 0.0;
    std::set<int32_t> keys;
    for (const auto& [k, c] : u0) {
        keys.insert(k);
    }
    for (const auto& [k, c] : u1) {
        keys.insert(k);
    }
    for (int32_t k : keys) {
        const double p = (u0.count(k) ? u0[k] : 0.0) / static_cast<double>(n0);
        const double q = (u1.count(k) ? u1[k] : 0.0) / static_cast<double>(n1);
        tv += std::abs(p - q);
    }
    tv *= 0.5;
    CHECK(tv > 0.3);
}

TEST_CASE("gen_domain_envs: rejects too-small supports") {
    const Vocabulary tiny = build_vocabulary(6, 0, 0, 2);
    CHECK_THROWS_AS(gen_domain_envs(tiny, 4, 10, 8, 0.0, 1), ContractError);
}

TEST_CASE("mask_tokens: statistics of selection and 80/10/10 replacement") {
    // >= 1e5 positions; a 100-token vocabulary keeps the random-replacement
    // branch from colliding with the original too often (those draws are
    // indistinguishable from the keep branch).
    const Vocabulary v = build_vocabulary(100, 0, 0, 6);
    const auto seqs = gen_clean_corpus(v, 8400, 12, 31);
    Rng rng(55);
    int64_t selected = 0, masked = 0, randomized = 0, kept = 0, eligible = 0;
    for (size_t start = 0; start < seqs.size(); start += 50) {
        std::span<const std::vector<int32_t>> window(seqs.data() + start, 50);
        MaskedBatch b = mask_tokens(window, 0.15, rng, v);
        for (int64_t r = 0; r < b.targets.rows; ++r) {
            for (int64_t c = 0; c < b.targets.cols; ++c) {
                ++eligible;
                const int32_t t = b.targets.at(r, c);
                if (t == Tape::kIgnoreId) {
                    continue;
                }
                ++selected;
                const int32_t in = b.input_ids.at(r, c);
                if (in == Vocabulary::kMask) {
                    ++masked;
                } else if (in == t) {
                    ++kept;
                } else {
                    ++randomized;
                    CHECK(v.is_content(in));
                }
            }
        }
    }
    const double sel_rate = static_cast<double>(selected) / static_cast<double>(eligible);
    CHECK(std::abs(sel_rate - 0.15) < 0.005);
    const double dsel = static_cast<double>(selected);
    CHECK(std::abs(masked / dsel - 0.8) < 0.01);
    CHECK(std::abs(randomized / dsel - 0.1) < 0.01);
    CHECK(std::abs(kept / dsel - 0.1) < 0.01);
}

TEST_CASE("mask_tokens: recovery invariant and degenerate cases") {
    const Vocabulary v = build_vocabulary(30, 0, 0, 6);
    const auto seqs = gen_clean_corpus(v, 4, 6, 3);
    Rng rng(1);
    MaskedBatch b = mask_tokens(seqs, 0.15, rng, v);
    for (int64_t r = 0; r < b.targets.rows; ++r) {
        for (int64_t c = 0; c < b.targets.cols; ++c) {
            const int32_t t = b.targets.at(r, c);
            if (t == Tape::kIgnoreId) {
                // untouched positions keep the original token
                CHECK(b.input_ids.at(r, c) == seqs[static_cast<size_t>(r)][static_cast<size_t>(c)]);
            } else {
                CHECK(v.is_content(t)); // original recoverable from targets
            }
        }
    }

    // a tiny batch with a tiny rate must still select >= 1 position
    std::vector<std::vector<int32_t>> one = {{v.content_begin(), v.content_begin() + 1}};
    Rng rng2(2);
    MaskedBatch forced = mask_tokens(one, 0.001, rng2, v);
    int n_selected = 0;
    for (int32_t t : forced.targets.v) {
        n_selected += (t != Tape::kIgnoreId) ? 1 : 0;
    }
    CHECK(n_selected >= 1);

    CHECK_THROWS_AS(mask_tokens(one, 0.0, rng2, v), ContractError);
    std::vector<std::vector<int32_t>> only_pad = {{Vocabulary::kPad}};
    CHECK_THROWS_AS(mask_tokens(only_pad, 0.15, rng2, v), ContractError);
}

TEST_CASE("mask_tokens: ragged sequences are padded with PAD and ignored") {
    const Vocabulary v = build_vocabulary(10, 0, 0, 1);
    std::vector<std::vector<int32_t>> seqs = {{3, 4, 5, 6}, {7, 8}};
    Rng rng(4);
    MaskedBatch b = mask_tokens(seqs, 0.3, rng, v);
    CHECK(b.input_ids.cols == 4);
    CHECK(b.input_ids.at(1, 2) == Vocabulary::kPad);
    CHECK(b.input_ids.at(1, 3) == Vocabulary::kPad);
    CHECK(b.targets.at(1, 2) == Tape::kIgnoreId);
}

TEST_CASE("environment json round-trip") {
    Environment env;
    env.env_id = 3;
    env.descriptor = "domain-3";
    env.sequences = {{3, 4, 5}, {6, 7, 8}};
    const std::string text = env.to_json("abc123");
    std::string vh;
    const Environment back = Environment::from_json(text, &vh);
    CHECK(back.env_id == 3);
    CHECK(back.descriptor == "domain-3");
    CHECK(back.sequences == env.sequences);
    CHECK(vh == "abc123");
}

TEST_CASE("generators are pure functions of config and seed") {
    const Vocabulary v = build_vocabulary(40, 4, 6, 12);
    CHECK(gen_clean_corpus(v, 20, 10, 7) == gen_clean_corpus(v, 20, 10, 7));
    const auto w1 = wrap_with_markup(gen_clean_corpus(v, 20, 10, 7), v, 0.4, 9);
    const auto w2 = wrap_with_markup(gen_clean_corpus(v, 20, 10, 7), v, 0.4, 9);
    CHECK(w1 == w2);
    CorrelationSplitConfig cfg;
    cfg.n_sentences = 100;
    auto [a1, b1] = gen_correlation_corpus(v, cfg, 5);
    auto [a2, b2] = gen_correlation_corpus(v, cfg, 5);
    CHECK(a1.sequences == a2.sequences);
    CHECK(b1.sequences == b2.sequences);
    const auto d1 = gen_domain_envs(v, 3, 30, 8, 0.5, 6);
    const auto d2 = gen_domain_envs(v, 3, 30, 8, 0.5, 6);
    for (size_t i = 0; i < d1.size(); ++i) {
        CHECK(d1[i].sequences == d2[i].sequences);
    }
}
