#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ilm/rng.hpp"
#include "ilm/tensor.hpp"
#include "ilm/vocab.hpp"

namespace ilm {

// One data distribution: an indexed stream of token sequences.
struct Environment {
    int32_t env_id = 0;
    std::string descriptor;
    std::vector<std::vector<int32_t>> sequences;

    std::string to_json(const std::string& vocab_hash) const;
    static Environment from_json(const std::string& text, std::string* vocab_hash_out = nullptr);
};

// One masked-LM training batch. targets carry the original token at masked
// positions and Tape::kIgnoreId everywhere else.
struct MaskedBatch {
    IdMatrix input_ids;
    IdMatrix targets;
    int32_t env_id = -1;
};

struct CorrelationSplitConfig {
    double p = 0.8;        // fraction of sentences left untouched (Env-A)
    double pair_bias = 0.9; // P(preferred pair side | context)
    int n_contexts = 8;
    int n_sentences = 2000;
    int seq_len = 12;
};

// First-order Markov chain over an explicit token support. Rows of the
// transition matrix sum to 1.
struct MarkovChain {
    std::vector<int32_t> support;
    std::vector<float> transition; // S x S row-major
    std::vector<float> initial;    // S

    // Seeded chain where each token prefers a few successors, smoothed so
    // every transition stays possible.
    static MarkovChain make(std::span<const int32_t> support_ids, uint64_t seed);

    std::vector<int32_t> sample_sequence(int len, Rng& rng) const;
    size_t index_of(int32_t id) const; // position in support, throws if absent
};

// The chain gen_clean_corpus samples from, exposed so its statistics can be
// checked against generated data.
MarkovChain clean_corpus_chain(const Vocabulary& vocab, uint64_t seed);

std::vector<std::vector<int32_t>> gen_from_chain(const MarkovChain& chain, int n_sentences,
                                                 int seq_len, uint64_t seed);

std::vector<std::vector<int32_t>> gen_clean_corpus(const Vocabulary& vocab, int n_sentences,
                                                   int seq_len, uint64_t seed);

// Interleaves matched open/close markup tokens around content tokens so the
// expected markup fraction equals markup_rate. Stripping markup ids recovers
// the input exactly.
std::vector<std::vector<int32_t>> wrap_with_markup(const std::vector<std::vector<int32_t>>& seqs,
                                                   const Vocabulary& vocab, double markup_rate,
                                                   uint64_t seed);

// Context token ids used by the correlation corpus (the n_contexts content
// ids after the pair block). Context k prefers pair side k % 2.
std::vector<int32_t> correlation_context_ids(const Vocabulary& vocab, int n_contexts);

std::vector<int32_t> swap_pairs(std::span<const int32_t> seq, const Vocabulary& vocab);

// Template sentences [context, filler..., attribute, filler...]; a fraction
// p forms Env-A untouched, the rest has every pair token swapped (Env-B).
std::pair<Environment, Environment> gen_correlation_corpus(const Vocabulary& vocab,
                                                           const CorrelationSplitConfig& cfg,
                                                           uint64_t seed);

// Test sentences from the same (pre-swap) generating process.
std::vector<std::vector<int32_t>> gen_correlation_test(const Vocabulary& vocab,
                                                       const CorrelationSplitConfig& cfg,
                                                       int n_sentences, uint64_t seed);

// Token support layout for multi-domain generation: a shared core plus
// disjoint domain-specific pools. The overlap fraction of each domain's
// support is core.
struct DomainLayout {
    std::vector<int32_t> core;
    std::vector<std::vector<int32_t>> specific; // one pool per domain
};

DomainLayout make_domain_layout(const Vocabulary& vocab, int n_domains, double overlap,
                                uint64_t seed);

// The invariant core->core structure shared by every domain chain.
MarkovChain domain_core_chain(const Vocabulary& vocab, int n_domains, double overlap,
                              uint64_t seed);

// One environment per domain; each domain's chain blends the shared core
// chain with a domain-specific chain over its own support.
std::vector<Environment> gen_domain_envs(const Vocabulary& vocab, int n_domains, int n_sentences,
                                         int seq_len, double overlap, uint64_t seed);

// BERT-style masking: each non-special position is selected independently
// with probability mask_rate; selected positions become MASK 80% of the
// time, a random content token 10%, and stay unchanged 10%. If no position
// gets selected, one eligible position is force-selected.
MaskedBatch mask_tokens(std::span<const std::vector<int32_t>> sequences, double mask_rate,
                        Rng& rng, const Vocabulary& vocab);

} // namespace ilm
