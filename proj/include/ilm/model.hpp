#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ilm/tensor.hpp"
#include "ilm/vocab.hpp"

namespace ilm {

enum class EnsembleMode { sum, mean };

struct EncoderConfig {
    int64_t vocab_size = 0;
    int64_t embed_dim = 64;
    int64_t n_layers = 2;
    int64_t n_attn_heads = 2;
    int64_t ffn_dim = 128;
    int64_t max_seq_len = 32;
    uint64_t seed = 0;
    EnsembleMode ensemble = EnsembleMode::sum;

    void validate() const; // throws ConfigError
};

enum class InitMode { fresh, shared_head_copy };

// Dense projection + gelu + layer norm, then an output projection to vocab
// logits. One head per environment.
struct LMHead {
    Tensor w1, b1, ln_g, ln_b, w2, b2;
};

struct EncoderLayer {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w_ff1, b_ff1, w_ff2, b_ff2;
};

struct EncoderParams {
    Tensor tok_emb, pos_emb;
    std::vector<EncoderLayer> layers;
    Tensor ln_f_g, ln_f_b;
};

// Shared encoder phi plus an ordered list of LM heads. The ensemble forward
// sums every head's logits regardless of which environment a batch came
// from; only the training schedule distinguishes heads.
class InvariantModel {
public:
    InvariantModel() = default;

    static InvariantModel init(const EncoderConfig& cfg, int n_envs, InitMode mode);

    // Pre-LN transformer encoder; PAD key positions are attention-masked out.
    Tensor encode(Tape& tape, const IdMatrix& input_ids) const;
    // Sum (or mean, per config) of all heads applied to the encoder output.
    Tensor forward_ensemble(Tape& tape, const IdMatrix& input_ids) const;
    // Single-head forward; requires exactly one head.
    Tensor forward_erm(Tape& tape, const IdMatrix& input_ids) const;
    // One head applied to an encoder output of shape [B,L,D]; returns [B,L,V].
    Tensor apply_head(Tape& tape, int head_index, const Tensor& encoded) const;

    int n_heads() const { return static_cast<int>(heads_.size()); }
    const EncoderConfig& config() const { return cfg_; }

    std::vector<Tensor> phi_params();
    std::vector<Tensor> head_params(int head_index);
    std::vector<Tensor> all_params();
    // Fixed-order flat copy of one head's parameters (w1, b1, ln_g, ln_b,
    // w2, b2, each row-major).
    std::vector<float> head_weights_flat(int head_index) const;

    int64_t phi_param_count() const;
    int64_t head_param_count() const;

    // Visits (name, tensor) in a fixed order; used by checkpointing.
    void visit_params(const std::function<void(const std::string&, Tensor&)>& fn);

    InvariantModel clone() const; // deep copy of all parameters
    // Same phi, heads replaced by n copies of this model's head 0.
    InvariantModel with_replicated_heads(int n_envs) const;

private:
    EncoderConfig cfg_;
    EncoderParams phi_;
    std::vector<LMHead> heads_;
};

} // namespace ilm
