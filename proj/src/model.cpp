#include "ilm/model.hpp"

#include <cmath>
#include <cstring>

#include "ilm/errors.hpp"
#include "ilm/rng.hpp"

namespace ilm {

namespace {

constexpr float kInitStd = 0.02f;
constexpr float kAttnMaskValue = -1e30f;

Tensor gaussian_param(Shape shape, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (float& x : t.data()) {
        x = static_cast<float>(rng.gaussian()) * kInitStd;
    }
    return t;
}

Tensor zeros_param(Shape shape) {
    return Tensor::zeros(std::move(shape), true);
}

Tensor ones_param(Shape shape) {
    return Tensor::full(std::move(shape), 1.0f, true);
}

Tensor copy_param(const Tensor& src) {
    return Tensor::from_vector(src.shape(),
                               std::vector<float>(src.data().begin(), src.data().end()), true);
}

LMHead init_head(const EncoderConfig& cfg, Rng& rng) {
    LMHead h;
    h.w1 = gaussian_param({cfg.embed_dim, cfg.embed_dim}, rng);
    h.b1 = zeros_param({cfg.embed_dim});
    h.ln_g = ones_param({cfg.embed_dim});
    h.ln_b = zeros_param({cfg.embed_dim});
    h.w2 = gaussian_param({cfg.embed_dim, cfg.vocab_size}, rng);
    h.b2 = zeros_param({cfg.vocab_size});
    return h;
}

LMHead copy_head(const LMHead& src) {
    LMHead h;
    h.w1 = copy_param(src.w1);
    h.b1 = copy_param(src.b1);
    h.ln_g = copy_param(src.ln_g);
    h.ln_b = copy_param(src.ln_b);
    h.w2 = copy_param(src.w2);
    h.b2 = copy_param(src.b2);
    return h;
}

} // namespace

void EncoderConfig::validate() const {
    if (vocab_size <= 0) {
        throw ConfigError("model config: vocab_size must be positive");
    }
    if (embed_dim <= 0 || n_layers <= 0 || n_attn_heads <= 0 || ffn_dim <= 0 || max_seq_len <= 0) {
        throw ConfigError("model config: all dimensions must be positive");
    }
    if (embed_dim % n_attn_heads != 0) {
        throw ConfigError("model config: embed_dim " + std::to_string(embed_dim) +
                          " not divisible by n_attn_heads " + std::to_string(n_attn_heads));
    }
}

InvariantModel InvariantModel::init(const EncoderConfig& cfg, int n_envs, InitMode mode) {
    cfg.validate();
    if (n_envs < 1) {
        throw ConfigError("init_model: n_envs must be >= 1");
    }
    InvariantModel m;
    m.cfg_ = cfg;

    Rng phi_rng(mix_seed(cfg.seed, "phi"));
    m.phi_.tok_emb = gaussian_param({cfg.vocab_size, cfg.embed_dim}, phi_rng);
    m.phi_.pos_emb = gaussian_param({cfg.max_seq_len, cfg.embed_dim}, phi_rng);
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        EncoderLayer layer;
        layer.ln1_g = ones_param({cfg.embed_dim});
        layer.ln1_b = zeros_param({cfg.embed_dim});
        layer.wq = gaussian_param({cfg.embed_dim, cfg.embed_dim}, phi_rng);
        layer.bq = zeros_param({cfg.embed_dim});
        layer.wk = gaussian_param({cfg.embed_dim, cfg.embed_dim}, phi_rng);
        layer.bk = zeros_param({cfg.embed_dim});
        layer.wv = gaussian_param({cfg.embed_dim, cfg.embed_dim}, phi_rng);
        layer.bv = zeros_param({cfg.embed_dim});
        layer.wo = gaussian_param({cfg.embed_dim, cfg.embed_dim}, phi_rng);
        layer.bo = zeros_param({cfg.embed_dim});
        layer.ln2_g = ones_param({cfg.embed_dim});
        layer.ln2_b = zeros_param({cfg.embed_dim});
        layer.w_ff1 = gaussian_param({cfg.embed_dim, cfg.ffn_dim}, phi_rng);
        layer.b_ff1 = zeros_param({cfg.ffn_dim});
        layer.w_ff2 = gaussian_param({cfg.ffn_dim, cfg.embed_dim}, phi_rng);
        layer.b_ff2 = zeros_param({cfg.embed_dim});
        m.phi_.layers.push_back(std::move(layer));
    }
    m.phi_.ln_f_g = ones_param({cfg.embed_dim});
    m.phi_.ln_f_b = zeros_param({cfg.embed_dim});

    if (mode == InitMode::shared_head_copy) {
        Rng head_rng(mix_seed(cfg.seed, "head"));
        const LMHead tmpl = init_head(cfg, head_rng);
        for (int e = 0; e < n_envs; ++e) {
            m.heads_.push_back(copy_head(tmpl));
        }
    } else {
        for (int e = 0; e < n_envs; ++e) {
            Rng head_rng(mix_seed(cfg.seed, "head", static_cast<uint64_t>(e)));
            m.heads_.push_back(init_head(cfg, head_rng));
        }
    }
    return m;
}

Tensor InvariantModel::encode(Tape& tape, const IdMatrix& ids) const {
    const int64_t b = ids.rows;
    const int64_t l = ids.cols;
    if (l > cfg_.max_seq_len) {
        throw ContractError("encode: sequence length " + std::to_string(l) +
                            " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    }
    for (int32_t id : ids.v) {
        if (id < 0 || id >= cfg_.vocab_size) {
            throw ContractError("encode: token id " + std::to_string(id) + " out of range [0," +
                                std::to_string(cfg_.vocab_size) + ")");
        }
    }
    const int64_t d = cfg_.embed_dim;
    const int64_t h = cfg_.n_attn_heads;
    const int64_t dh = d / h;

    IdMatrix pos_ids(b, l);
    for (int64_t r = 0; r < b; ++r) {
        for (int64_t c = 0; c < l; ++c) {
            pos_ids.at(r, c) = static_cast<int32_t>(c);
        }
    }

    // Additive attention mask: PAD keys get a large negative logit, which
    // underflows to an exact zero weight after the softmax.
    Tensor attn_mask = Tensor::zeros({b, h, l, l});
    {
        auto md = attn_mask.data();
        for (int64_t r = 0; r < b; ++r) {
            for (int64_t key = 0; key < l; ++key) {
                if (ids.at(r, key) != Vocabulary::kPad) {
                    continue;
                }
                for (int64_t hh = 0; hh < h; ++hh) {
                    for (int64_t q = 0; q < l; ++q) {
                        md[static_cast<size_t>(((r * h + hh) * l + q) * l + key)] = kAttnMaskValue;
                    }
                }
            }
        }
    }

    Tensor x = tape.add(tape.embedding_lookup(phi_.tok_emb, ids),
                        tape.embedding_lookup(phi_.pos_emb, pos_ids)); // [B,L,D]

    for (const EncoderLayer& layer : phi_.layers) {
        // attention block
        Tensor n1 = tape.layer_norm(x, layer.ln1_g, layer.ln1_b);
        Tensor flat = tape.reshape(n1, {b * l, d});
        auto project = [&](const Tensor& w, const Tensor& bias) {
            Tensor p = tape.add(tape.matmul(flat, w), bias);
            return tape.transpose(tape.reshape(p, {b, l, h, dh}), {0, 2, 1, 3}); // [B,H,L,dh]
        };
        Tensor q = project(layer.wq, layer.bq);
        Tensor k = project(layer.wk, layer.bk);
        Tensor v = project(layer.wv, layer.bv);
        Tensor scores = tape.scale(tape.bmm(q, k, /*transpose_b=*/true),
                                   1.0f / std::sqrt(static_cast<float>(dh)));
        scores = tape.add(scores, attn_mask);
        Tensor attn = tape.softmax(scores, -1);
        Tensor ctx = tape.bmm(attn, v);                                   // [B,H,L,dh]
        ctx = tape.reshape(tape.transpose(ctx, {0, 2, 1, 3}), {b * l, d}); // [BL,D]
        Tensor o = tape.add(tape.matmul(ctx, layer.wo), layer.bo);
        x = tape.add(x, tape.reshape(o, {b, l, d}));

        // feed-forward block
        Tensor n2 = tape.layer_norm(x, layer.ln2_g, layer.ln2_b);
        Tensor f = tape.reshape(n2, {b * l, d});
        f = tape.gelu(tape.add(tape.matmul(f, layer.w_ff1), layer.b_ff1));
        f = tape.add(tape.matmul(f, layer.w_ff2), layer.b_ff2);
        x = tape.add(x, tape.reshape(f, {b, l, d}));
    }
    return tape.layer_norm(x, phi_.ln_f_g, phi_.ln_f_b);
}

Tensor InvariantModel::apply_head(Tape& tape, int head_index, const Tensor& encoded) const {
    if (head_index < 0 || head_index >= n_heads()) {
        throw ContractError("apply_head: head index " + std::to_string(head_index) +
                            " out of range [0," + std::to_string(n_heads()) + ")");
    }
    const LMHead& head = heads_[static_cast<size_t>(head_index)];
    const int64_t b = encoded.dim(0);
    const int64_t l = encoded.dim(1);
    const int64_t d = cfg_.embed_dim;
    Tensor flat = tape.reshape(encoded, {b * l, d});
    Tensor z = tape.gelu(tape.add(tape.matmul(flat, head.w1), head.b1));
    z = tape.layer_norm(z, head.ln_g, head.ln_b);
    Tensor logits = tape.add(tape.matmul(z, head.w2), head.b2);
    return tape.reshape(logits, {b, l, cfg_.vocab_size});
}

Tensor InvariantModel::forward_ensemble(Tape& tape, const IdMatrix& input_ids) const {
    if (heads_.empty()) {
        throw ContractError("forward_ensemble: model has no heads");
    }
    Tensor encoded = encode(tape, input_ids);
    Tensor logits = apply_head(tape, 0, encoded);
    for (int e = 1; e < n_heads(); ++e) {
        logits = tape.add(logits, apply_head(tape, e, encoded));
    }
    if (cfg_.ensemble == EnsembleMode::mean && n_heads() > 1) {
        logits = tape.scale(logits, 1.0f / static_cast<float>(n_heads()));
    }
    return logits;
}

Tensor InvariantModel::forward_erm(Tape& tape, const IdMatrix& input_ids) const {
    if (n_heads() != 1) {
        throw ContractError("forward_erm: expected a single-head model, got " +
                            std::to_string(n_heads()) + " heads");
    }
    return forward_ensemble(tape, input_ids);
}

std::vector<Tensor> InvariantModel::phi_params() {
    std::vector<Tensor> out{phi_.tok_emb, phi_.pos_emb};
    for (EncoderLayer& layer : phi_.layers) {
        out.insert(out.end(), {layer.ln1_g, layer.ln1_b, layer.wq, layer.bq, layer.wk, layer.bk,
                               layer.wv, layer.bv, layer.wo, layer.bo, layer.ln2_g, layer.ln2_b,
                               layer.w_ff1, layer.b_ff1, layer.w_ff2, layer.b_ff2});
    }
    out.push_back(phi_.ln_f_g);
    out.push_back(phi_.ln_f_b);
    return out;
}

std::vector<Tensor> InvariantModel::head_params(int head_index) {
    if (head_index < 0 || head_index >= n_heads()) {
        throw ContractError("head_params: index out of range");
    }
    LMHead& h = heads_[static_cast<size_t>(head_index)];
    return {h.w1, h.b1, h.ln_g, h.ln_b, h.w2, h.b2};
}

std::vector<Tensor> InvariantModel::all_params() {
    std::vector<Tensor> out = phi_params();
    for (int e = 0; e < n_heads(); ++e) {
        auto hp = head_params(e);
        out.insert(out.end(), hp.begin(), hp.end());
    }
    return out;
}

std::vector<float> InvariantModel::head_weights_flat(int head_index) const {
    if (head_index < 0 || head_index >= n_heads()) {
        throw ContractError("head_weights_flat: index out of range");
    }
    const LMHead& h = heads_[static_cast<size_t>(head_index)];
    std::vector<float> out;
    for (const Tensor* t : {&h.w1, &h.b1, &h.ln_g, &h.ln_b, &h.w2, &h.b2}) {
        out.insert(out.end(), t->data().begin(), t->data().end());
    }
    return out;
}

int64_t InvariantModel::phi_param_count() const {
    int64_t n = 0;
    InvariantModel& self = const_cast<InvariantModel&>(*this);
    for (const Tensor& t : self.phi_params()) {
        n += t.numel();
    }
    return n;
}

int64_t InvariantModel::head_param_count() const {
    if (heads_.empty()) {
        return 0;
    }
    InvariantModel& self = const_cast<InvariantModel&>(*this);
    int64_t n = 0;
    for (const Tensor& t : self.head_params(0)) {
        n += t.numel();
    }
    return n;
}

void InvariantModel::visit_params(const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("phi.tok_emb", phi_.tok_emb);
    fn("phi.pos_emb", phi_.pos_emb);
    for (size_t l = 0; l < phi_.layers.size(); ++l) {
        EncoderLayer& layer = phi_.layers[l];
        const std::string p = "phi.layer" + std::to_string(l) + ".";
        fn(p + "ln1_g", layer.ln1_g);
        fn(p + "ln1_b", layer.ln1_b);
        fn(p + "wq", layer.wq);
        fn(p + "bq", layer.bq);
        fn(p + "wk", layer.wk);
        fn(p + "bk", layer.bk);
        fn(p + "wv", layer.wv);
        fn(p + "bv", layer.bv);
        fn(p + "wo", layer.wo);
        fn(p + "bo", layer.bo);
        fn(p + "ln2_g", layer.ln2_g);
        fn(p + "ln2_b", layer.ln2_b);
        fn(p + "w_ff1", layer.w_ff1);
        fn(p + "b_ff1", layer.b_ff1);
        fn(p + "w_ff2", layer.w_ff2);
        fn(p + "b_ff2", layer.b_ff2);
    }
    fn("phi.ln_f_g", phi_.ln_f_g);
    fn("phi.ln_f_b", phi_.ln_f_b);
    for (size_t e = 0; e < heads_.size(); ++e) {
        LMHead& h = heads_[e];
        const std::string p = "head" + std::to_string(e) + ".";
        fn(p + "w1", h.w1);
        fn(p + "b1", h.b1);
        fn(p + "ln_g", h.ln_g);
        fn(p + "ln_b", h.ln_b);
        fn(p + "w2", h.w2);
        fn(p + "b2", h.b2);
    }
}

InvariantModel InvariantModel::clone() const {
    InvariantModel out;
    out.cfg_ = cfg_;
    out.phi_.tok_emb = copy_param(phi_.tok_emb);
    out.phi_.pos_emb = copy_param(phi_.pos_emb);
    for (const EncoderLayer& layer : phi_.layers) {
        EncoderLayer c;
        c.ln1_g = copy_param(layer.ln1_g);
        c.ln1_b = copy_param(layer.ln1_b);
        c.wq = copy_param(layer.wq);
        c.bq = copy_param(layer.bq);
        c.wk = copy_param(layer.wk);
        c.bk = copy_param(layer.bk);
        c.wv = copy_param(layer.wv);
        c.bv = copy_param(layer.bv);
        c.wo = copy_param(layer.wo);
        c.bo = copy_param(layer.bo);
        c.ln2_g = copy_param(layer.ln2_g);
        c.ln2_b = copy_param(layer.ln2_b);
        c.w_ff1 = copy_param(layer.w_ff1);
        c.b_ff1 = copy_param(layer.b_ff1);
        c.w_ff2 = copy_param(layer.w_ff2);
        c.b_ff2 = copy_param(layer.b_ff2);
        out.phi_.layers.push_back(std::move(c));
    }
    out.phi_.ln_f_g = copy_param(phi_.ln_f_g);
    out.phi_.ln_f_b = copy_param(phi_.ln_f_b);
    for (const LMHead& h : heads_) {
        out.heads_.push_back(copy_head(h));
    }
    return out;
}

InvariantModel InvariantModel::with_replicated_heads(int n_envs) const {
    if (heads_.empty()) {
        throw ContractError("with_replicated_heads: model has no head to replicate");
    }
    if (n_envs < 1) {
        throw ContractError("with_replicated_heads: n_envs must be >= 1");
    }
    InvariantModel out = clone();
    const LMHead tmpl = copy_head(out.heads_[0]);
    out.heads_.clear();
    for (int e = 0; e < n_envs; ++e) {
        out.heads_.push_back(copy_head(tmpl));
    }
    return out;
}

} // namespace ilm
