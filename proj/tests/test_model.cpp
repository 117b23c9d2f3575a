#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "gradcheck.hpp"
#include "ilm/checkpoint.hpp"
#include "ilm/errors.hpp"
#include "ilm/model.hpp"
#include "ilm/rng.hpp"

using namespace ilm;
using ilm::testing::check_gradients;

namespace {

EncoderConfig tiny_config(uint64_t seed = 7) {
    EncoderConfig cfg;
    cfg.vocab_size = 11;
    cfg.embed_dim = 8;
    cfg.n_layers = 1;
    cfg.n_attn_heads = 2;
    cfg.ffn_dim = 16;
    cfg.max_seq_len = 6;
    cfg.seed = seed;
    return cfg;
}

IdMatrix ids_from(std::vector<std::vector<int32_t>> rows) {
    IdMatrix m(static_cast<int64_t>(rows.size()), static_cast<int64_t>(rows[0].size()));
    for (size_t r = 0; r < rows.size(); ++r) {
        for (size_t c = 0; c < rows[r].size(); ++c) {
            m.at(static_cast<int64_t>(r), static_cast<int64_t>(c)) = rows[r][c];
        }
    }
    return m;
}

bool same_bits(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) {
        return false;
    }
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i] != b[i]) {
            return false;
        }
    }
    return true;
}

} // namespace

TEST_CASE("config validation") {
    EncoderConfig cfg = tiny_config();
    cfg.n_attn_heads = 3; // 8 % 3 != 0
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.vocab_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("init: same seed gives bit-identical models") {
    InvariantModel a = InvariantModel::init(tiny_config(3), 2, InitMode::shared_head_copy);
    InvariantModel b = InvariantModel::init(tiny_config(3), 2, InitMode::shared_head_copy);
    auto pa = a.all_params(), pb = b.all_params();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(same_bits(pa[i].data(), pb[i].data()));
    }
}

TEST_CASE("init: shared-head-copy starts with identical heads, fresh does not") {
    InvariantModel shared = InvariantModel::init(tiny_config(), 3, InitMode::shared_head_copy);
    CHECK(shared.head_weights_flat(0) == shared.head_weights_flat(1));
    CHECK(shared.head_weights_flat(1) == shared.head_weights_flat(2));

    InvariantModel fresh = InvariantModel::init(tiny_config(), 3, InitMode::fresh);
    CHECK(fresh.head_weights_flat(0) != fresh.head_weights_flat(1));
}

TEST_CASE("init: parameter counts match the closed-form formula") {
    const EncoderConfig cfg = tiny_config();
    InvariantModel m = InvariantModel::init(cfg, 2, InitMode::shared_head_copy);
    const int64_t v = cfg.vocab_size, d = cfg.embed_dim, f = cfg.ffn_dim, l = cfg.max_seq_len;
    const int64_t per_layer = 4 * d * d + 2 * d * f + 9 * d + f;
    const int64_t phi_expected = v * d + l * d + cfg.n_layers * per_layer + 2 * d;
    const int64_t head_expected = d * d + 3 * d + d * v + v;
    CHECK(m.phi_param_count() == phi_expected);
    CHECK(m.head_param_count() == head_expected);

    int64_t total = 0;
    for (Tensor& t : m.all_params()) {
        total += t.numel();
    }
    CHECK(total == phi_expected + 2 * head_expected);
}

TEST_CASE("encode: deterministic and within-range checks") {
    InvariantModel m = InvariantModel::init(tiny_config(), 1, InitMode::shared_head_copy);
    IdMatrix ids = ids_from({{3, 4, 5}, {6, 7, 8}});
    Tape tape;
    Tensor a = m.encode(tape, ids);
    Tensor b = m.encode(tape, ids);
    CHECK(same_bits(a.data(), b.data()));
    CHECK(a.shape() == Shape{2, 3, 8});

    IdMatrix bad = ids_from({{3, 99}});
    CHECK_THROWS_AS(m.encode(tape, bad), ContractError);
    IdMatrix too_long = ids_from({{3, 3, 3, 3, 3, 3, 3}});
    CHECK_THROWS_AS(m.encode(tape, too_long), ContractError);
}

TEST_CASE("encode: outputs at non-PAD positions ignore PAD padding entirely") {
    InvariantModel m = InvariantModel::init(tiny_config(21), 1, InitMode::shared_head_copy);
    IdMatrix short_ids = ids_from({{3, 4, 5, 0}});      // one PAD
    IdMatrix long_ids = ids_from({{3, 4, 5, 0, 0, 0}}); // three PADs
    Tape tape;
    Tensor a = m.encode(tape, short_ids);
    Tensor b = m.encode(tape, long_ids);
    const int64_t d = 8;
    for (int64_t pos = 0; pos < 3; ++pos) {
        for (int64_t j = 0; j < d; ++j) {
            CHECK(a.data()[static_cast<size_t>(pos * d + j)] ==
                  b.data()[static_cast<size_t>(pos * d + j)]);
        }
    }
}

TEST_CASE("encode: gradient of mean output vs finite differences for phi") {
    InvariantModel m = InvariantModel::init(tiny_config(5), 1, InitMode::shared_head_copy);
    IdMatrix ids = ids_from({{3, 4, 5, 6}, {7, 8, 9, 10}});
    auto params = m.phi_params();
    auto loss_fn = [&](Tape& tape) { return tape.mean_all(m.encode(tape, ids)); };
    const auto res = check_gradients(params, loss_fn, 1e-2, 2e-4, 2e-3);
    CHECK_MESSAGE(res.ok, res.where);
}

TEST_CASE("full tiny encoder + loss: every parameter's gradient vs finite differences") {
    InvariantModel m = InvariantModel::init(tiny_config(11), 2, InitMode::shared_head_copy);
    IdMatrix ids = ids_from({{3, 4, 5, 6}, {7, 8, 9, 0}});
    IdMatrix targets(2, 4, Tape::kIgnoreId);
    targets.at(0, 1) = 5;
    targets.at(0, 3) = 3;
    targets.at(1, 0) = 9;
    auto params = m.all_params();
    auto loss_fn = [&](Tape& tape) {
        return tape.masked_cross_entropy(m.forward_ensemble(tape, ids), targets);
    };
    const auto res = check_gradients(params, loss_fn, 1e-2, 2e-4, 2e-3);
    CHECK_MESSAGE(res.ok, res.where);
}

TEST_CASE("forward_ensemble: n=1 equals forward_erm bitwise") {
    InvariantModel m = InvariantModel::init(tiny_config(9), 1, InitMode::shared_head_copy);
    IdMatrix ids = ids_from({{3, 4, 5}});
    Tape tape;
    Tensor a = m.forward_ensemble(tape, ids);
    Tensor b = m.forward_erm(tape, ids);
    CHECK(same_bits(a.data(), b.data()));
}

TEST_CASE("forward_erm rejects multi-head models, apply_head checks its index") {
    InvariantModel multi = InvariantModel::init(tiny_config(), 2, InitMode::shared_head_copy);
    Tape tape;
    IdMatrix ids = ids_from({{3}});
    CHECK_THROWS_AS(multi.forward_erm(tape, ids), ContractError);
    CHECK_THROWS_AS(multi.apply_head(tape, 5, Tensor::zeros({1, 1, 8})), ContractError);
}

TEST_CASE("forward_ensemble: identical heads double the logits and keep the argmax") {
    InvariantModel m = InvariantModel::init(tiny_config(13), 2, InitMode::shared_head_copy);
    IdMatrix ids = ids_from({{3, 4, 5}});
    Tape tape;
    Tensor ens = m.forward_ensemble(tape, ids);
    Tensor enc = m.encode(tape, ids);
    Tensor single = m.apply_head(tape, 0, enc);
    REQUIRE(ens.numel() == single.numel());
    for (size_t i = 0; i < ens.data().size(); ++i) {
        CHECK(ens.data()[i] == 2.0f * single.data()[i]); // a + a is exact in fp
    }

    // argmax invariance with three identical heads
    InvariantModel m3 = InvariantModel::init(tiny_config(13), 3, InitMode::shared_head_copy);
    Tape tape3;
    Tensor ens3 = m3.forward_ensemble(tape3, ids);
    Tensor enc3 = m3.encode(tape3, ids);
    Tensor one3 = m3.apply_head(tape3, 1, enc3);
    const int64_t v = 11;
    for (int64_t pos = 0; pos < 3; ++pos) {
        int64_t arg_e = 0, arg_s = 0;
        for (int64_t c = 1; c < v; ++c) {
            if (ens3.data()[static_cast<size_t>(pos * v + c)] >
                ens3.data()[static_cast<size_t>(pos * v + arg_e)]) {
                arg_e = c;
            }
            if (one3.data()[static_cast<size_t>(pos * v + c)] >
                one3.data()[static_cast<size_t>(pos * v + arg_s)]) {
                arg_s = c;
            }
        }
        CHECK(arg_e == arg_s);
    }
}

TEST_CASE("forward_ensemble: hand-computed two-head sum on a fixed encoder output") {
    // embed_dim 2, vocab 3: apply_head computes
    //   z = layer_norm(gelu(h W1 + b1)) ; logits = z W2 + b2
    EncoderConfig cfg;
    cfg.vocab_size = 3;
    cfg.embed_dim = 2;
    cfg.n_layers = 1;
    cfg.n_attn_heads = 1;
    cfg.ffn_dim = 4;
    cfg.max_seq_len = 4;
    cfg.seed = 1;
    InvariantModel m = InvariantModel::init(cfg, 2, InitMode::shared_head_copy);

    auto set = [](Tensor t, std::vector<float> v) {
        std::copy(v.begin(), v.end(), t.data().begin());
    };
    auto h0 = m.head_params(0);
    set(h0[0], {0, 0, 0, 0});       // w1 = 0
    set(h0[1], {1.0f, 2.0f});       // b1
    set(h0[2], {1.0f, 1.0f});       // ln gain
    set(h0[3], {0.0f, 0.0f});       // ln bias
    set(h0[4], {1, 2, 3, 4, 5, 6}); // w2 (2x3)
    set(h0[5], {0.5f, -0.5f, 0.25f});
    auto h1 = m.head_params(1);
    set(h1[0], {0, 0, 0, 0});
    set(h1[1], {-1.0f, 3.0f});
    set(h1[2], {2.0f, 0.5f});
    set(h1[3], {0.1f, -0.1f});
    set(h1[4], {-1, 0, 1, 2, -2, 0.5f});
    set(h1[5], {0.0f, 1.0f, -1.0f});

    Tensor encoded = Tensor::from_vector({1, 1, 2}, {0.3f, -0.7f});

    // independent double-precision evaluation of the same formulas
    auto head_manual = [&](const std::vector<double>& b1, const std::vector<double>& g,
                           const std::vector<double>& lb, const std::vector<double>& w2,
                           const std::vector<double>& b2) {
        double z[2];
        for (int i = 0; i < 2; ++i) {
            const double x = b1[static_cast<size_t>(i)]; // h W1 = 0
            z[i] = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
        }
        const double mean = 0.5 * (z[0] + z[1]);
        const double var = 0.5 * ((z[0] - mean) * (z[0] - mean) + (z[1] - mean) * (z[1] - mean));
        const double inv = 1.0 / std::sqrt(var + 1e-5);
        double zn[2];
        for (int i = 0; i < 2; ++i) {
            zn[i] = (z[i] - mean) * inv * g[static_cast<size_t>(i)] + lb[static_cast<size_t>(i)];
        }
        std::vector<double> logits(3);
        for (int c = 0; c < 3; ++c) {
            logits[static_cast<size_t>(c)] = zn[0] * w2[static_cast<size_t>(c)] +
                                             zn[1] * w2[static_cast<size_t>(3 + c)] +
                                             b2[static_cast<size_t>(c)];
        }
        return logits;
    };
    const auto l0 = head_manual({1, 2}, {1, 1}, {0, 0}, {1, 2, 3, 4, 5, 6}, {0.5, -0.5, 0.25});
    const auto l1 = head_manual({-1, 3}, {2, 0.5}, {0.1, -0.1}, {-1, 0, 1, 2, -2, 0.5}, {0, 1, -1});

    Tape tape;
    Tensor out0 = m.apply_head(tape, 0, encoded);
    Tensor out1 = m.apply_head(tape, 1, encoded);
    Tensor sum = tape.add(out0, out1);
    for (int c = 0; c < 3; ++c) {
        CHECK(out0.data()[static_cast<size_t>(c)] ==
              doctest::Approx(l0[static_cast<size_t>(c)]).epsilon(1e-4));
        CHECK(sum.data()[static_cast<size_t>(c)] ==
              doctest::Approx(l0[static_cast<size_t>(c)] + l1[static_cast<size_t>(c)])
                  .epsilon(1e-4));
    }
}

TEST_CASE("forward_ensemble: mean mode scales the sum by 1/n") {
    EncoderConfig cfg = tiny_config(17);
    InvariantModel sum_model = InvariantModel::init(cfg, 2, InitMode::shared_head_copy);
    cfg.ensemble = EnsembleMode::mean;
    InvariantModel mean_model = InvariantModel::init(cfg, 2, InitMode::shared_head_copy);
    IdMatrix ids = ids_from({{3, 4}});
    Tape tape;
    Tensor s = sum_model.forward_ensemble(tape, ids);
    Tensor mn = mean_model.forward_ensemble(tape, ids);
    for (size_t i = 0; i < s.data().size(); ++i) {
        CHECK(mn.data()[i] == doctest::Approx(0.5f * s.data()[i]).epsilon(1e-6));
    }
}

TEST_CASE("forward_ensemble: permutation-invariant in head order") {
    InvariantModel m = InvariantModel::init(tiny_config(19), 3, InitMode::fresh);
    IdMatrix ids = ids_from({{3, 4, 5}});
    Tape tape;
    Tensor enc = m.encode(tape, ids);
    Tensor order_a = tape.add(tape.add(m.apply_head(tape, 0, enc), m.apply_head(tape, 1, enc)),
                              m.apply_head(tape, 2, enc));
    Tensor order_b = tape.add(tape.add(m.apply_head(tape, 2, enc), m.apply_head(tape, 0, enc)),
                              m.apply_head(tape, 1, enc));
    for (size_t i = 0; i < order_a.data().size(); ++i) {
        CHECK(order_a.data()[i] == doctest::Approx(order_b.data()[i]).epsilon(1e-5));
    }
}

TEST_CASE("encode output does not depend on head parameters") {
    InvariantModel m = InvariantModel::init(tiny_config(23), 2, InitMode::shared_head_copy);
    IdMatrix ids = ids_from({{3, 4, 5}});
    Tape tape;
    Tensor before = m.encode(tape, ids);
    std::vector<float> snapshot(before.data().begin(), before.data().end());
    for (Tensor& t : m.head_params(0)) {
        for (float& x : t.data()) {
            x += 1.0f;
        }
    }
    Tensor after = m.encode(tape, ids);
    CHECK(same_bits(std::span<const float>(snapshot), after.data()));
}

TEST_CASE("head_weights_flat: length, identity, single-coordinate perturbation") {
    InvariantModel m = InvariantModel::init(tiny_config(29), 2, InitMode::shared_head_copy);
    auto flat0 = m.head_weights_flat(0);
    auto flat1 = m.head_weights_flat(1);
    CHECK(flat0 == flat1);
    CHECK(static_cast<int64_t>(flat0.size()) == m.head_param_count());

    m.head_params(1)[0].data()[3] += 0.5f;
    auto perturbed = m.head_weights_flat(1);
    int changed = 0;
    for (size_t i = 0; i < flat1.size(); ++i) {
        if (perturbed[i] != flat1[i]) {
            ++changed;
            CHECK(perturbed[i] - flat1[i] == doctest::Approx(0.5f));
        }
    }
    CHECK(changed == 1);
    CHECK_THROWS_AS(m.head_weights_flat(7), ContractError);
}

TEST_CASE("with_replicated_heads: single head cloned n times over the same phi") {
    InvariantModel base = InvariantModel::init(tiny_config(31), 1, InitMode::shared_head_copy);
    InvariantModel multi = base.with_replicated_heads(3);
    CHECK(multi.n_heads() == 3);
    CHECK(multi.head_weights_flat(0) == base.head_weights_flat(0));
    CHECK(multi.head_weights_flat(2) == base.head_weights_flat(0));
    IdMatrix ids = ids_from({{3, 4}});
    Tape tape;
    CHECK(same_bits(base.encode(tape, ids).data(), multi.encode(tape, ids).data()));
}

TEST_CASE("checkpoint: save/load round trip is bit exact") {
    const std::string dir = std::filesystem::temp_directory_path().string() + "/ilm_ckpt_test";
    std::filesystem::create_directories(dir);
    const std::string path = dir + "/model.ilm1";

    InvariantModel m = InvariantModel::init(tiny_config(37), 2, InitMode::fresh);
    save_checkpoint(path, m, 123, "deadbeef00000000");
    CHECK(!std::filesystem::exists(path + ".tmp"));

    LoadedCheckpoint loaded = load_checkpoint(path);
    CHECK(loaded.step == 123);
    CHECK(loaded.vocab_hash == "deadbeef00000000");
    CHECK(loaded.model.n_heads() == 2);
    auto pa = m.all_params(), pb = loaded.model.all_params();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(same_bits(pa[i].data(), pb[i].data()));
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint: corrupt files are rejected") {
    const std::string dir = std::filesystem::temp_directory_path().string() + "/ilm_ckpt_bad";
    std::filesystem::create_directories(dir);
    {
        std::FILE* f = std::fopen((dir + "/bad.ilm1").c_str(), "wb");
        std::fputs("NOPE", f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(load_checkpoint(dir + "/bad.ilm1"), IoError);
    CHECK_THROWS_AS(load_checkpoint(dir + "/missing.ilm1"), IoError);

    // truncated: valid prefix, missing tensor data
    InvariantModel m = InvariantModel::init(tiny_config(41), 1, InitMode::shared_head_copy);
    save_checkpoint(dir + "/full.ilm1", m, 1, "x");
    const auto size = std::filesystem::file_size(dir + "/full.ilm1");
    std::filesystem::resize_file(dir + "/full.ilm1", size / 2);
    CHECK_THROWS_AS(load_checkpoint(dir + "/full.ilm1"), IoError);
    std::filesystem::remove_all(dir);
}
