#include <doctest.h>

#include <fstream>

#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "ilm/corpus.hpp"
#include "ilm/errors.hpp"
#include "ilm/train.hpp"

using namespace ilm;

namespace {

EncoderConfig small_config(int64_t vocab, uint64_t seed) {
    EncoderConfig cfg;
    cfg.vocab_size = vocab;
    cfg.embed_dim = 16;
    cfg.n_layers = 1;
    cfg.n_attn_heads = 2;
    cfg.ffn_dim = 32;
    cfg.max_seq_len = 24;
    cfg.seed = seed;
    return cfg;
}

struct Fixture {
    Vocabulary vocab;
    std::vector<Environment> envs;
};

Fixture two_env_fixture(int n_sentences = 60) {
    Fixture f;
    f.vocab = build_vocabulary(20, 0, 4, 5);
    auto clean = gen_clean_corpus(f.vocab, 2 * n_sentences, 8, 9);
    f.envs.push_back(Environment{
        0, "clean",
        {clean.begin(), clean.begin() + n_sentences}});
    f.envs.push_back(Environment{
        1, "markup",
        wrap_with_markup({clean.begin() + n_sentences, clean.end()}, f.vocab, 0.3, 11)});
    return f;
}

TrainConfig quick_train(int64_t steps, uint64_t seed, float lr = 1e-3f) {
    TrainConfig tc;
    tc.n_steps = steps;
    tc.batch_size = 4;
    tc.learning_rate = lr;
    tc.seed = seed;
    return tc;
}

bool models_identical(InvariantModel& a, InvariantModel& b) {
    auto pa = a.all_params(), pb = b.all_params();
    if (pa.size() != pb.size()) {
        return false;
    }
    for (size_t i = 0; i < pa.size(); ++i) {
        if (pa[i].numel() != pb[i].numel()) {
            return false;
        }
        for (int64_t j = 0; j < pa[i].numel(); ++j) {
            if (pa[i].data()[static_cast<size_t>(j)] != pb[i].data()[static_cast<size_t>(j)]) {
                return false;
            }
        }
    }
    return true;
}

} // namespace

TEST_CASE("train_irm_games with one environment is bitwise train_erm") {
    Fixture f = two_env_fixture();
    std::vector<Environment> one_env = {f.envs[0]};
    const EncoderConfig cfg = small_config(f.vocab.size(), 31);

    TrainResult irm = train_irm_games(InvariantModel::init(cfg, 1, InitMode::shared_head_copy),
                                      one_env, f.vocab, quick_train(50, 77));
    TrainResult erm = train_erm(InvariantModel::init(cfg, 1, InitMode::shared_head_copy), one_env,
                                f.vocab, quick_train(50, 77));
    CHECK(models_identical(irm.model, erm.model));
    REQUIRE(irm.log.records.size() == erm.log.records.size());
    for (size_t i = 0; i < irm.log.records.size(); ++i) {
        CHECK(irm.log.records[i].loss == erm.log.records[i].loss);
    }
}

TEST_CASE("schedule contract: per-step head updates on a traced 2-env 6-step run") {
    Fixture f = two_env_fixture();
    const EncoderConfig cfg = small_config(f.vocab.size(), 13);
    InvariantModel model = InvariantModel::init(cfg, 2, InitMode::shared_head_copy);

    // snapshot after every step via the checkpoint hook
    std::vector<std::vector<float>> head0, head1;
    std::vector<std::vector<float>> phi_snaps;
    TrainConfig tc = quick_train(6, 99);
    tc.checkpoint_every = 1;
    auto hook = [&](int64_t, const InvariantModel& m) {
        InvariantModel& mm = const_cast<InvariantModel&>(m);
        head0.push_back(mm.head_weights_flat(0));
        head1.push_back(mm.head_weights_flat(1));
        std::vector<float> phi;
        for (Tensor& t : mm.phi_params()) {
            phi.insert(phi.end(), t.data().begin(), t.data().end());
        }
        phi_snaps.push_back(std::move(phi));
    };
    TrainResult result = train_irm_games(std::move(model), f.envs, f.vocab, tc, hook);

    REQUIRE(head0.size() == 7); // snapshots at steps 0..6
    for (int step = 1; step <= 6; ++step) {
        const bool head0_turn = step % 2 == 1; // envs visited in order 0,1,0,1,...
        const size_t s = static_cast<size_t>(step);
        // non-active head: exactly zero change, bitwise
        CHECK((head0[s] != head0[s - 1]) == head0_turn);
        CHECK((head1[s] != head1[s - 1]) == !head0_turn);
        // phi changes at every step
        CHECK(phi_snaps[s] != phi_snaps[s - 1]);
    }

    // round-robin order in the log
    REQUIRE(result.log.records.size() == 6);
    for (size_t i = 0; i < 6; ++i) {
        CHECK(result.log.records[i].env_id == static_cast<int>(i % 2));
    }
}

TEST_CASE("zero learning rate leaves every parameter untouched") {
    Fixture f = two_env_fixture();
    const EncoderConfig cfg = small_config(f.vocab.size(), 17);
    InvariantModel before = InvariantModel::init(cfg, 2, InitMode::shared_head_copy);
    InvariantModel trained_input = before.clone();
    TrainResult result = train_irm_games(std::move(trained_input), f.envs, f.vocab,
                                         quick_train(10, 3, 0.0f));
    CHECK(models_identical(before, result.model));
}

TEST_CASE("round-robin fairness and padding to full cycles") {
    Fixture f = two_env_fixture();
    const EncoderConfig cfg = small_config(f.vocab.size(), 19);
    TrainResult result = train_irm_games(InvariantModel::init(cfg, 2, InitMode::shared_head_copy),
                                         f.envs, f.vocab, quick_train(5, 7));
    CHECK(result.log.padded);
    CHECK(result.log.records.size() == 6); // padded up to a full cycle
    std::map<int, int> counts;
    for (const auto& r : result.log.records) {
        counts[r.env_id] += 1;
    }
    CHECK(counts[0] == 3);
    CHECK(counts[1] == 3);
}

TEST_CASE("determinism: same config and seed give bit-identical final parameters") {
    Fixture f = two_env_fixture();
    const EncoderConfig cfg = small_config(f.vocab.size(), 23);
    TrainResult a = train_irm_games(InvariantModel::init(cfg, 2, InitMode::shared_head_copy),
                                    f.envs, f.vocab, quick_train(24, 55));
    TrainResult b = train_irm_games(InvariantModel::init(cfg, 2, InitMode::shared_head_copy),
                                    f.envs, f.vocab, quick_train(24, 55));
    CHECK(models_identical(a.model, b.model));
}

TEST_CASE("phi gradient flows through every head, not only the active one") {
    Fixture f = two_env_fixture();
    const EncoderConfig cfg = small_config(f.vocab.size(), 29);
    InvariantModel m = InvariantModel::init(cfg, 2, InitMode::fresh);

    BatchScheduler sched(f.envs, f.vocab, 4, 0.15, 5, ScheduleMode::round_robin);
    MaskedBatch batch = sched.draw(0, 0);

    auto phi = m.phi_params();
    // full ensemble phi gradient
    {
        Tape tape;
        Tensor loss = tape.masked_cross_entropy(m.forward_ensemble(tape, batch.input_ids),
                                                batch.targets);
        tape.backward(loss);
    }
    std::vector<float> full_grad;
    for (Tensor& t : phi) {
        full_grad.insert(full_grad.end(), t.grad().begin(), t.grad().end());
    }
    zero_grads(phi);
    for (int e = 0; e < 2; ++e) {
        auto hp = m.head_params(e);
        zero_grads(hp);
    }
    // head-0-only phi gradient differs
    {
        Tape tape;
        Tensor enc = m.encode(tape, batch.input_ids);
        Tensor loss = tape.masked_cross_entropy(m.apply_head(tape, 0, enc), batch.targets);
        tape.backward(loss);
    }
    std::vector<float> partial_grad;
    for (Tensor& t : phi) {
        partial_grad.insert(partial_grad.end(), t.grad().begin(), t.grad().end());
    }
    CHECK(full_grad != partial_grad);
}

TEST_CASE("non-finite loss aborts with a step diagnostic") {
    Fixture f = two_env_fixture();
    const EncoderConfig cfg = small_config(f.vocab.size(), 37);
    InvariantModel m = InvariantModel::init(cfg, 2, InitMode::shared_head_copy);
    for (Tensor& t : m.head_params(0)) {
        for (float& x : t.data()) {
            x = 1e25f; // overflow the logits on the first forward
        }
    }
    try {
        train_irm_games(std::move(m), f.envs, f.vocab, quick_train(4, 1));
        FAIL("expected NumericsError");
    } catch (const NumericsError& e) {
        CHECK(std::string(e.what()).find("step 1") != std::string::npos);
    }
}

TEST_CASE("train_erm: loss on a memorizable 10-sentence corpus drops below 0.1") {
    Vocabulary vocab = build_vocabulary(10, 0, 0, 3);
    Environment env{0, "tiny", gen_clean_corpus(vocab, 10, 6, 21)};
    EncoderConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.embed_dim = 64;
    cfg.n_layers = 2;
    cfg.n_attn_heads = 2;
    cfg.ffn_dim = 128;
    cfg.max_seq_len = 12;
    cfg.seed = 41;
    TrainConfig tc = quick_train(500, 9, 1e-3f);
    tc.batch_size = 10;
    tc.mask_rate = 0.25;
    TrainResult result = train_erm(InvariantModel::init(cfg, 1, InitMode::shared_head_copy),
                                   {env}, vocab, tc);
    float min_loss = result.log.records[0].loss;
    for (const auto& r : result.log.records) {
        min_loss = std::min(min_loss, r.loss);
    }
    CHECK(min_loss < 0.1f);
}

TEST_CASE("train_erm over several environments samples the pooled mixture") {
    Fixture f = two_env_fixture();
    const EncoderConfig cfg = small_config(f.vocab.size(), 43);
    TrainResult result = train_erm(InvariantModel::init(cfg, 1, InitMode::shared_head_copy),
                                   f.envs, f.vocab, quick_train(8, 3));
    for (const auto& r : result.log.records) {
        CHECK(r.env_id == -1); // pooled batches carry no single env id
    }
}

TEST_CASE("shuffle_env_order still visits every environment once per cycle") {
    Fixture f = two_env_fixture();
    // four environments by splitting the two
    std::vector<Environment> envs4;
    for (int i = 0; i < 4; ++i) {
        const Environment& src = f.envs[static_cast<size_t>(i / 2)];
        const size_t half = src.sequences.size() / 2;
        envs4.push_back(Environment{
            i, "part",
            i % 2 == 0
                ? std::vector<std::vector<int32_t>>(src.sequences.begin(),
                                                    src.sequences.begin() +
                                                        static_cast<std::ptrdiff_t>(half))
                : std::vector<std::vector<int32_t>>(src.sequences.begin() +
                                                        static_cast<std::ptrdiff_t>(half),
                                                    src.sequences.end())});
    }
    const EncoderConfig cfg = small_config(f.vocab.size(), 47);
    TrainConfig tc = quick_train(12, 5);
    tc.shuffle_env_order = true;
    TrainResult result = train_irm_games(InvariantModel::init(cfg, 4, InitMode::shared_head_copy),
                                         envs4, f.vocab, tc);
    REQUIRE(result.log.records.size() == 12);
    for (size_t cycle = 0; cycle < 3; ++cycle) {
        std::set<int> seen;
        for (size_t i = 0; i < 4; ++i) {
            seen.insert(result.log.records[cycle * 4 + i].env_id);
        }
        CHECK(seen == std::set<int>{0, 1, 2, 3});
    }
}

TEST_CASE("periodic phi updates freeze phi off-cycle") {
    Fixture f = two_env_fixture();
    const EncoderConfig cfg = small_config(f.vocab.size(), 53);
    TrainConfig tc = quick_train(6, 13);
    tc.phi_update_period = 2;
    tc.checkpoint_every = 1;
    std::vector<std::vector<float>> phi_snaps;
    auto hook = [&](int64_t, const InvariantModel& m) {
        InvariantModel& mm = const_cast<InvariantModel&>(m);
        std::vector<float> phi;
        for (Tensor& t : mm.phi_params()) {
            phi.insert(phi.end(), t.data().begin(), t.data().end());
        }
        phi_snaps.push_back(std::move(phi));
    };
    train_irm_games(InvariantModel::init(cfg, 2, InitMode::shared_head_copy), f.envs, f.vocab, tc,
                    hook);
    REQUIRE(phi_snaps.size() == 7);
    for (int step = 1; step <= 6; ++step) {
        const size_t s = static_cast<size_t>(step);
        CHECK((phi_snaps[s] != phi_snaps[s - 1]) == (step % 2 == 0));
    }
}

TEST_CASE("mismatched heads and environments are rejected") {
    Fixture f = two_env_fixture();
    const EncoderConfig cfg = small_config(f.vocab.size(), 59);
    CHECK_THROWS_AS(train_irm_games(InvariantModel::init(cfg, 3, InitMode::shared_head_copy),
                                    f.envs, f.vocab, quick_train(2, 1)),
                    ContractError);
    CHECK_THROWS_AS(train_erm(InvariantModel::init(cfg, 2, InitMode::shared_head_copy), f.envs,
                              f.vocab, quick_train(2, 1)),
                    ContractError);
    std::vector<Environment> with_empty = {f.envs[0], Environment{1, "empty", {}}};
    CHECK_THROWS_AS(train_irm_games(InvariantModel::init(cfg, 2, InitMode::shared_head_copy),
                                    with_empty, f.vocab, quick_train(2, 1)),
                    ContractError);
}

TEST_CASE("batch scheduler: alternation, coverage, reproducibility") {
    Fixture f = two_env_fixture(10);
    BatchScheduler a(f.envs, f.vocab, 4, 0.15, 100, ScheduleMode::round_robin);
    BatchScheduler b(f.envs, f.vocab, 4, 0.15, 100, ScheduleMode::round_robin);

    CHECK(a.env_for_step(0) != a.env_for_step(1));
    CHECK(a.env_for_step(0) == a.env_for_step(2));

    // over one cycle each env supplies exactly one batch
    MaskedBatch b0 = a.draw(0, 0);
    MaskedBatch b1 = a.draw(1, 1);
    CHECK(b0.env_id == 0);
    CHECK(b1.env_id == 1);

    // bit-exact reproducibility from the same seed
    MaskedBatch c0 = b.draw(0, 0);
    CHECK(b0.input_ids.v == c0.input_ids.v);
    CHECK(b0.targets.v == c0.targets.v);
}

TEST_CASE("batch scheduler: small environments trigger the replacement note") {
    Fixture f = two_env_fixture(2); // fewer sequences than the batch size
    BatchScheduler s(f.envs, f.vocab, 8, 0.15, 1, ScheduleMode::round_robin);
    CHECK(s.sampled_with_replacement());
    MaskedBatch batch = s.draw(0, 0);
    CHECK(batch.input_ids.rows == 8);
}

TEST_CASE("batch scheduler: golden first batch") {
    // Frozen once from the implementation; any schedule or masking change
    // that silently alters batch composition must show up here.
    Fixture f = two_env_fixture();
    BatchScheduler s(f.envs, f.vocab, 4, 0.15, 2024, ScheduleMode::round_robin);
    MaskedBatch batch = s.draw(0, 0);
    uint64_t h = 0xcbf29ce484222325ull;
    for (int32_t id : batch.input_ids.v) {
        h ^= static_cast<uint64_t>(static_cast<uint32_t>(id));
        h *= 0x100000001b3ull;
    }
    for (int32_t id : batch.targets.v) {
        h ^= static_cast<uint64_t>(static_cast<uint32_t>(id));
        h *= 0x100000001b3ull;
    }
    CHECK(h == 0x1aa5196d456c7848ull);
}

TEST_CASE("trainlog csv has the documented header and row count") {
    Fixture f = two_env_fixture();
    const EncoderConfig cfg = small_config(f.vocab.size(), 61);
    TrainResult result = train_irm_games(InvariantModel::init(cfg, 2, InitMode::shared_head_copy),
                                         f.envs, f.vocab, quick_train(4, 2));
    const std::string path = "/tmp/ilm_trainlog_test.csv";
    result.log.write_csv(path);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "step,env_id,loss,phi_grad_norm,head_grad_norm");
    int rows = 0;
    std::string line;
    while (std::getline(in, line)) {
        rows += line.empty() ? 0 : 1;
    }
    CHECK(rows == 4);
}
