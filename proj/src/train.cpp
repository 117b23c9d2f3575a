#include "ilm/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "ilm/errors.hpp"

namespace ilm {

void TrainLog::write_csv(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path + "' for writing");
    }
    out << "step,env_id,loss,phi_grad_norm,head_grad_norm\n";
    char buf[128];
    for (const TrainStepRecord& r : records) {
        std::snprintf(buf, sizeof(buf), "%lld,%d,%.9g,%.9g,%.9g\n",
                      static_cast<long long>(r.step), r.env_id, r.loss, r.phi_grad_norm,
                      r.head_grad_norm);
        out << buf;
    }
    if (!out) {
        throw IoError("write failed for '" + path + "'");
    }
}

BatchScheduler::BatchScheduler(const std::vector<Environment>& envs, const Vocabulary& vocab,
                               int batch_size, double mask_rate, uint64_t seed, ScheduleMode mode)
    : vocab_(&vocab), batch_size_(batch_size), mask_rate_(mask_rate), seed_(seed),
      n_envs_(static_cast<int>(envs.size())) {
    if (envs.empty()) {
        throw ContractError("batch scheduler: no environments");
    }
    for (const Environment& env : envs) {
        if (env.sequences.empty()) {
            throw ContractError("batch scheduler: environment " + std::to_string(env.env_id) +
                                " is empty");
        }
    }
    if (batch_size_ <= 0) {
        throw ContractError("batch scheduler: batch_size must be positive");
    }
    if (mode == ScheduleMode::round_robin) {
        for (size_t e = 0; e < envs.size(); ++e) {
            Stream s;
            for (const auto& seq : envs[e].sequences) {
                s.pool.push_back(&seq);
            }
            s.rng = Rng(mix_seed(seed_, "sched", static_cast<uint64_t>(e)));
            refill(s);
            streams_.push_back(std::move(s));
        }
    } else {
        Stream s;
        for (const Environment& env : envs) {
            for (const auto& seq : env.sequences) {
                s.pool.push_back(&seq);
            }
        }
        s.rng = Rng(mix_seed(seed_, "sched-pooled"));
        refill(s);
        streams_.push_back(std::move(s));
    }
    for (const Stream& s : streams_) {
        if (static_cast<int>(s.pool.size()) < batch_size_) {
            with_replacement_ = true; // epochs shorter than one batch repeat sequences
        }
    }
}

void BatchScheduler::refill(Stream& s) {
    s.order.resize(s.pool.size());
    for (size_t i = 0; i < s.order.size(); ++i) {
        s.order[i] = i;
    }
    s.rng.shuffle(s.order);
    s.cursor = 0;
}

int BatchScheduler::env_for_step(int64_t step) const {
    return static_cast<int>(step % n_envs_);
}

MaskedBatch BatchScheduler::draw(int env_index, int64_t step) {
    Stream& s = streams_.size() == 1 ? streams_[0] : streams_.at(static_cast<size_t>(env_index));
    std::vector<std::vector<int32_t>> picked;
    picked.reserve(static_cast<size_t>(batch_size_));
    for (int i = 0; i < batch_size_; ++i) {
        if (s.cursor >= s.order.size()) {
            refill(s);
        }
        picked.push_back(*s.pool[s.order[s.cursor++]]);
    }
    Rng mask_rng(mix_seed(seed_, "mask", static_cast<uint64_t>(step)));
    MaskedBatch batch = mask_tokens(picked, mask_rate_, mask_rng, *vocab_);
    batch.env_id = streams_.size() == 1 && n_envs_ > 1 ? -1 : env_index;
    return batch;
}

namespace {

TrainResult train_loop(InvariantModel model, const std::vector<Environment>& envs,
                       const Vocabulary& vocab, const TrainConfig& cfg, const CheckpointHook& hook,
                       ScheduleMode mode) {
    const int n_envs = static_cast<int>(envs.size());
    if (mode == ScheduleMode::round_robin && model.n_heads() != n_envs) {
        throw ContractError("train: model has " + std::to_string(model.n_heads()) +
                            " heads but " + std::to_string(n_envs) + " environments were given");
    }
    if (mode == ScheduleMode::pooled && model.n_heads() != 1) {
        throw ContractError("train_erm: expected a single-head model");
    }
    const int cycle = mode == ScheduleMode::round_robin ? n_envs : 1;
    int64_t total_steps = cfg.n_steps;
    TrainLog log;
    if (total_steps % cycle != 0) {
        total_steps = (total_steps / cycle + 1) * cycle;
        log.padded = true;
        std::fprintf(stderr, "note: n_steps %lld padded to %lld (full cycles over %d envs)\n",
                     static_cast<long long>(cfg.n_steps), static_cast<long long>(total_steps),
                     n_envs);
    }

    BatchScheduler sched(envs, vocab, cfg.batch_size, cfg.mask_rate, cfg.seed, mode);
    log.sampled_with_replacement = sched.sampled_with_replacement();
    if (log.sampled_with_replacement) {
        std::fprintf(stderr, "note: batch_size exceeds an environment size, sampling repeats\n");
    }

    const AdamConfig adam{cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps};
    auto phi = model.phi_params();
    std::vector<std::vector<Tensor>> heads;
    std::vector<AdamState> head_states;
    for (int e = 0; e < model.n_heads(); ++e) {
        heads.push_back(model.head_params(e));
        head_states.emplace_back(std::span<const Tensor>(heads.back()));
    }
    AdamState phi_state{std::span<const Tensor>(phi)};
    auto all = model.all_params();

    std::vector<int> order(static_cast<size_t>(cycle));
    for (int i = 0; i < cycle; ++i) {
        order[static_cast<size_t>(i)] = i;
    }

    if (cfg.checkpoint_every > 0 && hook) {
        hook(0, model);
        log.checkpoint_steps.push_back(0);
    }

    for (int64_t step = 1; step <= total_steps; ++step) {
        const int64_t pos = (step - 1) % cycle;
        if (pos == 0 && cfg.shuffle_env_order && cycle > 1) {
            Rng order_rng(mix_seed(cfg.seed, "order", static_cast<uint64_t>((step - 1) / cycle)));
            order_rng.shuffle(order);
        }
        const int env = mode == ScheduleMode::round_robin ? order[static_cast<size_t>(pos)] : 0;
        const int active_head = mode == ScheduleMode::round_robin ? env : 0;

        MaskedBatch batch = sched.draw(env, step - 1);
        float loss_value = 0.0f;
        float phi_gn = 0.0f;
        float head_gn = 0.0f;
        try {
            Tape tape;
            Tensor logits = model.forward_ensemble(tape, batch.input_ids);
            Tensor loss = tape.masked_cross_entropy(logits, batch.targets);
            loss_value = loss.item();
            tape.backward(loss);
            phi_gn = static_cast<float>(grad_norm(phi));
            head_gn = static_cast<float>(grad_norm(heads[static_cast<size_t>(active_head)]));
        } catch (const NumericsError& e) {
            throw NumericsError("training aborted at step " + std::to_string(step) + " (env " +
                                std::to_string(batch.env_id) + "): " + e.what());
        }

        if (step % cfg.phi_update_period == 0) {
            adam_step(phi, phi_state, adam);
        }
        adam_step(heads[static_cast<size_t>(active_head)],
                  head_states[static_cast<size_t>(active_head)], adam);
        zero_grads(all); // discards gradients of the non-active heads

        log.records.push_back({step, batch.env_id, loss_value, phi_gn, head_gn});
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            if (hook) {
                hook(step, model);
            }
            log.checkpoint_steps.push_back(step);
        }
    }
    return {std::move(model), std::move(log)};
}

} // namespace

TrainResult train_irm_games(InvariantModel model, const std::vector<Environment>& envs,
                            const Vocabulary& vocab, const TrainConfig& cfg,
                            const CheckpointHook& hook) {
    return train_loop(std::move(model), envs, vocab, cfg, hook, ScheduleMode::round_robin);
}

TrainResult train_erm(InvariantModel model, const std::vector<Environment>& envs,
                      const Vocabulary& vocab, const TrainConfig& cfg, const CheckpointHook& hook) {
    if (envs.size() == 1) {
        // Pooled sampling over one environment is round-robin over it; share
        // the exact code path so the n=1 reduction is bitwise.
        return train_loop(std::move(model), envs, vocab, cfg, hook, ScheduleMode::round_robin);
    }
    return train_loop(std::move(model), envs, vocab, cfg, hook, ScheduleMode::pooled);
}

} // namespace ilm
