#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ilm/corpus.hpp"
#include "ilm/model.hpp"
#include "ilm/optim.hpp"

namespace ilm {

struct TrainConfig {
    int64_t n_steps = 1000;
    int batch_size = 8;
    float learning_rate = 1e-3f;
    float adam_beta1 = 0.9f;
    float adam_beta2 = 0.999f;
    float adam_eps = 1e-8f;
    double mask_rate = 0.15;
    uint64_t seed = 0;
    int phi_update_period = 1; // 1 = every step, k = every k-th step
    bool shuffle_env_order = false;
    int64_t checkpoint_every = 0; // 0 = no intermediate checkpoints
};

struct TrainStepRecord {
    int64_t step;
    int env_id; // -1 for pooled (ERM) batches
    float loss;
    float phi_grad_norm;
    float head_grad_norm;
};

struct TrainLog {
    std::vector<TrainStepRecord> records;
    std::vector<int64_t> checkpoint_steps;
    bool padded = false;                 // n_steps rounded up to a full cycle
    bool sampled_with_replacement = false;

    void write_csv(const std::string& path) const;
};

enum class ScheduleMode { round_robin, pooled };

// Per-environment (or pooled) shuffled-epoch batch streams with masking
// applied at draw time from a per-step rng stream.
class BatchScheduler {
public:
    BatchScheduler(const std::vector<Environment>& envs, const Vocabulary& vocab, int batch_size,
                   double mask_rate, uint64_t seed, ScheduleMode mode);

    // Draws the next batch for env_index (ignored in pooled mode). step is
    // the global 0-based step and seeds the masking stream.
    MaskedBatch draw(int env_index, int64_t step);

    int env_for_step(int64_t step) const; // round-robin assignment
    bool sampled_with_replacement() const { return with_replacement_; }

private:
    struct Stream {
        std::vector<const std::vector<int32_t>*> pool;
        std::vector<size_t> order;
        size_t cursor = 0;
        Rng rng{0};
    };
    void refill(Stream& s);

    const Vocabulary* vocab_;
    int batch_size_;
    double mask_rate_;
    uint64_t seed_;
    int n_envs_;
    std::vector<Stream> streams_; // one per env, or a single pooled stream
    bool with_replacement_ = false;
};

using CheckpointHook = std::function<void(int64_t step, const InvariantModel&)>;

struct TrainResult {
    InvariantModel model;
    TrainLog log;
};

// Alg.-style round-robin schedule: environments are visited in fixed order;
// at environment e's turn the optimizer is applied only to phi and head e.
// Gradients computed for the other heads are discarded. Adam moments are
// kept per group so a frozen head's bias correction does not advance.
TrainResult train_irm_games(InvariantModel model, const std::vector<Environment>& envs,
                            const Vocabulary& vocab, const TrainConfig& cfg,
                            const CheckpointHook& hook = nullptr);

// ERM baseline: single-head model, batches drawn from the pooled
// (size-weighted) mixture of all environments, every step updates phi and
// the head. With a single environment this is exactly train_irm_games.
TrainResult train_erm(InvariantModel model, const std::vector<Environment>& envs,
                      const Vocabulary& vocab, const TrainConfig& cfg,
                      const CheckpointHook& hook = nullptr);

} // namespace ilm
