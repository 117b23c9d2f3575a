#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ilm/tensor.hpp"

namespace ilm {

struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

// Per-parameter-group Adam moments. The step counter advances once per
// adam_step call, so a group that is skipped on some steps (a frozen head)
// keeps an honest bias correction.
class AdamState {
public:
    AdamState() = default;
    explicit AdamState(std::span<const Tensor> params);

    int64_t step_count() const { return t_; }

private:
    std::vector<std::vector<float>> m_;
    std::vector<std::vector<float>> v_;
    int64_t t_ = 0;

    friend void adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& cfg);
};

// Standard Adam with bias correction. Reads each param's grad buffer.
void adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& cfg);

void zero_grads(std::span<Tensor> params);

// sqrt of the sum of squared gradients across all params (0 if no grads).
double grad_norm(std::span<const Tensor> params);

} // namespace ilm
