#include "ilm/optim.hpp"

#include <cmath>

#include "ilm/errors.hpp"
#include "ilm/kernels.hpp"

namespace ilm {

AdamState::AdamState(std::span<const Tensor> params) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const Tensor& p : params) {
        m_.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
        v_.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
    }
}

void adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& cfg) {
    if (params.size() != state.m_.size()) {
        throw ShapeError("adam_step: state holds " + std::to_string(state.m_.size()) +
                         " groups, got " + std::to_string(params.size()) + " params");
    }
    state.t_ += 1;
    const float bc1 = 1.0f - std::pow(cfg.beta1, static_cast<float>(state.t_));
    const float bc2 = 1.0f - std::pow(cfg.beta2, static_cast<float>(state.t_));
    const auto& kt = kern::table();
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        const size_t n = static_cast<size_t>(p.numel());
        if (state.m_[i].size() != n) {
            throw ShapeError("adam_step: param " + std::to_string(i) + " has " +
                             std::to_string(n) + " values, state has " +
                             std::to_string(state.m_[i].size()));
        }
        kt.adam_update(p.data().data(), p.grad().data(), state.m_[i].data(), state.v_[i].data(), n,
                       cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, bc1, bc2);
    }
}

void zero_grads(std::span<Tensor> params) {
    for (Tensor& p : params) {
        p.zero_grad();
    }
}

double grad_norm(std::span<const Tensor> params) {
    double acc = 0.0;
    for (const Tensor& p : params) {
        for (float g : p.grad()) {
            acc += static_cast<double>(g) * g;
        }
    }
    return std::sqrt(acc);
}

} // namespace ilm
