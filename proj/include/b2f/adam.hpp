#pragma once

#include <cmath>
#include <vector>

#include "b2f/tensor.hpp"

namespace b2f {

// Adam with coupled L2 weight decay: the decay term is added to the raw
// gradient before the moment updates.
struct AdamConfig {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float weight_decay = 4e-4f;
    float eps = 1e-8f;
};

class AdamState {
public:
    AdamState() = default;

    AdamState(const std::vector<Tensor>& params, AdamConfig cfg, float lr)
        : cfg_(cfg), lr_(lr) {
        m_.reserve(params.size());
        v_.reserve(params.size());
        for (const Tensor& p : params) {
            m_.emplace_back(std::vector<float>(size_t(p.numel()), 0.0f));
            v_.emplace_back(std::vector<float>(size_t(p.numel()), 0.0f));
        }
    }

    int64_t step_count() const { return step_; }
    float lr() const { return lr_; }
    void set_lr(float lr) { lr_ = lr; }
    const AdamConfig& config() const { return cfg_; }

    std::vector<std::vector<float>>& first_moments() { return m_; }
    std::vector<std::vector<float>>& second_moments() { return v_; }
    void set_step_count(int64_t s) { step_ = s; }

    void step(std::vector<Tensor>& params) {
        if (params.size() != m_.size())
            contract_error("adam_step parameter list does not match optimizer state");
        ++step_;
        const float inv_bc1 = float(1.0 / (1.0 - std::pow(double(cfg_.beta1), double(step_))));
        const float inv_bc2 = float(1.0 / (1.0 - std::pow(double(cfg_.beta2), double(step_))));
        const float b1 = cfg_.beta1, b2 = cfg_.beta2, wd = cfg_.weight_decay;
        const float eps = cfg_.eps, lr = lr_;
        for (size_t pi = 0; pi < params.size(); ++pi) {
            Tensor& p = params[pi];
            if (!p.requires_grad()) contract_error("adam_step on a parameter without grad");
            if (int64_t(m_[pi].size()) != p.numel())
                contract_error("adam_step moment buffer shape mismatch");
            float* w = p.data();
            float* g = p.grad();
            float* m = m_[pi].data();
            float* v = v_[pi].data();
            const int64_t n = p.numel();
            for (int64_t i = 0; i < n; ++i) {
                const float gi = g[i] + wd * w[i];
                m[i] = b1 * m[i] + (1.0f - b1) * gi;
                v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
                w[i] -= lr * (m[i] * inv_bc1) / (std::sqrt(v[i] * inv_bc2) + eps);
            }
            p.zero_grad();
        }
    }

private:
    AdamConfig cfg_;
    float lr_ = 1e-4f;
    int64_t step_ = 0;
    std::vector<std::vector<float>> m_;
    std::vector<std::vector<float>> v_;
};

inline void adam_step(std::vector<Tensor>& params, AdamState& state) { state.step(params); }

}  // namespace b2f
