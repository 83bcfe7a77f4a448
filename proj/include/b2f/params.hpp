#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "b2f/common.hpp"
#include "b2f/tensor.hpp"

namespace b2f {

inline void fill_kaiming_uniform(Tensor& t, int fan_in, Rng& rng, float gain_scale = 1.0f) {
    const float bound = gain_scale * std::sqrt(6.0f / float(fan_in));
    float* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = rng.uniform(-bound, bound);
}

// Ordered registry of named learnable tensors. Order is fixed by
// construction, which keeps optimizer state and checkpoints aligned.
class ParamStore {
public:
    Tensor add(const std::string& name, Tensor t) {
        if (index_.count(name)) contract_error("duplicate parameter name " + name);
        t.set_requires_grad(true);
        index_[name] = items_.size();
        items_.emplace_back(name, t);
        return t;
    }

    Tensor conv_weight(const std::string& name, int c_out, int c_in, int k, Rng& rng,
                       float gain_scale = 1.0f) {
        Tensor w(Shape{c_out, c_in, k, k});
        fill_kaiming_uniform(w, c_in * k * k, rng, gain_scale);
        return add(name, w);
    }

    Tensor deconv_weight(const std::string& name, int c_in, int c_out, int k, Rng& rng) {
        Tensor w(Shape{c_in, c_out, k, k});
        fill_kaiming_uniform(w, c_in * k * k, rng);
        return add(name, w);
    }

    Tensor zeros(const std::string& name, Shape shape) { return add(name, Tensor(shape)); }

    Tensor bias(const std::string& name, int c) { return zeros(name, Shape{1, c, 1, 1}); }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Tensor get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) contract_error("unknown parameter " + name);
        return items_[it->second].second;
    }

    size_t size() const { return items_.size(); }
    const std::string& name_at(size_t i) const { return items_[i].first; }
    Tensor tensor_at(size_t i) const { return items_[i].second; }

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        out.reserve(items_.size());
        for (const auto& [name, t] : items_) out.push_back(t);
        return out;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(items_.size());
        for (const auto& [name, t] : items_) out.push_back(name);
        return out;
    }

    int64_t total_count() const {
        int64_t n = 0;
        for (const auto& [name, t] : items_) n += t.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [name, t] : items_) t.zero_grad();
    }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::unordered_map<std::string, size_t> index_;
};

}  // namespace b2f
