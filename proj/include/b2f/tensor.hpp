#pragma once

#include <cassert>
#include <memory>
#include <vector>

#include "b2f/common.hpp"

namespace b2f {

// Dense 4-D float tensor with shared storage. Copies are shallow: two Tensor
// handles may refer to the same buffer, which is what lets backward closures
// accumulate into the gradients of the tensors the caller still holds.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, bool requires_grad = false)
        : impl_(std::make_shared<Impl>()) {
        if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0)
            dimension_error("negative dimension in " + shape.str());
        impl_->shape = shape;
        impl_->data.assign(size_t(shape.numel()), 0.0f);
        if (requires_grad) set_requires_grad(true);
    }

    // Output buffer for ops that overwrite every element; skips the zero fill.
    static Tensor uninit(Shape shape) {
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = shape;
        t.impl_->data.resize(size_t(shape.numel()));
        return t;
    }

    static Tensor full(Shape shape, float value) {
        Tensor t(shape);
        for (auto& v : t.impl_->data) v = value;
        return t;
    }

    static Tensor from(Shape shape, const std::vector<float>& values) {
        if (int64_t(values.size()) != shape.numel())
            dimension_error("value count " + std::to_string(values.size()) +
                            " does not match shape " + shape.str());
        Tensor t = uninit(shape);
        std::copy(values.begin(), values.end(), t.impl_->data.begin());
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    Shape shape() const { return impl_->shape; }
    int64_t numel() const { return impl_->shape.numel(); }
    bool requires_grad() const { return impl_ && impl_->requires_grad; }

    void set_requires_grad(bool rg) {
        impl_->requires_grad = rg;
        if (rg && impl_->grad.size() != impl_->data.size())
            impl_->grad.assign(impl_->data.size(), 0.0f);
    }

    float* data() { return impl_->data.data(); }
    const float* data() const { return impl_->data.data(); }
    std::vector<float> to_vector() const {
        return std::vector<float>(impl_->data.begin(), impl_->data.end());
    }

    float* grad() { return impl_->requires_grad ? impl_->grad.data() : nullptr; }
    const float* grad() const { return impl_->requires_grad ? impl_->grad.data() : nullptr; }

    void zero_grad() {
        if (impl_->requires_grad)
            std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
    }

    float& at(int n, int c, int y, int x) {
        return impl_->data[size_t(index(n, c, y, x))];
    }
    float at(int n, int c, int y, int x) const {
        return impl_->data[size_t(index(n, c, y, x))];
    }
    float grad_at(int n, int c, int y, int x) const {
        assert(requires_grad());
        return impl_->grad[size_t(index(n, c, y, x))];
    }

    int64_t index(int n, int c, int y, int x) const {
        const Shape& s = impl_->shape;
        assert(n >= 0 && n < s.n && c >= 0 && c < s.c && y >= 0 && y < s.h && x >= 0 && x < s.w);
        return ((int64_t(n) * s.c + c) * s.h + y) * s.w + x;
    }

    // Deep copy of the data, detached from any graph.
    Tensor detached_clone() const {
        Tensor t = uninit(impl_->shape);
        t.impl_->data = impl_->data;
        return t;
    }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    struct Impl {
        Shape shape;
        bool requires_grad = false;
        ScratchBuf data;
        ScratchBuf grad;
    };
    std::shared_ptr<Impl> impl_;
};

// Debug-build guard: forward ops on finite inputs must produce finite values.
inline void check_finite(const Tensor& t, const char* op) {
#ifndef NDEBUG
    const float* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i)
        if (!std::isfinite(p[i]))
            throw std::runtime_error(std::string("non-finite value out of op ") + op);
#else
    (void)t;
    (void)op;
#endif
}

}  // namespace b2f
