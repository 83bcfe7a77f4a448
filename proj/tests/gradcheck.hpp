#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "b2f/ops.hpp"
#include "b2f/tape.hpp"
#include "b2f/tensor.hpp"

namespace b2f::test {

// Test-only op: scalar loss sum_i w[i]*x[i] with fixed random weights, so
// gradients stay O(1) regardless of the op under test.
inline Tensor weighted_sum(Tape& tape, const Tensor& x, const std::vector<float>& w) {
    Tensor out(Shape{1, 1, 1, 1});
    double acc = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) acc += double(x.data()[i]) * w[size_t(i)];
    out.data()[0] = float(acc);
    if (x.requires_grad()) {
        out.set_requires_grad(true);
        Tensor in = x, o = out;
        tape.record("weighted_sum", [in, o, w]() mutable {
            const float g = o.grad()[0];
            for (int64_t i = 0; i < in.numel(); ++i) in.grad()[i] += g * w[size_t(i)];
        });
    }
    return out;
}

inline std::vector<float> random_functional(int64_t n, uint64_t seed) {
    Rng rng(Rng::derive(seed, 0xfedc));
    std::vector<float> w(static_cast<size_t>(n), 0.0f);
    for (auto& v : w) v = rng.uniform(-1.0f, 1.0f);
    return w;
}

using OpForward = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

struct GradCheckResult {
    double max_rel_err = 0.0;
    int64_t coords_checked = 0;
};

// Central finite differences against the tape gradient. The loss is a fixed
// random linear functional of the op output; the relative error of each
// input tensor is ||g_fd - g_an||_inf normalized by the gradient scale.
inline GradCheckResult gradcheck(const OpForward& op, std::vector<Tensor> inputs, uint64_t seed,
                                 double h = 1e-3, int64_t max_coords_per_input = 400) {
    for (Tensor& t : inputs) t.set_requires_grad(true);

    std::vector<float> functional;
    {
        Tape tape;
        Tensor out = op(tape, inputs);
        functional = random_functional(out.numel(), seed);
        Tensor loss = weighted_sum(tape, out, functional);
        backward(loss, tape);
    }
    std::vector<std::vector<float>> analytic;
    for (Tensor& t : inputs) {
        analytic.emplace_back(t.grad(), t.grad() + t.numel());
        t.zero_grad();
    }

    auto eval = [&]() {
        Tape tape;
        Tensor out = op(tape, inputs);
        double acc = 0.0;
        for (int64_t i = 0; i < out.numel(); ++i)
            acc += double(out.data()[i]) * functional[size_t(i)];
        return acc;
    };

    GradCheckResult result;
    Rng pick(Rng::derive(seed, 0x91c5));
    for (size_t ti = 0; ti < inputs.size(); ++ti) {
        Tensor& t = inputs[ti];
        const int64_t n = t.numel();
        std::vector<int64_t> coords;
        if (n <= max_coords_per_input) {
            for (int64_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            for (int64_t i = 0; i < max_coords_per_input; ++i)
                coords.push_back(int64_t(pick.next_u64() % uint64_t(n)));
        }
        double scale = 1.0, max_diff = 0.0;
        for (int64_t i : coords) scale = std::max(scale, std::fabs(double(analytic[ti][size_t(i)])));
        for (int64_t i : coords) {
            const float orig = t.data()[i];
            t.data()[i] = float(orig + h);
            const double f_plus = eval();
            t.data()[i] = float(orig - h);
            const double f_minus = eval();
            t.data()[i] = orig;
            const double fd = (f_plus - f_minus) / (2.0 * h);
            scale = std::max(scale, std::fabs(fd));
            max_diff = std::max(max_diff, std::fabs(fd - double(analytic[ti][size_t(i)])));
            ++result.coords_checked;
        }
        result.max_rel_err = std::max(result.max_rel_err, max_diff / scale);
    }
    return result;
}

inline Tensor random_tensor(Shape s, uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
    Rng rng(Rng::derive(seed, 0xda7a));
    Tensor t(s);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
    return t;
}

// values bounded away from the relu kink
inline Tensor random_tensor_off_kink(Shape s, uint64_t seed, float margin = 0.1f) {
    Rng rng(Rng::derive(seed, 0x6b1e));
    Tensor t(s);
    for (int64_t i = 0; i < t.numel(); ++i) {
        const float mag = rng.uniform(margin, 1.0f);
        t.data()[i] = rng.next_double() < 0.5 ? -mag : mag;
    }
    return t;
}

// normalized grid whose pixel-space samples stay interior with fractional
// parts away from the bilinear kinks
inline Tensor interior_grid(Shape feature_shape, int out_h, int out_w, uint64_t seed) {
    Rng rng(Rng::derive(seed, 0x9d1d));
    Tensor grid(Shape{feature_shape.n, 2, out_h, out_w});
    const int span = out_h * out_w;
    for (int n = 0; n < feature_shape.n; ++n) {
        float* gx = grid.data() + int64_t(n) * 2 * span;
        float* gy = gx + span;
        for (int i = 0; i < span; ++i) {
            const float xs = float(rng.uniform_int(0, feature_shape.w - 2)) +
                             rng.uniform(0.25f, 0.75f);
            const float ys = float(rng.uniform_int(0, feature_shape.h - 2)) +
                             rng.uniform(0.25f, 0.75f);
            gx[i] = 2.0f * xs / float(feature_shape.w - 1) - 1.0f;
            gy[i] = 2.0f * ys / float(feature_shape.h - 1) - 1.0f;
        }
    }
    return grid;
}

}  // namespace b2f::test
