#include <gtest/gtest.h>

#include <cmath>

#include "b2f/adam.hpp"

using namespace b2f;

namespace {

TEST(Adam, FirstStepMagnitudeEqualsLr) {
    Tensor p = Tensor::full(Shape{1, 1, 1, 1}, 0.5f);
    p.set_requires_grad(true);
    std::vector<Tensor> params = {p};
    AdamConfig cfg;
    cfg.weight_decay = 0.0f;
    AdamState state(params, cfg, 0.1f);
    p.grad()[0] = 1.0f;
    adam_step(params, state);
    // bias-corrected first step moves by lr/(1 + eps_correction)
    EXPECT_NEAR(p.data()[0], 0.5f - 0.1f, 1e-6);
    EXPECT_EQ(state.step_count(), 1);
    EXPECT_FLOAT_EQ(p.grad()[0], 0.0f);  // grads zeroed afterward
}

TEST(Adam, ZeroGradZeroDecayLeavesParameterUnchanged) {
    Tensor p = Tensor::full(Shape{1, 2, 1, 1}, 1.25f);
    p.set_requires_grad(true);
    std::vector<Tensor> params = {p};
    AdamConfig cfg;
    cfg.weight_decay = 0.0f;
    AdamState state(params, cfg, 0.1f);
    for (int i = 0; i < 5; ++i) adam_step(params, state);
    EXPECT_FLOAT_EQ(p.data()[0], 1.25f);
    EXPECT_FLOAT_EQ(p.data()[1], 1.25f);
}

TEST(Adam, MatchesScalarReferenceOnQuadratic) {
    // minimize (x-3)^2 for 10 steps; reference is an independent
    // double-precision Adam with the same coupled L2 decay
    const float lr = 0.05f;
    const AdamConfig cfg;  // defaults: 0.9/0.999/4e-4/1e-8

    Tensor p = Tensor::full(Shape{1, 1, 1, 1}, 0.0f);
    p.set_requires_grad(true);
    std::vector<Tensor> params = {p};
    AdamState state(params, cfg, lr);

    double x = 0.0, m = 0.0, v = 0.0;
    for (int step = 1; step <= 10; ++step) {
        const float g = 2.0f * (p.data()[0] - 3.0f);
        p.grad()[0] = g;
        adam_step(params, state);

        const double gd = 2.0 * (x - 3.0) + double(cfg.weight_decay) * x;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * gd;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * gd * gd;
        const double mhat = m / (1.0 - std::pow(double(cfg.beta1), step));
        const double vhat = v / (1.0 - std::pow(double(cfg.beta2), step));
        x -= lr * mhat / (std::sqrt(vhat) + cfg.eps);

        EXPECT_NEAR(p.data()[0], x, 1e-6) << "step " << step;
    }
}

TEST(Adam, MissingGradIsContractError) {
    Tensor p = Tensor::full(Shape{1, 1, 1, 1}, 1.0f);  // no requires_grad
    std::vector<Tensor> params = {p};
    Tensor q(Shape{1, 1, 1, 1}, true);
    std::vector<Tensor> good = {q};
    AdamState state(good, AdamConfig{}, 0.1f);
    EXPECT_THROW(adam_step(params, state), std::logic_error);
}

}  // namespace
