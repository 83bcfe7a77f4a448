#include <gtest/gtest.h>

#include "b2f/ops.hpp"
#include "gradcheck.hpp"

using namespace b2f;
using b2f::test::gradcheck;
using b2f::test::random_tensor;

namespace {

Tensor undef_bias() { return Tensor(); }

TEST(Conv2d, OnesKernelOnOnes) {
    Tape tape;
    Tensor x = Tensor::full(Shape{1, 1, 3, 3}, 1.0f);
    Tensor w = Tensor::full(Shape{1, 1, 3, 3}, 1.0f);
    Tensor out = conv2d(tape, x, w, undef_bias(), 1, 1, 1);
    ASSERT_EQ(out.shape(), (Shape{1, 1, 3, 3}));
    EXPECT_FLOAT_EQ(out.at(0, 0, 1, 1), 9.0f);
    EXPECT_FLOAT_EQ(out.at(0, 0, 0, 0), 4.0f);
    EXPECT_FLOAT_EQ(out.at(0, 0, 0, 1), 6.0f);
}

TEST(Conv2d, IdentityKernel) {
    Tape tape;
    Tensor x = random_tensor(Shape{2, 3, 5, 7}, 11);
    Tensor w(Shape{3, 3, 3, 3});
    for (int c = 0; c < 3; ++c) w.at(c, c, 1, 1) = 1.0f;
    Tensor out = conv2d(tape, x, w, undef_bias(), 1, 1, 1);
    ASSERT_EQ(out.shape(), x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) EXPECT_FLOAT_EQ(out.data()[i], x.data()[i]);
}

TEST(Conv2d, OutputSizeFormula) {
    Tape tape;
    Tensor x(Shape{1, 2, 11, 13});
    Tensor w(Shape{4, 2, 3, 3});
    EXPECT_EQ(conv2d(tape, x, w, undef_bias(), 2, 1, 1).shape(), (Shape{1, 4, 6, 7}));
    EXPECT_EQ(conv2d(tape, x, w, undef_bias(), 1, 4, 4).shape(), (Shape{1, 4, 11, 13}));
    EXPECT_EQ(conv2d(tape, x, w, undef_bias(), 1, 1, 0).shape(), (Shape{1, 4, 9, 11}));
}

TEST(Conv2d, ShapeMismatchThrows) {
    Tape tape;
    Tensor x(Shape{1, 2, 8, 8});
    Tensor w(Shape{4, 3, 3, 3});
    EXPECT_THROW(conv2d(tape, x, w, undef_bias(), 1, 1, 1), std::invalid_argument);
}

TEST(Conv2d, GradientStride2) {
    for (uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
        auto op = [](Tape& t, const std::vector<Tensor>& in) {
            return conv2d(t, in[0], in[1], in[2], 2, 1, 1);
        };
        auto r = gradcheck(op,
                           {random_tensor(Shape{2, 3, 8, 8}, seed),
                            random_tensor(Shape{4, 3, 3, 3}, seed + 10, -0.5f, 0.5f),
                            random_tensor(Shape{1, 4, 1, 1}, seed + 20)},
                           seed);
        EXPECT_LT(r.max_rel_err, 1e-3) << "seed " << seed;
    }
}

TEST(Conv2d, GradientDilated) {
    for (uint64_t seed : {7u, 8u, 9u, 10u, 11u}) {
        auto op = [](Tape& t, const std::vector<Tensor>& in) {
            return conv2d(t, in[0], in[1], in[2], 1, 2, 2);
        };
        auto r = gradcheck(op,
                           {random_tensor(Shape{1, 2, 9, 9}, seed),
                            random_tensor(Shape{3, 2, 3, 3}, seed + 10, -0.5f, 0.5f),
                            random_tensor(Shape{1, 3, 1, 1}, seed + 20)},
                           seed);
        EXPECT_LT(r.max_rel_err, 1e-3) << "seed " << seed;
    }
}

TEST(Conv2d, GradientPointwise) {
    auto op = [](Tape& t, const std::vector<Tensor>& in) {
        return conv2d(t, in[0], in[1], in[2], 1, 1, 0);
    };
    auto r = gradcheck(op,
                       {random_tensor(Shape{2, 5, 4, 4}, 31),
                        random_tensor(Shape{3, 5, 1, 1}, 32, -0.5f, 0.5f),
                        random_tensor(Shape{1, 3, 1, 1}, 33)},
                       31);
    EXPECT_LT(r.max_rel_err, 1e-3);
}

TEST(ConvTranspose2d, OutputSize) {
    Tape tape;
    Tensor x(Shape{1, 1, 2, 2});
    Tensor w(Shape{1, 1, 4, 4});
    EXPECT_EQ(conv_transpose2d(tape, x, w, undef_bias(), 2, 1).shape(), (Shape{1, 1, 4, 4}));
    Tensor x2(Shape{1, 1, 5, 6});
    EXPECT_EQ(conv_transpose2d(tape, x2, w, undef_bias(), 2, 1).shape(), (Shape{1, 1, 10, 12}));
}

TEST(ConvTranspose2d, AdjointOfConv2d) {
    // <conv(x; W), y> == <x, conv_transpose(y; W)> for the same weight buffer
    for (uint64_t seed : {3u, 4u, 5u}) {
        Tensor x = random_tensor(Shape{1, 2, 6, 6}, seed);
        Tensor w = random_tensor(Shape{3, 2, 4, 4}, seed + 1, -0.5f, 0.5f);
        Tape tape;
        Tensor cx = conv2d(tape, x, w, undef_bias(), 2, 1, 1);
        Tensor y = random_tensor(cx.shape(), seed + 2);
        Tensor ty = conv_transpose2d(tape, y, w, undef_bias(), 2, 1);
        ASSERT_EQ(ty.shape(), x.shape());
        double lhs = 0.0, rhs = 0.0;
        for (int64_t i = 0; i < cx.numel(); ++i) lhs += double(cx.data()[i]) * y.data()[i];
        for (int64_t i = 0; i < x.numel(); ++i) rhs += double(x.data()[i]) * ty.data()[i];
        EXPECT_NEAR(lhs, rhs, 1e-4 * std::max(1.0, std::fabs(lhs)));
    }
}

TEST(ConvTranspose2d, Gradient) {
    for (uint64_t seed : {21u, 22u, 23u, 24u, 25u}) {
        auto op = [](Tape& t, const std::vector<Tensor>& in) {
            return conv_transpose2d(t, in[0], in[1], in[2], 2, 1);
        };
        auto r = gradcheck(op,
                           {random_tensor(Shape{1, 3, 4, 4}, seed),
                            random_tensor(Shape{3, 2, 4, 4}, seed + 10, -0.5f, 0.5f),
                            random_tensor(Shape{1, 2, 1, 1}, seed + 20)},
                           seed);
        EXPECT_LT(r.max_rel_err, 1e-3) << "seed " << seed;
    }
}

TEST(Relu, Examples) {
    Tape tape;
    Tensor x = Tensor::from(Shape{1, 3, 1, 1}, {-1.0f, 0.0f, 2.0f});
    Tensor out = relu(tape, x);
    EXPECT_FLOAT_EQ(out.data()[0], 0.0f);
    EXPECT_FLOAT_EQ(out.data()[1], 0.0f);
    EXPECT_FLOAT_EQ(out.data()[2], 2.0f);

    Tensor pos = random_tensor(Shape{2, 2, 3, 3}, 5, 0.1f, 1.0f);
    Tensor out2 = relu(tape, pos);
    for (int64_t i = 0; i < pos.numel(); ++i) EXPECT_FLOAT_EQ(out2.data()[i], pos.data()[i]);
}

TEST(Relu, SubgradientZeroAtKink) {
    Tape tape;
    Tensor x = Tensor::from(Shape{1, 1, 1, 2}, {0.0f, 3.0f});
    x.set_requires_grad(true);
    Tensor loss = sum_all(tape, relu(tape, x));
    backward(loss, tape);
    EXPECT_FLOAT_EQ(x.grad()[0], 0.0f);
    EXPECT_FLOAT_EQ(x.grad()[1], 1.0f);
}

TEST(Relu, GradientOffKink) {
    for (uint64_t seed : {41u, 42u, 43u, 44u, 45u}) {
        auto op = [](Tape& t, const std::vector<Tensor>& in) { return relu(t, in[0]); };
        auto r = gradcheck(op, {test::random_tensor_off_kink(Shape{2, 3, 4, 4}, seed)}, seed);
        EXPECT_LT(r.max_rel_err, 1e-3) << "seed " << seed;
    }
}

TEST(ConcatChannels, ShapesAndIdentity) {
    Tape tape;
    Tensor a = random_tensor(Shape{2, 2, 3, 4}, 1);
    Tensor b = random_tensor(Shape{2, 3, 3, 4}, 2);
    Tensor out = concat_channels(tape, {a, b});
    ASSERT_EQ(out.shape(), (Shape{2, 5, 3, 4}));
    for (int n = 0; n < 2; ++n)
        for (int y = 0; y < 3; ++y)
            for (int x = 0; x < 4; ++x) {
                EXPECT_FLOAT_EQ(out.at(n, 0, y, x), a.at(n, 0, y, x));
                EXPECT_FLOAT_EQ(out.at(n, 2, y, x), b.at(n, 0, y, x));
            }

    Tensor single = concat_channels(tape, {a});
    for (int64_t i = 0; i < a.numel(); ++i) EXPECT_FLOAT_EQ(single.data()[i], a.data()[i]);

    Tensor bad(Shape{2, 2, 4, 4});
    EXPECT_THROW(concat_channels(tape, {a, bad}), std::invalid_argument);
}

TEST(ConcatChannels, Gradient) {
    for (uint64_t seed : {51u, 52u, 53u, 54u, 55u}) {
        auto op = [](Tape& t, const std::vector<Tensor>& in) {
            return concat_channels(t, {in[0], in[1], in[2]});
        };
        auto r = gradcheck(op,
                           {random_tensor(Shape{2, 1, 3, 3}, seed),
                            random_tensor(Shape{2, 2, 3, 3}, seed + 1),
                            random_tensor(Shape{2, 3, 3, 3}, seed + 2)},
                           seed);
        EXPECT_LT(r.max_rel_err, 1e-3) << "seed " << seed;
    }
}

TEST(AffineGrid, IdentityTheta) {
    Tape tape;
    Tensor theta = Tensor::from(Shape{1, 6, 1, 1}, {1, 0, 0, 0, 1, 0});
    Tensor grid = affine_grid(tape, theta, 4, 5);
    ASSERT_EQ(grid.shape(), (Shape{1, 2, 4, 5}));
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 5; ++x) {
            EXPECT_FLOAT_EQ(grid.at(0, 0, y, x), 2.0f * x / 4.0f - 1.0f);
            EXPECT_FLOAT_EQ(grid.at(0, 1, y, x), 2.0f * y / 3.0f - 1.0f);
        }
}

TEST(AffineGrid, PureTranslation) {
    Tape tape;
    Tensor id = Tensor::from(Shape{1, 6, 1, 1}, {1, 0, 0, 0, 1, 0});
    Tensor shifted = Tensor::from(Shape{1, 6, 1, 1}, {1, 0, 0.5f, 0, 1, 0});
    Tensor g0 = affine_grid(tape, id, 3, 3);
    Tensor g1 = affine_grid(tape, shifted, 3, 3);
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) {
            EXPECT_FLOAT_EQ(g1.at(0, 0, y, x), g0.at(0, 0, y, x) + 0.5f);
            EXPECT_FLOAT_EQ(g1.at(0, 1, y, x), g0.at(0, 1, y, x));
        }
}

TEST(AffineGrid, GradientTheta) {
    for (uint64_t seed : {61u, 62u, 63u, 64u, 65u}) {
        auto op = [](Tape& t, const std::vector<Tensor>& in) {
            return affine_grid(t, in[0], 5, 6);
        };
        auto r = gradcheck(op, {random_tensor(Shape{2, 6, 1, 1}, seed, -0.8f, 0.8f)}, seed);
        EXPECT_LT(r.max_rel_err, 1e-3) << "seed " << seed;
    }
}

TEST(GridSample, IdentityGrid) {
    Tape tape;
    Tensor x = random_tensor(Shape{1, 2, 6, 7}, 3);
    Tensor theta = Tensor::from(Shape{1, 6, 1, 1}, {1, 0, 0, 0, 1, 0});
    Tensor grid = affine_grid(tape, theta, 6, 7);
    Tensor out = grid_sample(tape, x, grid);
    for (int c = 0; c < 2; ++c)
        for (int y = 1; y < 5; ++y)
            for (int xx = 1; xx < 6; ++xx)
                EXPECT_NEAR(out.at(0, c, y, xx), x.at(0, c, y, xx), 1e-6);
}

TEST(GridSample, FullyOutsideGivesZero) {
    Tape tape;
    Tensor x = random_tensor(Shape{1, 3, 4, 4}, 9);
    Tensor grid = Tensor::full(Shape{1, 2, 3, 3}, 5.0f);
    Tensor out = grid_sample(tape, x, grid);
    for (int64_t i = 0; i < out.numel(); ++i) EXPECT_FLOAT_EQ(out.data()[i], 0.0f);
}

TEST(GridSample, GradientBothInputs) {
    for (uint64_t seed : {71u, 72u, 73u, 74u, 75u}) {
        auto op = [](Tape& t, const std::vector<Tensor>& in) {
            return grid_sample(t, in[0], in[1]);
        };
        Tensor feat = random_tensor(Shape{1, 2, 5, 5}, seed);
        Tensor grid = test::interior_grid(feat.shape(), 4, 4, seed + 5);
        auto r = gradcheck(op, {feat, grid}, seed);
        EXPECT_LT(r.max_rel_err, 1e-3) << "seed " << seed;
    }
}

TEST(Correlation, ConstantOnes) {
    Tape tape;
    Tensor f = Tensor::full(Shape{1, 1, 7, 7}, 1.0f);
    Tensor out = correlation(tape, f, f, 4);
    ASSERT_EQ(out.shape().c, 81);
    const int center = 4 * 9 + 4;
    for (int y = 0; y < 7; ++y)
        for (int x = 0; x < 7; ++x) EXPECT_FLOAT_EQ(out.at(0, center, y, x), 1.0f);
}

TEST(Correlation, BruteForceOracle) {
    // quadruple-nested loop reference
    auto brute = [](const Tensor& f1, const Tensor& f2, int d) {
        const Shape s = f1.shape();
        const int side = 2 * d + 1;
        Tensor out(Shape{s.n, side * side, s.h, s.w});
        for (int n = 0; n < s.n; ++n)
            for (int dy = -d; dy <= d; ++dy)
                for (int dx = -d; dx <= d; ++dx)
                    for (int y = 0; y < s.h; ++y)
                        for (int x = 0; x < s.w; ++x) {
                            float acc = 0.0f;
                            for (int c = 0; c < s.c; ++c) {
                                const int yy = y + dy, xx = x + dx;
                                if (yy < 0 || yy >= s.h || xx < 0 || xx >= s.w) continue;
                                acc += f1.at(n, c, y, x) * f2.at(n, c, yy, xx);
                            }
                            out.at(n, (dy + d) * side + (dx + d), y, x) = acc / float(s.c);
                        }
        return out;
    };
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Tensor f1 = random_tensor(Shape{1, 3, 6, 6}, 100 + seed);
        Tensor f2 = random_tensor(Shape{1, 3, 6, 6}, 200 + seed);
        Tape tape;
        Tensor fast = correlation(tape, f1, f2, 2);
        Tensor ref = brute(f1, f2, 2);
        ASSERT_EQ(fast.shape(), ref.shape());
        for (int64_t i = 0; i < fast.numel(); ++i)
            EXPECT_NEAR(fast.data()[i], ref.data()[i], 1e-5) << "seed " << seed;
    }
}

TEST(Correlation, Gradient) {
    for (uint64_t seed : {81u, 82u, 83u, 84u, 85u}) {
        auto op = [](Tape& t, const std::vector<Tensor>& in) {
            return correlation(t, in[0], in[1], 2);
        };
        auto r = gradcheck(op,
                           {random_tensor(Shape{1, 2, 5, 5}, seed),
                            random_tensor(Shape{1, 2, 5, 5}, seed + 1)},
                           seed);
        EXPECT_LT(r.max_rel_err, 1e-3) << "seed " << seed;
    }
}

TEST(BilinearResize, SameSizeIdentity) {
    Tape tape;
    Tensor x = random_tensor(Shape{2, 3, 5, 6}, 4);
    Tensor out = bilinear_resize(tape, x, 5, 6);
    for (int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(out.data()[i], x.data()[i], 1e-6);
}

TEST(BilinearResize, ConstantStaysConstant) {
    Tape tape;
    Tensor x = Tensor::full(Shape{1, 2, 4, 4}, 0.7f);
    for (auto [h, w] : {std::pair{9, 3}, {2, 2}, {7, 11}}) {
        Tensor out = bilinear_resize(tape, x, h, w);
        for (int64_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out.data()[i], 0.7f, 1e-6);
    }
}

TEST(BilinearResize, RampDownsampleHandOracle) {
    // 1x8 ramp 0..7 halved: src_x = 2*xo + 0.5, giving pair averages
    Tape tape;
    Tensor x(Shape{1, 1, 1, 8});
    for (int i = 0; i < 8; ++i) x.data()[i] = float(i);
    Tensor out = bilinear_resize(tape, x, 1, 4);
    const float expected[4] = {0.5f, 2.5f, 4.5f, 6.5f};
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(out.data()[i], expected[i], 1e-6);
}

TEST(BilinearResize, Gradient) {
    for (uint64_t seed : {91u, 92u, 93u, 94u, 95u}) {
        auto op = [](Tape& t, const std::vector<Tensor>& in) {
            return bilinear_resize(t, in[0], 3, 5);
        };
        auto r = gradcheck(op, {random_tensor(Shape{1, 2, 6, 7}, seed)}, seed);
        EXPECT_LT(r.max_rel_err, 1e-3) << "seed " << seed;
    }
}

TEST(Warp, ZeroFlowIdentity) {
    Tape tape;
    Tensor feat = random_tensor(Shape{1, 3, 6, 6}, 17);
    Tensor flow(Shape{1, 2, 6, 6});
    Tensor out = warp(tape, feat, flow);
    for (int c = 0; c < 3; ++c)
        for (int y = 1; y < 5; ++y)
            for (int x = 1; x < 5; ++x)
                EXPECT_NEAR(out.at(0, c, y, x), feat.at(0, c, y, x), 1e-5);
}

TEST(Warp, UnitShiftOnRamp) {
    // ramp feature f(x) = x; flow (1,0) samples x+1
    Tape tape;
    Tensor feat(Shape{1, 1, 5, 5});
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) feat.at(0, 0, y, x) = float(x);
    Tensor flow(Shape{1, 2, 5, 5});
    for (int i = 0; i < 25; ++i) flow.data()[i] = 1.0f;  // u channel
    Tensor out = warp(tape, feat, flow);
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 4; ++x) EXPECT_NEAR(out.at(0, 0, y, x), float(x + 1), 1e-5);
}

TEST(Warp, GradientWrtFlow) {
    for (uint64_t seed : {96u, 97u, 98u}) {
        auto op = [](Tape& t, const std::vector<Tensor>& in) { return warp(t, in[0], in[1]); };
        Tensor feat = random_tensor(Shape{1, 2, 6, 6}, seed);
        // small fractional flows keep samples interior and off-kink
        Tensor flow(Shape{1, 2, 6, 6});
        Rng rng(seed);
        for (int64_t i = 0; i < flow.numel(); ++i) flow.data()[i] = rng.uniform(0.25f, 0.65f);
        auto r = gradcheck(op, {feat, flow}, seed);
        EXPECT_LT(r.max_rel_err, 1e-3) << "seed " << seed;
    }
}

TEST(GlobalAvgPool, MeanAndGradient) {
    Tape tape;
    Tensor x = Tensor::from(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor out = global_avg_pool(tape, x);
    EXPECT_FLOAT_EQ(out.data()[0], 2.5f);
    auto op = [](Tape& t, const std::vector<Tensor>& in) { return global_avg_pool(t, in[0]); };
    auto r = gradcheck(op, {random_tensor(Shape{2, 3, 4, 4}, 7)}, 7);
    EXPECT_LT(r.max_rel_err, 1e-3);
}

TEST(EpeMean, ThreeFourFive) {
    Tape tape;
    Tensor pred(Shape{1, 2, 2, 2});
    Tensor target(Shape{1, 2, 2, 2});
    for (int i = 0; i < 4; ++i) {
        pred.data()[i] = 3.0f;      // u plane
        pred.data()[4 + i] = 4.0f;  // v plane
    }
    Tensor out = epe_mean(tape, pred, target);
    EXPECT_FLOAT_EQ(out.data()[0], 5.0f);
}

TEST(EpeMean, Gradient) {
    for (uint64_t seed : {31u, 32u, 33u, 34u, 35u}) {
        Tensor target = random_tensor(Shape{1, 2, 3, 3}, seed + 100);
        auto op = [target](Tape& t, const std::vector<Tensor>& in) {
            return epe_mean(t, in[0], target);
        };
        auto r = gradcheck(op, {random_tensor(Shape{1, 2, 3, 3}, seed, 2.0f, 4.0f)}, seed);
        EXPECT_LT(r.max_rel_err, 1e-3) << "seed " << seed;
    }
}

TEST(AddScale, Gradient) {
    auto op = [](Tape& t, const std::vector<Tensor>& in) {
        return scale(t, add(t, in[0], in[1]), 2.5f);
    };
    auto r = gradcheck(op,
                       {random_tensor(Shape{1, 2, 3, 3}, 1), random_tensor(Shape{1, 2, 3, 3}, 2)},
                       3);
    EXPECT_LT(r.max_rel_err, 1e-3);
}

}  // namespace
