#pragma once

#include <optional>
#include <string>
#include <vector>

#include "b2f/ops.hpp"
#include "b2f/params.hpp"

namespace b2f {

struct ModelConfig {
    int levels = 6;
    std::vector<int> encoder_channels = {16, 32, 64, 96, 128, 160};
    bool use_stn = true;
    bool use_refining_block = true;
    int corr_max_disp = 4;
    int dense_growth = 32;

    // widths of the auxiliary heads (not pinned by the architecture)
    int stn_head_channels = 8;
    int upfeat_channels = 16;
    std::vector<int> context_channels = {32, 32, 32, 24, 16, 8};

    void validate() const {
        if (levels < 2) dimension_error("ModelConfig.levels must be >= 2");
        if (int(encoder_channels.size()) != levels)
            dimension_error("ModelConfig.encoder_channels must list all " +
                            std::to_string(levels) + " levels");
        if (corr_max_disp < 1) dimension_error("ModelConfig.corr_max_disp must be >= 1");
        if (dense_growth < 1) dimension_error("ModelConfig.dense_growth must be >= 1");
        if (context_channels.size() != 6)
            dimension_error("ModelConfig.context_channels must list 6 widths");
    }

    int corr_channels() const {
        return (2 * corr_max_disp + 1) * (2 * corr_max_disp + 1);
    }
    // channels entering the refining block at a level (1-based)
    int rb_input_channels(int level) const {
        const int c = encoder_channels[level - 1];
        return 2 * c + (level < levels ? c : 0);
    }
    // channels entering the flow decoder at a level
    int flow_input_channels(int level) const {
        return corr_channels() + encoder_channels[level - 1] +
               (level < levels ? upfeat_channels + 2 : 0);
    }
    // channels of the decoded flow feature (dense concatenation)
    int flow_feat_channels(int level) const {
        return flow_input_channels(level) + 5 * dense_growth;
    }
};

struct FeaturePyramid {
    std::vector<Tensor> levels;  // [0] is level 1 (finest)
    Tensor& at(int level) { return levels[size_t(level - 1)]; }
    const Tensor& at(int level) const { return levels[size_t(level - 1)]; }
};

struct FlowPyramid {
    std::vector<Tensor> flows;  // [0] is level 1; all in full-resolution pixel units
    Tensor refined;             // context-refined flow at level-1 size
    Tensor& at(int level) { return flows[size_t(level - 1)]; }
    const Tensor& at(int level) const { return flows[size_t(level - 1)]; }
};

// Flow network estimating dense optical flow from a single motion-blurred
// image: pyramid encoder, two independent feature decoders that reconstruct
// first/last frame features, and a coarse-to-fine flow estimator with cost
// volume, warping and context refinement.
class B2FModel {
public:
    explicit B2FModel(ModelConfig cfg = {}, uint64_t seed = 1) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(Rng::derive(seed, 0xb2f));
        build_encoder(rng);
        build_decoder(1, rng);
        build_decoder(2, rng);
        build_flow_estimator(rng);
        build_context(rng);
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    FeaturePyramid encode(Tape& tape, const Tensor& image) const {
        const Shape s = image.shape();
        if (s.c != 3) dimension_error("encode expects a 3-channel image, got " + s.str());
        const int div = 1 << cfg_.levels;
        if (s.h % div != 0 || s.w % div != 0)
            dimension_error("encode needs H and W divisible by " + std::to_string(div) +
                            ", got " + s.str());
        FeaturePyramid pyr;
        Tensor x = image;
        for (int l = 1; l <= cfg_.levels; ++l) {
            const std::string p = "enc.l" + std::to_string(l);
            x = relu(tape, conv2d(tape, x, params_.get(p + ".conv1.w"),
                                  params_.get(p + ".conv1.b"), 2, 1, 1));
            x = relu(tape, conv2d(tape, x, params_.get(p + ".conv2.w"),
                                  params_.get(p + ".conv2.b"), 1, 1, 1));
            pyr.levels.push_back(x);
        }
        return pyr;
    }

    // Predicts a global affine transform from the feature itself and
    // resamples the feature by it. The 6-parameter head starts at the
    // identity transform.
    Tensor stn_transform(Tape& tape, const Tensor& feature, int decoder, int level) const {
        const std::string p = prefix(decoder, level) + ".stn";
        Tensor h = relu(tape, conv2d(tape, feature, params_.get(p + ".conv1.w"),
                                     params_.get(p + ".conv1.b"), 2, 1, 1));
        h = relu(tape, conv2d(tape, h, params_.get(p + ".conv2.w"),
                              params_.get(p + ".conv2.b"), 2, 1, 1));
        h = global_avg_pool(tape, h);
        Tensor theta = conv2d(tape, h, params_.get(p + ".fc.w"), params_.get(p + ".fc.b"));
        Tensor grid = affine_grid(tape, theta, feature.shape().h, feature.shape().w);
        return grid_sample(tape, feature, grid);
    }

    // Decodes a frame feature from the transformed and encoded features plus
    // the upsampled coarser decoded feature (absent at the coarsest level).
    Tensor refine_decode(Tape& tape, const Tensor& transformed, const Tensor& encoded,
                         const Tensor* upsampled_prev, int decoder, int level) const {
        std::vector<Tensor> parts = {transformed, encoded};
        if (upsampled_prev) parts.push_back(*upsampled_prev);
        Tensor x = concat_channels(tape, parts);
        const std::string p = prefix(decoder, level);
        if (cfg_.use_refining_block) x = dense_block(tape, x, p + ".rb");
        return relu(tape, conv2d(tape, x, params_.get(p + ".rb.proj.w"),
                                 params_.get(p + ".rb.proj.b"), 1, 1, 1));
    }

    std::pair<FeaturePyramid, FeaturePyramid> decode_features(Tape& tape,
                                                              const FeaturePyramid& pyr) const {
        FeaturePyramid out1 = decode_one(tape, pyr, 1);
        FeaturePyramid out2 = decode_one(tape, pyr, 2);
        return {out1, out2};
    }

    // Backward warp of a feature by a flow given in this level's pixel units.
    static Tensor warp_feature(Tape& tape, const Tensor& feature, const Tensor& flow) {
        return warp(tape, feature, flow);
    }

    // One coarse-to-fine step: cost volume between the first-frame feature
    // and the warped last-frame feature, dense flow decoding, prediction.
    // Flows are kept in full-resolution pixel units at every level.
    std::pair<Tensor, Tensor> estimate_flow_level(Tape& tape, const Tensor& v1,
                                                  const Tensor& v2, const Tensor* prev_flow,
                                                  const Tensor* prev_feat, int level) const {
        const std::string p = "flow.l" + std::to_string(level);
        std::vector<Tensor> parts;
        Tensor cv;
        if (prev_flow) {
            Tensor flow_up = conv_transpose2d(tape, *prev_flow, params_.get(p + ".upflow.w"),
                                              params_.get(p + ".upflow.b"), 2, 1);
            Tensor feat_up = conv_transpose2d(tape, *prev_feat, params_.get(p + ".upfeat.w"),
                                              params_.get(p + ".upfeat.b"), 2, 1);
            Tensor level_flow = scale(tape, flow_up, 1.0f / float(1 << level));
            Tensor v2w = warp(tape, v2, level_flow);
            cv = relu(tape, correlation(tape, v1, v2w, cfg_.corr_max_disp));
            parts = {cv, v1, feat_up, flow_up};
        } else {
            cv = relu(tape, correlation(tape, v1, v2, cfg_.corr_max_disp));
            parts = {cv, v1};
        }
        Tensor x = concat_channels(tape, parts);
        Tensor feat = dense_block(tape, x, p);
        Tensor flow = conv2d(tape, feat, params_.get(p + ".pred.w"),
                             params_.get(p + ".pred.b"), 1, 1, 1);
        return {flow, feat};
    }

    // Dilated residual refinement of the finest flow. The final layer is
    // zero-initialized, so refinement starts as the identity.
    Tensor context_refine(Tape& tape, const Tensor& flow, const Tensor& flow_feat) const {
        static constexpr int kDilations[6] = {1, 2, 4, 8, 16, 1};
        Tensor x = concat_channels(tape, {flow_feat, flow});
        for (int i = 0; i < 6; ++i) {
            const std::string p = "ctx.conv" + std::to_string(i + 1);
            x = relu(tape, conv2d(tape, x, params_.get(p + ".w"), params_.get(p + ".b"), 1,
                                  kDilations[i], kDilations[i]));
        }
        Tensor residual = conv2d(tape, x, params_.get("ctx.conv7.w"),
                                 params_.get("ctx.conv7.b"), 1, 1, 1);
        return add(tape, flow, residual);
    }

    FlowPyramid forward(Tape& tape, const Tensor& image) const {
        FeaturePyramid pyr = encode(tape, image);
        auto [v1, v2] = decode_features(tape, pyr);
        FlowPyramid out;
        out.flows.resize(size_t(cfg_.levels));
        Tensor prev_flow, prev_feat;
        for (int l = cfg_.levels; l >= 1; --l) {
            auto [flow, feat] =
                estimate_flow_level(tape, v1.at(l), v2.at(l),
                                    prev_flow.defined() ? &prev_flow : nullptr,
                                    prev_feat.defined() ? &prev_feat : nullptr, l);
            out.at(l) = flow;
            prev_flow = flow;
            prev_feat = feat;
        }
        out.refined = context_refine(tape, out.at(1), prev_feat);
        return out;
    }

    // Full-resolution flow: bilinear upsampling of the refined level-1 flow.
    // Values are already full-resolution pixel units, so they pass unscaled.
    Tensor estimate_fullres(Tape& tape, const Tensor& image) const {
        FlowPyramid pyr = forward(tape, image);
        return bilinear_resize(tape, pyr.refined, image.shape().h, image.shape().w);
    }

private:
    std::string prefix(int decoder, int level) const {
        return "dec" + std::to_string(decoder) + ".l" + std::to_string(level);
    }

    Tensor dense_block(Tape& tape, const Tensor& input, const std::string& prefix) const {
        std::vector<Tensor> cat = {input};
        for (int i = 1; i <= 5; ++i) {
            Tensor in = cat.size() == 1 ? cat[0] : concat_channels(tape, cat);
            const std::string p = prefix + ".dense" + std::to_string(i);
            Tensor o = relu(tape, conv2d(tape, in, params_.get(p + ".w"),
                                         params_.get(p + ".b"), 1, 1, 1));
            cat.push_back(o);
        }
        return concat_channels(tape, cat);
    }

    FeaturePyramid decode_one(Tape& tape, const FeaturePyramid& pyr, int decoder) const {
        FeaturePyramid out;
        out.levels.resize(size_t(cfg_.levels));
        Tensor prev;
        for (int l = cfg_.levels; l >= 1; --l) {
            const Tensor& enc = pyr.at(l);
            Tensor transformed = cfg_.use_stn ? stn_transform(tape, enc, decoder, l) : enc;
            Tensor up;
            if (prev.defined()) {
                const std::string p = prefix(decoder, l);
                up = conv_transpose2d(tape, prev, params_.get(p + ".up.w"),
                                      params_.get(p + ".up.b"), 2, 1);
            }
            Tensor v = refine_decode(tape, transformed, enc, up.defined() ? &up : nullptr,
                                     decoder, l);
            out.at(l) = v;
            prev = v;
        }
        return out;
    }

    void build_encoder(Rng& rng) {
        int c_in = 3;
        for (int l = 1; l <= cfg_.levels; ++l) {
            const int c = cfg_.encoder_channels[size_t(l - 1)];
            const std::string p = "enc.l" + std::to_string(l);
            params_.conv_weight(p + ".conv1.w", c, c_in, 3, rng);
            params_.bias(p + ".conv1.b", c);
            params_.conv_weight(p + ".conv2.w", c, c, 3, rng);
            params_.bias(p + ".conv2.b", c);
            c_in = c;
        }
    }

    void build_decoder(int decoder, Rng& rng) {
        for (int l = cfg_.levels; l >= 1; --l) {
            const int c = cfg_.encoder_channels[size_t(l - 1)];
            const std::string p = prefix(decoder, l);
            if (cfg_.use_stn) {
                const int hc = cfg_.stn_head_channels;
                params_.conv_weight(p + ".stn.conv1.w", hc, c, 3, rng);
                params_.bias(p + ".stn.conv1.b", hc);
                params_.conv_weight(p + ".stn.conv2.w", hc, hc, 3, rng);
                params_.bias(p + ".stn.conv2.b", hc);
                // identity-initialized affine head
                params_.zeros(p + ".stn.fc.w", Shape{6, hc, 1, 1});
                Tensor fb = params_.zeros(p + ".stn.fc.b", Shape{1, 6, 1, 1});
                fb.data()[0] = 1.0f;
                fb.data()[4] = 1.0f;
            }
            if (l < cfg_.levels) {
                const int c_prev = cfg_.encoder_channels[size_t(l)];
                params_.deconv_weight(p + ".up.w", c_prev, c, 4, rng);
                params_.bias(p + ".up.b", c);
            }
            int rb_in = cfg_.rb_input_channels(l);
            if (cfg_.use_refining_block) {
                for (int i = 1; i <= 5; ++i) {
                    const int in_c = rb_in + (i - 1) * cfg_.dense_growth;
                    params_.conv_weight(p + ".rb.dense" + std::to_string(i) + ".w",
                                        cfg_.dense_growth, in_c, 3, rng);
                    params_.bias(p + ".rb.dense" + std::to_string(i) + ".b", cfg_.dense_growth);
                }
                rb_in += 5 * cfg_.dense_growth;
            }
            params_.conv_weight(p + ".rb.proj.w", c, rb_in, 3, rng);
            params_.bias(p + ".rb.proj.b", c);
        }
    }

    void build_flow_estimator(Rng& rng) {
        for (int l = cfg_.levels; l >= 1; --l) {
            const std::string p = "flow.l" + std::to_string(l);
            if (l < cfg_.levels) {
                params_.deconv_weight(p + ".upflow.w", 2, 2, 4, rng);
                params_.bias(p + ".upflow.b", 2);
                params_.deconv_weight(p + ".upfeat.w", cfg_.flow_feat_channels(l + 1),
                                      cfg_.upfeat_channels, 4, rng);
                params_.bias(p + ".upfeat.b", cfg_.upfeat_channels);
            }
            const int in_c = cfg_.flow_input_channels(l);
            for (int i = 1; i <= 5; ++i) {
                params_.conv_weight(p + ".dense" + std::to_string(i) + ".w", cfg_.dense_growth,
                                    in_c + (i - 1) * cfg_.dense_growth, 3, rng);
                params_.bias(p + ".dense" + std::to_string(i) + ".b", cfg_.dense_growth);
            }
            // small-scale prediction head keeps untrained flows near zero
            params_.conv_weight(p + ".pred.w", 2, cfg_.flow_feat_channels(l), 3, rng, 0.1f);
            params_.bias(p + ".pred.b", 2);
        }
    }

    void build_context(Rng& rng) {
        int c_in = cfg_.flow_feat_channels(1) + 2;
        for (int i = 0; i < 6; ++i) {
            const int c = cfg_.context_channels[size_t(i)];
            const std::string p = "ctx.conv" + std::to_string(i + 1);
            params_.conv_weight(p + ".w", c, c_in, 3, rng);
            params_.bias(p + ".b", c);
            c_in = c;
        }
        params_.zeros("ctx.conv7.w", Shape{2, c_in, 3, 3});
        params_.bias("ctx.conv7.b", 2);
    }

    ModelConfig cfg_;
    ParamStore params_;
};

}  // namespace b2f
