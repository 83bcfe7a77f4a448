#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "b2f/adam.hpp"
#include "b2f/blur_synth.hpp"
#include "b2f/flow_io.hpp"
#include "b2f/model.hpp"

namespace b2f {

struct TrainConfig {
    // per-level loss weights, finest (w1) first
    std::vector<float> level_weights = {0.005f, 0.01f, 0.02f, 0.04f, 0.08f, 0.32f};
    double lr = 1e-4;
    std::vector<int> lr_halving_epochs = {20, 30, 35};
    int epochs = 40;
    int batch = 4;
    int crop = 64;
    AdamConfig adam;
    uint64_t seed = 1;

    void validate(int levels) const {
        if (int(level_weights.size()) < levels)
            dimension_error("TrainConfig.level_weights must cover all levels");
        for (float w : level_weights)
            if (w <= 0.0f) dimension_error("loss weights must be positive");
        for (size_t i = 0; i + 1 < lr_halving_epochs.size(); ++i)
            if (lr_halving_epochs[i] >= lr_halving_epochs[i + 1])
                dimension_error("lr halving epochs must be strictly increasing");
        if (!lr_halving_epochs.empty() && epochs > 0 && lr_halving_epochs.back() >= epochs)
            dimension_error("lr halving epochs must be < epochs");
        if (batch < 1 || epochs < 0 || crop < 1) dimension_error("bad TrainConfig");
    }
};

// lr(epoch) = base * 2^-(number of halvings at or before this epoch); ldexp
// keeps the halvings exact in floating point.
inline double lr_at_epoch(const TrainConfig& cfg, int epoch) {
    int halvings = 0;
    for (int h : cfg.lr_halving_epochs)
        if (h <= epoch) ++halvings;
    return std::ldexp(cfg.lr, -halvings);
}

// Weighted multi-scale endpoint error. Ground truth is bilinearly resized to
// each level with magnitudes unscaled (flows live in full-resolution pixel
// units at every level); the refined flow contributes a second w1 term.
inline Tensor multiscale_epe_loss(Tape& tape, const FlowPyramid& pyr, const Tensor& gt,
                                  const std::vector<float>& weights) {
    if (int(weights.size()) < int(pyr.flows.size()))
        dimension_error("need one loss weight per pyramid level");
    Tensor loss;
    for (size_t li = 0; li < pyr.flows.size(); ++li) {
        const Tensor& f = pyr.flows[li];
        Tensor gt_l = bilinear_resize(tape, gt, f.shape().h, f.shape().w);
        Tensor term = scale(tape, epe_mean(tape, f, gt_l), weights[li]);
        loss = loss.defined() ? add(tape, loss, term) : term;
    }
    if (pyr.refined.defined()) {
        Tensor gt_1 = bilinear_resize(tape, gt, pyr.refined.shape().h, pyr.refined.shape().w);
        Tensor term = scale(tape, epe_mean(tape, pyr.refined, gt_1), weights[0]);
        loss = add(tape, loss, term);
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Checkpoint: "B2FC", u32 version, u32 tensor count, then per tensor
// (u32 name length, name, u32 ndim, i64 dims, float32 data), little-endian.
// Optimizer state lives under "adam.*", bookkeeping under "meta.*".
// ---------------------------------------------------------------------------

struct Checkpoint {
    struct Entry {
        std::string name;
        std::vector<int64_t> dims;
        std::vector<float> values;
    };
    uint32_t version = 1;
    std::vector<Entry> entries;

    void add(std::string name, std::vector<int64_t> dims, std::vector<float> values) {
        entries.push_back({std::move(name), std::move(dims), std::move(values)});
    }
    const Entry* find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    }
};

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    detail::atomic_write(path, [&](detail::FileHandle& f) {
        f.write("B2FC", 4);
        const uint32_t version = ckpt.version;
        const uint32_t count = uint32_t(ckpt.entries.size());
        f.write(&version, 4);
        f.write(&count, 4);
        for (const auto& e : ckpt.entries) {
            const uint32_t name_len = uint32_t(e.name.size());
            const uint32_t ndim = uint32_t(e.dims.size());
            f.write(&name_len, 4);
            f.write(e.name.data(), e.name.size());
            f.write(&ndim, 4);
            f.write(e.dims.data(), e.dims.size() * 8);
            f.write(e.values.data(), e.values.size() * 4);
        }
    });
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    detail::FileHandle f(path, "rb");
    char magic[4];
    f.read_exact(magic, 4, "checkpoint magic");
    if (std::memcmp(magic, "B2FC", 4) != 0)
        io_error("bad checkpoint magic in " + path.string());
    Checkpoint ckpt;
    uint32_t count = 0;
    f.read_exact(&ckpt.version, 4, "checkpoint header");
    if (ckpt.version != 1)
        io_error("unsupported checkpoint version " + std::to_string(ckpt.version) + " in " +
                 path.string());
    f.read_exact(&count, 4, "checkpoint header");
    for (uint32_t i = 0; i < count; ++i) {
        Checkpoint::Entry e;
        uint32_t name_len = 0, ndim = 0;
        f.read_exact(&name_len, 4, "tensor header");
        if (name_len > 4096) io_error("implausible tensor name length in " + path.string());
        e.name.resize(name_len);
        f.read_exact(e.name.data(), name_len, "tensor name");
        f.read_exact(&ndim, 4, "tensor header");
        if (ndim > 8) io_error("implausible tensor rank in " + path.string());
        e.dims.resize(ndim);
        f.read_exact(e.dims.data(), ndim * 8, "tensor dims");
        int64_t numel = 1;
        for (int64_t d : e.dims) {
            if (d < 0 || d > (int64_t(1) << 32)) io_error("implausible tensor dim in " + path.string());
            numel *= d;
        }
        e.values.resize(size_t(numel));
        f.read_exact(e.values.data(), size_t(numel) * 4, "tensor data");
        ckpt.entries.push_back(std::move(e));
    }
    return ckpt;
}

namespace detail {
inline std::vector<float> bits_of_u64(uint64_t v) {
    std::vector<float> out(2);
    uint32_t lo = uint32_t(v), hi = uint32_t(v >> 32);
    std::memcpy(&out[0], &lo, 4);
    std::memcpy(&out[1], &hi, 4);
    return out;
}
inline uint64_t u64_of_bits(const std::vector<float>& v) {
    uint32_t lo, hi;
    std::memcpy(&lo, &v[0], 4);
    std::memcpy(&hi, &v[1], 4);
    return uint64_t(lo) | (uint64_t(hi) << 32);
}
}  // namespace detail

inline Checkpoint make_checkpoint(const B2FModel& model, const AdamState* adam, int epoch,
                                  uint64_t seed) {
    Checkpoint ckpt;
    const ParamStore& ps = model.params();
    for (size_t i = 0; i < ps.size(); ++i) {
        const Tensor t = ps.tensor_at(i);
        const Shape s = t.shape();
        ckpt.add(ps.name_at(i), {s.n, s.c, s.h, s.w}, t.to_vector());
    }
    if (adam) {
        AdamState& a = const_cast<AdamState&>(*adam);
        for (size_t i = 0; i < ps.size(); ++i) {
            const Shape s = ps.tensor_at(i).shape();
            ckpt.add("adam.m." + ps.name_at(i), {s.n, s.c, s.h, s.w}, a.first_moments()[i]);
            ckpt.add("adam.v." + ps.name_at(i), {s.n, s.c, s.h, s.w}, a.second_moments()[i]);
        }
        ckpt.add("adam.step", {1}, {float(adam->step_count())});
    }
    ckpt.add("meta.epoch", {1}, {float(epoch)});
    ckpt.add("meta.seed", {2}, detail::bits_of_u64(seed));
    return ckpt;
}

struct CheckpointMeta {
    int epoch = 0;
    uint64_t seed = 0;
};

// Loads parameters (and optimizer state when adam is given) into the model.
// Name or shape disagreements are collected and reported together.
inline CheckpointMeta apply_checkpoint(const Checkpoint& ckpt, B2FModel& model,
                                       AdamState* adam = nullptr) {
    ParamStore& ps = model.params();
    std::string offenders;
    for (size_t i = 0; i < ps.size(); ++i) {
        const std::string& name = ps.name_at(i);
        const Checkpoint::Entry* e = ckpt.find(name);
        Tensor t = ps.tensor_at(i);
        if (!e) {
            offenders += "\n  missing parameter " + name;
            continue;
        }
        if (int64_t(e->values.size()) != t.numel()) {
            offenders += "\n  shape mismatch for " + name + ": model " + t.shape().str() +
                         " holds " + std::to_string(t.numel()) + " values, checkpoint holds " +
                         std::to_string(e->values.size());
            continue;
        }
        std::copy(e->values.begin(), e->values.end(), t.data());
    }
    for (const auto& e : ckpt.entries) {
        if (e.name.rfind("adam.", 0) == 0 || e.name.rfind("meta.", 0) == 0) continue;
        if (!ps.contains(e.name)) offenders += "\n  unexpected tensor " + e.name;
    }
    if (!offenders.empty())
        io_error("checkpoint incompatible with this model configuration:" + offenders);
    if (adam) {
        for (size_t i = 0; i < ps.size(); ++i) {
            const std::string& name = ps.name_at(i);
            const Checkpoint::Entry* m = ckpt.find("adam.m." + name);
            const Checkpoint::Entry* v = ckpt.find("adam.v." + name);
            if (!m || !v) io_error("checkpoint lacks optimizer state for " + name);
            adam->first_moments()[i] = m->values;
            adam->second_moments()[i] = v->values;
        }
        if (const auto* s = ckpt.find("adam.step")) adam->set_step_count(int64_t(s->values[0]));
    }
    CheckpointMeta meta;
    if (const auto* e = ckpt.find("meta.epoch")) meta.epoch = int(e->values[0]);
    if (const auto* e = ckpt.find("meta.seed")) meta.seed = detail::u64_of_bits(e->values);
    return meta;
}

// ---------------------------------------------------------------------------
// Dataset handling
// ---------------------------------------------------------------------------

struct DatasetCache {
    std::vector<ImageF> images;
    std::vector<FlowField> flows;

    static DatasetCache load(const std::filesystem::path& manifest) {
        DatasetCache ds;
        const auto base = manifest.parent_path();
        for (const ManifestEntry& e : read_manifest(manifest)) {
            ds.images.push_back(from_image8(read_ppm(base / e.image)));
            ds.flows.push_back(read_flo(base / e.flow));
        }
        return ds;
    }

    size_t size() const { return images.size(); }
};

namespace detail {

inline void copy_crop(const float* src, int src_h, int src_w, int channels, int crop, float* dst) {
    const int oy = (src_h - crop) / 2, ox = (src_w - crop) / 2;
    for (int c = 0; c < channels; ++c)
        for (int y = 0; y < crop; ++y)
            std::copy_n(src + (int64_t(c) * src_h + oy + y) * src_w + ox, crop,
                        dst + (int64_t(c) * crop + y) * crop);
}

}  // namespace detail

// Stacks centrally cropped samples into (N,3,crop,crop) / (N,2,crop,crop).
inline std::pair<Tensor, Tensor> make_batch(const DatasetCache& ds,
                                            const std::vector<size_t>& indices, int crop) {
    const int n = int(indices.size());
    Tensor images(Shape{n, 3, crop, crop});
    Tensor flows(Shape{n, 2, crop, crop});
    for (int i = 0; i < n; ++i) {
        const ImageF& img = ds.images[indices[size_t(i)]];
        const FlowField& flow = ds.flows[indices[size_t(i)]];
        if (img.height < crop || img.width < crop)
            dimension_error("sample smaller than crop size");
        detail::copy_crop(img.data.data(), img.height, img.width, 3, crop,
                          images.data() + int64_t(i) * 3 * crop * crop);
        // flow is stored interleaved; split into planes while cropping
        std::vector<float> u(size_t(flow.width) * flow.height), v(u.size());
        for (int y = 0; y < flow.height; ++y)
            for (int x = 0; x < flow.width; ++x) {
                u[size_t(y) * flow.width + x] = flow.u(x, y);
                v[size_t(y) * flow.width + x] = flow.v(x, y);
            }
        detail::copy_crop(u.data(), flow.height, flow.width, 1, crop,
                          flows.data() + (int64_t(i) * 2) * crop * crop);
        detail::copy_crop(v.data(), flow.height, flow.width, 1, crop,
                          flows.data() + (int64_t(i) * 2 + 1) * crop * crop);
    }
    return {images, flows};
}

inline Tensor image_to_tensor(const ImageF& img) {
    Tensor t(Shape{1, 3, img.height, img.width});
    std::copy(img.data.begin(), img.data.end(), t.data());
    return t;
}

inline FlowField flow_from_tensor(const Tensor& t, int item = 0) {
    const Shape s = t.shape();
    if (s.c != 2) dimension_error("flow tensor must have 2 channels");
    FlowField f(s.w, s.h);
    const float* u = t.data() + int64_t(item) * 2 * s.h * s.w;
    const float* v = u + int64_t(s.h) * s.w;
    for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
            f.u(x, y) = u[y * s.w + x];
            f.v(x, y) = v[y * s.w + x];
        }
    return f;
}

// ---------------------------------------------------------------------------
// Evaluation: per sample, the lower of EPE against the ground truth and
// against its negation (the reversed temporal direction); dataset mean of
// per-sample means.
// ---------------------------------------------------------------------------

struct EvalResult {
    double mean_min_epe = 0.0;
    double mean_zero_epe = 0.0;  // zero-flow baseline: mean |gt|
    std::vector<double> per_sample_min_epe;
    std::vector<double> per_sample_zero_epe;
};

inline EvalResult evaluate_cached(const B2FModel& model, const DatasetCache& ds) {
    EvalResult r;
    const FlowField* zero = nullptr;
    FlowField zero_buf;
    for (size_t i = 0; i < ds.size(); ++i) {
        Tape tape;
        Tensor pred_t = model.estimate_fullres(tape, image_to_tensor(ds.images[i]));
        FlowField pred = flow_from_tensor(pred_t);
        const FlowField& gt = ds.flows[i];
        const double fwd = epe_map(pred, gt).mean;
        const double bwd = epe_map(pred, gt.negated()).mean;
        r.per_sample_min_epe.push_back(std::min(fwd, bwd));
        if (!zero || zero_buf.width != gt.width || zero_buf.height != gt.height) {
            zero_buf = FlowField(gt.width, gt.height);
            zero = &zero_buf;
        }
        r.per_sample_zero_epe.push_back(epe_map(*zero, gt).mean);
    }
    if (!r.per_sample_min_epe.empty()) {
        for (double e : r.per_sample_min_epe) r.mean_min_epe += e;
        for (double e : r.per_sample_zero_epe) r.mean_zero_epe += e;
        r.mean_min_epe /= double(r.per_sample_min_epe.size());
        r.mean_zero_epe /= double(r.per_sample_zero_epe.size());
    }
    return r;
}

inline EvalResult evaluate(const B2FModel& model, const std::filesystem::path& manifest) {
    return evaluate_cached(model, DatasetCache::load(manifest));
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_min_epe = 0.0;
    double lr = 0.0;
};

struct TrainOptions {
    std::filesystem::path out_dir;  // empty: no checkpoints or CSV
    std::filesystem::path resume;   // checkpoint to continue from
    bool verbose = false;
};

struct TrainResult {
    std::vector<EpochStats> log;
    std::filesystem::path final_checkpoint;
};

inline TrainResult train(B2FModel& model, const std::filesystem::path& train_manifest,
                         const std::filesystem::path& val_manifest, const TrainConfig& cfg,
                         const TrainOptions& opts = {}) {
    cfg.validate(model.config().levels);
    const int div = 1 << model.config().levels;
    if (cfg.crop % div != 0)
        dimension_error("crop size must be divisible by " + std::to_string(div));

    DatasetCache train_set = DatasetCache::load(train_manifest);
    if (train_set.size() == 0) contract_error("training dataset is empty");
    std::optional<DatasetCache> val_set;
    if (!val_manifest.empty()) val_set = DatasetCache::load(val_manifest);

    std::vector<Tensor> params = model.params().tensors();
    AdamState adam(params, cfg.adam, float(cfg.lr));
    int start_epoch = 0;
    if (!opts.resume.empty()) {
        CheckpointMeta meta = apply_checkpoint(load_checkpoint(opts.resume), model, &adam);
        start_epoch = meta.epoch;
    }

    const bool writing = !opts.out_dir.empty();
    std::ofstream csv;
    if (writing) {
        std::filesystem::create_directories(opts.out_dir);
        csv.open(opts.out_dir / "metrics.csv",
                 start_epoch > 0 ? std::ios::app : std::ios::trunc);
        if (!csv) io_error("cannot write metrics.csv in " + opts.out_dir.string());
        if (start_epoch == 0) csv << "epoch,train_loss,val_min_epe,lr\n";
    }

    TrainResult result;
    for (int epoch = start_epoch + 1; epoch <= cfg.epochs; ++epoch) {
        const double lr = lr_at_epoch(cfg, epoch);
        adam.set_lr(float(lr));

        std::vector<size_t> order(train_set.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(Rng::derive(cfg.seed, 0x5e11ced + uint64_t(epoch)));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[size_t(shuffle_rng.next_u64() % i)]);

        double epoch_loss = 0.0;
        int batches = 0;
        for (size_t off = 0; off < order.size(); off += size_t(cfg.batch)) {
            std::vector<size_t> idx(order.begin() + long(off),
                                    order.begin() + long(std::min(off + size_t(cfg.batch),
                                                                  order.size())));
            auto [images, flows] = make_batch(train_set, idx, cfg.crop);
            Tape tape;
            FlowPyramid pyr = model.forward(tape, images);
            Tensor loss = multiscale_epe_loss(tape, pyr, flows, cfg.level_weights);
            const float loss_value = loss.data()[0];
            if (!std::isfinite(loss_value)) {
                std::string which;
                for (size_t i : idx) which += std::to_string(i) + " ";
                io_error("non-finite training loss at epoch " + std::to_string(epoch) +
                         ", lr " + std::to_string(lr) + ", batch indices [ " + which + "]");
            }
            backward(loss, tape);
            adam_step(params, adam);
            epoch_loss += loss_value;
            ++batches;
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = epoch_loss / std::max(batches, 1);
        stats.lr = lr;
        if (val_set) stats.val_min_epe = evaluate_cached(model, *val_set).mean_min_epe;
        result.log.push_back(stats);

        if (writing) {
            char line[160];
            std::snprintf(line, sizeof(line), "%d,%.8g,%.8g,%.8g\n", stats.epoch,
                          stats.train_loss, stats.val_min_epe, stats.lr);
            csv << line;
            csv.flush();
            save_checkpoint(make_checkpoint(model, &adam, epoch, cfg.seed),
                            opts.out_dir / "ckpt_latest.b2f");
        }
        if (opts.verbose) {
            std::printf("epoch %3d  loss %.5f  val_min_epe %.5f  lr %.3g\n", stats.epoch,
                        stats.train_loss, stats.val_min_epe, stats.lr);
            std::fflush(stdout);
        }
    }
    if (writing) {
        save_checkpoint(make_checkpoint(model, &adam, cfg.epochs, cfg.seed),
                        opts.out_dir / "ckpt_final.b2f");
        result.final_checkpoint = opts.out_dir / "ckpt_final.b2f";
    }
    return result;
}

// ---------------------------------------------------------------------------
// Ablation suite: trains each configuration under an identical TrainConfig
// for every seed and reports per-seed and median validation min-EPE.
// ---------------------------------------------------------------------------

struct AblationRow {
    ModelConfig cfg;
    int64_t param_count = 0;
    std::vector<double> epes;  // one per seed
    double median_epe = 0.0;
};

inline double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

inline std::vector<AblationRow> ablation_suite(const std::filesystem::path& train_manifest,
                                               const std::filesystem::path& val_manifest,
                                               const std::vector<ModelConfig>& cfgs,
                                               const TrainConfig& base,
                                               const std::vector<uint64_t>& seeds,
                                               bool verbose = false) {
    if (cfgs.size() < 1) contract_error("ablation_suite needs at least one configuration");
    std::vector<AblationRow> rows;
    for (const ModelConfig& mc : cfgs) {
        AblationRow row;
        row.cfg = mc;
        for (uint64_t seed : seeds) {
            B2FModel model(mc, seed);
            row.param_count = model.params().total_count();
            TrainConfig tc = base;
            tc.seed = seed;
            TrainOptions opts;
            opts.verbose = verbose;
            train(model, train_manifest, val_manifest, tc, opts);
            row.epes.push_back(evaluate(model, val_manifest).mean_min_epe);
        }
        row.median_epe = median_of(row.epes);
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace b2f
