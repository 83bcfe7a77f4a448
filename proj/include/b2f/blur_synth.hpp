#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "b2f/common.hpp"
#include "b2f/flow_io.hpp"

namespace b2f {

// Planar CHW float image, 3 channels, values in [0,1].
struct ImageF {
    int height = 0;
    int width = 0;
    std::vector<float> data;

    ImageF() = default;
    ImageF(int h, int w) : height(h), width(w), data(size_t(3) * h * w, 0.0f) {}

    float& at(int c, int y, int x) { return data[(size_t(c) * height + y) * width + x]; }
    float at(int c, int y, int x) const { return data[(size_t(c) * height + y) * width + x]; }
};

inline Image8 to_image8(const ImageF& img) {
    Image8 out(img.width, img.height);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                const float v = std::min(std::max(img.at(c, y, x), 0.0f), 1.0f);
                out.rgb[3 * (size_t(y) * img.width + x) + c] = uint8_t(std::lround(v * 255.0f));
            }
    return out;
}

inline ImageF from_image8(const Image8& img) {
    ImageF out(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                out.at(c, y, x) = float(img.rgb[3 * (size_t(y) * img.width + x) + c]) / 255.0f;
    return out;
}

// Seamlessly tiling value-noise texture: a few octaves of bilinearly
// interpolated random lattices, stretched to [0,1] per channel.
inline ImageF procedural_texture(uint64_t seed, int h, int w, int octaves = 3) {
    ImageF img(h, w);
    Rng rng(Rng::derive(seed, 0x7e87));
    float weight = 1.0f, total = 0.0f;
    for (int oct = 0; oct < octaves; ++oct) {
        const int g = 4 << oct;
        std::vector<float> lattice(size_t(3) * g * g);
        for (auto& v : lattice) v = float(rng.next_double());
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y) {
                const float fy = float(y) * g / float(h);
                const int y0 = int(fy) % g, y1 = (y0 + 1) % g;
                const float wy = fy - std::floor(fy);
                for (int x = 0; x < w; ++x) {
                    const float fx = float(x) * g / float(w);
                    const int x0 = int(fx) % g, x1 = (x0 + 1) % g;
                    const float wx = fx - std::floor(fx);
                    const auto lat = [&](int yy, int xx) {
                        return lattice[(size_t(c) * g + yy) * g + xx];
                    };
                    const float v = lat(y0, x0) * (1 - wx) * (1 - wy) + lat(y0, x1) * wx * (1 - wy) +
                                    lat(y1, x0) * (1 - wx) * wy + lat(y1, x1) * wx * wy;
                    img.at(c, y, x) += weight * v;
                }
            }
        total += weight;
        weight *= 0.5f;
    }
    for (int c = 0; c < 3; ++c) {
        float lo = 1e9f, hi = -1e9f;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                img.at(c, y, x) /= total;
                lo = std::min(lo, img.at(c, y, x));
                hi = std::max(hi, img.at(c, y, x));
            }
        const float span = hi - lo;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                img.at(c, y, x) = span > 1e-6f ? (img.at(c, y, x) - lo) / span : 0.5f;
    }
    return img;
}

struct Sprite {
    uint64_t texture_seed = 0;
    std::optional<std::array<float, 3>> solid_color;  // overrides the texture
    int size_h = 0;
    int size_w = 0;
    float x0 = 0.0f, y0 = 0.0f;  // top-left at t = 0, pixels
    float dx = 0.0f, dy = 0.0f;  // displacement over the exposure
    int depth = 0;               // higher is closer to the camera
};

struct SceneSpec {
    int height = 0;
    int width = 0;
    uint64_t background_seed = 0;
    std::optional<std::array<float, 3>> background_solid;
    float cam_dx = 0.0f, cam_dy = 0.0f;      // background translation over the exposure
    float bg_phase_x = 0.0f, bg_phase_y = 0.0f;  // initial background offset
    std::vector<Sprite> sprites;
    uint64_t rng_seed = 0;
};

struct SynthConfig {
    int canvas = 64;
    float s_max = 12.0f;
    float discard_threshold = 16.0f;
    int min_sprites = 1;
    int max_sprites = 4;
    int min_size = 12;
    int max_size = 32;
    float min_displacement = 1.0f;
    float camera_prob = 0.3f;
    float camera_scale = 0.5f;             // of s_max
    float direction_jitter_deg = 30.0f;    // sprite spread around the scene direction
    int texture_octaves = 3;
    int max_attempts = 64;
    uint64_t seed = 7;
};

struct BlurSample {
    ImageF image;        // temporally averaged frames
    FlowField gt_flow;   // first -> last
    int n_subframes = 0;
    float s_max_actual = 0.0f;  // max per-pixel flow magnitude
};

// Sub-frame count rule n = max(|s|, 5), rounded up to an integer.
inline int num_subframes(float s) {
    if (s < 0.0f) contract_error("num_subframes needs a non-negative displacement");
    return int(std::ceil(std::max(double(s), 5.0)));
}

namespace detail {

// coverage of pixel cell [i, i+1) by the 1-D interval [p, p+len)
inline double coverage1d(double p, double len, int i) {
    const double lo = std::max(p, double(i));
    const double hi = std::min(p + len, double(i) + 1.0);
    return std::min(std::max(hi - lo, 0.0), 1.0);
}

inline float sample_clamped(const ImageF& tex, int c, double y, double x) {
    const int x0 = int(std::floor(x)), y0 = int(std::floor(y));
    const double wx = x - x0, wy = y - y0;
    auto pick = [&](int yy, int xx) {
        return tex.at(c, std::clamp(yy, 0, tex.height - 1), std::clamp(xx, 0, tex.width - 1));
    };
    return float(pick(y0, x0) * (1 - wx) * (1 - wy) + pick(y0, x0 + 1) * wx * (1 - wy) +
                 pick(y0 + 1, x0) * (1 - wx) * wy + pick(y0 + 1, x0 + 1) * wx * wy);
}

inline float sample_wrapped(const ImageF& tex, int c, double y, double x) {
    double fy = y - std::floor(y / tex.height) * tex.height;
    double fx = x - std::floor(x / tex.width) * tex.width;
    const int y0 = int(fy) % tex.height, x0 = int(fx) % tex.width;
    const int y1 = (y0 + 1) % tex.height, x1 = (x0 + 1) % tex.width;
    const double wy = fy - std::floor(fy), wx = fx - std::floor(fx);
    return float(tex.at(c, y0, x0) * (1 - wx) * (1 - wy) + tex.at(c, y0, x1) * wx * (1 - wy) +
                 tex.at(c, y1, x0) * (1 - wx) * wy + tex.at(c, y1, x1) * wx * wy);
}

inline std::vector<size_t> depth_order(const SceneSpec& spec) {
    std::vector<size_t> order(spec.sprites.size());
    std::iota(order.begin(), order.end(), size_t(0));
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return spec.sprites[a].depth < spec.sprites[b].depth;
    });
    return order;
}

}  // namespace detail

// Renders the scene at exposure fraction t: sprites at start + t*d composited
// over the (possibly translating) background, back to front, with subpixel
// coverage blending.
inline ImageF render_frame(const SceneSpec& spec, double t) {
    if (t < 0.0 || t > 1.0) contract_error("render_frame t must be in [0,1]");
    ImageF img(spec.height, spec.width);
    const double off_x = double(spec.bg_phase_x) + t * double(spec.cam_dx);
    const double off_y = double(spec.bg_phase_y) + t * double(spec.cam_dy);
    if (spec.background_solid) {
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < spec.height; ++y)
                for (int x = 0; x < spec.width; ++x) img.at(c, y, x) = (*spec.background_solid)[c];
    } else {
        const ImageF bg = procedural_texture(spec.background_seed, spec.height, spec.width);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < spec.height; ++y)
                for (int x = 0; x < spec.width; ++x)
                    img.at(c, y, x) = detail::sample_wrapped(bg, c, y - off_y, x - off_x);
    }
    for (size_t si : detail::depth_order(spec)) {
        const Sprite& sp = spec.sprites[si];
        ImageF tex;
        if (!sp.solid_color) tex = procedural_texture(sp.texture_seed, sp.size_h, sp.size_w);
        const double px = double(sp.x0) + t * double(sp.dx);
        const double py = double(sp.y0) + t * double(sp.dy);
        const int y_lo = std::max(0, int(std::floor(py)) - 1);
        const int y_hi = std::min(spec.height, int(std::ceil(py + sp.size_h)) + 1);
        const int x_lo = std::max(0, int(std::floor(px)) - 1);
        const int x_hi = std::min(spec.width, int(std::ceil(px + sp.size_w)) + 1);
        for (int y = y_lo; y < y_hi; ++y) {
            const double cov_y = detail::coverage1d(py, sp.size_h, y);
            if (cov_y <= 0.0) continue;
            for (int x = x_lo; x < x_hi; ++x) {
                const double cov = cov_y * detail::coverage1d(px, sp.size_w, x);
                if (cov <= 0.0) continue;
                for (int c = 0; c < 3; ++c) {
                    const float col = sp.solid_color
                                          ? (*sp.solid_color)[c]
                                          : detail::sample_clamped(tex, c, y - py, x - px);
                    img.at(c, y, x) = float(cov * col + (1.0 - cov) * img.at(c, y, x));
                }
            }
        }
    }
    return img;
}

// Ground truth: topmost sprite whose t=0 footprint covers the pixel center
// wins; uncovered pixels carry the background (camera) displacement.
inline FlowField ground_truth_flow(const SceneSpec& spec) {
    FlowField flow(spec.width, spec.height);
    auto order = detail::depth_order(spec);
    for (int y = 0; y < spec.height; ++y)
        for (int x = 0; x < spec.width; ++x) {
            float u = spec.cam_dx, v = spec.cam_dy;
            for (auto it = order.rbegin(); it != order.rend(); ++it) {
                const Sprite& sp = spec.sprites[*it];
                const double cx = x + 0.5, cy = y + 0.5;
                if (cx >= sp.x0 && cx < sp.x0 + sp.size_w && cy >= sp.y0 &&
                    cy < sp.y0 + sp.size_h) {
                    u = sp.dx;
                    v = sp.dy;
                    break;
                }
            }
            flow.u(x, y) = u;
            flow.v(x, y) = v;
        }
    return flow;
}

// The same scene traversed in the opposite temporal direction. Averaging it
// reproduces the identical blurred image.
inline SceneSpec reverse_scene(const SceneSpec& spec) {
    SceneSpec r = spec;
    for (Sprite& sp : r.sprites) {
        sp.x0 += sp.dx;
        sp.y0 += sp.dy;
        sp.dx = -sp.dx;
        sp.dy = -sp.dy;
    }
    r.bg_phase_x += r.cam_dx;
    r.bg_phase_y += r.cam_dy;
    r.cam_dx = -r.cam_dx;
    r.cam_dy = -r.cam_dy;
    return r;
}

// Averages n = max(|s|,5) evenly spaced frames (endpoints included) where s
// is the realized maximum flow magnitude.
inline BlurSample synthesize(const SceneSpec& spec) {
    BlurSample out;
    out.gt_flow = ground_truth_flow(spec);
    float s = 0.0f;
    for (int y = 0; y < spec.height; ++y)
        for (int x = 0; x < spec.width; ++x) {
            const float u = out.gt_flow.u(x, y), v = out.gt_flow.v(x, y);
            s = std::max(s, std::sqrt(u * u + v * v));
        }
    out.s_max_actual = s;
    out.n_subframes = num_subframes(s);
    const int n = out.n_subframes;
    std::vector<double> acc(size_t(3) * spec.height * spec.width, 0.0);
    for (int i = 0; i < n; ++i) {
        const double t = n > 1 ? double(i) / double(n - 1) : 0.0;
        const ImageF frame = render_frame(spec, t);
        for (size_t j = 0; j < acc.size(); ++j) acc[j] += frame.data[j];
    }
    out.image = ImageF(spec.height, spec.width);
    for (size_t j = 0; j < acc.size(); ++j)
        out.image.data[j] = float(std::min(std::max(acc[j] / n, 0.0), 1.0));
    return out;
}

// Draws a scene whose motions share a dominant direction (a coherent "arrow
// of time" per scene); the global reversal this leaves ambiguous is exactly
// what min-EPE evaluation forgives.
inline SceneSpec random_scene(const SynthConfig& cfg, uint64_t sample_seed) {
    Rng rng(sample_seed);
    SceneSpec spec;
    spec.height = spec.width = cfg.canvas;
    spec.background_seed = rng.next_u64();
    spec.rng_seed = sample_seed;
    const float phi = rng.uniform(0.0f, 6.2831853f);
    const float jitter = cfg.direction_jitter_deg * 3.14159265f / 180.0f;
    if (rng.next_double() < cfg.camera_prob) {
        const float mag = rng.uniform(0.0f, cfg.s_max * cfg.camera_scale);
        const float a = phi + rng.uniform(-jitter, jitter);
        spec.cam_dx = mag * std::cos(a);
        spec.cam_dy = mag * std::sin(a);
    }
    const int count = rng.uniform_int(cfg.min_sprites, cfg.max_sprites);
    for (int i = 0; i < count; ++i) {
        Sprite sp;
        sp.texture_seed = rng.next_u64();
        sp.size_h = rng.uniform_int(cfg.min_size, cfg.max_size);
        sp.size_w = rng.uniform_int(cfg.min_size, cfg.max_size);
        sp.x0 = rng.uniform(-0.5f * sp.size_w, cfg.canvas - 0.5f * sp.size_w);
        sp.y0 = rng.uniform(-0.5f * sp.size_h, cfg.canvas - 0.5f * sp.size_h);
        const float mag = rng.uniform(cfg.min_displacement, cfg.s_max);
        const float a = phi + rng.uniform(-jitter, jitter);
        sp.dx = mag * std::cos(a);
        sp.dy = mag * std::sin(a);
        sp.depth = i;
        spec.sprites.push_back(sp);
    }
    return spec;
}

// Re-rolls the scene until the realized max displacement passes the discard
// rule; reports the offending seed if every attempt fails.
inline BlurSample synthesize_checked(const SynthConfig& cfg, uint64_t sample_seed) {
    for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
        SceneSpec spec = random_scene(cfg, Rng::derive(sample_seed, uint64_t(attempt)));
        BlurSample sample = synthesize(spec);
        if (sample.s_max_actual <= cfg.discard_threshold) return sample;
    }
    io_error("all " + std::to_string(cfg.max_attempts) +
             " candidate scenes exceeded the discard threshold for sample seed " +
             std::to_string(sample_seed));
}

struct ManifestEntry {
    std::string image;
    std::string flow;
};

inline std::filesystem::path manifest_path(const std::filesystem::path& dir) {
    return dir / "manifest.txt";
}

// Writes `count` samples (PPM image + .flo flow) plus a manifest of
// tab-separated relative path pairs. Byte-deterministic for a fixed seed.
inline std::vector<ManifestEntry> generate_dataset(int count, const std::filesystem::path& out_dir,
                                                   const SynthConfig& cfg) {
    if (count < 0) contract_error("generate_dataset count must be >= 0");
    std::filesystem::create_directories(out_dir);
    std::vector<ManifestEntry> entries;
    if (count > 0) {
        std::filesystem::create_directories(out_dir / "images");
        std::filesystem::create_directories(out_dir / "flows");
    }
    for (int i = 0; i < count; ++i) {
        BlurSample sample = synthesize_checked(cfg, Rng::derive(cfg.seed, uint64_t(i)));
        char name[32];
        std::snprintf(name, sizeof(name), "%05d", i);
        ManifestEntry e{"images/" + std::string(name) + ".ppm",
                        "flows/" + std::string(name) + ".flo"};
        write_ppm(to_image8(sample.image), out_dir / e.image);
        write_flo(sample.gt_flow, out_dir / e.flow);
        entries.push_back(std::move(e));
    }
    std::ofstream manifest(manifest_path(out_dir), std::ios::binary);
    if (!manifest) io_error("cannot write " + manifest_path(out_dir).string());
    for (const auto& e : entries) manifest << e.image << '\t' << e.flow << '\n';
    manifest.close();
    if (!manifest) io_error("failed writing " + manifest_path(out_dir).string());
    return entries;
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest) {
    std::ifstream in(manifest, std::ios::binary);
    if (!in) io_error("cannot open manifest " + manifest.string());
    std::vector<ManifestEntry> entries;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            io_error("malformed manifest line in " + manifest.string() + ": " + line);
        entries.push_back({line.substr(0, tab), line.substr(tab + 1)});
    }
    return entries;
}

}  // namespace b2f
