#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "b2f/common.hpp"

namespace b2f {

constexpr float kFloMagic = 202021.25f;
constexpr float kUnknownFlowThreshold = 1e9f;

// Dense per-pixel (u,v) displacement map in pixel units, first frame to last.
struct FlowField {
    int width = 0;
    int height = 0;
    std::vector<float> data;  // interleaved (u,v), row-major

    FlowField() = default;
    FlowField(int w, int h) : width(w), height(h), data(size_t(2) * w * h, 0.0f) {}

    float& u(int x, int y) { return data[2 * (size_t(y) * width + x)]; }
    float& v(int x, int y) { return data[2 * (size_t(y) * width + x) + 1]; }
    float u(int x, int y) const { return data[2 * (size_t(y) * width + x)]; }
    float v(int x, int y) const { return data[2 * (size_t(y) * width + x) + 1]; }

    FlowField negated() const {
        FlowField f = *this;
        for (float& x : f.data) x = -x;
        return f;
    }
};

struct Image8 {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> rgb;  // interleaved, row-major

    Image8() = default;
    Image8(int w, int h) : width(w), height(h), rgb(size_t(3) * w * h, 0) {}
};

namespace detail {

class FileHandle {
public:
    FileHandle(const std::filesystem::path& path, const char* mode)
        : f_(std::fopen(path.string().c_str(), mode)), path_(path) {
        if (!f_) io_error("cannot open " + path.string());
    }
    ~FileHandle() {
        if (f_) std::fclose(f_);
    }
    FileHandle(const FileHandle&) = delete;
    FileHandle& operator=(const FileHandle&) = delete;

    void write(const void* p, size_t bytes) {
        if (std::fwrite(p, 1, bytes, f_) != bytes)
            io_error("write failed for " + path_.string());
    }
    size_t read(void* p, size_t bytes) { return std::fread(p, 1, bytes, f_); }
    void read_exact(void* p, size_t bytes, const char* what) {
        if (read(p, bytes) != bytes)
            io_error(std::string("truncated ") + what + " in " + path_.string());
    }
    FILE* get() { return f_; }

private:
    FILE* f_;
    std::filesystem::path path_;
};

// whole-file atomic replace
template <class WriteFn>
void atomic_write(const std::filesystem::path& path, WriteFn&& fn) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        FileHandle f(tmp, "wb");
        fn(f);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) io_error("cannot rename " + tmp.string() + " to " + path.string());
}

}  // namespace detail

inline void write_flo(const FlowField& flow, const std::filesystem::path& path) {
    if (int64_t(flow.data.size()) != int64_t(2) * flow.width * flow.height)
        dimension_error("flow buffer does not match its dimensions");
    detail::atomic_write(path, [&](detail::FileHandle& f) {
        const float magic = kFloMagic;
        const int32_t w = flow.width, h = flow.height;
        f.write(&magic, 4);
        f.write(&w, 4);
        f.write(&h, 4);
        f.write(flow.data.data(), flow.data.size() * 4);
    });
}

inline FlowField read_flo(const std::filesystem::path& path, bool permissive = false) {
    detail::FileHandle f(path, "rb");
    float magic = 0.0f;
    f.read_exact(&magic, 4, "header");
    if (magic != kFloMagic)
        io_error("bad magic at offset 0 of " + path.string() + ": expected 202021.25, got " +
                 std::to_string(magic));
    int32_t w = 0, h = 0;
    f.read_exact(&w, 4, "header");
    f.read_exact(&h, 4, "header");
    if (w <= 0 || h <= 0 || w > 100000 || h > 100000)
        io_error("implausible flow dimensions " + std::to_string(w) + "x" + std::to_string(h) +
                 " in " + path.string());
    FlowField flow(w, h);
    const size_t payload = flow.data.size() * 4;
    const size_t got = f.read(flow.data.data(), payload);
    if (got != payload)
        io_error("length error: expected " + std::to_string(payload) + " payload bytes, got " +
                 std::to_string(got) + " in " + path.string());
    for (float& x : flow.data) {
        if (!std::isfinite(x) || std::fabs(x) > kUnknownFlowThreshold) {
            if (!permissive)
                io_error("non-finite or unknown flow value in " + path.string());
            x = 0.0f;
        }
    }
    return flow;
}

inline void write_ppm(const Image8& img, const std::filesystem::path& path) {
    detail::atomic_write(path, [&](detail::FileHandle& f) {
        const std::string header =
            "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
        f.write(header.data(), header.size());
        f.write(img.rgb.data(), img.rgb.size());
    });
}

inline Image8 read_ppm(const std::filesystem::path& path) {
    detail::FileHandle f(path, "rb");
    auto next_token = [&]() -> std::string {
        std::string tok;
        int c;
        while ((c = std::fgetc(f.get())) != EOF) {
            if (c == '#') {
                while ((c = std::fgetc(f.get())) != EOF && c != '\n') {
                }
                continue;
            }
            if (std::isspace(c)) {
                if (!tok.empty()) break;
                continue;
            }
            tok.push_back(char(c));
        }
        if (tok.empty()) io_error("truncated PPM header in " + path.string());
        return tok;
    };
    if (next_token() != "P6") io_error(path.string() + " is not a binary PPM (P6)");
    const int w = std::stoi(next_token());
    const int h = std::stoi(next_token());
    const int maxval = std::stoi(next_token());
    if (w <= 0 || h <= 0) io_error("bad PPM dimensions in " + path.string());
    if (maxval != 255) io_error("unsupported PPM maxval in " + path.string());
    Image8 img(w, h);
    f.read_exact(img.rgb.data(), img.rgb.size(), "PPM payload");
    return img;
}

namespace detail {

// Middlebury color wheel: 55 hues over RY/YG/GC/CB/BM/MR arcs.
inline const std::vector<std::array<float, 3>>& color_wheel() {
    static const std::vector<std::array<float, 3>> wheel = [] {
        const int RY = 15, YG = 6, GC = 4, CB = 11, BM = 13, MR = 6;
        std::vector<std::array<float, 3>> w;
        w.reserve(RY + YG + GC + CB + BM + MR);
        for (int i = 0; i < RY; ++i) w.push_back({255.f, 255.f * i / RY, 0.f});
        for (int i = 0; i < YG; ++i) w.push_back({255.f - 255.f * i / YG, 255.f, 0.f});
        for (int i = 0; i < GC; ++i) w.push_back({0.f, 255.f, 255.f * i / GC});
        for (int i = 0; i < CB; ++i) w.push_back({0.f, 255.f - 255.f * i / CB, 255.f});
        for (int i = 0; i < BM; ++i) w.push_back({255.f * i / BM, 0.f, 255.f});
        for (int i = 0; i < MR; ++i) w.push_back({255.f, 0.f, 255.f - 255.f * i / MR});
        return w;
    }();
    return wheel;
}

inline std::array<uint8_t, 3> flow_pixel_color(float u, float v) {
    const auto& wheel = color_wheel();
    const int ncols = int(wheel.size());
    const float rad = std::sqrt(u * u + v * v);
    const float a = std::atan2(-v, -u) / 3.14159265358979323846f;
    const float fk = (a + 1.0f) / 2.0f * float(ncols - 1);
    const int k0 = std::min(int(fk), ncols - 1);
    const int k1 = (k0 + 1) % ncols;
    const float f = fk - float(k0);
    std::array<uint8_t, 3> out;
    for (int c = 0; c < 3; ++c) {
        float col = (1.0f - f) * wheel[k0][c] / 255.0f + f * wheel[k1][c] / 255.0f;
        if (rad <= 1.0f)
            col = 1.0f - rad * (1.0f - col);  // desaturate toward white
        else
            col *= 0.75f;  // out of range
        out[c] = uint8_t(std::lround(255.0f * std::min(std::max(col, 0.0f), 1.0f)));
    }
    return out;
}

}  // namespace detail

// Middlebury-style flow visualization. Zero flow renders white; hue encodes
// direction, saturation scales with magnitude / max_mag (auto when absent).
// Unknown-flow sentinels render black.
inline Image8 flow_to_color(const FlowField& flow, std::optional<float> max_mag = {}) {
    Image8 img(flow.width, flow.height);
    float norm = max_mag.value_or(0.0f);
    if (!max_mag) {
        for (int y = 0; y < flow.height; ++y)
            for (int x = 0; x < flow.width; ++x) {
                const float u = flow.u(x, y), v = flow.v(x, y);
                if (std::fabs(u) > kUnknownFlowThreshold || std::fabs(v) > kUnknownFlowThreshold)
                    continue;
                norm = std::max(norm, std::sqrt(u * u + v * v));
            }
    }
    if (norm <= 0.0f) norm = 1.0f;
    for (int y = 0; y < flow.height; ++y)
        for (int x = 0; x < flow.width; ++x) {
            const float u = flow.u(x, y), v = flow.v(x, y);
            uint8_t* px = &img.rgb[3 * (size_t(y) * flow.width + x)];
            if (std::fabs(u) > kUnknownFlowThreshold || std::fabs(v) > kUnknownFlowThreshold) {
                px[0] = px[1] = px[2] = 0;
                continue;
            }
            const auto rgb = detail::flow_pixel_color(u / norm, v / norm);
            px[0] = rgb[0];
            px[1] = rgb[1];
            px[2] = rgb[2];
        }
    return img;
}

struct EpeResult {
    int width = 0;
    int height = 0;
    std::vector<float> map;  // per-pixel endpoint error
    double mean = 0.0;
};

inline EpeResult epe_map(const FlowField& pred, const FlowField& gt) {
    if (pred.width != gt.width || pred.height != gt.height)
        dimension_error("epe_map dimension mismatch: " + std::to_string(pred.width) + "x" +
                        std::to_string(pred.height) + " vs " + std::to_string(gt.width) + "x" +
                        std::to_string(gt.height));
    EpeResult r;
    r.width = pred.width;
    r.height = pred.height;
    r.map.resize(size_t(pred.width) * pred.height);
    double acc = 0.0;
    for (int y = 0; y < pred.height; ++y)
        for (int x = 0; x < pred.width; ++x) {
            const float du = pred.u(x, y) - gt.u(x, y);
            const float dv = pred.v(x, y) - gt.v(x, y);
            const float e = std::sqrt(du * du + dv * dv);
            r.map[size_t(y) * pred.width + x] = e;
            acc += e;
        }
    r.mean = acc / double(r.map.size());
    return r;
}

}  // namespace b2f
