#pragma once

#include <cstdint>
#include <cmath>
#include <cstdlib>
#include <memory>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

#if defined(__GLIBC__) || defined(__linux__)
#include <malloc.h>
#endif

extern "C" void openblas_set_num_threads(int);

namespace b2f {

// Shape of a dense 4-D tensor, (batch, channel, height, width).
struct Shape {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    int64_t numel() const { return int64_t(n) * c * h * w; }
    bool operator==(const Shape&) const = default;

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

[[noreturn]] inline void dimension_error(const std::string& msg) {
    throw std::invalid_argument("dimension error: " + msg);
}

[[noreturn]] inline void contract_error(const std::string& msg) {
    throw std::logic_error("contract error: " + msg);
}

[[noreturn]] inline void io_error(const std::string& msg) {
    throw std::runtime_error(msg);
}

// Deterministic counter-based RNG (splitmix64 core). All stochastic streams
// in the project are keyed by (seed, stream) so runs are reproducible and
// resumable without serializing generator internals.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    static uint64_t derive(uint64_t seed, uint64_t stream) {
        // one splitmix64 round over the pair
        uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0,1)
    double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

    float uniform(float lo, float hi) {
        return lo + float(next_double()) * (hi - lo);
    }

    // inclusive bounds
    int uniform_int(int lo, int hi) {
        return lo + int(next_u64() % uint64_t(hi - lo + 1));
    }

    float normal() {
        // Box-Muller, one value per call (second discarded for simplicity)
        double u1 = next_double();
        double u2 = next_double();
        if (u1 < 1e-300) u1 = 1e-300;
        return float(std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2));
    }

private:
    uint64_t state_;
};

// Vector allocator that leaves new elements default-initialized; resize of a
// scratch buffer that is fully overwritten must not pay for a zero fill.
template <class T>
struct uninit_allocator : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = uninit_allocator<U>;
    };
    template <class U>
    void construct(U*) noexcept {}
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

using ScratchBuf = std::vector<float, uninit_allocator<float>>;

inline int max_threads() {
    static int cached = [] {
        if (const char* env = std::getenv("B2F_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
        int hw = int(std::thread::hardware_concurrency());
        return hw > 0 ? hw : 1;
    }();
    return cached;
}

// Applies the thread cap to OpenBLAS and OpenMP. Called once by entry points.
inline void init_threading() {
    int t = max_threads();
    openblas_set_num_threads(t);
#if defined(_OPENMP)
    omp_set_num_threads(t);
#endif
#if defined(__GLIBC__)
    // activation buffers are large and short-lived; keep them on the heap
    // free lists instead of round-tripping through mmap each op
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace b2f
