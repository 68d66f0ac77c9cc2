#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace voxalign::rng {

// splitmix64 finalizer; bijective on uint64, so distinct inputs give distinct outputs.
constexpr uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

constexpr uint64_t mix(uint64_t a, uint64_t b) { return mix(a ^ mix(b)); }
constexpr uint64_t mix(uint64_t a, uint64_t b, uint64_t c) { return mix(mix(a, b) ^ mix(c)); }

constexpr uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

// Deterministic splitmix64 stream. All sampling in the project goes through this
// class so results are identical across platforms and standard libraries.
class Stream {
public:
    explicit Stream(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 bits of precision.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Inclusive on both ends.
    int64_t uniform_int(int64_t lo, int64_t hi);

    // Box-Muller, cosine branch only; two uniforms per draw.
    double normal(double mean = 0.0, double stddev = 1.0);

    // Resamples until the standardized draw lies within [lo_sd, hi_sd].
    double truncated_normal(double mean, double stddev, double lo_sd = -2.0, double hi_sd = 2.0);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
};

}  // namespace voxalign::rng
