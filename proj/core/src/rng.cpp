#include "voxalign/rng.hpp"

#include <cmath>

#include "voxalign/errors.hpp"

namespace voxalign::rng {

int64_t Stream::uniform_int(int64_t lo, int64_t hi) {
    if (hi < lo) throw InvalidArgument("uniform_int: hi < lo");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<int64_t>(next_u64());  // full range
    // Rejection sampling to avoid modulo bias; loop terminates with prob > 1/2 per draw.
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return lo + static_cast<int64_t>(x % span);
}

double Stream::normal(double mean, double stddev) {
    double u1 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    double u2 = next_double();
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    return mean + stddev * z;
}

double Stream::truncated_normal(double mean, double stddev, double lo_sd, double hi_sd) {
    for (;;) {
        double z = normal(0.0, 1.0);
        if (z >= lo_sd && z <= hi_sd) return mean + stddev * z;
    }
}

}  // namespace voxalign::rng
