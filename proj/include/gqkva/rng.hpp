#pragma once

#include <cstdint>
#include <cmath>
#include <vector>

namespace gqkva {

// Deterministic splitmix64 generator. Not std::mt19937 on purpose: the
// standard distributions are implementation-defined, and seeds must produce
// identical streams everywhere.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int64_t uniform_int(int64_t n) {  // [0, n)
        return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
    }

    // Standard normal via Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Normal(0, std_dev) resampled until within +-2 std_dev.
    double trunc_normal(double std_dev) {
        double z = normal();
        while (std::fabs(z) > 2.0) z = normal();
        return z * std_dev;
    }

    // Fisher-Yates permutation of 0..n-1.
    std::vector<int64_t> permutation(int64_t n) {
        std::vector<int64_t> p(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
        for (int64_t i = n - 1; i > 0; --i) {
            int64_t j = uniform_int(i + 1);
            std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(j)]);
        }
        return p;
    }

private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace gqkva
