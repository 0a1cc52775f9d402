#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace uap {

// Deterministic random source. The mt19937_64 engine is fully specified by the
// standard; the distributions here are hand-rolled because the std::*_distribution
// classes are implementation-defined and would break cross-toolchain reproducibility.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1) with 53 bits of precision
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // unbiased integer in [0, n), rejection sampled
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    bool bernoulli(double p) { return uniform01() < p; }

    // standard normal via Marsaglia polar method
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = uniform(-1.0, 1.0);
            v = uniform(-1.0, 1.0);
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        have_spare_ = true;
        return u * m;
    }

    // Fisher-Yates permutation of 0..n-1
    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        shuffle(idx);
        return idx;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // unit vector uniform on the d-sphere
    std::vector<double> unit_vector(std::size_t d) {
        std::vector<double> v(d);
        double norm2 = 0.0;
        do {
            norm2 = 0.0;
            for (auto& x : v) {
                x = normal();
                norm2 += x * x;
            }
        } while (norm2 == 0.0);
        const double inv = 1.0 / std::sqrt(norm2);
        for (auto& x : v) x *= inv;
        return v;
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace uap
