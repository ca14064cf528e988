#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "ntk/tensor.hpp"

namespace ntk {

// Deterministic generator: mt19937_64 bit stream with a hand-rolled
// Box-Muller transform so that drawn values are identical across standard
// library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    Tensor gaussian_tensor(const Shape& shape, double stddev = 1.0) {
        Tensor t(shape);
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            t.at(i) = stddev * gaussian();
        }
        return t;
    }

    Tensor uniform_tensor(const Shape& shape, double lo, double hi) {
        Tensor t(shape);
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            t.at(i) = lo + (hi - lo) * uniform();
        }
        return t;
    }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace ntk
