#pragma once

#include <cstdint>
#include <random>

namespace opmatch {

// Deterministic RNG wrapper. All stochastic code paths take an explicit Rng
// so that a fixed seed reproduces runs bit-exactly in single-threaded mode.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    double normal() { return normal_(gen_); }
    double uniform() { return uniform_(gen_); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    int64_t randint(int64_t n) {
        std::uniform_int_distribution<int64_t> d(0, n - 1);
        return d(gen_);
    }
    // Derives an independent stream, e.g. one per source image.
    Rng fork(uint64_t salt) const {
        uint64_t s = seed_mix_ ^ (salt * 0x9e3779b97f4a7c15ULL + 0x243f6a8885a308d3ULL);
        return Rng(s);
    }
    uint64_t raw() { return gen_(); }

private:
    explicit Rng(uint64_t seed, int) : gen_(seed) {}
    std::mt19937_64 gen_;
    uint64_t seed_mix_ = gen_();
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace opmatch
