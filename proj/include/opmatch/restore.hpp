#pragma once

#include "opmatch/operators.hpp"

namespace opmatch::restore {

struct RestoreError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Solver { Wiener, MapTv };

struct RestoreConfig {
    Solver solver = Solver::MapTv;
    double tv_weight = 1e-3;
    int64_t iterations = 200;
    double step_size = 1e-2;
    // < 0: use the operator's noise level. A small floor keeps the data
    // term finite for noise-free operators.
    double noise_sigma = -1.0;
};

// Frequency-domain Wiener deconvolution with circular boundary handling,
// per channel: X = conj(K) Y / (|K|^2 + sigma^2 / S), where the signal
// power S is the mean power spectrum of y clipped below 1e-6. kernel is
// [kh,kw], [1,kh,kw], or [C,kh,kw] (per-channel).
Tensor wiener(const Tensor& y, const Tensor& kernel, double sigma);

// Gradient descent with backtracking on
//   ||apply_noiseless(op, x) - y||^2 / (2 sigma^2) + tv_weight * TV_smooth(x)
// over a fixed iteration budget; the iterate is clipped to [-1,1] at the
// end. Handles every operator variant (x lives at scale-times the size of y
// for Downscale). coords: [1,2] patch center for KernelGrid.
Tensor map_tv(const Tensor& y, const op::ForwardOperator& o,
              const RestoreConfig& cfg, const Tensor* coords = nullptr);

// Restores overlapping tiles independently (KernelGrid tiles get their own
// center coordinate) and blends them with linear feathering across the
// overlap bands. Images smaller than the tile fall back to a single solve.
Tensor restore_tiles(const Tensor& y, const op::ForwardOperator& o,
                     const RestoreConfig& cfg, int64_t tile, int64_t overlap);

}  // namespace opmatch::restore
