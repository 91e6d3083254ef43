#pragma once

#include <map>
#include <optional>
#include <string>

#include "opmatch/tensor.hpp"

namespace opmatch::op {

// Learnable degradation families. All of them reduce to "convolve with
// something, maybe subsample, add Gaussian noise"; they differ in how the
// kernel is parameterized.
enum class Variant { UniformKernel, KernelGrid, LinearConvNet, Downscale };

enum class Normalization { HardSumToOne, SoftPenalty, None };

struct ForwardOperator {
    Variant variant = Variant::UniformKernel;
    Normalization normalization = Normalization::HardSumToOne;
    // UniformKernel/Downscale: "kernel" raw [C,kh,kw].
    // KernelGrid: "grid" raw [Gy,Gx,C,kh,kw].
    // LinearConvNet: "layer0".."layer3" conv stacks, no bias.
    // Trainable noise: "noise_raw" scalar, sigma = softplus(noise_raw).
    std::map<std::string, Tensor> params;
    bool noise_trainable = false;
    double noise_sigma = 0.0;  // fixed sigma when not trainable
    int64_t channels = 1;
    int64_t scale = 1;  // Downscale factor
    int64_t grid_rows = 0, grid_cols = 0;  // KernelGrid geometry
    int64_t image_h = 0, image_w = 0;      // KernelGrid reference frame

    // Spatially uniform convolution with a raw [C,kh,kw] kernel.
    static ForwardOperator uniform(Tensor raw_kernel, Normalization norm,
                                   double sigma, bool train_sigma);
    // soft > 0 adds a constant floor to the raw dirac. An exact dirac under
    // abs + sum-to-one normalization is a stationary point of any kernel
    // gradient (zero subgradient off-center, scale-invariant center), so
    // learning runs must start from a softened one.
    static ForwardOperator dirac_uniform(int64_t channels, int64_t ksize,
                                         Normalization norm, double sigma,
                                         bool train_sigma, double soft = 0.0);
    // Per-location kernels on a grid over an image frame, dirac-initialized
    // (softened the same way when soft > 0).
    static ForwardOperator kernel_grid(int64_t rows, int64_t cols,
                                       int64_t channels, int64_t ksize,
                                       int64_t image_h, int64_t image_w,
                                       Normalization norm, double sigma,
                                       bool train_sigma, double soft = 0.0);
    // Bias-free linear conv stack, layer sizes (7,5,5,1) with 64 hidden
    // channels; identity-initialized so the collapsed kernel is a dirac.
    // Single-channel only; unnormalized by design.
    static ForwardOperator linear_conv_net(double sigma, bool train_sigma);
    // Convolve then keep the top-left sample of every s x s block.
    static ForwardOperator downscale(Tensor raw_kernel, int64_t s,
                                     Normalization norm, double sigma,
                                     bool train_sigma);

    Tensor sigma() const;  // scalar tensor, on the tape when trainable
    double sigma_value() const;
    void set_trainable(bool b);  // kernel params; noise_raw only if trainable
    ForwardOperator clone() const;  // detached deep copy

    void save(const std::string& prefix) const;  // <prefix>.opma + .json
    static ForwardOperator load(const std::string& prefix);
};

// abs then per-channel sum-to-one for HardSumToOne; raw values otherwise.
Tensor normalize_kernel(const Tensor& raw, Normalization norm);

// A_w(x) + sigma * u, u ~ N(0,I) drawn from rng, differentiable w.r.t. the
// operator parameters (noise enters reparameterized). KernelGrid needs
// coords: [B,2] top-left (row, col) of each patch in the image frame.
Tensor apply(const ForwardOperator& op, const Tensor& x, Rng& rng,
             const Tensor* coords = nullptr);
Tensor apply_noiseless(const ForwardOperator& op, const Tensor& x,
                       const Tensor* coords = nullptr);

// Explicit [C,kh,kw] kernel. KernelGrid requires a coordinate; LinearConvNet
// pushes a centered dirac through the stack (15x15 receptive field).
Tensor materialize_kernel(const ForwardOperator& op,
                          std::optional<std::pair<double, double>> at = {});

// Bilinear blend of the four nearest grid kernels at pixel (row, col),
// clamped to the image frame. Differentiable w.r.t. the grid.
Tensor interpolate_kernels(const ForwardOperator& op, double row, double col);

// Regularizers on a materialized kernel (rank 2 or 3, leading channel dim).
// All return scalar tensors on the tape.
Tensor reg_center(const Tensor& kernel);      // squared COM offset, px^2
Tensor reg_sparsity(const Tensor& kernel);    // mean |k|
Tensor reg_gaussian(const Tensor& kernel);    // distance to moment-matched Gaussian
Tensor reg_sum_to_one(const Tensor& kernel);  // (sum - 1)^2

// 8-bit PNG visualization: kernels min-max normalized per tile, laid out in
// a grid with 1-px separators.
void save_kernels_png(const std::string& path,
                      const std::vector<Tensor>& kernels, int64_t cols);

}  // namespace opmatch::op
