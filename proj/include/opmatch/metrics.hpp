#pragma once

#include "opmatch/tensor.hpp"

namespace opmatch::metrics {

// Images are [C,H,W] in the [-1,1] convention, hence the default peak of 2.
// Identical inputs are capped at 99.0 dB.
double psnr(const Tensor& a, const Tensor& b, double peak = 2.0);

// PSNR on the BT.601 luma (0.299/0.587/0.114) of RGB inputs; plain psnr for
// single-channel inputs.
double y_psnr(const Tensor& a, const Tensor& b);

// Single-scale SSIM, 11x11 Gaussian window sigma=1.5, k1=0.01, k2=0.03,
// valid windows only, averaged over channels.
double ssim(const Tensor& a, const Tensor& b, double range = 2.0);

// Both kernels zero-padded onto a 25x25 canvas, integer-shifted so their
// centers of mass coincide with the canvas center, then PSNR with
// peak = max(k_true). Shift-blind by design.
double kernel_psnr(const Tensor& k_hat, const Tensor& k_true);

// Max Pearson correlation between the zero-padded kernels over integer 2-d
// shifts within +-radius, optionally also over the 180-degree flip of k_hat.
struct NccResult {
    double ncc = -1.0;
    int64_t dy = 0, dx = 0;
    bool flipped = false;
};
NccResult kernel_ncc(const Tensor& k_hat, const Tensor& k_true,
                     bool try_flip = true, int64_t radius = 5);

}  // namespace opmatch::metrics
