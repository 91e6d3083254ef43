#pragma once

#include <optional>
#include <string>
#include <vector>

#include "opmatch/operators.hpp"
#include "opmatch/tensor.hpp"

namespace opmatch::data {

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Image files hold [C,H,W] tensors mapped linearly to [-1,1] (0 -> -1,
// max -> +1); sRGB values are taken as-is. 8/16-bit gray or RGB PNG, or
// binary PGM (P5), chosen by extension.
Tensor load_image(const std::string& path);
void save_image(const std::string& path, const Tensor& img, int bit_depth = 8);

struct PatchBatch {
    Tensor pixels;                 // [B,C,p,p] in [-1,1]
    std::optional<Tensor> coords;  // [B,2] normalized patch centers in [-1,1]
    std::vector<int64_t> source_ids;
};

// Raster-order sliding-window patches. Centers are normalized over the full
// source image frame.
PatchBatch extract_patches(const Tensor& img, int64_t size, int64_t stride,
                           bool with_coords, int64_t source_id = 0);

// Per-pixel positional-encoding channels [B,2,p,p]: linear ramps of the
// normalized image coordinates across each patch.
Tensor coord_channels(const Tensor& coords, int64_t patch, int64_t image_h,
                      int64_t image_w);

// Replaces a fraction of the coordinate rows with uniform random positions
// (conditioning dropout during prior training).
Tensor dropout_coords(const Tensor& coords, double frac, Rng& rng);

// Random-walk motion-blur kernel: sub-pixel bilinear splatting, Gaussian
// smoothing (0.3 px), normalized to sum 1 and recentered so the center of
// mass sits on the geometric center. steps=0 gives a dirac.
Tensor random_motion_kernel(int64_t size, int64_t steps, Rng& rng);

// Synthetic grayscale texture [1,h,w]: smoothed Gaussian random field plus
// random rectangles/disks whose edges carry phase information.
Tensor synth_texture(int64_t h, int64_t w, Rng& rng);

struct CorpusSpec {
    std::vector<std::string> clean_sources;
    std::vector<std::string> corrupted_sources;  // must be disjoint from clean
    std::string out_dir;
    int64_t patch_size = 32;
    int64_t stride = 32;
    uint64_t seed = 0;
};

// Applies the true operator to each corrupted source at full-image scale
// (so spatially-varying kernels imprint real positional structure), patches
// both splits, and writes tensors + manifest + the true operator to disk.
// Per-image noise streams derive from (seed, source index).
void generate_corpus(const CorpusSpec& spec, const op::ForwardOperator& truth);

struct Corpus {
    Tensor clean, clean_coords;          // [N,C,p,p], [N,2]
    Tensor corrupted, corrupted_coords;  // [M,C,p,p], [M,2]
    int64_t image_h = 0, image_w = 0;
    int64_t patch_size = 0;
    std::string true_op_prefix;  // pass to op::ForwardOperator::load
};

Corpus load_corpus(const std::string& dir);

}  // namespace opmatch::data
