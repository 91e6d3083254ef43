#pragma once

#include <functional>
#include <optional>
#include <string>

#include "opmatch/flow.hpp"
#include "opmatch/operators.hpp"

namespace opmatch::dm {

struct DistmatchError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct PriorConfig {
    flow::ArchDescriptor arch;
    int64_t steps = 2000;
    int64_t batch = 64;
    double lr = 1e-4;
    double ema_decay = 0.995;
    double coord_dropout = 0.2;        // fraction of coords replaced at random
    int64_t image_h = 0, image_w = 0;  // frame for coordinate channels
    uint64_t seed = 0;
};

// Teacher CFM on a patch set. Returns the EMA-weighted model (shadow kept).
// loss_out, if given, receives the per-step losses.
flow::VelocityField train_prior(const Tensor& patches, const Tensor* coords,
                                const PriorConfig& cfg,
                                std::vector<double>* loss_out = nullptr);

struct MatchConfig {
    double lr_operator = 1e-3;
    // > 0: anneal the operator step size linearly from lr_operator down to
    // this value over the run; the Monte-Carlo gradient keeps a noise floor,
    // so a constant step leaves the kernel jittering around the optimum.
    double lr_operator_final = 0;
    double lr_aux = 1e-5;
    int64_t batch = 32;
    int64_t aux_steps_per_op_step = 1;
    int64_t total_op_steps = 500;
    double w_center = 0, w_sparsity = 0, w_gaussian = 0, w_sum_to_one = 0;
    double t_clamp = 1e-3;
    // Pixels cropped from each border of the operator output before the
    // flows compare distributions. apply() pads patch borders, so border
    // pixels of A_w(x) carry statistics the full-image-corrupted teacher
    // data never has; cropping to the valid interior removes that bias.
    // The teacher must be trained on patches of the cropped size.
    int64_t valid_crop = 0;
    // "velocity": integrand (v_phi - v_theta); "eq4": literal score
    // difference, the time weighting that matches the plain integrated KL.
    enum class TimeWeight { Velocity, Eq4 } time_weight = TimeWeight::Velocity;
    uint64_t seed = 0;
    // > 0: average the time integral over Gauss-Legendre nodes instead of
    // sampling t uniformly (used by the closed-form cross-checks).
    int64_t quadrature_t = 0;
    int64_t mc_per_sample = 1;  // (y0, noise) draws per clean sample
    std::string csv_path;       // per-step log, empty = off
    std::string kernel_png_dir;  // snapshot dir, empty = off
    int64_t snapshot_every = 0;
    int64_t image_h = 0, image_w = 0;  // frame for coordinate channels
};

struct MatchState {
    flow::VelocityField teacher;  // frozen
    flow::VelocityField aux;
    op::ForwardOperator oper;
    int64_t step = 0;
    std::vector<double> loss_history;  // aux cfm loss per op step
};

// Injectable closed-form score/velocity pair for the oracle cross-checks.
// Each maps (y values [B,...], per-sample t [B]) to values of the same
// shape as y; in eq4 mode they must return scores, in velocity mode
// velocities.
struct ScoreOracle {
    std::function<Tensor(const Tensor&, const Tensor&)> teacher;
    std::function<Tensor(const Tensor&, const Tensor&)> aux;
};

// Monte-Carlo estimate of d/dw of the time-integrated KL between the
// operator-induced flow and the teacher's flow, accumulated into the grad
// buffers of state.oper's parameters (zeroed first) and also returned by
// name. The integrand difference is evaluated with frozen networks; only
// the path y_t = (1-t) y0 + t (A_w x + sigma u) carries gradient.
std::map<std::string, std::vector<double>> ikl_op_gradient(
    MatchState& state, const Tensor& x, const Tensor* coords,
    const MatchConfig& cfg, Rng& rng, const ScoreOracle* oracle = nullptr);

struct MatchInputs {
    const flow::VelocityField* teacher = nullptr;
    Tensor clean;                        // [N,C,p,p]
    std::optional<Tensor> clean_coords;  // [N,2]
};

// Step-2 alternation: aux CFM updates on apply(op, x) batches, then one
// operator update along the integrated-KL gradient plus weighted
// regularizer gradients. Throws DistmatchError on NaN (after writing a
// diagnostic snapshot next to csv_path if one is configured).
MatchState match(const MatchInputs& in, op::ForwardOperator op_init,
                 const MatchConfig& cfg);

// Blur-kernel estimation from a single low-resolution image via the
// twice-downscale trick: the teacher learns the image's own patch
// distribution and the operator must reproduce it from s-times-larger
// patches of the same image.
MatchState match_sr(const Tensor& image, int64_t scale, int64_t ksize,
                    int64_t patch, const PriorConfig& pcfg,
                    const MatchConfig& cfg);

}  // namespace opmatch::dm
