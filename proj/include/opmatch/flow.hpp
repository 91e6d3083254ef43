#pragma once

#include <functional>

#include "opmatch/nn.hpp"

namespace opmatch::flow {

// Clamp applied to flow times; avoids the 1/(1-t) singularity of the
// velocity-to-score map.
inline constexpr double kTimeClamp = 1e-3;

// Conditional flow-matching loss: mean over the batch of
// ||v(z_t, t, cond) - (z1 - z0)||^2 with z0 ~ N(0,I),
// z_t = (1-t) z0 + t z1, t ~ U(delta, 1-delta) per sample.
// Differentiable w.r.t. the model parameters and w.r.t. z1.
Tensor cfm_loss(const VelocityField& model, const Tensor& z1,
                const Tensor* cond, Rng& rng, double delta = kTimeClamp);

// Variant with caller-supplied t and z0 (used by tests and by the
// degenerate-pairing example where z1 = z0 is forced).
Tensor cfm_loss_at(const VelocityField& model, const Tensor& z1,
                   const Tensor& z0, const Tensor& t, const Tensor* cond);

// Euler integration of dz = v(z,t) dt from t=0 (z ~ N(0,I)) to t=1.
// zshape is the full batch shape including the leading sample count.
Tensor sample(const VelocityField& model, const Shape& zshape, int64_t steps,
              const Tensor* cond, Rng& rng);

// Same integrator over an arbitrary velocity field (used by tests and the
// analytic-Gaussian checks).
using FieldFn = std::function<Tensor(const Tensor& z, double t)>;
Tensor sample_field(const FieldFn& v, const Shape& zshape, int64_t steps,
                    Rng& rng);

// Marginal score of the linear-interpolation path with standard-normal
// base: s(z,t) = (t v(z,t) - z) / (1 - t). t is clamped to
// [delta, 1-delta]; out-of-range inputs are clamped and counted.
Tensor score_from_velocity(const VelocityField& model, const Tensor& z,
                           double t, const Tensor* cond,
                           double delta = kTimeClamp);
// Same from a precomputed velocity value.
Tensor score_from_velocity_values(const Tensor& v, const Tensor& z, double t,
                                  double delta = kTimeClamp);
int64_t score_clamp_events();  // diagnostic counter

// ema <- decay * ema + (1 - decay) * params
void ema_update(VelocityField& model, double decay);

}  // namespace opmatch::flow
