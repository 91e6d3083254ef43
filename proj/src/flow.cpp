#include "opmatch/flow.hpp"

#include <cmath>

namespace opmatch::flow {

namespace {
int64_t g_clamp_events = 0;
}

Tensor cfm_loss_at(const VelocityField& model, const Tensor& z1,
                   const Tensor& z0, const Tensor& t, const Tensor* cond) {
    int64_t B = z1.dim(0);
    if (z0.shape() != z1.shape())
        throw TensorError("cfm_loss: z0/z1 shape mismatch");
    std::vector<double> omt((size_t)B);
    for (int64_t i = 0; i < B; ++i) omt[i] = 1.0 - t.data()[i];
    Tensor zt = add(scale_rows(z0, Tensor::from_data({B}, std::move(omt))),
                    scale_rows(z1, t));
    Tensor v = model.forward(zt, t, cond);
    Tensor target = sub(z1, z0);
    return mean(square(sub(v, target)));
}

Tensor cfm_loss(const VelocityField& model, const Tensor& z1,
                const Tensor* cond, Rng& rng, double delta) {
    int64_t B = z1.dim(0);
    std::vector<double> tv((size_t)B);
    for (auto& x : tv) x = rng.uniform(delta, 1.0 - delta);
    Tensor t = Tensor::from_data({B}, std::move(tv));
    Tensor z0 = Tensor::randn(z1.shape(), rng);
    return cfm_loss_at(model, z1, z0, t, cond);
}

Tensor sample_field(const FieldFn& v, const Shape& zshape, int64_t steps,
                    Rng& rng) {
    if (steps < 1) throw TensorError("sample: steps must be >= 1");
    Tensor z = Tensor::randn(zshape, rng);
    double dt = 1.0 / (double)steps;
    for (int64_t s = 0; s < steps; ++s)
        z = add(z, scalar_mul(v(z, s * dt), dt));
    return z;
}

Tensor sample(const VelocityField& model, const Shape& zshape, int64_t steps,
              const Tensor* cond, Rng& rng) {
    // Evaluate with detached weights so no tape is built while integrating.
    VelocityField eval = model.clone();
    int64_t B = zshape.at(0);
    return sample_field(
        [&](const Tensor& z, double t) {
            return eval.forward(z, Tensor::full({B}, t), cond);
        },
        zshape, steps, rng);
}

Tensor score_from_velocity_values(const Tensor& v, const Tensor& z, double t,
                                  double delta) {
    if (t < 0.0 || t > 1.0 - delta) {
        ++g_clamp_events;
        t = std::clamp(t, 0.0, 1.0 - delta);
    }
    return scalar_mul(sub(scalar_mul(v, t), z), 1.0 / (1.0 - t));
}

Tensor score_from_velocity(const VelocityField& model, const Tensor& z,
                           double t, const Tensor* cond, double delta) {
    // The map is regular at t=0 (it reduces to -z); only the upper end
    // needs the clamp.
    double tc = t;
    if (tc < 0.0 || tc > 1.0 - delta) {
        ++g_clamp_events;
        tc = std::clamp(tc, 0.0, 1.0 - delta);
    }
    Tensor tb = Tensor::full({z.dim(0)}, tc);
    Tensor v = model.forward(z, tb, cond);
    return scalar_mul(sub(scalar_mul(v, tc), z), 1.0 / (1.0 - tc));
}

int64_t score_clamp_events() { return g_clamp_events; }

void ema_update(VelocityField& model, double decay) {
    if (!(decay >= 0.0 && decay <= 1.0))
        throw TensorError("ema_update: decay must lie in [0,1]");
    for (auto& [name, shadow] : model.ema) {
        const auto& val = model.params.at(name).data();
        for (size_t i = 0; i < shadow.size(); ++i)
            shadow[i] = decay * shadow[i] + (1.0 - decay) * val[i];
    }
}

}  // namespace opmatch::flow
