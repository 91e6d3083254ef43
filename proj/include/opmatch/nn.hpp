#pragma once

#include <map>
#include <string>

#include "opmatch/tensor.hpp"

namespace opmatch {

// Adam over a named parameter set. step() consumes and clears the grads.
struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void step(std::map<std::string, Tensor>& params);

private:
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> mv_;
    int64_t t_ = 0;
};

namespace flow {

enum class ArchKind { ConvResnet, Mlp };

// Small velocity-net description: a convolutional residual net with a
// sinusoidal time embedding added as a per-layer channel bias, or an MLP
// for low-dimensional vector data.
struct ArchDescriptor {
    ArchKind kind = ArchKind::ConvResnet;
    int64_t data_channels = 1;  // image channels (conv) or vector dim (mlp)
    int64_t cond_channels = 0;
    int64_t hidden = 32;
    int64_t depth = 3;  // residual blocks / hidden layers
    int64_t kernel_size = 3;
    int64_t time_embed = 16;  // sinusoidal feature count, even

    std::string to_json() const;
    static ArchDescriptor from_json(const std::string& text);
};

// Sinusoidal features of t in [0,1]: [B, dim] constant tensor.
Tensor time_features(const Tensor& t, int64_t dim);

struct VelocityField {
    ArchDescriptor arch;
    std::map<std::string, Tensor> params;
    std::map<std::string, std::vector<double>> ema;  // shadow weights
    uint64_t seed = 0;

    static VelocityField init(const ArchDescriptor& arch, Rng& rng);

    // z: [B,C,H,W] (conv) or [B,D] (mlp); t: [B]; cond: optional,
    // [B,K,H,W] (conv) or [B,K] (mlp).
    Tensor forward(const Tensor& z, const Tensor& t,
                   const Tensor* cond = nullptr) const;

    void set_trainable(bool b);
    VelocityField clone() const;              // deep copy, params detached
    VelocityField with_ema_weights() const;   // params replaced by EMA values

    // Writes <prefix>.opma (params + ema) and <prefix>.json (arch).
    void save(const std::string& prefix) const;
    static VelocityField load(const std::string& prefix);
};

}  // namespace flow
}  // namespace opmatch
