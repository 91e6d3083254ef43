#include "opmatch/nn.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "opmatch/io.hpp"

namespace opmatch {

void Adam::step(std::map<std::string, Tensor>& params) {
    ++t_;
    double c1 = 1.0 - std::pow(beta1, (double)t_);
    double c2 = 1.0 - std::pow(beta2, (double)t_);
    for (auto& [name, p] : params) {
        if (!p.requires_grad()) continue;
        auto& [m, v] = mv_[name];
        if (m.empty()) {
            m.assign((size_t)p.numel(), 0.0);
            v.assign((size_t)p.numel(), 0.0);
        }
        const auto& g = p.grad();
        auto& val = p.mutable_data();
        for (size_t i = 0; i < val.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            val[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
        p.zero_grad();
    }
}

namespace flow {

std::string ArchDescriptor::to_json() const {
    nlohmann::json j;
    j["kind"] = kind == ArchKind::ConvResnet ? "conv_resnet" : "mlp";
    j["data_channels"] = data_channels;
    j["cond_channels"] = cond_channels;
    j["hidden"] = hidden;
    j["depth"] = depth;
    j["kernel_size"] = kernel_size;
    j["time_embed"] = time_embed;
    return j.dump(2);
}

ArchDescriptor ArchDescriptor::from_json(const std::string& text) {
    auto j = nlohmann::json::parse(text);
    ArchDescriptor a;
    a.kind = j.at("kind") == "mlp" ? ArchKind::Mlp : ArchKind::ConvResnet;
    a.data_channels = j.at("data_channels");
    a.cond_channels = j.at("cond_channels");
    a.hidden = j.at("hidden");
    a.depth = j.at("depth");
    a.kernel_size = j.at("kernel_size");
    a.time_embed = j.at("time_embed");
    return a;
}

Tensor time_features(const Tensor& t, int64_t dim) {
    int64_t B = t.dim(0), half = dim / 2;
    std::vector<double> v((size_t)(B * dim));
    for (int64_t i = 0; i < B; ++i) {
        double tv = t.data()[i];
        for (int64_t j = 0; j < half; ++j) {
            double omega =
                half > 1 ? std::pow(1000.0, (double)j / (double)(half - 1)) : 1.0;
            v[i * dim + 2 * j] = std::sin(omega * tv);
            v[i * dim + 2 * j + 1] = std::cos(omega * tv);
        }
    }
    return Tensor::from_data({B, dim}, std::move(v));
}

namespace {

Tensor he_init(const Shape& s, int64_t fan_in, Rng& rng, double gain = 1.0) {
    Tensor t = Tensor::randn(s, rng);
    double scale = gain * std::sqrt(2.0 / (double)fan_in);
    for (auto& x : t.mutable_data()) x *= scale;
    return t;
}

}  // namespace

VelocityField VelocityField::init(const ArchDescriptor& arch, Rng& rng) {
    VelocityField vf;
    vf.arch = arch;
    auto& p = vf.params;
    int64_t h = arch.hidden, e = arch.time_embed, k = arch.kernel_size;
    if (arch.kind == ArchKind::ConvResnet) {
        int64_t cin = arch.data_channels + arch.cond_channels;
        p["conv_in.w"] = he_init({h, cin, k, k}, cin * k * k, rng);
        p["conv_in.b"] = Tensor::zeros({h});
        for (int64_t i = 0; i < arch.depth; ++i) {
            std::string pre = "block" + std::to_string(i) + ".";
            p[pre + "time.w"] = he_init({h, e}, e, rng, 0.2);
            p[pre + "time.b"] = Tensor::zeros({h});
            // residual branches start small so the initial map is near zero
            p[pre + "conv.w"] = he_init({h, h, k, k}, h * k * k, rng, 0.2);
            p[pre + "conv.b"] = Tensor::zeros({h});
        }
        p["conv_out.w"] = Tensor::zeros({arch.data_channels, h, k, k});
        p["conv_out.b"] = Tensor::zeros({arch.data_channels});
    } else {
        int64_t d = arch.data_channels + arch.cond_channels;
        p["lin_in.w"] = he_init({h, d + e}, d + e, rng);
        p["lin_in.b"] = Tensor::zeros({h});
        for (int64_t i = 0; i < arch.depth; ++i) {
            std::string pre = "lin" + std::to_string(i) + ".";
            p[pre + "w"] = he_init({h, h}, h, rng);
            p[pre + "b"] = Tensor::zeros({h});
        }
        p["lin_out.w"] = Tensor::zeros({arch.data_channels, h});
        p["lin_out.b"] = Tensor::zeros({arch.data_channels});
    }
    for (const auto& [name, t] : p) vf.ema[name] = t.data();
    return vf;
}

Tensor VelocityField::forward(const Tensor& z, const Tensor& t,
                              const Tensor* cond) const {
    if (t.rank() != 1 || t.dim(0) != z.dim(0))
        throw TensorError("VelocityField: t must be [B] matching the batch");
    Tensor emb = time_features(t, arch.time_embed);
    auto P = [&](const std::string& n) -> const Tensor& {
        auto it = params.find(n);
        if (it == params.end()) throw TensorError("missing parameter " + n);
        return it->second;
    };
    if (arch.kind == ArchKind::ConvResnet) {
        if ((cond != nullptr) != (arch.cond_channels > 0) ||
            (cond && cond->dim(1) != arch.cond_channels))
            throw TensorError(
                "VelocityField: conditioning channels do not match arch (" +
                std::to_string(arch.cond_channels) + " expected)");
        Tensor x = cond ? concat_channels(z, *cond) : z;
        Tensor h = bias_channels(conv2d(x, P("conv_in.w"), PaddingMode::Zero),
                                 P("conv_in.b"));
        for (int64_t i = 0; i < arch.depth; ++i) {
            std::string pre = "block" + std::to_string(i) + ".";
            Tensor tb = linear(emb, P(pre + "time.w"), P(pre + "time.b"));
            Tensor u = silu(bias_channels(h, tb));
            h = add(h, bias_channels(conv2d(u, P(pre + "conv.w"), PaddingMode::Zero),
                                     P(pre + "conv.b")));
        }
        return bias_channels(
            conv2d(silu(h), P("conv_out.w"), PaddingMode::Zero),
            P("conv_out.b"));
    }
    // MLP path for [B,D] vectors
    if ((cond != nullptr) != (arch.cond_channels > 0))
        throw TensorError("VelocityField: conditioning mismatch");
    int64_t B = z.dim(0);
    Tensor zi = reshape(z, {B, z.numel() / B, 1, 1});
    Tensor ei = reshape(emb, {B, arch.time_embed, 1, 1});
    Tensor x4 = concat_channels(zi, ei);
    if (cond) x4 = concat_channels(x4, reshape(*cond, {B, cond->numel() / B, 1, 1}));
    Tensor x = reshape(x4, {B, x4.numel() / B});
    Tensor h = silu(linear(x, P("lin_in.w"), P("lin_in.b")));
    for (int64_t i = 0; i < arch.depth; ++i) {
        std::string pre = "lin" + std::to_string(i) + ".";
        h = silu(linear(h, P(pre + "w"), P(pre + "b")));
    }
    return linear(h, P("lin_out.w"), P("lin_out.b"));
}

void VelocityField::set_trainable(bool b) {
    for (auto& [name, t] : params) t.set_requires_grad(b);
}

VelocityField VelocityField::clone() const {
    VelocityField out;
    out.arch = arch;
    out.seed = seed;
    for (const auto& [name, t] : params) out.params[name] = t.detach();
    out.ema = ema;
    return out;
}

VelocityField VelocityField::with_ema_weights() const {
    VelocityField out = clone();
    for (auto& [name, t] : out.params) {
        auto it = ema.find(name);
        if (it != ema.end()) t.mutable_data() = it->second;
    }
    return out;
}

void VelocityField::save(const std::string& prefix) const {
    std::map<std::string, Tensor> all;
    for (const auto& [name, t] : params) all[name] = t;
    for (const auto& [name, v] : ema) {
        auto shape = params.at(name).shape();
        all["ema." + name] = Tensor::from_data(shape, v);
    }
    io::save_archive(prefix + ".opma", all);
    std::ofstream js(prefix + ".json");
    js << arch.to_json() << "\n";
}

VelocityField VelocityField::load(const std::string& prefix) {
    std::ifstream js(prefix + ".json");
    if (!js) throw io::IoError(prefix + ".json: cannot open");
    std::string text((std::istreambuf_iterator<char>(js)),
                     std::istreambuf_iterator<char>());
    VelocityField vf;
    vf.arch = ArchDescriptor::from_json(text);
    for (auto& [name, t] : io::load_archive(prefix + ".opma")) {
        if (name.rfind("ema.", 0) == 0)
            vf.ema[name.substr(4)] = t.data();
        else
            vf.params[name] = t;
    }
    return vf;
}

}  // namespace flow
}  // namespace opmatch
