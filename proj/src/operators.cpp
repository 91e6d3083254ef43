#include "opmatch/operators.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "opmatch/data.hpp"
#include "opmatch/io.hpp"

namespace opmatch::op {

namespace {

void check(bool ok, const std::string& msg) {
    if (!ok) throw TensorError(msg);
}

double inv_softplus(double s) {
    // softplus(x) = log(1+e^x); inverse for s > 0
    s = std::max(s, 1e-8);
    return s > 30.0 ? s : std::log(std::expm1(s));
}

Tensor normalize_one(const Tensor& raw) {
    Tensor a = abs(raw);
    Tensor s = sum(a);
    // only regularize a (near-)zero mass; exact sums divide exactly
    if (s.item() < 1e-12) s = add_scalar(s, 1e-12);
    return div_by_scalar_tensor(a, s);
}

// Dirac raw kernel [C,k,k], optionally sitting on a constant floor.
Tensor dirac_raw(int64_t C, int64_t k, double soft = 0.0) {
    Tensor t = Tensor::full({C, k, k}, soft);
    for (int64_t c = 0; c < C; ++c)
        t.mutable_data()[(size_t)(c * k * k + (k / 2) * k + (k / 2))] = 1.0;
    return t;
}

// Hat-function weight of grid line i (of n lines spanning [0, extent-1])
// at pixel position p: the 1-d linear-interpolation weight.
double hat_weight(int64_t i, int64_t n, int64_t extent, double p) {
    if (n <= 1) return 1.0;
    double spacing = (double)(extent - 1) / (double)(n - 1);
    double node = (double)i * spacing;
    double u = std::clamp(p, 0.0, (double)(extent - 1));
    return std::max(0.0, 1.0 - std::abs(u - node) / spacing);
}

Tensor grid_node_kernel(const ForwardOperator& o, int64_t i, int64_t j) {
    const Tensor& g = o.params.at("grid");
    int64_t C = g.dim(2), kh = g.dim(3), kw = g.dim(4);
    Tensor flat = reshape(g, {o.grid_rows * o.grid_cols, C, kh, kw});
    Tensor raw = reshape(slice_dim0(flat, i * o.grid_cols + j, 1), {C, kh, kw});
    return normalize_kernel(raw, o.normalization);
}

// Collapse the bias-free conv stack to its impulse response [1,15,15].
Tensor collapse_conv_net(const ForwardOperator& o) {
    int64_t rf = 15;
    Tensor d = Tensor::zeros({1, 1, rf, rf});
    d.mutable_data()[(size_t)((rf / 2) * rf + rf / 2)] = 1.0;
    Tensor h = d;
    for (int layer = 0; layer < 4; ++layer)
        h = conv2d(h, o.params.at("layer" + std::to_string(layer)),
                   PaddingMode::Zero);
    return reshape(h, {1, rf, rf});
}

}  // namespace

Tensor normalize_kernel(const Tensor& raw, Normalization norm) {
    if (norm != Normalization::HardSumToOne) return raw;
    check(raw.rank() == 2 || raw.rank() == 3,
          "normalize_kernel: expected [kh,kw] or [C,kh,kw]");
    if (raw.rank() == 2 || raw.dim(0) == 1) return normalize_one(raw);
    // per-channel sums
    int64_t C = raw.dim(0), kh = raw.dim(1), kw = raw.dim(2);
    Tensor out;
    for (int64_t c = 0; c < C; ++c) {
        Tensor ch = reshape(normalize_one(slice_dim0(raw, c, 1)), {1, 1, kh, kw});
        out = c == 0 ? ch : concat_channels(out, ch);
    }
    return reshape(out, {C, kh, kw});
}

ForwardOperator ForwardOperator::uniform(Tensor raw_kernel, Normalization norm,
                                         double sigma, bool train_sigma) {
    check(raw_kernel.rank() == 3, "uniform: kernel must be [C,kh,kw]");
    ForwardOperator o;
    o.variant = Variant::UniformKernel;
    o.normalization = norm;
    o.channels = raw_kernel.dim(0);
    o.params["kernel"] = std::move(raw_kernel);
    o.noise_trainable = train_sigma;
    o.noise_sigma = sigma;
    if (train_sigma) o.params["noise_raw"] = Tensor::scalar(inv_softplus(sigma));
    return o;
}

ForwardOperator ForwardOperator::dirac_uniform(int64_t channels, int64_t ksize,
                                               Normalization norm, double sigma,
                                               bool train_sigma, double soft) {
    return uniform(dirac_raw(channels, ksize, soft), norm, sigma, train_sigma);
}

ForwardOperator ForwardOperator::kernel_grid(int64_t rows, int64_t cols,
                                             int64_t channels, int64_t ksize,
                                             int64_t image_h, int64_t image_w,
                                             Normalization norm, double sigma,
                                             bool train_sigma, double soft) {
    check(rows >= 1 && cols >= 1 && image_h >= 2 && image_w >= 2,
          "kernel_grid: bad geometry");
    ForwardOperator o;
    o.variant = Variant::KernelGrid;
    o.normalization = norm;
    o.channels = channels;
    o.grid_rows = rows;
    o.grid_cols = cols;
    o.image_h = image_h;
    o.image_w = image_w;
    Tensor g = Tensor::full({rows, cols, channels, ksize, ksize}, soft);
    for (int64_t n = 0; n < rows * cols * channels; ++n)
        g.mutable_data()[(size_t)(n * ksize * ksize + (ksize / 2) * ksize +
                                  ksize / 2)] = 1.0;
    o.params["grid"] = g;
    o.noise_trainable = train_sigma;
    o.noise_sigma = sigma;
    if (train_sigma) o.params["noise_raw"] = Tensor::scalar(inv_softplus(sigma));
    return o;
}

ForwardOperator ForwardOperator::linear_conv_net(double sigma, bool train_sigma) {
    ForwardOperator o;
    o.variant = Variant::LinearConvNet;
    o.normalization = Normalization::None;
    o.channels = 1;
    int64_t hidden = 64;
    int64_t sizes[4] = {7, 5, 5, 1};
    int64_t cin = 1;
    for (int layer = 0; layer < 4; ++layer) {
        int64_t cout = layer == 3 ? 1 : hidden;
        int64_t k = sizes[layer];
        Tensor w = Tensor::zeros({cout, cin, k, k});
        // identity init: channel 0 passes a centered dirac through the stack
        w.mutable_data()[(size_t)((k / 2) * k + k / 2)] = 1.0;
        o.params["layer" + std::to_string(layer)] = w;
        cin = cout;
    }
    o.noise_trainable = train_sigma;
    o.noise_sigma = sigma;
    if (train_sigma) o.params["noise_raw"] = Tensor::scalar(inv_softplus(sigma));
    return o;
}

ForwardOperator ForwardOperator::downscale(Tensor raw_kernel, int64_t s,
                                           Normalization norm, double sigma,
                                           bool train_sigma) {
    ForwardOperator o = uniform(std::move(raw_kernel), norm, sigma, train_sigma);
    o.variant = Variant::Downscale;
    check(s >= 1, "downscale: scale must be >= 1");
    o.scale = s;
    return o;
}

Tensor ForwardOperator::sigma() const {
    if (noise_trainable) return softplus(params.at("noise_raw"));
    return Tensor::scalar(noise_sigma);
}

double ForwardOperator::sigma_value() const { return sigma().item(); }

void ForwardOperator::set_trainable(bool b) {
    for (auto& [name, t] : params)
        t.set_requires_grad(name == "noise_raw" ? (b && noise_trainable) : b);
}

ForwardOperator ForwardOperator::clone() const {
    ForwardOperator o = *this;
    o.params.clear();
    for (const auto& [name, t] : params) o.params[name] = t.detach();
    return o;
}

Tensor apply_noiseless(const ForwardOperator& o, const Tensor& x,
                       const Tensor* coords) {
    check(x.rank() == 4, "apply: x must be [B,C,H,W]");
    check(x.dim(1) == o.channels, "apply: channel count mismatch");
    switch (o.variant) {
        case Variant::UniformKernel:
            return conv2d_depthwise(
                x, normalize_kernel(o.params.at("kernel"), o.normalization),
                PaddingMode::Replicate);
        case Variant::Downscale: {
            check(x.dim(2) % o.scale == 0 && x.dim(3) % o.scale == 0,
                  "apply: downscale factor must divide the patch extent");
            Tensor y = conv2d_depthwise(
                x, normalize_kernel(o.params.at("kernel"), o.normalization),
                PaddingMode::Replicate);
            return subsample2d(y, o.scale);
        }
        case Variant::LinearConvNet: {
            // cross-correlating with the flipped impulse response equals
            // running the stack itself (up to boundary handling)
            Tensor h = collapse_conv_net(o);
            return conv2d_depthwise(x, flip2d(h), PaddingMode::Replicate);
        }
        case Variant::KernelGrid: {
            check(coords != nullptr,
                  "apply: KernelGrid needs patch coordinates");
            check(coords->rank() == 2 && coords->dim(0) == x.dim(0) &&
                      coords->dim(1) == 2,
                  "apply: coords must be [B,2]");
            int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
            Tensor out;
            bool first = true;
            for (int64_t i = 0; i < o.grid_rows; ++i) {
                for (int64_t j = 0; j < o.grid_cols; ++j) {
                    // per-pixel bilinear weight of this node, a constant mask
                    std::vector<double> m((size_t)(B * C * H * W));
                    double any = 0;
                    for (int64_t b = 0; b < B; ++b) {
                        // normalized center -> top-left pixel in image frame
                        double cr = (coords->data()[(size_t)(2 * b)] + 1.0) / 2.0 *
                                        (o.image_h - 1) -
                                    (H - 1) / 2.0;
                        double cc = (coords->data()[(size_t)(2 * b + 1)] + 1.0) /
                                        2.0 * (o.image_w - 1) -
                                    (W - 1) / 2.0;
                        for (int64_t y = 0; y < H; ++y) {
                            double wy = hat_weight(i, o.grid_rows, o.image_h,
                                                   cr + (double)y);
                            for (int64_t xq = 0; xq < W; ++xq) {
                                double w = wy * hat_weight(j, o.grid_cols,
                                                           o.image_w,
                                                           cc + (double)xq);
                                any += w;
                                for (int64_t c = 0; c < C; ++c)
                                    m[(size_t)(((b * C + c) * H + y) * W + xq)] = w;
                            }
                        }
                    }
                    if (any == 0.0) continue;
                    Tensor mask = Tensor::from_data({B, C, H, W}, std::move(m));
                    Tensor conv = conv2d_depthwise(x, grid_node_kernel(o, i, j),
                                                   PaddingMode::Replicate);
                    Tensor term = mul(mask, conv);
                    out = first ? term : add(out, term);
                    first = false;
                }
            }
            check(!first, "apply: no grid node received weight");
            return out;
        }
    }
    throw TensorError("apply: unknown variant");
}

Tensor apply(const ForwardOperator& o, const Tensor& x, Rng& rng,
             const Tensor* coords) {
    Tensor y = apply_noiseless(o, x, coords);
    if (!o.noise_trainable && o.noise_sigma == 0.0) return y;
    Tensor u = Tensor::randn(y.shape(), rng);
    return add(y, mul_by_scalar_tensor(u, o.sigma()));
}

Tensor interpolate_kernels(const ForwardOperator& o, double row, double col) {
    check(o.variant == Variant::KernelGrid,
          "interpolate_kernels: operator is not a kernel grid");
    Tensor out;
    bool first = true;
    for (int64_t i = 0; i < o.grid_rows; ++i) {
        double wy = hat_weight(i, o.grid_rows, o.image_h, row);
        if (wy == 0.0) continue;
        for (int64_t j = 0; j < o.grid_cols; ++j) {
            double w = wy * hat_weight(j, o.grid_cols, o.image_w, col);
            if (w == 0.0) continue;
            Tensor term = scalar_mul(grid_node_kernel(o, i, j), w);
            out = first ? term : add(out, term);
            first = false;
        }
    }
    check(!first, "interpolate_kernels: no weight");
    return out;
}

Tensor materialize_kernel(const ForwardOperator& o,
                          std::optional<std::pair<double, double>> at) {
    switch (o.variant) {
        case Variant::UniformKernel:
        case Variant::Downscale:
            return normalize_kernel(o.params.at("kernel"), o.normalization);
        case Variant::LinearConvNet:
            return collapse_conv_net(o);
        case Variant::KernelGrid:
            check(at.has_value(),
                  "materialize_kernel: KernelGrid needs a coordinate");
            return interpolate_kernels(o, at->first, at->second);
    }
    throw TensorError("materialize_kernel: unknown variant");
}

namespace {

// Constant index maps over the kernel's spatial extent, matching its shape.
std::pair<Tensor, Tensor> index_maps(const Shape& s) {
    int64_t kw = s.back(), kh = s[s.size() - 2];
    int64_t outer = shape_numel(s) / (kh * kw);
    std::vector<double> iy((size_t)(outer * kh * kw)), ix(iy.size());
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t y = 0; y < kh; ++y)
            for (int64_t x = 0; x < kw; ++x) {
                iy[(size_t)((o * kh + y) * kw + x)] = (double)y;
                ix[(size_t)((o * kh + y) * kw + x)] = (double)x;
            }
    return {Tensor::from_data(s, std::move(iy)),
            Tensor::from_data(s, std::move(ix))};
}

}  // namespace

Tensor reg_center(const Tensor& kernel) {
    check(kernel.rank() >= 2, "reg_center: need a spatial kernel");
    int64_t kw = kernel.dim(kernel.rank() - 1), kh = kernel.dim(kernel.rank() - 2);
    Tensor w = abs(kernel);
    double total = 0;
    for (double v : w.data()) total += v;
    if (total < 1e-12) return Tensor::scalar(0.0);
    auto [iy, ix] = index_maps(kernel.shape());
    Tensor s = sum(w);
    Tensor comy = div_by_scalar_tensor(sum(mul(w, iy)), s);
    Tensor comx = div_by_scalar_tensor(sum(mul(w, ix)), s);
    Tensor dy = add_scalar(comy, -(double)(kh - 1) / 2.0);
    Tensor dx = add_scalar(comx, -(double)(kw - 1) / 2.0);
    return add(square(dy), square(dx));
}

Tensor reg_sparsity(const Tensor& kernel) { return mean(abs(kernel)); }

Tensor reg_sum_to_one(const Tensor& kernel) {
    return square(add_scalar(sum(kernel), -1.0));
}

Tensor reg_gaussian(const Tensor& kernel) {
    check(kernel.rank() >= 2, "reg_gaussian: need a spatial kernel");
    int64_t kw = kernel.dim(kernel.rank() - 1), kh = kernel.dim(kernel.rank() - 2);
    int64_t outer = kernel.numel() / (kh * kw);
    // Moment-matched isotropic Gaussian target, computed from detached
    // values (the fit is re-done each evaluation, like an EM target).
    std::vector<double> target((size_t)kernel.numel(), 0.0);
    const double sigma_floor = 0.3;
    for (int64_t o = 0; o < outer; ++o) {
        const double* k = kernel.data().data() + o * kh * kw;
        double mass = 0, my = 0, mx = 0;
        for (int64_t y = 0; y < kh; ++y)
            for (int64_t x = 0; x < kw; ++x) {
                double v = std::abs(k[y * kw + x]);
                mass += v;
                my += v * (double)y;
                mx += v * (double)x;
            }
        if (mass < 1e-12) {
            my = (double)(kh - 1) / 2.0;
            mx = (double)(kw - 1) / 2.0;
        } else {
            my /= mass;
            mx /= mass;
        }
        double var = 0;
        if (mass >= 1e-12) {
            for (int64_t y = 0; y < kh; ++y)
                for (int64_t x = 0; x < kw; ++x) {
                    double v = std::abs(k[y * kw + x]) / mass;
                    double dy = (double)y - my, dx = (double)x - mx;
                    var += v * (dy * dy + dx * dx) / 2.0;
                }
        }
        double sig = std::max(std::sqrt(var), sigma_floor);
        double tsum = 0;
        for (int64_t y = 0; y < kh; ++y)
            for (int64_t x = 0; x < kw; ++x) {
                double dy = (double)y - my, dx = (double)x - mx;
                double g = std::exp(-(dy * dy + dx * dx) / (2.0 * sig * sig));
                target[(size_t)(o * kh * kw + y * kw + x)] = g;
                tsum += g;
            }
        for (int64_t p = 0; p < kh * kw; ++p)
            target[(size_t)(o * kh * kw + p)] /= tsum;
    }
    Tensor tgt = Tensor::from_data(kernel.shape(), std::move(target));
    return sum(square(sub(kernel, tgt)));
}

void save_kernels_png(const std::string& path,
                      const std::vector<Tensor>& kernels, int64_t cols) {
    check(!kernels.empty() && cols >= 1, "save_kernels_png: nothing to draw");
    int64_t kh = kernels[0].dim(kernels[0].rank() - 2);
    int64_t kw = kernels[0].dim(kernels[0].rank() - 1);
    int64_t rows = ((int64_t)kernels.size() + cols - 1) / cols;
    int64_t H = rows * kh + (rows - 1), W = cols * kw + (cols - 1);
    std::vector<double> img((size_t)(H * W), 1.0);  // separators white
    for (size_t n = 0; n < kernels.size(); ++n) {
        const auto& kd = kernels[n].data();
        double lo = kd[0], hi = kd[0];
        for (double v : kd) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        double span = hi - lo > 0 ? hi - lo : 1.0;
        int64_t r0 = ((int64_t)n / cols) * (kh + 1);
        int64_t c0 = ((int64_t)n % cols) * (kw + 1);
        for (int64_t y = 0; y < kh; ++y)
            for (int64_t x = 0; x < kw; ++x) {
                // channel 0 only for visualization
                double v = (kd[(size_t)(y * kw + x)] - lo) / span;
                img[(size_t)((r0 + y) * W + c0 + x)] = 2.0 * v - 1.0;
            }
    }
    data::save_image(path, Tensor::from_data({1, H, W}, std::move(img)), 8);
}

void ForwardOperator::save(const std::string& prefix) const {
    io::save_archive(prefix + ".opma", params);
    nlohmann::json j;
    const char* names[] = {"uniform_kernel", "kernel_grid", "linear_conv_net",
                           "downscale"};
    const char* norms[] = {"hard_sum_to_one", "soft_penalty", "none"};
    j["variant"] = names[(int)variant];
    j["normalization"] = norms[(int)normalization];
    j["noise_trainable"] = noise_trainable;
    j["noise_sigma"] = noise_sigma;
    j["channels"] = channels;
    j["scale"] = scale;
    j["grid_rows"] = grid_rows;
    j["grid_cols"] = grid_cols;
    j["image_h"] = image_h;
    j["image_w"] = image_w;
    std::ofstream f(prefix + ".json");
    f << j.dump(2) << "\n";
}

ForwardOperator ForwardOperator::load(const std::string& prefix) {
    std::ifstream f(prefix + ".json");
    if (!f) throw io::IoError(prefix + ".json: cannot open");
    nlohmann::json j = nlohmann::json::parse(f);
    ForwardOperator o;
    std::string v = j.at("variant");
    o.variant = v == "uniform_kernel"    ? Variant::UniformKernel
                : v == "kernel_grid"     ? Variant::KernelGrid
                : v == "linear_conv_net" ? Variant::LinearConvNet
                                         : Variant::Downscale;
    std::string n = j.at("normalization");
    o.normalization = n == "hard_sum_to_one" ? Normalization::HardSumToOne
                      : n == "soft_penalty"  ? Normalization::SoftPenalty
                                             : Normalization::None;
    o.noise_trainable = j.at("noise_trainable");
    o.noise_sigma = j.at("noise_sigma");
    o.channels = j.at("channels");
    o.scale = j.at("scale");
    o.grid_rows = j.at("grid_rows");
    o.grid_cols = j.at("grid_cols");
    o.image_h = j.at("image_h");
    o.image_w = j.at("image_w");
    o.params = io::load_archive(prefix + ".opma");
    return o;
}

}  // namespace opmatch::op
