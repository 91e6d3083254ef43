#include "opmatch/restore.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <vector>

namespace opmatch::restore {

namespace {

void check(bool ok, const std::string& msg) {
    if (!ok) throw RestoreError(msg);
}

// r2c forward transform of an H x W real field. Output is the half-plane
// layout of FFTW, H x (W/2+1).
std::vector<std::complex<double>> fft2(const std::vector<double>& in,
                                       int64_t h, int64_t w) {
    int64_t wc = w / 2 + 1;
    std::vector<std::complex<double>> out((size_t)(h * wc));
    std::vector<double> buf = in;
    fftw_plan plan = fftw_plan_dft_r2c_2d(
        (int)h, (int)w, buf.data(),
        reinterpret_cast<fftw_complex*>(out.data()), FFTW_ESTIMATE);
    fftw_execute(plan);
    fftw_destroy_plan(plan);
    return out;
}

std::vector<double> ifft2(std::vector<std::complex<double>> in, int64_t h,
                          int64_t w) {
    std::vector<double> out((size_t)(h * w));
    fftw_plan plan = fftw_plan_dft_c2r_2d(
        (int)h, (int)w, reinterpret_cast<fftw_complex*>(in.data()),
        out.data(), FFTW_ESTIMATE);
    fftw_execute(plan);
    fftw_destroy_plan(plan);
    double norm = 1.0 / (double)(h * w);
    for (double& v : out) v *= norm;
    return out;
}

// Kernel embedded on the image grid with its center at the origin,
// wrapping circularly.
std::vector<double> embed_kernel(const double* k, int64_t kh, int64_t kw,
                                 int64_t h, int64_t w) {
    std::vector<double> field((size_t)(h * w), 0.0);
    int64_t cy = kh / 2, cx = kw / 2;
    for (int64_t y = 0; y < kh; ++y)
        for (int64_t x = 0; x < kw; ++x) {
            int64_t ty = ((y - cy) % h + h) % h;
            int64_t tx = ((x - cx) % w + w) % w;
            field[(size_t)(ty * w + tx)] += k[y * kw + x];
        }
    return field;
}

// Smoothed anisotropic total variation: sum over both axes of
// sqrt(diff^2 + 1e-6).
Tensor tv_smooth(const Tensor& x) {
    int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    Tensor x4 = reshape(x, {1, C, H, W});
    Tensor dx = sub(crop2d(x4, 0, 1, H, W - 1), crop2d(x4, 0, 0, H, W - 1));
    Tensor dy = sub(crop2d(x4, 1, 0, H - 1, W), crop2d(x4, 0, 0, H - 1, W));
    return add(sum(sqrt_eps(square(dx), 1e-6)),
               sum(sqrt_eps(square(dy), 1e-6)));
}

}  // namespace

Tensor wiener(const Tensor& y, const Tensor& kernel, double sigma) {
    check(y.rank() == 3, "wiener: image must be [C,H,W]");
    check(kernel.rank() == 2 || kernel.rank() == 3,
          "wiener: kernel must be [kh,kw] or [C,kh,kw]");
    int64_t C = y.dim(0), H = y.dim(1), W = y.dim(2);
    int64_t kC = kernel.rank() == 3 ? kernel.dim(0) : 1;
    int64_t kh = kernel.dim(kernel.rank() - 2), kw = kernel.dim(kernel.rank() - 1);
    check(kC == 1 || kC == C, "wiener: kernel channels mismatch");
    check(kh <= H && kw <= W, "wiener: kernel larger than the image");
    int64_t wc = W / 2 + 1;

    // per-frequency signal power: mean power spectrum over channels
    std::vector<double> power((size_t)(H * wc), 0.0);
    std::vector<std::vector<std::complex<double>>> yf((size_t)C);
    for (int64_t c = 0; c < C; ++c) {
        std::vector<double> ch(y.data().begin() + c * H * W,
                               y.data().begin() + (c + 1) * H * W);
        yf[(size_t)c] = fft2(ch, H, W);
        for (size_t i = 0; i < power.size(); ++i)
            power[i] += std::norm(yf[(size_t)c][i]) / (double)(H * W);
    }
    for (double& p : power) p = std::max(p / (double)C, 1e-6);

    Tensor out = Tensor::zeros(y.shape());
    for (int64_t c = 0; c < C; ++c) {
        const double* kd = kernel.data().data() + (kC == 1 ? 0 : c * kh * kw);
        auto kf = fft2(embed_kernel(kd, kh, kw, H, W), H, W);
        std::vector<std::complex<double>> xf((size_t)(H * wc));
        for (size_t i = 0; i < xf.size(); ++i) {
            double denom =
                std::norm(kf[i]) + sigma * sigma / power[i];
            xf[i] = denom > 1e-15
                        ? std::conj(kf[i]) * yf[(size_t)c][i] / denom
                        : std::complex<double>(0.0, 0.0);
        }
        auto ch = ifft2(std::move(xf), H, W);
        std::copy(ch.begin(), ch.end(),
                  out.mutable_data().begin() + c * H * W);
    }
    return out;
}

Tensor map_tv(const Tensor& y, const op::ForwardOperator& o,
              const RestoreConfig& cfg, const Tensor* coords) {
    check(y.rank() == 3, "map_tv: image must be [C,H,W]");
    check(cfg.tv_weight >= 0, "map_tv: tv_weight must be non-negative");
    check(cfg.step_size > 0, "map_tv: step_size must be positive");
    int64_t C = y.dim(0), H = y.dim(1), W = y.dim(2);
    int64_t s = std::max<int64_t>(1, o.scale);
    double sigma = cfg.noise_sigma >= 0 ? cfg.noise_sigma : o.sigma_value();
    double inv2s2 = 1.0 / (2.0 * std::max(sigma, 1e-3) * std::max(sigma, 1e-3));

    Tensor y4 = reshape(y, {1, C, H, W});
    Tensor x = s == 1 ? y.clone()
                      : reshape(interpolate_bilinear(y4, H * s, W * s),
                                {C, H * s, W * s});

    auto objective = [&](Tensor& xt) {
        Tensor xb = reshape(xt, {1, C, H * s, W * s});
        Tensor r = sub(op::apply_noiseless(o, xb, coords), y4);
        Tensor data = scalar_mul(sum(square(r)), inv2s2);
        if (cfg.tv_weight == 0) return data;
        return add(data, scalar_mul(tv_smooth(xt), cfg.tv_weight));
    };

    double step = cfg.step_size;
    const double step_cap = cfg.step_size * 16.0;
    Tensor best = x.clone();
    x.set_requires_grad(true);
    Tensor loss_t = objective(x);
    double loss = loss_t.item();
    double best_loss = loss;
    int bad_streak = 0;

    for (int64_t it = 0; it < cfg.iterations; ++it) {
        x.zero_grad();
        backward(loss_t);
        const auto& g = x.grad();
        bool accepted = false;
        for (int tries = 0; tries < 30; ++tries) {
            Tensor cand = Tensor::zeros(x.shape());
            for (int64_t i = 0; i < x.numel(); ++i)
                cand.mutable_data()[(size_t)i] =
                    x.data()[(size_t)i] - step * g[(size_t)i];
            cand.set_requires_grad(true);
            Tensor cand_loss = objective(cand);
            if (cand_loss.item() <= loss) {
                x = cand;
                loss_t = cand_loss;
                loss = cand_loss.item();
                step = std::min(step * 1.5, step_cap);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (loss < best_loss) {
            best_loss = loss;
            best = x.detach();
            bad_streak = 0;
        } else if (++bad_streak >= 10 || !accepted) {
            break;  // stalled/diverged: keep the last stable iterate
        }
    }
    Tensor out = best.clone();
    for (double& v : out.mutable_data()) v = std::clamp(v, -1.0, 1.0);
    return out;
}

Tensor restore_tiles(const Tensor& y, const op::ForwardOperator& o,
                     const RestoreConfig& cfg, int64_t tile, int64_t overlap) {
    check(y.rank() == 3, "restore_tiles: image must be [C,H,W]");
    check(tile > 2 * overlap, "restore_tiles: tile must exceed 2*overlap");
    check(o.scale == 1, "restore_tiles: downscale operators are not tiled");
    int64_t C = y.dim(0), H = y.dim(1), W = y.dim(2);

    auto solve = [&](const Tensor& patch, double cy, double cx) {
        if (cfg.solver == Solver::Wiener) {
            check(o.variant == op::Variant::UniformKernel,
                  "restore_tiles: wiener solver needs a uniform kernel");
            double sigma =
                cfg.noise_sigma >= 0 ? cfg.noise_sigma : o.sigma_value();
            return wiener(patch, op::materialize_kernel(o).detach(), sigma);
        }
        Tensor coords = Tensor::from_data({1, 2}, {cy, cx});
        const Tensor* cptr =
            o.variant == op::Variant::KernelGrid ? &coords : nullptr;
        return map_tv(patch, o, cfg, cptr);
    };

    if (H <= tile && W <= tile) return solve(y, 0.0, 0.0);

    auto positions = [&](int64_t extent) {
        std::vector<int64_t> tops;
        int64_t stride = tile - overlap;
        for (int64_t t = 0;; t += stride) {
            if (t + tile >= extent) {
                tops.push_back(std::max<int64_t>(0, extent - tile));
                break;
            }
            tops.push_back(t);
        }
        return tops;
    };

    Tensor acc = Tensor::zeros(y.shape());
    std::vector<double> wsum((size_t)(H * W), 0.0);
    // linear feather: ramps from 1/(overlap+1) to 1 across the overlap band
    auto feather = [&](int64_t i, int64_t n, bool lo_edge, bool hi_edge) {
        double w = 1.0;
        if (!lo_edge && i < overlap)
            w = std::min(w, (double)(i + 1) / (double)(overlap + 1));
        if (!hi_edge && i >= n - overlap)
            w = std::min(w, (double)(n - i) / (double)(overlap + 1));
        return w;
    };

    for (int64_t top : positions(H)) {
        for (int64_t left : positions(W)) {
            int64_t th = std::min(tile, H - top), tw = std::min(tile, W - left);
            Tensor patch = Tensor::zeros({C, th, tw});
            for (int64_t c = 0; c < C; ++c)
                for (int64_t yy = 0; yy < th; ++yy)
                    for (int64_t xx = 0; xx < tw; ++xx)
                        patch.mutable_data()[(size_t)((c * th + yy) * tw + xx)] =
                            y.data()[(size_t)((c * H + top + yy) * W + left + xx)];
            double cy = H > 1
                            ? ((double)top + (double)(th - 1) / 2.0) /
                                      (double)(H - 1) * 2.0 - 1.0
                            : 0.0;
            double cx = W > 1
                            ? ((double)left + (double)(tw - 1) / 2.0) /
                                      (double)(W - 1) * 2.0 - 1.0
                            : 0.0;
            Tensor rec = solve(patch, cy, cx);
            for (int64_t yy = 0; yy < th; ++yy) {
                double wy = feather(yy, th, top == 0, top + th == H);
                for (int64_t xx = 0; xx < tw; ++xx) {
                    double w =
                        wy * feather(xx, tw, left == 0, left + tw == W);
                    wsum[(size_t)((top + yy) * W + left + xx)] += w;
                    for (int64_t c = 0; c < C; ++c)
                        acc.mutable_data()[(size_t)(
                            (c * H + top + yy) * W + left + xx)] +=
                            w * rec.data()[(size_t)((c * th + yy) * tw + xx)];
                }
            }
        }
    }
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < H * W; ++i)
            acc.mutable_data()[(size_t)(c * H * W + i)] /= wsum[(size_t)i];
    return acc;
}

}  // namespace opmatch::restore
