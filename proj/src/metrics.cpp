#include "opmatch/metrics.hpp"

#include <cmath>

namespace opmatch::metrics {

namespace {

constexpr double kPsnrCap = 99.0;

void check(bool ok, const std::string& msg) {
    if (!ok) throw TensorError(msg);
}

double mse(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        acc += d * d;
    }
    return acc / (double)a.size();
}

double psnr_from_mse(double m, double peak) {
    if (m <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / m));
}

std::vector<double> luma(const Tensor& img) {
    int64_t hw = img.dim(1) * img.dim(2);
    std::vector<double> y((size_t)hw);
    const double w[3] = {0.299, 0.587, 0.114};
    for (int64_t i = 0; i < hw; ++i) {
        double acc = 0;
        for (int64_t c = 0; c < 3; ++c)
            acc += w[c] * img.data()[(size_t)(c * hw + i)];
        y[(size_t)i] = acc;
    }
    return y;
}

// Spatial values of the last two dims of a [kh,kw] or [1,kh,kw] kernel.
const std::vector<double>& kernel_values(const Tensor& k, int64_t& kh, int64_t& kw) {
    check(k.rank() == 2 || (k.rank() == 3 && k.dim(0) == 1),
          "kernel metric: expected a single-channel kernel");
    kh = k.dim(k.rank() - 2);
    kw = k.dim(k.rank() - 1);
    return k.data();
}

// Zero-pad onto a canvas and integer-shift the center of mass onto the
// canvas center.
std::vector<double> center_on_canvas(const std::vector<double>& k, int64_t kh,
                                     int64_t kw, int64_t n) {
    check(kh <= n && kw <= n, "kernel metric: kernel larger than the canvas");
    std::vector<double> canvas((size_t)(n * n), 0.0);
    int64_t top = (n - kh) / 2, left = (n - kw) / 2;
    for (int64_t y = 0; y < kh; ++y)
        for (int64_t x = 0; x < kw; ++x)
            canvas[(size_t)((top + y) * n + left + x)] = k[(size_t)(y * kw + x)];
    double mass = 0, my = 0, mx = 0;
    for (int64_t y = 0; y < n; ++y)
        for (int64_t x = 0; x < n; ++x) {
            double v = std::abs(canvas[(size_t)(y * n + x)]);
            mass += v;
            my += v * (double)y;
            mx += v * (double)x;
        }
    if (mass <= 0.0) return canvas;
    int64_t dy = (int64_t)std::llround((double)(n - 1) / 2.0 - my / mass);
    int64_t dx = (int64_t)std::llround((double)(n - 1) / 2.0 - mx / mass);
    std::vector<double> out((size_t)(n * n), 0.0);
    for (int64_t y = 0; y < n; ++y)
        for (int64_t x = 0; x < n; ++x) {
            int64_t sy = y - dy, sx = x - dx;
            if (sy >= 0 && sy < n && sx >= 0 && sx < n)
                out[(size_t)(y * n + x)] = canvas[(size_t)(sy * n + sx)];
        }
    return out;
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b, double peak) {
    check(a.shape() == b.shape(), "psnr: shape mismatch");
    return psnr_from_mse(mse(a.data(), b.data()), peak);
}

double y_psnr(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "y_psnr: shape mismatch");
    check(a.rank() == 3, "y_psnr: expected [C,H,W]");
    if (a.dim(0) == 1) return psnr(a, b);
    check(a.dim(0) == 3, "y_psnr: expected 1 or 3 channels");
    return psnr_from_mse(mse(luma(a), luma(b)), 2.0);
}

double ssim(const Tensor& a, const Tensor& b, double range) {
    check(a.shape() == b.shape(), "ssim: shape mismatch");
    check(a.rank() == 3, "ssim: expected [C,H,W]");
    int64_t C = a.dim(0), H = a.dim(1), W = a.dim(2);
    const int64_t win = 11, r = win / 2;
    check(H >= win && W >= win, "ssim: image smaller than the 11x11 window");
    // normalized 11x11 Gaussian window, sigma 1.5
    double wsum = 0;
    double wgt[win][win];
    for (int64_t y = 0; y < win; ++y)
        for (int64_t x = 0; x < win; ++x) {
            double dy = (double)(y - r), dx = (double)(x - r);
            wgt[y][x] = std::exp(-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5));
            wsum += wgt[y][x];
        }
    for (int64_t y = 0; y < win; ++y)
        for (int64_t x = 0; x < win; ++x) wgt[y][x] /= wsum;
    const double c1 = std::pow(0.01 * range, 2.0), c2 = std::pow(0.03 * range, 2.0);
    double acc = 0;
    int64_t cnt = 0;
    for (int64_t c = 0; c < C; ++c) {
        const double* pa = a.data().data() + c * H * W;
        const double* pb = b.data().data() + c * H * W;
        for (int64_t cy = r; cy < H - r; ++cy)
            for (int64_t cx = r; cx < W - r; ++cx) {
                double ma = 0, mb = 0, va = 0, vb = 0, cov = 0;
                for (int64_t y = 0; y < win; ++y)
                    for (int64_t x = 0; x < win; ++x) {
                        double w = wgt[y][x];
                        double xa = pa[(cy + y - r) * W + cx + x - r];
                        double xb = pb[(cy + y - r) * W + cx + x - r];
                        ma += w * xa;
                        mb += w * xb;
                        va += w * xa * xa;
                        vb += w * xb * xb;
                        cov += w * xa * xb;
                    }
                va -= ma * ma;
                vb -= mb * mb;
                cov -= ma * mb;
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) /
                       ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++cnt;
            }
    }
    return acc / (double)cnt;
}

double kernel_psnr(const Tensor& k_hat, const Tensor& k_true) {
    int64_t h1, w1, h2, w2;
    const auto& v1 = kernel_values(k_hat, h1, w1);
    const auto& v2 = kernel_values(k_true, h2, w2);
    const int64_t n = 25;
    auto c1 = center_on_canvas(v1, h1, w1, n);
    auto c2 = center_on_canvas(v2, h2, w2, n);
    double peak = 0;
    for (double v : v2) peak = std::max(peak, v);
    check(peak > 0.0, "kernel_psnr: reference kernel has no positive mass");
    return psnr_from_mse(mse(c1, c2), peak);
}

NccResult kernel_ncc(const Tensor& k_hat, const Tensor& k_true, bool try_flip,
                     int64_t radius) {
    int64_t h1, w1, h2, w2;
    const auto& v1 = kernel_values(k_hat, h1, w1);
    const auto& v2 = kernel_values(k_true, h2, w2);
    // one canvas large enough that +-radius shifts never clip mass
    int64_t n = std::max(std::max(h1, h2), std::max(w1, w2)) + 2 * radius + 2;
    auto pad = [&](const std::vector<double>& k, int64_t kh, int64_t kw) {
        std::vector<double> canvas((size_t)(n * n), 0.0);
        int64_t top = (n - kh) / 2, left = (n - kw) / 2;
        for (int64_t y = 0; y < kh; ++y)
            for (int64_t x = 0; x < kw; ++x)
                canvas[(size_t)((top + y) * n + left + x)] = k[(size_t)(y * kw + x)];
        return canvas;
    };
    auto stats = [&](const std::vector<double>& k) {
        double m = 0;
        for (double v : k) m += v;
        m /= (double)k.size();
        double nrm = 0;
        for (double v : k) nrm += (v - m) * (v - m);
        return std::pair<double, double>(m, std::sqrt(nrm));
    };
    auto ref = pad(v2, h2, w2);
    auto [mref, nref] = stats(ref);
    NccResult best;
    for (int flip = 0; flip < (try_flip ? 2 : 1); ++flip) {
        std::vector<double> cand = v1;
        if (flip) {
            for (int64_t y = 0; y < h1; ++y)
                for (int64_t x = 0; x < w1; ++x)
                    cand[(size_t)(y * w1 + x)] =
                        v1[(size_t)((h1 - 1 - y) * w1 + (w1 - 1 - x))];
        }
        auto pk = pad(cand, h1, w1);
        auto [mp, np] = stats(pk);
        for (int64_t dy = -radius; dy <= radius; ++dy)
            for (int64_t dx = -radius; dx <= radius; ++dx) {
                double dot = 0;
                for (int64_t y = 0; y < n; ++y)
                    for (int64_t x = 0; x < n; ++x) {
                        int64_t sy = y - dy, sx = x - dx;
                        double v = (sy >= 0 && sy < n && sx >= 0 && sx < n)
                                       ? pk[(size_t)(sy * n + sx)]
                                       : 0.0;
                        dot += (v - mp) * (ref[(size_t)(y * n + x)] - mref);
                    }
                double den = np * nref;
                double ncc = den > 0 ? dot / den : 0.0;
                if (ncc > best.ncc) best = {ncc, dy, dx, flip != 0};
            }
    }
    return best;
}

}  // namespace opmatch::metrics
