#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "opmatch/metrics.hpp"

using namespace opmatch;
using namespace opmatch::metrics;

namespace {

Tensor clampedn(const Shape& s, Rng& rng) {
    Tensor t = Tensor::randn(s, rng);
    for (auto& v : t.mutable_data()) v = std::clamp(v, -1.0, 1.0);
    return t;
}

// Independent windowed-formula evaluation for the SSIM cross-check.
double ssim_naive(const Tensor& a, const Tensor& b, double range) {
    int64_t C = a.dim(0), H = a.dim(1), W = a.dim(2);
    std::vector<double> w(121);
    double ws = 0;
    for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
            w[(size_t)(i * 11 + j)] =
                std::exp(-((i - 5.0) * (i - 5.0) + (j - 5.0) * (j - 5.0)) / 4.5);
            ws += w[(size_t)(i * 11 + j)];
        }
    for (auto& x : w) x /= ws;
    double c1 = 0.01 * range * 0.01 * range, c2 = 0.03 * range * 0.03 * range;
    double acc = 0;
    int64_t cnt = 0;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t cy = 5; cy < H - 5; ++cy)
            for (int64_t cx = 5; cx < W - 5; ++cx) {
                double ma = 0, mb = 0;
                for (int i = 0; i < 11; ++i)
                    for (int j = 0; j < 11; ++j) {
                        ma += w[(size_t)(i * 11 + j)] *
                              a.data()[(size_t)(c * H * W + (cy + i - 5) * W + cx + j - 5)];
                        mb += w[(size_t)(i * 11 + j)] *
                              b.data()[(size_t)(c * H * W + (cy + i - 5) * W + cx + j - 5)];
                    }
                double va = 0, vb = 0, cov = 0;
                for (int i = 0; i < 11; ++i)
                    for (int j = 0; j < 11; ++j) {
                        double xa = a.data()[(size_t)(c * H * W + (cy + i - 5) * W + cx + j - 5)] - ma;
                        double xb = b.data()[(size_t)(c * H * W + (cy + i - 5) * W + cx + j - 5)] - mb;
                        va += w[(size_t)(i * 11 + j)] * xa * xa;
                        vb += w[(size_t)(i * 11 + j)] * xb * xb;
                        cov += w[(size_t)(i * 11 + j)] * xa * xb;
                    }
                acc += (2 * ma * mb + c1) * (2 * cov + c2) /
                       ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++cnt;
            }
    return acc / (double)cnt;
}

Tensor shift_kernel(const Tensor& k, int64_t dy, int64_t dx) {
    int64_t h = k.dim(k.rank() - 2), w = k.dim(k.rank() - 1);
    Tensor out = Tensor::zeros(k.shape());
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            int64_t ty = y + dy, tx = x + dx;
            if (ty >= 0 && ty < h && tx >= 0 && tx < w)
                out.mutable_data()[(size_t)(ty * w + tx)] =
                    k.data()[(size_t)(y * w + x)];
        }
    return out;
}

Tensor gauss_kernel(int64_t n, double sy, double sx, double theta = 0.0) {
    Tensor k = Tensor::zeros({n, n});
    double c = (double)(n - 1) / 2.0, s = 0;
    for (int64_t y = 0; y < n; ++y)
        for (int64_t x = 0; x < n; ++x) {
            double dy = (double)y - c, dx = (double)x - c;
            double ry = std::cos(theta) * dy - std::sin(theta) * dx;
            double rx = std::sin(theta) * dy + std::cos(theta) * dx;
            double v = std::exp(-ry * ry / (2 * sy * sy) - rx * rx / (2 * sx * sx));
            k.mutable_data()[(size_t)(y * n + x)] = v;
            s += v;
        }
    for (auto& v : k.mutable_data()) v /= s;
    return k;
}

}  // namespace

TEST_CASE("psnr: cap, known offset, brute-force agreement, symmetry") {
    Rng rng(3);
    Tensor a = clampedn({1, 8, 8}, rng);
    CHECK(psnr(a, a) == doctest::Approx(99.0));
    Tensor b = add_scalar(a, 0.1);
    CHECK(psnr(a, b, 1.0) == doctest::Approx(20.0).epsilon(1e-12));
    Tensor c = clampedn({1, 8, 8}, rng);
    double m = 0;
    for (size_t i = 0; i < a.data().size(); ++i) {
        double d = a.data()[i] - c.data()[i];
        m += d * d;
    }
    m /= (double)a.numel();
    CHECK(psnr(a, c) == doctest::Approx(10.0 * std::log10(4.0 / m)).epsilon(1e-9));
    CHECK(psnr(a, c) == doctest::Approx(psnr(c, a)));
}

TEST_CASE("luma psnr: gray passthrough and chroma-blindness") {
    Rng rng(5);
    Tensor g1 = clampedn({1, 8, 8}, rng), g2 = clampedn({1, 8, 8}, rng);
    CHECK(y_psnr(g1, g2) == doctest::Approx(psnr(g1, g2)));

    Tensor rgb = clampedn({3, 8, 8}, rng);
    // pure-gray RGB pair matches plain psnr
    Tensor gray3 = Tensor::zeros({3, 8, 8});
    Tensor gray3b = Tensor::zeros({3, 8, 8});
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t i = 0; i < 64; ++i) {
            gray3.mutable_data()[(size_t)(c * 64 + i)] = g1.data()[(size_t)i];
            gray3b.mutable_data()[(size_t)(c * 64 + i)] = g2.data()[(size_t)i];
        }
    CHECK(y_psnr(gray3, gray3b) == doctest::Approx(psnr(g1, g2)).epsilon(1e-12));

    // chroma-only perturbation: delta_r = 0.587 e, delta_g = -0.299 e has
    // zero luma footprint
    Tensor pert = rgb.clone();
    for (int64_t i = 0; i < 64; ++i) {
        pert.mutable_data()[(size_t)i] += 0.587 * 0.05;
        pert.mutable_data()[(size_t)(64 + i)] -= 0.299 * 0.05;
    }
    CHECK(y_psnr(rgb, pert) == doctest::Approx(99.0));
}

TEST_CASE("ssim: identity, anticorrelation, windowed brute force") {
    Rng rng(7);
    Tensor a = clampedn({1, 16, 16}, rng);
    CHECK(ssim(a, a) == doctest::Approx(1.0));
    // zero-local-mean pattern: negation is pure structural anticorrelation
    Tensor checker = Tensor::zeros({1, 16, 16});
    for (int64_t i = 0; i < 256; ++i)
        checker.mutable_data()[(size_t)i] = ((i / 16 + i % 16) % 2 ? 0.8 : -0.8);
    CHECK(ssim(checker, neg(checker)) < -0.3);
    Tensor b = clampedn({1, 16, 16}, rng);
    CHECK(ssim(a, b) == doctest::Approx(ssim_naive(a, b, 2.0)).epsilon(1e-6));
    Tensor a3 = clampedn({3, 16, 16}, rng), b3 = clampedn({3, 16, 16}, rng);
    CHECK(ssim(a3, b3) == doctest::Approx(ssim_naive(a3, b3, 2.0)).epsilon(1e-6));
    CHECK(ssim(a, b) >= -1.0);
    CHECK(ssim(a, b) <= 1.0);
}

TEST_CASE("kernel psnr is shift-blind by construction") {
    Tensor k = gauss_kernel(15, 1.0, 1.0);  // negligible border mass: shifts clip nothing
    CHECK(kernel_psnr(k, k) == doctest::Approx(99.0));
    CHECK(kernel_psnr(shift_kernel(k, 1, 2), k) == doctest::Approx(99.0));
    Tensor d1 = Tensor::zeros({9, 9});
    d1.mutable_data()[(size_t)(2 * 9 + 2)] = 1.0;
    Tensor d2 = Tensor::zeros({9, 9});
    d2.mutable_data()[(size_t)(6 * 9 + 7)] = 1.0;
    CHECK(kernel_psnr(d1, d2) == doctest::Approx(99.0));
    Tensor other = gauss_kernel(9, 2.5, 0.8);
    CHECK(kernel_psnr(other, k) < 99.0);
}

TEST_CASE("kernel ncc: identity, scale, shift search, flip, radius limit") {
    Tensor k = gauss_kernel(15, 0.8, 1.5, 0.5);
    CHECK(kernel_ncc(k, k).ncc == doctest::Approx(1.0));
    CHECK(kernel_ncc(scalar_mul(k, 2.0), k).ncc == doctest::Approx(1.0));

    // shift recovery pinned on an asymmetric kernel (a symmetric one lets
    // the flip branch tie at the mirrored shift)
    Tensor probe = Tensor::zeros({9, 9});
    probe.mutable_data()[(size_t)(4 * 9 + 4)] = 0.5;
    probe.mutable_data()[(size_t)(3 * 9 + 2)] = 0.3;
    probe.mutable_data()[(size_t)(6 * 9 + 5)] = 0.2;
    auto sh = kernel_ncc(shift_kernel(probe, 1, 1), probe);
    CHECK(sh.ncc == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(sh.dy == -1);
    CHECK(sh.dx == -1);
    CHECK_FALSE(sh.flipped);

    // shift beyond the +-5 search radius cannot be recovered
    Tensor k21 = gauss_kernel(21, 1.0, 1.0);
    CHECK(kernel_ncc(shift_kernel(k21, 7, 0), k21, true, 5).ncc < 1.0 - 1e-6);
    CHECK(kernel_ncc(shift_kernel(k21, 4, 0), k21, true, 5).ncc ==
          doctest::Approx(1.0).epsilon(1e-12));

    // flipped anisotropic kernel aligns only through the flip branch
    Tensor asym = Tensor::zeros({9, 9});
    asym.mutable_data()[(size_t)(4 * 9 + 4)] = 0.5;
    asym.mutable_data()[(size_t)(3 * 9 + 2)] = 0.3;
    asym.mutable_data()[(size_t)(6 * 9 + 5)] = 0.2;
    Tensor flipped = flip2d_values(asym);
    auto fl = kernel_ncc(flipped, asym, true);
    CHECK(fl.ncc == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(fl.flipped);
    CHECK(kernel_ncc(flipped, asym, false).ncc < 0.999);

    // with the shift search disabled, negation is perfect anticorrelation
    CHECK(kernel_ncc(neg(k), k, false, 0).ncc == doctest::Approx(-1.0));
}
