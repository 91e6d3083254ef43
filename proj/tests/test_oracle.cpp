#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "opmatch/flow.hpp"
#include "opmatch/oracle.hpp"

using namespace opmatch;
using namespace opmatch::oracle;

namespace {

Mat random_spd(int d, Rng& rng, double lo = 0.3, double hi = 3.0) {
    Mat Q = random_orthogonal(d, rng);
    Vec ev(d);
    for (auto& e : ev) e = rng.uniform(lo, hi);
    return Q * ev.asDiagonal() * Q.transpose();
}

GaussianModel random_gaussian(int d, Rng& rng) {
    Vec m(d);
    for (auto& x : m) x = rng.normal();
    return GaussianModel(m, random_spd(d, rng));
}

// Normalized cross-correlation over all circular shifts and both
// orientations; returns the best value.
double ring_ncc_best(const Vec& a, const Vec& b) {
    auto ncc = [](const Vec& x, const Vec& y) {
        Vec xc = x.array() - x.mean(), yc = y.array() - y.mean();
        double den = xc.norm() * yc.norm();
        return den > 0 ? xc.dot(yc) / den : 0.0;
    };
    int d = (int)a.size();
    double best = -2;
    for (int flip = 0; flip < 2; ++flip) {
        for (int s = 0; s < d; ++s) {
            Vec shifted(d);
            for (int i = 0; i < d; ++i) {
                int src = flip ? ((s - i) % d + d) % d : (i + s) % d;
                shifted(i) = b(src);
            }
            best = std::max(best, ncc(a, shifted));
        }
    }
    return best;
}

}  // namespace

TEST_CASE("gaussian model validates its covariance") {
    CHECK_THROWS_AS(GaussianModel(Vec::Zero(2), -Mat::Identity(2, 2)), OracleError);
    Mat asym(2, 2);
    asym << 1, 0.5, 0.1, 1;
    CHECK_THROWS_AS(GaussianModel(Vec::Zero(2), asym), OracleError);
}

TEST_CASE("flow-path marginal endpoints and midpoint variance") {
    GaussianModel g(Vec::Constant(1, 2.0), Mat::Constant(1, 1, 4.0));
    auto m0 = marginal_at_t(g, 0.0);
    CHECK(m0.mean(0) == doctest::Approx(0.0));
    CHECK(m0.cov(0, 0) == doctest::Approx(1.0));
    auto m1 = marginal_at_t(g, 1.0);
    CHECK(m1.mean(0) == doctest::Approx(2.0));
    CHECK(m1.cov(0, 0) == doctest::Approx(4.0));
    CHECK(marginal_at_t(g, 0.5).cov(0, 0) == doctest::Approx(1.25));
}

TEST_CASE("analytic score: t=0 gives -z, antisymmetric for zero mean") {
    Rng rng(11);
    GaussianModel g = random_gaussian(3, rng);
    Vec z(3);
    for (auto& x : z) x = rng.normal();
    CHECK((analytic_score(g, 0.0, z) + z).norm() < 1e-12);
    GaussianModel g0(Vec::Zero(3), random_spd(3, rng));
    Vec sp = analytic_score(g0, 0.4, z), sn = analytic_score(g0, 0.4, (-z).eval());
    CHECK((sp + sn).norm() < 1e-12);
}

TEST_CASE("velocity-to-score map matches the analytic score") {
    Rng rng(17);
    for (int d : {1, 2, 4}) {
        GaussianModel g = random_gaussian(d, rng);
        for (double t : {0.0, 0.1, 0.5, 0.9, 0.99}) {
            Vec z(d);
            for (auto& x : z) x = rng.normal();
            Vec v = analytic_velocity(g, t, z);
            Tensor vt = Tensor::from_data({1, d}, {v.data(), v.data() + d});
            Tensor zt = Tensor::from_data({1, d}, {z.data(), z.data() + d});
            Tensor st = flow::score_from_velocity_values(vt, zt, t);
            Vec s = analytic_score(g, t, z);
            double num = 0, den = 0;
            for (int i = 0; i < d; ++i) {
                num += std::abs(st.data()[(size_t)i] - s(i));
                den += std::abs(s(i));
            }
            CHECK(num / std::max(den, 1e-30) < 1e-10);
        }
    }
}

TEST_CASE("conditional-expectation velocity is the regression optimum") {
    // At fixed t, E||v(z_t) - (z1-z0)||^2 is minimized by the conditional
    // mean; empirically the analytic velocity beats any perturbed version.
    Rng rng(23);
    GaussianModel g = random_gaussian(2, rng);
    Mat L = matrix_sqrt_spd(g.cov);
    double t = 0.6;
    int n = 20000;
    double loss_v = 0, loss_p = 0;
    for (int i = 0; i < n; ++i) {
        Vec z0(2), u(2);
        for (auto& x : z0) x = rng.normal();
        for (auto& x : u) x = rng.normal();
        Vec z1 = g.mean + L * u;
        Vec zt = (1 - t) * z0 + t * z1;
        Vec v = analytic_velocity(g, t, zt);
        loss_v += (v - (z1 - z0)).squaredNorm();
        loss_p += (v.array() + 0.05 - (z1 - z0).array()).matrix().squaredNorm();
    }
    CHECK(loss_v < loss_p);
}

TEST_CASE("gauss-legendre integrates high-degree polynomials exactly") {
    auto q = gauss_legendre(8, 0.0, 1.0);
    double acc = 0, wsum = 0;
    for (auto [x, w] : q) {
        acc += w * std::pow(x, 15.0);  // degree 15 <= 2n-1
        wsum += w;
    }
    CHECK(wsum == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(acc == doctest::Approx(1.0 / 16.0).epsilon(1e-13));
}

TEST_CASE("gaussian KL basics") {
    GaussianModel a(Vec::Zero(1), Mat::Constant(1, 1, 1.0));
    GaussianModel b(Vec::Constant(1, 1.0), Mat::Constant(1, 1, 2.0));
    CHECK(gauss_kl(a, a) == doctest::Approx(0.0));
    // 0.5 * (s1/s2 + dm^2/s2 - 1 + ln(s2/s1))
    double expect = 0.5 * (0.5 + 0.5 - 1.0 + std::log(2.0));
    CHECK(gauss_kl(a, b) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("integrated KL: zero iff equal, non-negative on random pairs") {
    Rng rng(31);
    GaussianModel g = random_gaussian(3, rng);
    CHECK(ikl_exact(g, g) == doctest::Approx(0.0));
    for (int trial = 0; trial < 50; ++trial) {
        int d = 1 + (int)rng.randint(4);
        GaussianModel g1 = random_gaussian(d, rng), g2 = random_gaussian(d, rng);
        double v = ikl_exact(g1, g2);
        CHECK(v >= 0.0);
        CHECK(v > 1e-8);  // distinct random pairs stay separated
    }
}

TEST_CASE("rotation ambiguity: right-rotations of the operator are invisible") {
    Rng rng(37);
    int d = 4;
    Mat A(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) A(i, j) = rng.normal();
    Mat R = random_orthogonal(d, rng);
    double sigma = 0.1;
    Mat I = Mat::Identity(d, d);
    GaussianModel p1 = pushforward(A, I, sigma);
    GaussianModel p2 = pushforward(A * R, I, sigma);
    CHECK(std::abs(ikl_exact(p1, p2)) < 1e-8);
}

TEST_CASE("moment identity: matched, rotated, and mismatched operators") {
    Rng rng(41);
    int d = 3;
    Mat A(d, d), C(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) A(i, j) = rng.normal();
    for (int i = 0; i < d; ++i)
        for (int j = 0; j <= i; ++j) C(i, j) = C(j, i) = rng.normal();
    Mat I = Mat::Identity(d, d);

    auto same = verify_moment_identity(A, A, I, C, 0.2, 20000, rng);
    CHECK(same.exact_value == doctest::Approx(0.0));
    CHECK(same.consistent());

    Mat R = random_orthogonal(d, rng);
    auto rot = verify_moment_identity(A * R, A, I, C, 0.2, 20000, rng);
    CHECK(std::abs(rot.exact_value) < 1e-10);
    CHECK(rot.consistent());

    Mat B = A;
    B(0, 0) += 1.0;
    auto mis = verify_moment_identity(B, A, random_spd(d, rng), C, 0.2, 200000, rng);
    CHECK(std::abs(mis.exact_value) > 1e-3);
    CHECK(mis.consistent());
}

TEST_CASE("procrustes alignment recovers a planted rotation") {
    Rng rng(43);
    int d = 4;
    Mat A(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) A(i, j) = rng.normal();
    Mat Sigma = random_spd(d, rng);
    Mat Rh = matrix_sqrt_spd(Sigma);

    auto triv = align_up_to_rotation(A, A, Sigma);
    CHECK(triv.residual < 1e-10);

    Mat Q = random_orthogonal(d, rng);
    Mat Aw = A * Rh * Q * Rh.inverse();
    auto rec = align_up_to_rotation(Aw, A, Sigma);
    CHECK(rec.residual < 1e-8);
    CHECK((rec.P - Q).cwiseAbs().maxCoeff() < 1e-8);

    // Different singular values cannot be rotated away.
    Eigen::JacobiSVD<Mat> svd(A, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Vec sv = svd.singularValues();
    Vec sv2 = sv;
    sv2(0) *= 2.0;
    Mat A2 = svd.matrixU() * sv2.asDiagonal() * svd.matrixV().transpose();
    auto bad = align_up_to_rotation(A2, A, Mat::Identity(d, d));
    CHECK(bad.residual >= (sv2(0) - sv(0)) / A.norm() * 0.999);
}

TEST_CASE("covariance identification of a circulant blur on a ring") {
    int d = 8;
    Vec k(3);
    k << 0.5, 0.25, 0.25;  // offsets 0, +1, -1 after re-indexing below
    Vec kfull = Vec::Zero(d);
    kfull(0) = 0.5;
    kfull(1) = 0.25;
    kfull(d - 1) = 0.25;
    Mat A = circulant_from_kernel(kfull, d);
    double sigma = 0.05;
    Mat Sy = A * A.transpose() + sigma * sigma * Mat::Identity(d, d);

    auto res = identify_from_covariance(Sy, Mat::Identity(d, d), sigma);
    CHECK(res.collapsed);
    CHECK(ring_ncc_best(res.kernel, kfull) == doctest::Approx(1.0).epsilon(1e-8));
    CHECK((res.kernel - kfull).cwiseAbs().maxCoeff() < 1e-8);

    auto dirac = identify_from_covariance(
        Mat::Identity(d, d) * (1.0 + sigma * sigma), Mat::Identity(d, d), sigma);
    CHECK(dirac.kernel(0) == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(dirac.kernel.tail(d - 1).cwiseAbs().maxCoeff() < 1e-10);

    CHECK_THROWS_AS(identify_from_covariance(Sy, Mat::Identity(d, d), 10.0),
                    OracleError);
}
