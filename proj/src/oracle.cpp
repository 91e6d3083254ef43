#include "opmatch/oracle.hpp"

#include <cmath>
#include <numbers>

namespace opmatch::oracle {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw OracleError(msg);
}

Mat solve_spd(const Mat& S, const Mat& rhs) {
    Eigen::LLT<Mat> llt(S);
    require(llt.info() == Eigen::Success, "covariance is not positive definite");
    return llt.solve(rhs);
}

}  // namespace

GaussianModel::GaussianModel(Vec m, Mat c) : mean(std::move(m)), cov(std::move(c)) {
    require(cov.rows() == cov.cols() && cov.rows() == mean.size(),
            "GaussianModel: mean/cov size mismatch");
    require((cov - cov.transpose()).cwiseAbs().maxCoeff() < 1e-9 * (1.0 + cov.cwiseAbs().maxCoeff()),
            "GaussianModel: covariance not symmetric");
    Eigen::SelfAdjointEigenSolver<Mat> es(cov);
    require(es.eigenvalues().minCoeff() > 0, "GaussianModel: covariance not positive definite");
}

GaussianModel marginal_at_t(const GaussianModel& g, double t) {
    int64_t d = g.dim();
    double a = 1.0 - t;
    GaussianModel out;
    out.mean = t * g.mean;
    out.cov = a * a * Mat::Identity(d, d) + t * t * g.cov;
    return out;
}

Vec analytic_score(const GaussianModel& g, double t, const Vec& z) {
    GaussianModel m = marginal_at_t(g, t);
    return -solve_spd(m.cov, (z - m.mean).eval());
}

Vec analytic_velocity(const GaussianModel& g, double t, const Vec& z) {
    // E[z1 - z0 | z_t] for z_t = (1-t) z0 + t z1: jointly Gaussian, so the
    // conditional mean is mean + (t cov - (1-t) I) cov_t^{-1} (z - t mean).
    int64_t d = g.dim();
    GaussianModel m = marginal_at_t(g, t);
    Mat cross = t * g.cov - (1.0 - t) * Mat::Identity(d, d);
    return g.mean + cross * solve_spd(m.cov, (z - m.mean).eval());
}

double gauss_kl(const GaussianModel& a, const GaussianModel& b) {
    int64_t d = a.dim();
    require(b.dim() == d, "gauss_kl: dimension mismatch");
    Eigen::LLT<Mat> lltb(b.cov);
    require(lltb.info() == Eigen::Success, "gauss_kl: cov not positive definite");
    Eigen::LLT<Mat> llta(a.cov);
    require(llta.info() == Eigen::Success, "gauss_kl: cov not positive definite");
    Vec dm = b.mean - a.mean;
    double trace = lltb.solve(a.cov).trace();
    double quad = dm.dot(lltb.solve(dm));
    double logdet = 0;
    for (int64_t i = 0; i < d; ++i)
        logdet += 2.0 * (std::log(lltb.matrixL()(i, i)) - std::log(llta.matrixL()(i, i)));
    return 0.5 * (trace + quad - (double)d + logdet);
}

std::vector<std::pair<double, double>> gauss_legendre(int n, double lo, double hi) {
    require(n >= 1, "gauss_legendre: n must be >= 1");
    // Newton iteration on P_n with the standard cosine initial guess.
    std::vector<std::pair<double, double>> out;
    out.reserve((size_t)n);
    for (int i = 0; i < n; ++i) {
        double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
        double pp = 0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = x;
            for (int k = 2; k <= n; ++k) {
                double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            pp = n * (x * p1 - p0) / (x * x - 1.0);
            double dx = p1 / pp;
            x -= dx;
            if (std::abs(dx) < 1e-15) break;
        }
        double w = 2.0 / ((1.0 - x * x) * pp * pp);
        out.emplace_back(0.5 * (hi - lo) * x + 0.5 * (hi + lo),
                         0.5 * (hi - lo) * w);
    }
    return out;
}

double ikl_exact(const GaussianModel& g1, const GaussianModel& g2,
                 int quadrature_points, double delta) {
    double acc = 0;
    for (auto [t, w] : gauss_legendre(quadrature_points, delta, 1.0 - delta))
        acc += w * gauss_kl(marginal_at_t(g1, t), marginal_at_t(g2, t));
    return acc;
}

GaussianModel pushforward(const Mat& A, const Mat& Sigma, double sigma) {
    GaussianModel out;
    out.mean = Vec::Zero(A.rows());
    out.cov = A * Sigma * A.transpose() +
              sigma * sigma * Mat::Identity(A.rows(), A.rows());
    return out;
}

MomentReport verify_moment_identity(const Mat& Aw, const Mat& Astar,
                                    const Mat& Sigma, const Mat& C,
                                    double sigma, int trials, Rng& rng) {
    int64_t d = Sigma.rows();
    Mat L = Eigen::LLT<Mat>(Sigma).matrixL();
    MomentReport rep;
    rep.trials = trials;
    Mat diff = Aw * Sigma * Aw.transpose() - Astar * Sigma * Astar.transpose();
    rep.exact_value = (diff.array() * C.array()).sum();
    // Common random numbers: the noise term cancels in expectation and mostly
    // cancels per sample, which keeps the MC variance manageable.
    double s1 = 0, s2 = 0;
    for (int i = 0; i < trials; ++i) {
        Vec u(d), e(Aw.rows());
        for (auto& x : u) x = rng.normal();
        for (auto& x : e) x = rng.normal();
        Vec x = L * u;
        Vec yw = Aw * x + sigma * e;
        Vec ys = Astar * x + sigma * e;
        double di = yw.dot(C * yw) - ys.dot(C * ys);
        s1 += di;
        s2 += di * di;
    }
    rep.mc_value = s1 / trials;
    double var = (s2 - s1 * s1 / trials) / (trials - 1);
    rep.std_err = std::sqrt(std::max(var, 0.0) / trials);
    return rep;
}

Mat matrix_sqrt_spd(const Mat& S) {
    Eigen::SelfAdjointEigenSolver<Mat> es(S);
    require(es.eigenvalues().minCoeff() >= 0, "matrix_sqrt_spd: negative eigenvalue");
    return es.eigenvectors() *
           es.eigenvalues().cwiseSqrt().asDiagonal() *
           es.eigenvectors().transpose();
}

AlignResult align_up_to_rotation(const Mat& Aw, const Mat& Astar,
                                 const Mat& Sigma) {
    Mat R = matrix_sqrt_spd(Sigma);
    Mat Bw = Aw * R, Bs = Astar * R;
    // argmin_P ||Bs P - Bw||_F over orthogonal P.
    Eigen::JacobiSVD<Mat> svd(Bs.transpose() * Bw,
                              Eigen::ComputeFullU | Eigen::ComputeFullV);
    AlignResult out;
    out.P = svd.matrixU() * svd.matrixV().transpose();
    Mat fitted = Bs * out.P * R.inverse();
    out.residual = (Aw - fitted).norm() / std::max(Astar.norm(), 1e-300);
    return out;
}

Mat circulant_from_kernel(const Vec& k, int d) {
    require(k.size() <= d, "circulant_from_kernel: kernel longer than ring");
    Mat A = Mat::Zero(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < k.size(); ++j)
            A(i, ((i + j) % d + d) % d) += k(j);
    return A;
}

IdentifyResult identify_from_covariance(const Mat& Sigma_y, const Mat& Sigma,
                                        double sigma) {
    int64_t d = Sigma_y.rows();
    Mat offdiag = Sigma - Sigma(0, 0) * Mat::Identity(d, d);
    require(offdiag.cwiseAbs().maxCoeff() < 1e-9 * (1.0 + std::abs(Sigma(0, 0))),
            "identify_from_covariance: clean covariance must be isotropic");
    double s2 = Sigma(0, 0);
    Mat M = Sigma_y - sigma * sigma * Mat::Identity(d, d);
    Eigen::SelfAdjointEigenSolver<Mat> es(M);
    if (es.eigenvalues().minCoeff() < -1e-8 * (1.0 + Sigma_y.cwiseAbs().maxCoeff()))
        throw OracleError(
            "identify_from_covariance: observed covariance minus noise is not "
            "PSD; the assumed noise level is too large");
    // M should be circulant: its eigenbasis is the DFT, and the f-th
    // eigenvalue is s2 |K_f|^2. Average the first row over shifts to kill
    // numerical asymmetry, DFT it, take the non-negative root with zero
    // phase, invert.
    Vec row = Vec::Zero(d);
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = 0; j < d; ++j) row((j - i % d + d) % d) += M(i, j) / d;
    IdentifyResult out;
    out.kernel = Vec::Zero(d);
    double two_pi = 2.0 * std::numbers::pi;
    std::vector<double> mag((size_t)d);
    for (int64_t f = 0; f < d; ++f) {
        double re = 0, im = 0;
        for (int64_t j = 0; j < d; ++j) {
            re += row(j) * std::cos(two_pi * f * j / d);
            im -= row(j) * std::sin(two_pi * f * j / d);
        }
        (void)im;  // row is (numerically) symmetric, spectrum is real
        mag[(size_t)f] = std::sqrt(std::max(re, 0.0) / s2);
    }
    for (int64_t j = 0; j < d; ++j) {
        double acc = 0;
        for (int64_t f = 0; f < d; ++f)
            acc += mag[(size_t)f] * std::cos(two_pi * f * j / d);
        out.kernel(j) = acc / d;
    }
    // The covariance only pins |K_f|; zero phase is the centered member of
    // the class. It is the unique non-negative one iff the result is
    // non-negative.
    double minv = out.kernel.minCoeff();
    out.collapsed = minv > -1e-6;
    out.message = out.collapsed
                      ? "zero-phase kernel is non-negative; constraints select it"
                      : "zero-phase kernel has negative entries; rotation class "
                        "not collapsed by the constraints";
    return out;
}

Mat random_orthogonal(int d, Rng& rng) {
    Mat G(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) G(i, j) = rng.normal();
    Eigen::HouseholderQR<Mat> qr(G);
    Mat Q = qr.householderQ();
    Mat R = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int i = 0; i < d; ++i)
        if (R(i, i) < 0) Q.col(i) = -Q.col(i);
    return Q;
}

}  // namespace opmatch::oracle
