#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "opmatch/rng.hpp"

namespace opmatch::oracle {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct OracleError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Gaussian N(mean, cov) with closed-form flow-path marginals and scores.
struct GaussianModel {
    Vec mean;
    Mat cov;

    GaussianModel() = default;
    GaussianModel(Vec m, Mat c);  // validates symmetry and positive spectrum
    int64_t dim() const { return mean.size(); }
};

// Exact marginal of z_t = (1-t) z0 + t z1, z0 ~ N(0,I), z1 ~ g:
// N(t mean, (1-t)^2 I + t^2 cov).
GaussianModel marginal_at_t(const GaussianModel& g, double t);

// Score of marginal_at_t: -cov_t^{-1} (z - t mean).
Vec analytic_score(const GaussianModel& g, double t, const Vec& z);

// E[z1 - z0 | z_t = z]: the loss-minimizing velocity field of the linear
// interpolation path.
Vec analytic_velocity(const GaussianModel& g, double t, const Vec& z);

// KL(a || b) between Gaussians.
double gauss_kl(const GaussianModel& a, const GaussianModel& b);

// Gauss-Legendre nodes/weights on [lo, hi].
std::vector<std::pair<double, double>> gauss_legendre(int n, double lo, double hi);

// Quadrature of KL(marginal_at_t(g1) || marginal_at_t(g2)) over
// t in [delta, 1-delta].
double ikl_exact(const GaussianModel& g1, const GaussianModel& g2,
                 int quadrature_points = 64, double delta = 1e-3);

// Marginal of y = A x + eps, x ~ N(0, Sigma), eps ~ N(0, sigma^2 I).
GaussianModel pushforward(const Mat& A, const Mat& Sigma, double sigma);

// Monte-Carlo check of E[f(A_w x + e)] - E[f(A_* x + e)] against
// <A_w Sigma A_w^T - A_* Sigma A_*^T, C> for f(x) = x^T C x.
struct MomentReport {
    double mc_value = 0;
    double exact_value = 0;
    double std_err = 0;
    int trials = 0;
    bool consistent(double k = 3.0) const {
        return std::abs(mc_value - exact_value) <= k * std_err;
    }
};
MomentReport verify_moment_identity(const Mat& Aw, const Mat& Astar,
                                    const Mat& Sigma, const Mat& C,
                                    double sigma, int trials, Rng& rng);

// Best orthogonal P for A_w ~= A_* Sigma^{1/2} P Sigma^{-1/2}
// (orthogonal Procrustes on the Sigma^{1/2}-whitened operators), with the
// relative Frobenius residual of the fit.
struct AlignResult {
    Mat P;
    double residual = 0;
};
AlignResult align_up_to_rotation(const Mat& Aw, const Mat& Astar,
                                 const Mat& Sigma);

// From Sigma_y = A Sigma A^T + sigma^2 I recovers a circulant, centered,
// non-negative kernel candidate (Sigma must be a multiple of I for the
// circulant route). Throws OracleError if Sigma_y - sigma^2 I is not PSD.
struct IdentifyResult {
    Vec kernel;            // length-d ring kernel, zero-phase
    bool collapsed = false;  // constraints picked a unique class member
    std::string message;
};
IdentifyResult identify_from_covariance(const Mat& Sigma_y, const Mat& Sigma,
                                        double sigma);

// Helpers shared with tests.
Mat matrix_sqrt_spd(const Mat& S);
Mat random_orthogonal(int d, Rng& rng);
Mat circulant_from_kernel(const Vec& k, int d);  // k indexed by offset

}  // namespace opmatch::oracle
