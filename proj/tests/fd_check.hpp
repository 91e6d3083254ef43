#pragma once

// Central finite-difference gradient oracle used across the test suites.
// Independent of the tape: it only re-evaluates the forward function.

#include <cmath>
#include <functional>
#include <vector>

#include "opmatch/tensor.hpp"

namespace opmatch::testutil {

inline double rel_err(double a, double b) {
    double m = std::max(std::fabs(a), std::fabs(b));
    if (m == 0.0) return 0.0;
    return std::fabs(a - b) / m;
}

// Max element-wise relative error between the tape gradient of f() w.r.t.
// leaf p and a central finite difference. Elements where both magnitudes
// fall below `dead` are skipped. max_checks > 0 probes an evenly strided
// subset (for parameters too large to difference exhaustively).
template <typename F>
double fd_max_rel(F f, Tensor& p, double h = 1e-5, double dead = 1e-10,
                  int64_t max_checks = -1) {
    p.set_requires_grad(true);
    p.zero_grad();
    Tensor loss = f();
    backward(loss);
    std::vector<double> analytic = p.grad();

    double worst = 0.0;
    auto& v = p.mutable_data();
    size_t stride = 1;
    if (max_checks > 0 && (int64_t)v.size() > max_checks)
        stride = v.size() / (size_t)max_checks;
    for (size_t i = 0; i < v.size(); i += stride) {
        double orig = v[i];
        v[i] = orig + h;
        double fp = f().item();
        v[i] = orig - h;
        double fm = f().item();
        v[i] = orig;
        double numeric = (fp - fm) / (2.0 * h);
        if (std::fabs(analytic[i]) < dead && std::fabs(numeric) < dead) continue;
        worst = std::max(worst, rel_err(analytic[i], numeric));
    }
    return worst;
}

}  // namespace opmatch::testutil
