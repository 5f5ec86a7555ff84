#pragma once

// Central finite-difference gradient checking in 64-bit.

#include "sweepkey/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace sweepkey {

struct GradCheckParamReport {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    bool finite = true;
};

struct GradCheckReport {
    std::vector<GradCheckParamReport> params;
    double max_rel_err = 0.0;
    double tol = 0.0;
    bool pass = false;
    std::string message;
};

// A differentiable scalar function of a fixed set of double-precision leaf
// parameters. build_loss() must be deterministic for fixed parameter values
// (draw any randomness once, outside the builder).
struct GradCheckProblem {
    std::vector<std::pair<std::string, Tensor<double>>> params;
    std::function<Tensor<double>()> build_loss;
};

// Relative error with an absolute floor so near-zero gradients are compared
// absolutely at the same tolerance.
inline double rel_err(double a, double n) {
    const double denom = std::max({std::fabs(a), std::fabs(n), 1e-6});
    return std::fabs(a - n) / denom;
}

inline GradCheckReport gradcheck(GradCheckProblem& prob, double tol, double step = 1e-4) {
    GradCheckReport report;
    report.tol = tol;

    std::vector<Tensor<double>> leaves;
    for (auto& [name, t] : prob.params) leaves.push_back(t);

    auto loss = prob.build_loss();
    auto analytic = grad(loss, leaves);

    bool all_ok = true;
    for (std::size_t p = 0; p < leaves.size(); ++p) {
        GradCheckParamReport pr;
        pr.name = prob.params[p].first;
        auto& values = leaves[p].mutable_value();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            double fp, fm;
            {
                NoGradGuard ng;
                values[i] = saved + step;
                fp = prob.build_loss().item();
                values[i] = saved - step;
                fm = prob.build_loss().item();
            }
            values[i] = saved;
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[p][i];
            if (!std::isfinite(a) || !std::isfinite(numeric)) {
                pr.finite = false;
                pr.max_rel_err = std::numeric_limits<double>::infinity();
                pr.worst_index = i;
                report.message = "non-finite gradient for " + pr.name + "[" +
                                 std::to_string(i) + "]";
                break;
            }
            const double e = rel_err(a, numeric);
            if (e > pr.max_rel_err) {
                pr.max_rel_err = e;
                pr.worst_index = i;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, pr.max_rel_err);
        all_ok = all_ok && pr.finite && pr.max_rel_err <= tol;
        report.params.push_back(std::move(pr));
    }
    report.pass = all_ok;
    if (report.message.empty() && !report.pass)
        report.message = "max relative error " + std::to_string(report.max_rel_err) +
                         " exceeds tolerance " + std::to_string(tol);
    return report;
}

} // namespace sweepkey
