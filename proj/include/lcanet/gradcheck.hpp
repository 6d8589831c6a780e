#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lcanet/errors.hpp"
#include "lcanet/rng.hpp"
#include "lcanet/tensor.hpp"

namespace lcanet {

/// Result of a finite-difference check of one scalar-valued function.
struct GradCheckReport {
    double max_rel_err = 0.0;
    std::int64_t checked = 0;
    // Worst coordinate, for diagnostics.
    std::size_t worst_param = 0;
    std::int64_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

inline double rel_err(double analytic, double numeric) {
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
    return std::fabs(analytic - numeric) / denom;
}

/// Compares analytic gradients against central differences
/// (f(p+h) - f(p-h)) / 2h at up to `n_coords` sampled coordinates per
/// parameter tensor. `f` must be a pure function of the parameters;
/// 64-bit precision is assumed throughout.
inline GradCheckReport gradcheck(
    const std::function<double(const std::vector<Tensor<double>>&)>& f,
    std::vector<Tensor<double>> params, const std::vector<Tensor<double>>& analytic,
    std::int64_t n_coords = 100, double h = 1e-5, std::uint64_t seed = 17) {
    if (params.size() != analytic.size())
        throw Error("gradcheck: analytic gradient count does not match parameter count");
    GradCheckReport report;
    Rng rng(seed);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        if (!params[pi].same_shape(analytic[pi]))
            throw ShapeError("gradcheck: gradient shape mismatch at parameter " + std::to_string(pi));
        const std::int64_t size = params[pi].size();
        const std::int64_t samples = std::min<std::int64_t>(n_coords, size);
        for (std::int64_t s = 0; s < samples; ++s) {
            // Sweep every coordinate when the tensor is small enough.
            const std::int64_t idx =
                samples == size ? s : static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(size)));
            const double orig = params[pi][idx];
            params[pi][idx] = orig + h;
            const double fp = f(params);
            params[pi][idx] = orig - h;
            const double fm = f(params);
            params[pi][idx] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("gradcheck: non-finite function value");
            const double numeric = (fp - fm) / (2.0 * h);
            const double err = rel_err(analytic[pi][idx], numeric);
            ++report.checked;
            if (err > report.max_rel_err) {
                report.max_rel_err = err;
                report.worst_param = pi;
                report.worst_index = idx;
                report.worst_analytic = analytic[pi][idx];
                report.worst_numeric = numeric;
            }
        }
    }
    return report;
}

}  // namespace lcanet
