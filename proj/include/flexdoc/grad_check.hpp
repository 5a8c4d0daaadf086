#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "flexdoc/tensor.hpp"

namespace flexdoc {

struct GradCheckReport {
    std::size_t probes = 0;
    double max_rel_error = 0.0;
    double mean_rel_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
    /// Name of the parameter holding the worst probe.
    std::string worst;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

struct GradCheckOptions {
    std::size_t probes = 200;
    double eps = 1e-5;
    double tol = 1e-4;
    /// Denominator floor: rel = |a - n| / max(|a|, |n|, floor).
    double floor = 1e-5;
    std::uint64_t seed = 0;
};

/// Central finite differences against analytic gradients, probing random
/// scalar entries of `params` (a tensor is drawn uniformly, then an entry).
/// `loss` must be a deterministic function of the current parameter values.
GradCheckReport grad_check(const std::function<double()>& loss, std::span<Tensor<double>* const> params,
                           std::span<const Tensor<double>> analytic, const GradCheckOptions& options,
                           std::span<const std::string> names = {});

}  // namespace flexdoc
