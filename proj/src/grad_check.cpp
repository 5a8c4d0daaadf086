#include "flexdoc/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace flexdoc {

GradCheckReport grad_check(const std::function<double()>& loss, std::span<Tensor<double>* const> params,
                           std::span<const Tensor<double>> analytic, const GradCheckOptions& options,
                           std::span<const std::string> names) {
    if (params.size() != analytic.size()) throw ShapeError("grad_check: params/gradients length mismatch");
    GradCheckReport report;
    report.tolerance = options.tol;
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i]->same_shape(analytic[i])) throw ShapeError("grad_check: gradient shape mismatch");
        if (params[i]->size() > 0) candidates.push_back(i);
    }
    if (candidates.empty() || options.probes == 0) {
        report.passed = true;
        return report;
    }

    std::mt19937_64 rng(options.seed);
    std::uniform_int_distribution<std::size_t> pick_tensor(0, candidates.size() - 1);
    double sum = 0.0;
    for (std::size_t probe = 0; probe < options.probes; ++probe) {
        const std::size_t ti = candidates[pick_tensor(rng)];
        auto& tensor = *params[ti];
        std::uniform_int_distribution<std::size_t> pick_entry(0, tensor.size() - 1);
        const std::size_t j = pick_entry(rng);

        const double saved = tensor[j];
        tensor[j] = saved + options.eps;
        const double up = loss();
        tensor[j] = saved - options.eps;
        const double down = loss();
        tensor[j] = saved;

        const double numeric = (up - down) / (2.0 * options.eps);
        const double exact = analytic[ti][j];
        const double denom = std::max({std::abs(numeric), std::abs(exact), options.floor});
        const double rel = std::abs(numeric - exact) / denom;
        sum += rel;
        if (rel > report.max_rel_error || probe == 0) {
            report.max_rel_error = rel;
            report.worst = (ti < names.size() ? names[ti] : "#" + std::to_string(ti)) + "[" + std::to_string(j) + "]";
            report.worst_analytic = exact;
            report.worst_numeric = numeric;
        }
        ++report.probes;
    }
    report.mean_rel_error = sum / static_cast<double>(report.probes);
    report.passed = report.max_rel_error <= options.tol;
    return report;
}

}  // namespace flexdoc
