#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "adamix/ops.hpp"
#include "adamix/tensor.hpp"

namespace adamix {

struct FiniteDiffOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    // Relative errors use max(|analytic|, |numeric|, denominator_floor) as the
    // denominator so exact zeros do not divide by zero.
    double denominator_floor = 1e-6;
};

struct FiniteDiffInput {
    std::size_t input = 0;  // position in the checked input list
    double max_rel_error = 0.0;
    std::size_t worst_element = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct FiniteDiffReport {
    std::vector<FiniteDiffInput> inputs;
    std::vector<std::size_t> excluded;  // inputs with requires_grad == false
    double max_rel_error = 0.0;
    bool passed = true;
};

/// Compares backward() against central differences for every tracked input.
/// `f` must rebuild its graph from the input handles on every call.
inline FiniteDiffReport finite_diff_check(const std::function<Tensor()>& f, std::span<const Tensor> inputs,
                                          const FiniteDiffOptions& options = {}) {
    FiniteDiffReport report;
    std::vector<Tensor> handles(inputs.begin(), inputs.end());
    for (Tensor& t : handles) t.clear_grad();
    backward(f());

    for (std::size_t i = 0; i < handles.size(); ++i) {
        Tensor& t = handles[i];
        if (!t.requires_grad()) {
            report.excluded.push_back(i);
            continue;
        }
        const std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                          : std::vector<double>(t.numel(), 0.0);
        FiniteDiffInput entry{.input = i};
        NoGradGuard no_grad;
        auto data = t.mutable_data();
        for (std::size_t e = 0; e < data.size(); ++e) {
            const double saved = data[e];
            data[e] = saved + options.step;
            const double up = f().item();
            data[e] = saved - options.step;
            const double down = f().item();
            data[e] = saved;
            const double numeric = (up - down) / (2.0 * options.step);
            const double denom = std::max({std::abs(analytic[e]), std::abs(numeric), options.denominator_floor});
            const double rel = std::abs(analytic[e] - numeric) / denom;
            if (rel > entry.max_rel_error || e == 0) {
                entry.max_rel_error = std::max(entry.max_rel_error, rel);
                entry.worst_element = e;
                entry.analytic = analytic[e];
                entry.numeric = numeric;
            }
        }
        report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
        report.inputs.push_back(entry);
    }
    report.passed = report.max_rel_error < options.tolerance;
    for (Tensor& t : handles) t.clear_grad();
    return report;
}

inline FiniteDiffReport finite_diff_check(const std::function<Tensor()>& f, std::initializer_list<Tensor> inputs,
                                          const FiniteDiffOptions& options = {}) {
    return finite_diff_check(f, std::span<const Tensor>(inputs.begin(), inputs.size()), options);
}

}  // namespace adamix
