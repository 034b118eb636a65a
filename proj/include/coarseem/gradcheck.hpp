#pragma once

#include <functional>
#include <vector>

#include "coarseem/ops.hpp"
#include "coarseem/tensor.hpp"

namespace coarseem {

// The repo-wide gradient oracle: central finite differences against
// reverse-mode gradients.
//
// Relative error per coordinate is |analytic - numeric| divided by
// max(1e-8, |analytic| + |numeric|). Coordinates whose one-sided slopes
// disagree (an abs/relu kink within h of the evaluation point) are skipped.
struct GradCheckResult {
    double max_rel_err = 0.0;
    std::int64_t checked = 0;
    std::int64_t skipped = 0;
};

// f must evaluate a scalar loss from the given inputs. Gradients are checked
// for every tensor in `inputs` that has requires_grad set.
inline GradCheckResult finite_diff_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
    double h = 1e-5) {
    detail::require(h > 0.0, "finite_diff_check: h must be positive");

    // Analytic gradients from one recorded forward pass.
    std::vector<std::vector<double>> analytic(inputs.size());
    {
        for (auto& t : inputs) t.zero_grad();
        Tape tape;
        Tensor loss = f(inputs);
        detail::require(loss.numel() == 1, "finite_diff_check: f must be scalar-valued");
        tape.backward(loss);
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            if (!inputs[i].requires_grad()) continue;
            analytic[i] = inputs[i].has_grad()
                              ? inputs[i].grad()
                              : std::vector<double>(inputs[i].values().size(), 0.0);
        }
    }

    GradCheckResult res;
    NoGrad ng;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!inputs[i].requires_grad()) continue;
        auto& x = inputs[i].values();
        for (std::size_t j = 0; j < x.size(); ++j) {
            const double x0 = x[j];
            x[j] = x0 + h;
            const double fp = f(inputs).item();
            x[j] = x0 - h;
            const double fm = f(inputs).item();
            x[j] = x0;
            const double f0 = f(inputs).item();
            const double d_plus = (fp - f0) / h;
            const double d_minus = (f0 - fm) / h;
            const double numeric = 0.5 * (d_plus + d_minus);
            // A large one-sided slope mismatch means a kink sits inside
            // (x0-h, x0+h); the central estimate is meaningless there.
            if (std::fabs(d_plus - d_minus) >
                1e-2 * std::max(1.0, std::fabs(d_plus) + std::fabs(d_minus))) {
                res.skipped++;
                continue;
            }
            const double a = analytic[i][j];
            const double err = std::fabs(a - numeric) / std::max(1e-8, std::fabs(a) + std::fabs(numeric));
            res.max_rel_err = std::max(res.max_rel_err, err);
            res.checked++;
        }
    }
    return res;
}

// Single-input convenience wrapper.
inline GradCheckResult finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                         double h = 1e-5) {
    return finite_diff_check(
        [&f](const std::vector<Tensor>& in) { return f(in[0]); }, {std::move(x)}, h);
}

}  // namespace coarseem
