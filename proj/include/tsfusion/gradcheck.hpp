#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tsfusion/tensor.hpp"

namespace tsfusion {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_tensor = 0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Compares reverse-mode gradients of a scalar loss against central finite
/// differences for every coordinate of every tensor in `inputs`. The tensors
/// are perturbed in place and restored. Per coordinate the error is
/// |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
inline GradCheckResult grad_check_many(const std::function<Tensor()>& loss_fn, std::vector<Tensor> inputs,
                                       double h = 1e-5) {
    if (h <= 0.0) throw ConfigError("grad_check: step must be positive");
    std::vector<bool> saved_flags;
    for (auto& t : inputs) {
        saved_flags.push_back(t.requires_grad());
        t.set_requires_grad(true);
        t.zero_grad();
    }
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = loss_fn();
        if (!std::isfinite(loss.item())) throw NumericError("grad_check: loss is not finite at the base point");
        tape.backward(loss);
        for (auto& t : inputs) {
            analytic.push_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                            : std::vector<double>(t.numel(), 0.0));
        }
        tape.clear();
    }
    GradCheckResult result;
    NoGradScope no_grad;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto data = inputs[k].mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double orig = data[i];
            data[i] = orig + h;
            const double fp = loss_fn().item();
            data[i] = orig - h;
            const double fm = loss_fn().item();
            data[i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw NumericError("grad_check: non-finite loss when perturbing tensor " + std::to_string(k) +
                                   " coordinate " + std::to_string(i));
            }
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[k][i];
            const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
            if (rel > result.max_rel_error) result = {rel, k, i, a, numeric};
        }
    }
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        inputs[k].set_requires_grad(saved_flags[k]);
        inputs[k].zero_grad();
    }
    return result;
}

/// Single-input form: f maps x to a scalar.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
    Tensor probe = x.clone();
    return grad_check_many([&] { return f(probe); }, {probe}, h).max_rel_error;
}

} // namespace tsfusion
