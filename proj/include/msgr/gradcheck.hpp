#pragma once

#include <functional>
#include <string>
#include <vector>

#include "param.hpp"
#include "tensor.hpp"

namespace msgr {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_name;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;

    bool ok(double tol) const { return checked > 0 && max_rel_err < tol; }
};

namespace detail {

// Relative when gradients are large, absolute when they are small.
inline double grad_rel_err(double analytic, double numeric) {
    double denom = std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
    return std::fabs(analytic - numeric) / denom;
}

} // namespace detail

// Central finite differences against the reverse-mode gradient. f must be a
// deterministic pure function of the checked tensors (rebuild the graph on
// every call, no internal randomness). Perturbations are applied in double
// precision directly to the stored values. `stride` samples every n-th
// element of each tensor when exhaustive checking is too slow.
inline GradCheckResult grad_check_tensors(const std::function<TensorPtr()>& f,
                                          const std::vector<std::pair<std::string, TensorPtr>>& checked,
                                          double eps = 1e-5, std::size_t stride = 1) {
    if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be positive");
    if (stride == 0) stride = 1;

    for (auto& [name, t] : checked) {
        if (!t->requires_grad) throw std::invalid_argument("grad_check: tensor '" + name + "' has no gradient");
        t->zero_grad();
    }

    auto loss = f();
    if (loss->numel() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
    backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(checked.size());
    for (auto& [name, t] : checked) analytic.push_back(t->grad);

    GradCheckResult r;
    for (std::size_t pi = 0; pi < checked.size(); ++pi) {
        TensorPtr t = checked[pi].second;
        for (std::size_t i = 0; i < t->numel(); i += stride) {
            double saved = t->data[i];
            t->data[i] = saved + eps;
            double lp = f()->value();
            t->data[i] = saved - eps;
            double lm = f()->value();
            t->data[i] = saved;
            double numeric = (lp - lm) / (2.0 * eps);
            double a = analytic[pi][i];
            double err = detail::grad_rel_err(a, numeric);
            ++r.checked;
            if (err > r.max_rel_err) {
                r.max_rel_err = err;
                r.worst_name = checked[pi].first;
                r.worst_index = i;
                r.worst_analytic = a;
                r.worst_numeric = numeric;
            }
        }
    }
    return r;
}

inline GradCheckResult grad_check(const std::function<TensorPtr()>& f, ParamStore& store, double eps = 1e-5,
                                  std::size_t stride = 1) {
    std::vector<std::pair<std::string, TensorPtr>> checked;
    checked.reserve(store.size());
    for (auto& p : store.all()) checked.emplace_back(p.name, p.value);
    return grad_check_tensors(f, checked, eps, stride);
}

} // namespace msgr
