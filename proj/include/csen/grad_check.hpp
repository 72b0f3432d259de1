#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "csen/common.hpp"
#include "csen/tensor.hpp"

namespace csen {

template <typename S>
struct GradCheckReport {
    S max_rel_err = S(0);
    std::string worst_param;
    std::int64_t worst_index = -1;
    S worst_analytic = S(0);
    S worst_numeric = S(0);

    bool ok(S tol) const { return max_rel_err <= tol; }
};

// Central-difference check of d(fn)/d(theta) for every coordinate of every
// parameter in `params`. `fn` must rebuild the graph and return a scalar
// tensor on each call; gradients are taken from a fresh backward pass.
// Relative error: |a - n| / max(floor, |a| + |n|).
template <typename S>
GradCheckReport<S> grad_check(ParamSet<S>& params, const std::function<TensorPtr<S>()>& fn,
                              S h = S(1e-5), S floor = S(1e-8)) {
    params.zero_grad();
    auto loss = fn();
    if (!loss->all_finite()) throw error("grad_check: loss is not finite");
    backward(loss);

    std::vector<std::vector<S>> analytic;
    analytic.reserve(params.size());
    for (const auto& [name, t] : params)
        analytic.push_back(t->grad.empty() ? std::vector<S>(static_cast<std::size_t>(t->numel()), S(0))
                                           : t->grad);

    GradCheckReport<S> report;
    std::size_t pi = 0;
    for (const auto& [name, t] : params) {
        for (std::int64_t i = 0; i < t->numel(); ++i) {
            const S saved = t->data[i];
            t->data[i] = saved + h;
            S fp;
            {
                NoGradGuard ng;
                auto v = fn();
                if (!v->all_finite()) throw error(cat("grad_check: loss not finite at ", name, "[", i, "]+h"));
                fp = v->data[0];
            }
            t->data[i] = saved - h;
            S fm;
            {
                NoGradGuard ng;
                auto v = fn();
                if (!v->all_finite()) throw error(cat("grad_check: loss not finite at ", name, "[", i, "]-h"));
                fm = v->data[0];
            }
            t->data[i] = saved;
            const S numeric = (fp - fm) / (S(2) * h);
            const S a = analytic[pi][static_cast<std::size_t>(i)];
            const S rel = std::abs(a - numeric) /
                          std::max(floor, std::abs(a) + std::abs(numeric));
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = name;
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
        ++pi;
    }
    return report;
}

}  // namespace csen
