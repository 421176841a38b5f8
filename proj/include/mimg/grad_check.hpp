#pragma once

#include <functional>
#include <vector>

#include "mimg/autodiff.hpp"

namespace mimg {

struct GradReport {
    double max_rel_err = 0;
    int input_index = -1;   // which input tensor held the worst element
    int64_t elem_index = -1;
};

// Compare reverse-mode gradients of a scalar-valued function against central
// finite differences, element by element, in double precision. The relative
// error uses |a| + |b| in the denominator with a small floor so exact zeros
// on both sides report zero error.
inline GradReport grad_check(
    const std::function<VarT<double>(const std::vector<VarT<double>>&)>& fn,
    const std::vector<TensorT<double>>& inputs, double eps = 1e-5) {
    std::vector<VarT<double>> vars;
    vars.reserve(inputs.size());
    for (const auto& t : inputs) vars.push_back(VarT<double>::leaf(t, true));
    VarT<double> loss = fn(vars);
    if (loss.value().numel() != 1) throw ShapeError("grad_check: fn must return a scalar");
    for (auto& v : vars) v.zero_grad();
    loss.backward();

    GradReport report;
    NoGrad guard;
    for (size_t vi = 0; vi < vars.size(); ++vi) {
        std::vector<VarT<double>> probe = vars;
        TensorT<double> work = inputs[vi];
        for (int64_t e = 0; e < work.numel(); ++e) {
            const double orig = work.data[static_cast<size_t>(e)];
            work.data[static_cast<size_t>(e)] = orig + eps;
            probe[vi] = VarT<double>::leaf(work, false);
            const double fp = fn(probe).value().data[0];
            work.data[static_cast<size_t>(e)] = orig - eps;
            probe[vi] = VarT<double>::leaf(work, false);
            const double fm = fn(probe).value().data[0];
            work.data[static_cast<size_t>(e)] = orig;

            const double fd = (fp - fm) / (2.0 * eps);
            const double ad = vars[vi].grad().data[static_cast<size_t>(e)];
            const double rel = std::abs(ad - fd) / std::max(1e-6, std::abs(ad) + std::abs(fd));
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.input_index = static_cast<int>(vi);
                report.elem_index = e;
            }
        }
    }
    return report;
}

} // namespace mimg
