// Central finite-difference validation of reverse-mode gradients.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "lasformer/tensor.hpp"

namespace lasformer {

// Maximum over coordinates of |analytic - central difference| relative error
// for a deterministic scalar-valued function of one tensor. The function is
// re-invoked with perturbed values inside a no-grad scope, so any stop-grad
// buffers it closes over must be frozen by the caller if they are meant to
// stay fixed across perturbations.
inline double finite_difference_check(
    const std::function<Tensor(const Tensor&)>& f, const Tensor& x0, double h) {
    if (h <= 0.0) throw ContractError("finite_difference_check: h must be > 0");

    Tensor x = Tensor::from_values(x0.shape(), x0.values(), true);
    Tensor y = f(x);
    const double y0 = y.scalar_value();
    if (!std::isfinite(y0)) {
        throw NumericError("finite_difference_check: non-finite function value");
    }
    backward(y);
    std::vector<double> analytic(x.values().size(), 0.0);
    if (x.has_grad()) analytic = x.grad();

    auto eval = [&](const std::vector<double>& vals) {
        NoGradScope no_grad;
        Tensor xp = Tensor::from_values(x0.shape(), vals, false);
        const double v = f(xp).scalar_value();
        if (!std::isfinite(v)) {
            throw NumericError("finite_difference_check: non-finite value at perturbed point");
        }
        return v;
    };

    std::vector<double> vals = x0.values();
    double max_err = 0.0;
    for (size_t i = 0; i < vals.size(); ++i) {
        const double saved = vals[i];
        vals[i] = saved + h;
        const double fp = eval(vals);
        vals[i] = saved - h;
        const double fm = eval(vals);
        vals[i] = saved;
        const double numeric = (fp - fm) / (2.0 * h);
        const double denom =
            std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-8});
        max_err = std::max(max_err, std::fabs(analytic[i] - numeric) / denom);
    }
    return max_err;
}

}  // namespace lasformer
