#ifndef SETVEC_GRAD_CHECK_HPP_
#define SETVEC_GRAD_CHECK_HPP_

#include <cmath>
#include <functional>
#include <vector>

#include "setvec/rng.hpp"
#include "setvec/tensor.hpp"

namespace setvec {

// A differentiable primitive seen as a black box: forward maps inputs to one
// output tensor; backward maps an upstream gradient (same shape as the
// output) plus the original inputs to per-input gradients.
template <typename S = double>
struct DifferentiableOp {
    std::function<TensorT<S>(const std::vector<TensorT<S>>&)> forward;
    std::function<std::vector<TensorT<S>>(const TensorT<S>&, const std::vector<TensorT<S>>&)>
        backward;
};

// Central-difference check of backward against forward. Reduces the output
// against a fixed random probe u, compares the analytic gradient of
// sum(u * f) with central differences coordinate by coordinate, and returns
// the worst relative error. Deterministic: the probe comes from a fixed seed.
template <typename S = double>
S grad_check(const DifferentiableOp<S>& op, std::vector<TensorT<S>> inputs, S step = S(1e-3)) {
    if (step <= S{0}) throw domain_error("grad_check: step must be positive");
    for (const auto& t : inputs)
        if (!t.all_finite()) throw numeric_error("grad_check: non-finite input");

    const TensorT<S> y0 = op.forward(inputs);
    if (!y0.all_finite()) throw numeric_error("grad_check: non-finite forward output");

    Rng rng(0x9c0ffee5u);
    TensorT<S> probe(y0.shape());
    for (std::size_t i = 0; i < probe.size(); ++i)
        probe[i] = static_cast<S>(rng.uniform(-1.0, 1.0));

    const std::vector<TensorT<S>> analytic = op.backward(probe, inputs);
    if (analytic.size() != inputs.size())
        throw dim_error("grad_check: backward returned " + std::to_string(analytic.size()) +
                        " gradients for " + std::to_string(inputs.size()) + " inputs");
    for (std::size_t k = 0; k < inputs.size(); ++k)
        if (!analytic[k].same_shape(inputs[k]))
            throw dim_error("grad_check: gradient " + std::to_string(k) + " has shape " +
                            shape_str(analytic[k].shape()) + ", input has " +
                            shape_str(inputs[k].shape()));

    auto objective = [&](const std::vector<TensorT<S>>& ins) {
        const TensorT<S> y = op.forward(ins);
        if (!y.all_finite()) throw numeric_error("grad_check: non-finite intermediate");
        S s{0};
        for (std::size_t i = 0; i < y.size(); ++i) s += probe[i] * y[i];
        return s;
    };

    S worst{0};
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const S keep = inputs[k][i];
            inputs[k][i] = keep + step;
            const S up = objective(inputs);
            inputs[k][i] = keep - step;
            const S dn = objective(inputs);
            inputs[k][i] = keep;
            const S numeric = (up - dn) / (S{2} * step);
            const S a = analytic[k][i];
            const S denom = std::max({std::abs(a), std::abs(numeric), S(1e-8)});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace setvec

#endif  // SETVEC_GRAD_CHECK_HPP_
