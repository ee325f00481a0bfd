#pragma once

// Central finite-difference gradient verification. The numeric side never
// touches the tape, so it stays independent of the autodiff path it checks.

#include <cmath>
#include <vector>

#include "mdt/tensor.hpp"

namespace mdt {

inline double grad_rel_err(double analytic, double numeric) {
    return std::abs(analytic - numeric) /
           std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

// f: callable taking const Tensor64& and returning a scalar Tensor64.
// Returns the worst componentwise relative error between the autodiff
// gradient and (f(x+h e_i) - f(x-h e_i)) / 2h.
template <typename F>
double grad_check(F&& f, Tensor64 x, double h = 1e-5) {
    if (h < 1e-6 || h > 1e-3) throw ContractError("grad_check: h must lie in [1e-6, 1e-3]");
    x.set_requires_grad(true);
    x.zero_grad();
    {
        GraphT<double> graph;
        RecordScope<double> scope(graph);
        Tensor64 y = f(static_cast<const Tensor64&>(x));
        if (y.numel() != 1) throw ContractError("grad_check: f must return a scalar");
        graph.backward(y);
    }
    x.ensure_grad();
    std::vector<double> analytic(x.grad(), x.grad() + x.numel());

    double worst = 0.0;
    for (size_t i = 0; i < x.numel(); ++i) {
        const double orig = x.data()[i];
        x.data()[i] = orig + h;
        const double fp = f(static_cast<const Tensor64&>(x)).item();
        x.data()[i] = orig - h;
        const double fm = f(static_cast<const Tensor64&>(x)).item();
        x.data()[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        worst = std::max(worst, grad_rel_err(analytic[i], numeric));
    }
    return worst;
}

// Sweep over a set of parameter tensors. f is a nullary callable evaluating
// the scalar loss from the current parameter values.
template <typename F>
double grad_check_params(F&& f, const std::vector<Tensor64>& params, double h = 1e-5) {
    if (h < 1e-6 || h > 1e-3) throw ContractError("grad_check_params: h must lie in [1e-6, 1e-3]");
    for (auto& p : params) {
        const_cast<Tensor64&>(p).set_requires_grad(true);
        const_cast<Tensor64&>(p).zero_grad();
    }
    {
        GraphT<double> graph;
        RecordScope<double> scope(graph);
        Tensor64 y = f();
        if (y.numel() != 1) throw ContractError("grad_check_params: f must return a scalar");
        graph.backward(y);
    }
    double worst = 0.0;
    for (auto& pc : params) {
        Tensor64& p = const_cast<Tensor64&>(pc);
        p.ensure_grad();
        for (size_t i = 0; i < p.numel(); ++i) {
            const double orig = p.data()[i];
            p.data()[i] = orig + h;
            const double fp = f().item();
            p.data()[i] = orig - h;
            const double fm = f().item();
            p.data()[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            worst = std::max(worst, grad_rel_err(p.grad()[i], numeric));
        }
    }
    return worst;
}

}  // namespace mdt
