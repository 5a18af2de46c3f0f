#pragma once

// Central-finite-difference gradient verification. Double precision only;
// the analytic side runs on a fresh tape, the numeric side re-evaluates the
// function with perturbed leaf values and no tape at all, so the two routes
// share no code path.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mvssm/tensor.hpp"

namespace mvssm {

struct GradCheckReport {
    double max_rel_err = 0.0;
    bool pass = false;
    std::string worst;  // "<input index>[<entry>]" of the worst entry
    std::size_t checked = 0;
};

// f() must rebuild the forward pass from the current values of `wrt` each
// time it is called and return a scalar tensor.
inline GradCheckReport grad_check_multi(const std::function<Tensor<double>()>& f,
                                        const std::vector<Tensor<double>>& wrt, double h,
                                        double tol) {
    if (h <= 0) throw std::invalid_argument("grad_check: h must be positive");

    // analytic gradients
    std::vector<std::vector<double>> analytic;
    {
        for (const auto& t : wrt) {
            t.node()->requires_grad = true;
            t.node()->grad.clear();
        }
        Tape<double> tape;
        tape.check_finite = true;
        auto guard = tape.activate();
        Tensor<double> y = f();
        if (y.numel() != 1)
            dim_fail("grad_check", "function output " + shape_str(y.shape()) + " is not a scalar");
        if (!std::isfinite(y.item()))
            throw NonFiniteError("grad_check: non-finite function value");
        tape.backward(y);
        for (const auto& t : wrt)
            analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.numel(), 0.0));
    }

    GradCheckReport rep;
    rep.pass = true;
    for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
        auto& vals = wrt[ti].node()->value;
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double keep = vals[i];
            vals[i] = keep + h;
            const double fp = f().item();
            vals[i] = keep - h;
            const double fm = f().item();
            vals[i] = keep;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NonFiniteError("grad_check: non-finite value during numeric evaluation");
            const double numeric = (fp - fm) / (2.0 * h);
            const double rel =
                std::abs(analytic[ti][i] - numeric) / std::max(1.0, std::abs(numeric));
            ++rep.checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst = std::to_string(ti) + "[" + std::to_string(i) + "]";
            }
        }
    }
    rep.pass = rep.max_rel_err <= tol;
    return rep;
}

// Single-input form: f maps x to a scalar.
inline GradCheckReport grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                                  const Tensor<double>& x, double h, double tol) {
    return grad_check_multi([&] { return f(x); }, {x}, h, tol);
}

}  // namespace mvssm
