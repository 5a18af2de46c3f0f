#pragma once

// Discrete linear state-space model in two algebraically equivalent forms:
//   scan:  h_k = a (.) h_{k-1} + B_c * x_k ,  y_k = C_c . h_k   (h_0 = 0)
//   conv:  y_k = sum_{m=0..k} K[m] (.) x_{k-m}  with  K[m,c] = C_c . a^m (.) B_c
//
// The state matrix is diagonal and shared across channels; each of the
// d_ie channels runs its own d_hs-state single-in/single-out system
// (column of B in, row of C out), so K has shape [N x d_ie] and the
// convolution is depthwise. Cross-channel mixing belongs to the
// surrounding projections.
//
// a is produced as tanh(raw) by the caller, so |a| < 1 and the kernel
// taps decay geometrically.

#include <cstddef>
#include <vector>

#include "mvssm/tensor.hpp"

namespace mvssm {

template <typename T>
struct SsmParams {
    Tensor<T> raw_a;  // [d_hs], unconstrained; effective diagonal is tanh(raw_a)
    Tensor<T> b_in;   // [d_hs x d_ie]
    Tensor<T> c_out;  // [d_ie x d_hs]

    std::size_t state_dim() const { return raw_a.extent(0); }
    std::size_t channels() const { return c_out.extent(0); }
    Tensor<T> a_diag() const { return tanh_op(raw_a); }
};

enum class SsmRoute { Scan, Conv };

namespace detail {

template <typename T>
void ssm_check(const char* op, const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c,
               const Tensor<T>& x) {
    if (a.rank() != 1) dim_fail(op, "a_diag must be rank 1, got " + shape_str(a.shape()));
    if (b.rank() != 2 || c.rank() != 2)
        dim_fail(op, "B/C must be rank 2, got " + shape_str(b.shape()) + " and " +
                         shape_str(c.shape()));
    const std::size_t dhs = a.extent(0);
    if (b.extent(0) != dhs || c.extent(1) != dhs)
        dim_fail(op, "state dims disagree: a " + shape_str(a.shape()) + ", B " +
                         shape_str(b.shape()) + ", C " + shape_str(c.shape()));
    if (b.extent(1) != c.extent(0))
        dim_fail(op, "channel dims disagree: B " + shape_str(b.shape()) + ", C " +
                         shape_str(c.shape()));
    if (x.valid()) {
        if (x.rank() != 2) dim_fail(op, "input must be rank 2, got " + shape_str(x.shape()));
        if (x.extent(1) != b.extent(1))
            dim_fail(op, "input " + shape_str(x.shape()) + " does not match channel count " +
                             std::to_string(b.extent(1)));
        if (x.extent(0) == 0) dim_fail(op, "empty sequence");
    }
}

}  // namespace detail

// Sequential recurrence route. Differentiable in a_diag, B, C and X.
template <typename T>
Tensor<T> ssm_scan(const Tensor<T>& a_diag, const Tensor<T>& b_in, const Tensor<T>& c_out,
                   const Tensor<T>& x) {
    detail::ssm_check("ssm_scan", a_diag, b_in, c_out, x);
    const std::size_t n = x.extent(0), die = x.extent(1), dhs = a_diag.extent(0);
    const bool wants = detail::grad_wanted<T>({&a_diag, &b_in, &c_out, &x});

    std::vector<T> out(n * die);
    // states saved per channel for backward: layout [c][k][s]
    auto saved = wants ? std::make_shared<std::vector<T>>(die * n * dhs) : nullptr;

    const T* av = a_diag.data().data();
    const T* bv = b_in.data().data();
    const T* cv = c_out.data().data();
    const T* xv = x.data().data();
    std::vector<T> h(dhs);
    for (std::size_t c = 0; c < die; ++c) {
        std::fill(h.begin(), h.end(), T(0));
        for (std::size_t k = 0; k < n; ++k) {
            const T xk = xv[k * die + c];
            T y = 0;
            for (std::size_t s = 0; s < dhs; ++s) {
                h[s] = av[s] * h[s] + bv[s * die + c] * xk;
                y += cv[c * dhs + s] * h[s];
            }
            out[k * die + c] = y;
            if (wants) std::copy(h.begin(), h.end(), saved->begin() + (c * n + k) * dhs);
        }
    }
    Tensor<T> yt(Shape{n, die}, std::move(out));
    if (wants) {
        Tape<T>::active()->record(
            "ssm_scan", yt,
            [an = a_diag.node(), bn = b_in.node(), cn = c_out.node(), xn = x.node(),
             yn = yt.node(), saved, n, die, dhs] {
                if (yn->grad.empty()) return;
                const T* g = yn->grad.data();
                const T* av = an->value.data();
                const T* bv = bn->value.data();
                const T* cv = cn->value.data();
                const T* xv = xn->value.data();
                if (an->requires_grad) an->ensure_grad();
                if (bn->requires_grad) bn->ensure_grad();
                if (cn->requires_grad) cn->ensure_grad();
                if (xn->requires_grad) xn->ensure_grad();
                std::vector<T> lam(dhs);
                for (std::size_t c = 0; c < die; ++c) {
                    std::fill(lam.begin(), lam.end(), T(0));
                    const T* hs = saved->data() + c * n * dhs;
                    for (std::size_t k = n; k-- > 0;) {
                        const T gk = g[k * die + c];
                        T dx = 0;
                        for (std::size_t s = 0; s < dhs; ++s) {
                            lam[s] += cv[c * dhs + s] * gk;
                            const T hprev = k == 0 ? T(0) : hs[(k - 1) * dhs + s];
                            if (an->requires_grad) an->grad[s] += lam[s] * hprev;
                            if (bn->requires_grad)
                                bn->grad[s * die + c] += lam[s] * xv[k * die + c];
                            if (cn->requires_grad)
                                cn->grad[c * dhs + s] += gk * hs[k * dhs + s];
                            dx += bv[s * die + c] * lam[s];
                            lam[s] *= av[s];
                        }
                        if (xn->requires_grad) xn->grad[k * die + c] += dx;
                    }
                }
            });
    }
    return yt;
}

// Materializes the depthwise kernel taps K[m,c] = sum_s C[c,s] a[s]^m B[s,c]
// for m = 0..n-1, by repeated diagonal scaling. Differentiable in a, B, C.
template <typename T>
Tensor<T> ssm_kernel(const Tensor<T>& a_diag, const Tensor<T>& b_in, const Tensor<T>& c_out,
                     std::size_t n) {
    detail::ssm_check("ssm_kernel", a_diag, b_in, c_out, Tensor<T>());
    if (n == 0) dim_fail("ssm_kernel", "kernel length must be >= 1");
    const std::size_t dhs = a_diag.extent(0), die = b_in.extent(1);
    const bool wants = detail::grad_wanted<T>({&a_diag, &b_in, &c_out});

    std::vector<T> taps(n * die);
    const T* av = a_diag.data().data();
    const T* bv = b_in.data().data();
    const T* cv = c_out.data().data();
    std::vector<T> pw(dhs, T(1));
    for (std::size_t m = 0; m < n; ++m) {
        for (std::size_t c = 0; c < die; ++c) {
            T t = 0;
            for (std::size_t s = 0; s < dhs; ++s) t += cv[c * dhs + s] * pw[s] * bv[s * die + c];
            taps[m * die + c] = t;
        }
        for (std::size_t s = 0; s < dhs; ++s) pw[s] *= av[s];
    }
    Tensor<T> kt(Shape{n, die}, std::move(taps));
    if (wants) {
        Tape<T>::active()->record(
            "ssm_kernel", kt,
            [an = a_diag.node(), bn = b_in.node(), cn = c_out.node(), kn = kt.node(), n, die,
             dhs] {
                if (kn->grad.empty()) return;
                const T* g = kn->grad.data();
                const T* av = an->value.data();
                const T* bv = bn->value.data();
                const T* cv = cn->value.data();
                if (an->requires_grad) an->ensure_grad();
                if (bn->requires_grad) bn->ensure_grad();
                if (cn->requires_grad) cn->ensure_grad();
                std::vector<T> pw(dhs, T(1));       // a^m
                std::vector<T> pw_prev(dhs, T(0));  // m * a^(m-1)
                for (std::size_t m = 0; m < n; ++m) {
                    for (std::size_t c = 0; c < die; ++c) {
                        const T gk = g[m * die + c];
                        if (gk == T(0)) continue;
                        for (std::size_t s = 0; s < dhs; ++s) {
                            const T cb = cv[c * dhs + s] * bv[s * die + c];
                            if (an->requires_grad) an->grad[s] += gk * cb * pw_prev[s];
                            if (bn->requires_grad)
                                bn->grad[s * die + c] += gk * cv[c * dhs + s] * pw[s];
                            if (cn->requires_grad)
                                cn->grad[c * dhs + s] += gk * bv[s * die + c] * pw[s];
                        }
                    }
                    for (std::size_t s = 0; s < dhs; ++s) {
                        pw_prev[s] = pw_prev[s] * av[s] + pw[s];  // d(a^{m+1})/da
                        pw[s] *= av[s];
                    }
                }
            });
    }
    return kt;
}

// Causal depthwise 1-D convolution: y[k,c] = sum_{m=0..k} K[m,c] x[k-m,c].
// Kernel length must equal the sequence length.
template <typename T>
Tensor<T> ssm_conv(const Tensor<T>& kernel, const Tensor<T>& x) {
    if (kernel.rank() != 2 || x.rank() != 2)
        dim_fail("ssm_conv", "expects rank-2 kernel and input, got " + shape_str(kernel.shape()) +
                                 " and " + shape_str(x.shape()));
    if (kernel.shape() != x.shape())
        dim_fail("ssm_conv", "kernel " + shape_str(kernel.shape()) +
                                 " was not materialized for input " + shape_str(x.shape()));
    const std::size_t n = x.extent(0), die = x.extent(1);
    std::vector<T> out(n * die, T(0));
    const T* kv = kernel.data().data();
    const T* xv = x.data().data();
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t m = 0; m <= k; ++m)
            for (std::size_t c = 0; c < die; ++c)
                out[k * die + c] += kv[m * die + c] * xv[(k - m) * die + c];
    Tensor<T> y(Shape{n, die}, std::move(out));
    if (detail::grad_wanted<T>({&kernel, &x})) {
        Tape<T>::active()->record(
            "ssm_conv", y, [kn = kernel.node(), xn = x.node(), yn = y.node(), n, die] {
                if (yn->grad.empty()) return;
                const T* g = yn->grad.data();
                if (kn->requires_grad) kn->ensure_grad();
                if (xn->requires_grad) xn->ensure_grad();
                for (std::size_t k = 0; k < n; ++k)
                    for (std::size_t m = 0; m <= k; ++m)
                        for (std::size_t c = 0; c < die; ++c) {
                            const T gk = g[k * die + c];
                            if (kn->requires_grad)
                                kn->grad[m * die + c] += gk * xn->value[(k - m) * die + c];
                            if (xn->requires_grad)
                                xn->grad[(k - m) * die + c] += gk * kn->value[m * die + c];
                        }
            });
    }
    return y;
}

// Applies the SSM through the chosen route. Both routes produce the same
// values; scan is O(N d_ie d_hs), conv is O(N^2 d_ie) plus kernel cost.
template <typename T>
Tensor<T> ssm_forward(const SsmParams<T>& p, const Tensor<T>& x, SsmRoute route) {
    Tensor<T> a = p.a_diag();
    if (route == SsmRoute::Scan) return ssm_scan(a, p.b_in, p.c_out, x);
    Tensor<T> k = ssm_kernel(a, p.b_in, p.c_out, x.extent(0));
    return ssm_conv(k, x);
}

}  // namespace mvssm
