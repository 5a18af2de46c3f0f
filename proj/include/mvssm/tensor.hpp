#pragma once

// Dense row-major tensor with a reverse-mode autodiff tape.
//
// Tensors are value handles over shared nodes. Ops never mutate their
// inputs; every op that sees an input with requires_grad while a tape is
// active records a pull closure onto that tape. backward() replays the
// closures in exact reverse order of recording.
//
// Scalar type is a template parameter: float for training, double for
// every verification path (gradient checks are unreliable in 32 bit).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iostream>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mvssm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct TapeError : std::logic_error {
    using std::logic_error::logic_error;
};

struct NonFiniteError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

[[noreturn]] inline void dim_fail(const std::string& op, const std::string& detail) {
    throw DimensionError(op + ": " + detail);
}

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;   // empty until touched by backward
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<T> value, bool requires_grad = false) {
        if (shape_numel(shape) != value.size())
            dim_fail("tensor", "shape " + shape_str(shape) + " does not hold " +
                                   std::to_string(value.size()) + " values");
        node_ = std::make_shared<TensorNode<T>>();
        node_->shape = std::move(shape);
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<T> v(shape_numel(shape), T(0));
        return Tensor(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor full(Shape shape, T fill, bool requires_grad = false) {
        std::vector<T> v(shape_numel(shape), fill);
        return Tensor(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<T>{v}, requires_grad);
    }

    bool valid() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }

    const std::vector<T>& data() const { return node_->value; }
    std::vector<T>& mutable_data() { return node_->value; }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool rg = true) {
        node_->requires_grad = rg;
        return *this;
    }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    const std::vector<T>& grad() const { return node_->grad; }
    std::vector<T>& mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    T item() const {
        if (numel() != 1)
            dim_fail("item", "tensor " + shape_str(shape()) + " is not a scalar");
        return node_->value[0];
    }

    T at(std::size_t i) const { return node_->value.at(i); }
    T at(std::size_t r, std::size_t c) const {
        return node_->value.at(r * node_->shape[1] + c);
    }

    bool all_finite() const {
        for (T v : node_->value)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::shared_ptr<TensorNode<T>> node() const { return node_; }

private:
    std::shared_ptr<TensorNode<T>> node_;
};

// Wengert-list tape. One tape per model step; backward consumes it.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    class Activation {
    public:
        explicit Activation(Tape* t) : prev_(active_), mine_(t) { active_ = t; }
        ~Activation() { active_ = prev_; }
        Activation(const Activation&) = delete;
        Activation& operator=(const Activation&) = delete;

    private:
        Tape* prev_;
        Tape* mine_;
    };

    [[nodiscard]] Activation activate() { return Activation(this); }
    static Tape* active() { return active_; }

    void record(const char* op, const Tensor<T>& out, std::function<void()> pull) {
        if (consumed_) throw TapeError("tape: recording onto a consumed tape");
        if (check_finite && !out.all_finite())
            throw NonFiniteError(std::string("non-finite values produced by op '") + op + "'");
        out.node()->requires_grad = true;
        entries_.push_back(Entry{op, std::move(pull)});
    }

    // Seeds d(loss)/d(loss) = 1 and pulls every recorded op in reverse.
    // Returns false (with a warning) when loss is detached from this tape.
    bool backward(const Tensor<T>& loss) {
        if (loss.numel() != 1)
            dim_fail("backward", "loss " + shape_str(loss.shape()) + " is not a scalar");
        if (consumed_) throw TapeError("backward: tape already consumed");
        if (!loss.requires_grad() || entries_.empty()) {
            std::cerr << "[mvssm] warning: backward on a detached loss; no gradients computed\n";
            return false;
        }
        loss.node()->ensure_grad();
        loss.node()->grad[0] = T(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->pull();
        consumed_ = true;
        return true;
    }

    bool consumed() const { return consumed_; }
    std::size_t size() const { return entries_.size(); }

    // When set, every recorded op validates its output for NaN/inf and
    // raises NonFiniteError naming the op. Used by the gradcheck harness.
    bool check_finite = false;

private:
    struct Entry {
        const char* op;
        std::function<void()> pull;
    };
    std::vector<Entry> entries_;
    bool consumed_ = false;
    inline static thread_local Tape* active_ = nullptr;
};

template <typename T>
bool backward(const Tensor<T>& loss) {
    Tape<T>* t = Tape<T>::active();
    if (!t) {
        std::cerr << "[mvssm] warning: backward with no active tape; no gradients computed\n";
        return false;
    }
    return t->backward(loss);
}

namespace detail {

template <typename T>
bool grad_wanted(std::initializer_list<const Tensor<T>*> ins) {
    if (!Tape<T>::active()) return false;
    for (const Tensor<T>* t : ins)
        if (t->valid() && t->requires_grad()) return true;
    return false;
}

// Dot product with four accumulator chains; fixed evaluation order.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
    T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    std::size_t k = 0;
    for (; k + 4 <= n; k += 4) {
        s0 += a[k] * b[k];
        s1 += a[k + 1] * b[k + 1];
        s2 += a[k + 2] * b[k + 2];
        s3 += a[k + 3] * b[k + 3];
    }
    for (; k < n; ++k) s0 += a[k] * b[k];
    return ((s0 + s1) + (s2 + s3));
}

// y += alpha * x
template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        dim_fail("matmul", "expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                               shape_str(b.shape()));
    const std::size_t m = a.extent(0), k = a.extent(1), k2 = b.extent(0), n = b.extent(1);
    if (k != k2)
        dim_fail("matmul", "inner extents differ: " + shape_str(a.shape()) + " vs " +
                               shape_str(b.shape()));
    std::vector<T> out(m * n, T(0));
    const T* av = a.data().data();
    const T* bv = b.data().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t kk = 0; kk < k; ++kk)
            detail::axpy(av[i * k + kk], bv + kk * n, out.data() + i * n, n);
    Tensor<T> y(Shape{m, n}, std::move(out));
    if (detail::grad_wanted<T>({&a, &b})) {
        Tape<T>::active()->record("matmul", y, [an = a.node(), bn = b.node(), yn = y.node(), m, k, n] {
            if (yn->grad.empty()) return;
            const T* g = yn->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                // da = g . b^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk)
                        an->grad[i * k + kk] +=
                            detail::dot(g + i * n, bn->value.data() + kk * n, n);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                // db = a^T . g
                for (std::size_t kk = 0; kk < k; ++kk)
                    for (std::size_t i = 0; i < m; ++i)
                        detail::axpy(an->value[i * k + kk], g + i * n, bn->grad.data() + kk * n, n);
            }
        });
    }
    return y;
}

// y = x . W^T + b, with W stored [out x in] (row per output unit).
// Accepts x of rank 1 ([in]) or rank 2 ([N x in]); b may be invalid (no bias).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = Tensor<T>()) {
    if (w.rank() != 2) dim_fail("linear", "weight must be rank 2, got " + shape_str(w.shape()));
    const std::size_t dout = w.extent(0), din = w.extent(1);
    const bool vec = x.rank() == 1;
    if (!vec && x.rank() != 2)
        dim_fail("linear", "input must be rank 1 or 2, got " + shape_str(x.shape()));
    const std::size_t rows = vec ? 1 : x.extent(0);
    const std::size_t xin = vec ? x.extent(0) : x.extent(1);
    if (xin != din)
        dim_fail("linear", "input " + shape_str(x.shape()) + " does not match weight " +
                               shape_str(w.shape()));
    if (b.valid() && (b.rank() != 1 || b.extent(0) != dout))
        dim_fail("linear", "bias " + shape_str(b.shape()) + " does not match weight " +
                               shape_str(w.shape()));
    std::vector<T> out(rows * dout);
    const T* xv = x.data().data();
    const T* wv = w.data().data();
    if (rows >= 4) {
        // transpose the weight once so the inner loop streams unit-stride
        // over the output axis; the per-lane accumulation order is fixed
        std::vector<T> wt(din * dout);
        for (std::size_t o = 0; o < dout; ++o)
            for (std::size_t k = 0; k < din; ++k) wt[k * dout + o] = wv[o * din + k];
        for (std::size_t i = 0; i < rows; ++i) {
            T* yr = out.data() + i * dout;
            if (b.valid()) std::copy_n(b.data().data(), dout, yr);
            const T* xr = xv + i * din;
            for (std::size_t k = 0; k < din; ++k)
                detail::axpy(xr[k], wt.data() + k * dout, yr, dout);
        }
    } else {
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t o = 0; o < dout; ++o) {
                T s = detail::dot(xv + i * din, wv + o * din, din);
                if (b.valid()) s += b.data()[o];
                out[i * dout + o] = s;
            }
    }
    Tensor<T> y(vec ? Shape{dout} : Shape{rows, dout}, std::move(out));
    if (detail::grad_wanted<T>({&x, &w, &b})) {
        Tape<T>::active()->record(
            "linear", y,
            [xn = x.node(), wn = w.node(), bn = b.valid() ? b.node() : nullptr, yn = y.node(),
             rows, din, dout] {
                if (yn->grad.empty()) return;
                const T* g = yn->grad.data();
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    // dx = g . W, four weight rows per pass
                    for (std::size_t i = 0; i < rows; ++i) {
                        T* dx = xn->grad.data() + i * din;
                        std::size_t o = 0;
                        for (; o + 4 <= dout; o += 4) {
                            const T g0 = g[i * dout + o], g1 = g[i * dout + o + 1];
                            const T g2 = g[i * dout + o + 2], g3 = g[i * dout + o + 3];
                            const T* w0 = wn->value.data() + o * din;
                            const T* w1 = w0 + din;
                            const T* w2 = w1 + din;
                            const T* w3 = w2 + din;
                            for (std::size_t k = 0; k < din; ++k)
                                dx[k] += g0 * w0[k] + g1 * w1[k] + g2 * w2[k] + g3 * w3[k];
                        }
                        for (; o < dout; ++o)
                            detail::axpy(g[i * dout + o], wn->value.data() + o * din, dx, din);
                    }
                }
                if (wn->requires_grad) {
                    wn->ensure_grad();
                    // dW = g^T . x, four input rows per pass against one hot dW row
                    for (std::size_t o = 0; o < dout; ++o) {
                        T* dw = wn->grad.data() + o * din;
                        std::size_t i = 0;
                        for (; i + 4 <= rows; i += 4) {
                            const T g0 = g[i * dout + o], g1 = g[(i + 1) * dout + o];
                            const T g2 = g[(i + 2) * dout + o], g3 = g[(i + 3) * dout + o];
                            const T* x0 = xn->value.data() + i * din;
                            const T* x1 = x0 + din;
                            const T* x2 = x1 + din;
                            const T* x3 = x2 + din;
                            for (std::size_t k = 0; k < din; ++k)
                                dw[k] += g0 * x0[k] + g1 * x1[k] + g2 * x2[k] + g3 * x3[k];
                        }
                        for (; i < rows; ++i)
                            detail::axpy(g[i * dout + o], xn->value.data() + i * din, dw, din);
                    }
                }
                if (bn && bn->requires_grad) {
                    bn->ensure_grad();
                    for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t o = 0; o < dout; ++o) bn->grad[o] += g[i * dout + o];
                }
            });
    }
    return y;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    if (x.rank() != 2) dim_fail("transpose", "expects rank 2, got " + shape_str(x.shape()));
    const std::size_t m = x.extent(0), n = x.extent(1);
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x.data()[i * n + j];
    Tensor<T> y(Shape{n, m}, std::move(out));
    if (detail::grad_wanted<T>({&x})) {
        Tape<T>::active()->record("transpose", y, [xn = x.node(), yn = y.node(), m, n] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) xn->grad[i * n + j] += yn->grad[j * m + i];
        });
    }
    return y;
}

// Same data, new shape (numel preserved).
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        dim_fail("reshape", shape_str(x.shape()) + " cannot reshape to " + shape_str(shape));
    Tensor<T> y(std::move(shape), x.data());
    if (detail::grad_wanted<T>({&x})) {
        Tape<T>::active()->record("reshape", y, [xn = x.node(), yn = y.node()] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < yn->grad.size(); ++i) xn->grad[i] += yn->grad[i];
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// elementwise binaries: equal shapes or scalar-vs-tensor (numel 1) only

namespace detail {

enum class BinKind { Add, Sub, Mul };

template <typename T>
Tensor<T> binary(BinKind kind, const char* name, const Tensor<T>& a, const Tensor<T>& b) {
    const bool as = a.numel() == 1, bs = b.numel() == 1;
    if (!as && !bs && a.shape() != b.shape())
        dim_fail(name, "incompatible shapes " + shape_str(a.shape()) + " and " +
                           shape_str(b.shape()));
    const Tensor<T>& big = bs ? a : b;
    const std::size_t n = big.numel();
    std::vector<T> out(n);
    const T* av = a.data().data();
    const T* bv = b.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        const T x = as ? av[0] : av[i];
        const T y = bs ? bv[0] : bv[i];
        out[i] = kind == BinKind::Add ? x + y : kind == BinKind::Sub ? x - y : x * y;
    }
    Tensor<T> r(big.shape(), std::move(out));
    if (grad_wanted<T>({&a, &b})) {
        Tape<T>::active()->record(name, r, [kind, an = a.node(), bn = b.node(), rn = r.node(), as, bs, n] {
            if (rn->grad.empty()) return;
            const T* g = rn->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    T da = g[i];
                    if (kind == BinKind::Mul) da *= bs ? bn->value[0] : bn->value[i];
                    an->grad[as ? 0 : i] += da;
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    T db = g[i];
                    if (kind == BinKind::Mul) db *= as ? an->value[0] : an->value[i];
                    else if (kind == BinKind::Sub) db = -db;
                    bn->grad[bs ? 0 : i] += db;
                }
            }
        });
    }
    return r;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(detail::BinKind::Add, "add", a, b);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(detail::BinKind::Sub, "sub", a, b);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(detail::BinKind::Mul, "mul", a, b);
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
    std::vector<T> out(x.data());
    for (T& v : out) v += c;
    Tensor<T> y(x.shape(), std::move(out));
    if (detail::grad_wanted<T>({&x})) {
        Tape<T>::active()->record("add_scalar", y, [xn = x.node(), yn = y.node()] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < yn->grad.size(); ++i) xn->grad[i] += yn->grad[i];
        });
    }
    return y;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
    std::vector<T> out(x.data());
    for (T& v : out) v *= c;
    Tensor<T> y(x.shape(), std::move(out));
    if (detail::grad_wanted<T>({&x})) {
        Tape<T>::active()->record("mul_scalar", y, [xn = x.node(), yn = y.node(), c] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < yn->grad.size(); ++i) xn->grad[i] += c * yn->grad[i];
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// elementwise unaries

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary(const char* name, const Tensor<T>& x, Fwd fwd, Bwd bwd) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x.data()[i]);
    Tensor<T> y(x.shape(), std::move(out));
    if (grad_wanted<T>({&x})) {
        Tape<T>::active()->record(name, y, [xn = x.node(), yn = y.node(), bwd] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < yn->grad.size(); ++i)
                xn->grad[i] += yn->grad[i] * bwd(xn->value[i], yn->value[i]);
        });
    }
    return y;
}

}  // namespace detail

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary(
        "sigmoid", x,
        [](T v) {
            if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
            const T e = std::exp(v);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary(
        "relu", x, [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& x) {
    return detail::unary(
        "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

// ---------------------------------------------------------------------------
// softmax / log_softmax along an axis of a rank-1 or rank-2 tensor,
// computed with max subtraction

namespace detail {

template <typename T>
void softmax_spans(const Tensor<T>& x, std::size_t axis, std::size_t& groups, std::size_t& span,
                   std::size_t& stride, const char* name) {
    if (x.rank() == 1) {
        if (axis != 0) dim_fail(name, "axis out of range for rank-1 input");
        groups = 1;
        span = x.extent(0);
        stride = 1;
    } else if (x.rank() == 2) {
        if (axis > 1) dim_fail(name, "axis out of range for rank-2 input");
        if (axis == 1) {
            groups = x.extent(0);
            span = x.extent(1);
            stride = 1;
        } else {
            groups = x.extent(1);
            span = x.extent(0);
            stride = x.extent(1);
        }
    } else {
        dim_fail(name, "expects rank 1 or 2, got " + shape_str(x.shape()));
    }
}

template <typename T>
std::size_t group_base(std::size_t g, std::size_t axis, std::size_t rank, std::size_t span,
                       std::size_t /*stride*/) {
    if (rank == 1) return 0;
    return axis == 1 ? g * span : g;  // axis 0: column g, rows strided
}

}  // namespace detail

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis = 0) {
    std::size_t groups, span, stride;
    detail::softmax_spans(x, axis, groups, span, stride, "softmax");
    std::vector<T> out(x.numel());
    const T* xv = x.data().data();
    for (std::size_t g = 0; g < groups; ++g) {
        const std::size_t base = detail::group_base<T>(g, axis, x.rank(), span, stride);
        T mx = xv[base];
        for (std::size_t i = 1; i < span; ++i) mx = std::max(mx, xv[base + i * stride]);
        T denom = 0;
        for (std::size_t i = 0; i < span; ++i) {
            const T e = std::exp(xv[base + i * stride] - mx);
            out[base + i * stride] = e;
            denom += e;
        }
        for (std::size_t i = 0; i < span; ++i) out[base + i * stride] /= denom;
    }
    Tensor<T> y(x.shape(), std::move(out));
    if (detail::grad_wanted<T>({&x})) {
        Tape<T>::active()->record(
            "softmax", y,
            [xn = x.node(), yn = y.node(), groups, span, stride, axis, rank = x.rank()] {
                if (yn->grad.empty() || !xn->requires_grad) return;
                xn->ensure_grad();
                for (std::size_t g = 0; g < groups; ++g) {
                    const std::size_t base = detail::group_base<T>(g, axis, rank, span, stride);
                    T inner = 0;
                    for (std::size_t i = 0; i < span; ++i)
                        inner += yn->grad[base + i * stride] * yn->value[base + i * stride];
                    for (std::size_t i = 0; i < span; ++i) {
                        const std::size_t k = base + i * stride;
                        xn->grad[k] += yn->value[k] * (yn->grad[k] - inner);
                    }
                }
            });
    }
    return y;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis = 0) {
    std::size_t groups, span, stride;
    detail::softmax_spans(x, axis, groups, span, stride, "log_softmax");
    std::vector<T> out(x.numel());
    const T* xv = x.data().data();
    for (std::size_t g = 0; g < groups; ++g) {
        const std::size_t base = detail::group_base<T>(g, axis, x.rank(), span, stride);
        T mx = xv[base];
        for (std::size_t i = 1; i < span; ++i) mx = std::max(mx, xv[base + i * stride]);
        T denom = 0;
        for (std::size_t i = 0; i < span; ++i) denom += std::exp(xv[base + i * stride] - mx);
        const T lse = mx + std::log(denom);
        for (std::size_t i = 0; i < span; ++i) out[base + i * stride] = xv[base + i * stride] - lse;
    }
    Tensor<T> y(x.shape(), std::move(out));
    if (detail::grad_wanted<T>({&x})) {
        Tape<T>::active()->record(
            "log_softmax", y,
            [xn = x.node(), yn = y.node(), groups, span, stride, axis, rank = x.rank()] {
                if (yn->grad.empty() || !xn->requires_grad) return;
                xn->ensure_grad();
                for (std::size_t g = 0; g < groups; ++g) {
                    const std::size_t base = detail::group_base<T>(g, axis, rank, span, stride);
                    T gsum = 0;
                    for (std::size_t i = 0; i < span; ++i) gsum += yn->grad[base + i * stride];
                    for (std::size_t i = 0; i < span; ++i) {
                        const std::size_t k = base + i * stride;
                        xn->grad[k] += yn->grad[k] - std::exp(yn->value[k]) * gsum;
                    }
                }
            });
    }
    return y;
}

// ---------------------------------------------------------------------------
// layernorm over the last axis (rank 1: whole vector, rank 2: per row)

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    if (eps <= T(0)) dim_fail("layernorm", "eps must be positive");
    const bool vec = x.rank() == 1;
    if (!vec && x.rank() != 2)
        dim_fail("layernorm", "expects rank 1 or 2, got " + shape_str(x.shape()));
    const std::size_t rows = vec ? 1 : x.extent(0);
    const std::size_t d = vec ? x.extent(0) : x.extent(1);
    if (gamma.numel() != d || beta.numel() != d)
        dim_fail("layernorm", "gamma/beta " + shape_str(gamma.shape()) + "/" +
                                  shape_str(beta.shape()) + " do not match feature width " +
                                  std::to_string(d));
    std::vector<T> out(x.numel());
    std::vector<T> inv_std(rows), means(rows);
    const T* xv = x.data().data();
    for (std::size_t i = 0; i < rows; ++i) {
        T mean = 0;
        for (std::size_t j = 0; j < d; ++j) mean += xv[i * d + j];
        mean /= T(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) {
            const T c = xv[i * d + j] - mean;
            var += c * c;
        }
        var /= T(d);
        const T is = T(1) / std::sqrt(var + eps);
        means[i] = mean;
        inv_std[i] = is;
        for (std::size_t j = 0; j < d; ++j)
            out[i * d + j] = (xv[i * d + j] - mean) * is * gamma.data()[j] + beta.data()[j];
    }
    Tensor<T> y(x.shape(), std::move(out));
    if (detail::grad_wanted<T>({&x, &gamma, &beta})) {
        Tape<T>::active()->record(
            "layernorm", y,
            [xn = x.node(), gn = gamma.node(), bn = beta.node(), yn = y.node(), rows, d,
             means = std::move(means), inv_std = std::move(inv_std)] {
                if (yn->grad.empty()) return;
                const T* g = yn->grad.data();
                for (std::size_t i = 0; i < rows; ++i) {
                    const T is = inv_std[i];
                    // xhat and the two row reductions
                    T mean_dxhat = 0, mean_dxhat_xhat = 0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const T xhat = (xn->value[i * d + j] - means[i]) * is;
                        const T dxhat = g[i * d + j] * gn->value[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat /= T(d);
                    mean_dxhat_xhat /= T(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const T xhat = (xn->value[i * d + j] - means[i]) * is;
                        if (xn->requires_grad) {
                            xn->ensure_grad();
                            const T dxhat = g[i * d + j] * gn->value[j];
                            xn->grad[i * d + j] +=
                                (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * is;
                        }
                        if (gn->requires_grad) {
                            gn->ensure_grad();
                            gn->grad[j] += g[i * d + j] * xhat;
                        }
                        if (bn->requires_grad) {
                            bn->ensure_grad();
                            bn->grad[j] += g[i * d + j];
                        }
                    }
                }
            });
    }
    return y;
}

// ---------------------------------------------------------------------------
// reductions and reassembly

// Column means of an [N x d] tensor.
template <typename T>
Tensor<T> mean_pool(const Tensor<T>& x) {
    if (x.rank() != 2) dim_fail("mean_pool", "expects rank 2, got " + shape_str(x.shape()));
    const std::size_t n = x.extent(0), d = x.extent(1);
    if (n == 0) dim_fail("mean_pool", "empty input (0 rows)");
    std::vector<T> out(d, T(0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[j] += x.data()[i * d + j];
    for (T& v : out) v /= T(n);
    Tensor<T> y(Shape{d}, std::move(out));
    if (detail::grad_wanted<T>({&x})) {
        Tape<T>::active()->record("mean_pool", y, [xn = x.node(), yn = y.node(), n, d] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            const T inv = T(1) / T(n);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j) xn->grad[i * d + j] += yn->grad[j] * inv;
        });
    }
    return y;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T s = 0;
    for (T v : x.data()) s += v;
    Tensor<T> y = Tensor<T>::scalar(s);
    if (detail::grad_wanted<T>({&x})) {
        Tape<T>::active()->record("sum", y, [xn = x.node(), yn = y.node()] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += yn->grad[0];
        });
    }
    return y;
}

// Single element by flat index, as a scalar tensor.
template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::size_t index) {
    if (index >= x.numel())
        dim_fail("pick", "index " + std::to_string(index) + " out of range for " +
                             shape_str(x.shape()));
    Tensor<T> y = Tensor<T>::scalar(x.data()[index]);
    if (detail::grad_wanted<T>({&x})) {
        Tape<T>::active()->record("pick", y, [xn = x.node(), yn = y.node(), index] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            xn->grad[index] += yn->grad[0];
        });
    }
    return y;
}

// Concatenation along the last axis; all other extents must match.
template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != b.rank())
        dim_fail("concat", "rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    if (a.rank() == 0 || a.rank() > 2)
        dim_fail("concat", "expects rank 1 or 2, got " + shape_str(a.shape()));
    const std::size_t rows = a.rank() == 1 ? 1 : a.extent(0);
    if (a.rank() == 2 && b.extent(0) != rows)
        dim_fail("concat", "leading extents differ: " + shape_str(a.shape()) + " vs " +
                               shape_str(b.shape()));
    const std::size_t p = a.extent(a.rank() - 1), q = b.extent(b.rank() - 1);
    std::vector<T> out(rows * (p + q));
    for (std::size_t i = 0; i < rows; ++i) {
        std::copy_n(a.data().data() + i * p, p, out.data() + i * (p + q));
        std::copy_n(b.data().data() + i * q, q, out.data() + i * (p + q) + p);
    }
    Shape sh = a.shape();
    sh.back() = p + q;
    Tensor<T> y(std::move(sh), std::move(out));
    if (detail::grad_wanted<T>({&a, &b})) {
        Tape<T>::active()->record("concat", y, [an = a.node(), bn = b.node(), yn = y.node(), rows, p, q] {
            if (yn->grad.empty()) return;
            for (std::size_t i = 0; i < rows; ++i) {
                if (an->requires_grad) {
                    an->ensure_grad();
                    for (std::size_t j = 0; j < p; ++j)
                        an->grad[i * p + j] += yn->grad[i * (p + q) + j];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (std::size_t j = 0; j < q; ++j)
                        bn->grad[i * q + j] += yn->grad[i * (p + q) + p + j];
                }
            }
        });
    }
    return y;
}

// Stacks same-length vectors into a [B x d] matrix.
template <typename T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
    if (rows.empty()) dim_fail("stack_rows", "no rows given");
    const std::size_t d = rows[0].numel();
    for (const auto& r : rows)
        if (r.rank() != 1 || r.numel() != d)
            dim_fail("stack_rows", "row " + shape_str(r.shape()) + " does not match [" +
                                       std::to_string(d) + "]");
    std::vector<T> out(rows.size() * d);
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(rows[i].data().data(), d, out.data() + i * d);
    Tensor<T> y(Shape{rows.size(), d}, std::move(out));
    bool wants = false;
    for (const auto& r : rows)
        if (r.requires_grad()) wants = true;
    if (wants && Tape<T>::active()) {
        std::vector<std::shared_ptr<TensorNode<T>>> nodes;
        nodes.reserve(rows.size());
        for (const auto& r : rows) nodes.push_back(r.node());
        Tape<T>::active()->record("stack_rows", y, [nodes = std::move(nodes), yn = y.node(), d] {
            if (yn->grad.empty()) return;
            for (std::size_t i = 0; i < nodes.size(); ++i) {
                if (!nodes[i]->requires_grad) continue;
                nodes[i]->ensure_grad();
                for (std::size_t j = 0; j < d; ++j) nodes[i]->grad[j] += yn->grad[i * d + j];
            }
        });
    }
    return y;
}

}  // namespace mvssm
