#pragma once

// Sequential mixture-of-experts gating: a two-logit softmax gate over the
// mean-pooled pair (latest expert output, accumulated representation)
// drives a per-sample convex interpolation between the two. One gate
// parameter set is shared by every expert step of a stage.

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "mvssm/blocks.hpp"
#include "mvssm/tensor.hpp"

namespace mvssm {

template <typename T>
struct GateParams {
    Tensor<T> w_in;   // [d_g x 2*d]
    Tensor<T> w_out;  // [2 x d_g]
};

// w_out starts at zero so every gate opens at exactly 0.5.
template <typename T>
GateParams<T> make_gate(ParamFactory<T>& f, const std::string& prefix, std::size_t d,
                        std::size_t d_g) {
    GateParams<T> p;
    p.w_in = f.uniform_fan(prefix + ".w_in", {d_g, 2 * d}, 2 * d);
    p.w_out = f.constant(prefix + ".w_out", {2, d_g}, T(0));
    return p;
}

// Scalar weight of the latest expert output: component 0 of
// softmax(W_out . relu(W_in . [mean(current), mean(previous)])).
template <typename T>
Tensor<T> gate_forward(const Tensor<T>& current, const Tensor<T>& previous,
                       const GateParams<T>& p) {
    if (current.shape() != previous.shape())
        dim_fail("gate_forward", "inputs differ: " + shape_str(current.shape()) + " vs " +
                                     shape_str(previous.shape()));
    Tensor<T> pooled = concat(mean_pool(current), mean_pool(previous));
    Tensor<T> logits = linear(relu(linear(pooled, p.w_in)), p.w_out);
    return pick(softmax(logits, 0), 0);
}

// g*current + (1-g)*previous, g a scalar tensor.
template <typename T>
Tensor<T> gated_interpolate(const Tensor<T>& current, const Tensor<T>& previous,
                            const Tensor<T>& g) {
    if (g.numel() != 1)
        dim_fail("gated_interpolate", "gate must be scalar, got " + shape_str(g.shape()));
    Tensor<T> keep = add_scalar(mul_scalar(g, T(-1)), T(1));
    return add(mul(g, current), mul(keep, previous));
}

// ---------------------------------------------------------------------------
// stages

enum class ExpertKind { SecMamba, Attention };

template <typename T>
struct Expert {
    ExpertKind kind;
    std::variant<SecMambaParams<T>, AttentionParams<T>> params;
};

// Gate modes: Learned evaluates the shared gate; Bypass composes experts
// with no gate at all (and allocates no gate parameters).
enum class GateMode { Learned, Bypass };

template <typename T>
struct StageParams {
    std::vector<Expert<T>> experts;
    GateMode mode = GateMode::Learned;
    GateParams<T> gate;  // valid only when mode == Learned
    SsmRoute route = SsmRoute::Scan;
};

template <typename T>
Tensor<T> expert_forward(const Tensor<T>& x, const Expert<T>& e, SsmRoute route) {
    if (e.kind == ExpertKind::SecMamba)
        return secmamba_forward(x, std::get<SecMambaParams<T>>(e.params), route);
    return attention_forward(x, std::get<AttentionParams<T>>(e.params));
}

// Runs the stage recursion R_0 = X, R_l = g_l * E_l(R_{l-1}) + (1-g_l) * R_{l-1}.
// `forced_gate` overrides every gate with a fixed value (0 skips the experts
// entirely, 1 reproduces the ungated composition).
template <typename T>
Tensor<T> stage_forward(const Tensor<T>& x, const StageParams<T>& stage,
                        std::optional<double> forced_gate = std::nullopt) {
    Tensor<T> r = x;
    for (const Expert<T>& e : stage.experts) {
        if (forced_gate && *forced_gate == 0.0) continue;
        Tensor<T> out = expert_forward(r, e, stage.route);
        if (stage.mode == GateMode::Bypass || (forced_gate && *forced_gate == 1.0)) {
            r = out;
        } else if (forced_gate) {
            r = gated_interpolate(out, r, Tensor<T>::scalar(T(*forced_gate)));
        } else {
            r = gated_interpolate(out, r, gate_forward(out, r, stage.gate));
        }
    }
    return r;
}

}  // namespace mvssm
