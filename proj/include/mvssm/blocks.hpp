#pragma once

// Neural building blocks: patch embedding, the SecMamba block (input
// projection -> SSM -> sigmoid selective gate -> output projection ->
// residual + LayerNorm), pre-LN multi-head self-attention experts, the
// convolutional stem, token-grid downsampling and the MLP head.

#include <cstddef>
#include <string>
#include <vector>

#include "mvssm/params.hpp"
#include "mvssm/ssm.hpp"
#include "mvssm/tensor.hpp"

namespace mvssm {

inline constexpr double kLayerNormEps = 1e-5;

// ---------------------------------------------------------------------------
// conv2d over [H x W x C] images (NHWC within a single sample)

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                 std::size_t pad) {
    if (x.rank() != 3) dim_fail("conv2d", "input must be [HxWxC], got " + shape_str(x.shape()));
    if (w.rank() != 4) dim_fail("conv2d", "weight must be [OxIxKhxKw], got " + shape_str(w.shape()));
    const std::size_t h = x.extent(0), wd = x.extent(1), cin = x.extent(2);
    const std::size_t cout = w.extent(0), kin = w.extent(1), kh = w.extent(2), kw = w.extent(3);
    if (kin != cin)
        dim_fail("conv2d", "weight " + shape_str(w.shape()) + " does not match input channels " +
                               std::to_string(cin));
    if (b.valid() && b.numel() != cout)
        dim_fail("conv2d", "bias " + shape_str(b.shape()) + " does not match output channels");
    const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
    const std::size_t wo = (wd + 2 * pad - kw) / stride + 1;
    std::vector<T> out(ho * wo * cout, T(0));
    const T* xv = x.data().data();
    const T* wv = w.data().data();
    for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox)
            for (std::size_t oc = 0; oc < cout; ++oc) {
                T s = b.valid() ? b.data()[oc] : T(0);
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    const std::ptrdiff_t iy = std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(pad);
                    if (iy < 0 || iy >= std::ptrdiff_t(h)) continue;
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const std::ptrdiff_t ix =
                            std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(pad);
                        if (ix < 0 || ix >= std::ptrdiff_t(wd)) continue;
                        const T* xp = xv + (std::size_t(iy) * wd + std::size_t(ix)) * cin;
                        const T* wp = wv + ((oc * cin) * kh + ky) * kw + kx;
                        for (std::size_t ic = 0; ic < cin; ++ic)
                            s += xp[ic] * wp[ic * kh * kw];
                    }
                }
                out[(oy * wo + ox) * cout + oc] = s;
            }
    Tensor<T> y(Shape{ho, wo, cout}, std::move(out));
    if (detail::grad_wanted<T>({&x, &w, &b})) {
        Tape<T>::active()->record(
            "conv2d", y,
            [xn = x.node(), wn = w.node(), bn = b.valid() ? b.node() : nullptr, yn = y.node(), h,
             wd, cin, cout, kh, kw, ho, wo, stride, pad] {
                if (yn->grad.empty()) return;
                const T* g = yn->grad.data();
                if (xn->requires_grad) xn->ensure_grad();
                if (wn->requires_grad) wn->ensure_grad();
                if (bn && bn->requires_grad) bn->ensure_grad();
                for (std::size_t oy = 0; oy < ho; ++oy)
                    for (std::size_t ox = 0; ox < wo; ++ox)
                        for (std::size_t oc = 0; oc < cout; ++oc) {
                            const T gk = g[(oy * wo + ox) * cout + oc];
                            if (gk == T(0)) continue;
                            if (bn && bn->requires_grad) bn->grad[oc] += gk;
                            for (std::size_t ky = 0; ky < kh; ++ky) {
                                const std::ptrdiff_t iy =
                                    std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(pad);
                                if (iy < 0 || iy >= std::ptrdiff_t(h)) continue;
                                for (std::size_t kx = 0; kx < kw; ++kx) {
                                    const std::ptrdiff_t ix =
                                        std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(pad);
                                    if (ix < 0 || ix >= std::ptrdiff_t(wd)) continue;
                                    const std::size_t xoff =
                                        (std::size_t(iy) * wd + std::size_t(ix)) * cin;
                                    const std::size_t woff = ((oc * cin) * kh + ky) * kw + kx;
                                    for (std::size_t ic = 0; ic < cin; ++ic) {
                                        if (wn->requires_grad)
                                            wn->grad[woff + ic * kh * kw] +=
                                                gk * xn->value[xoff + ic];
                                        if (xn->requires_grad)
                                            xn->grad[xoff + ic] +=
                                                gk * wn->value[woff + ic * kh * kw];
                                    }
                                }
                            }
                        }
            });
    }
    return y;
}

// Strided identity shortcut: samples every `stride`-th pixel and replicates
// input channels cyclically up to cout.
template <typename T>
Tensor<T> subsample_replicate(const Tensor<T>& x, std::size_t stride, std::size_t cout) {
    if (x.rank() != 3)
        dim_fail("subsample_replicate", "input must be [HxWxC], got " + shape_str(x.shape()));
    const std::size_t h = x.extent(0), w = x.extent(1), cin = x.extent(2);
    const std::size_t ho = (h + stride - 1) / stride, wo = (w + stride - 1) / stride;
    std::vector<T> out(ho * wo * cout);
    for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox)
            for (std::size_t oc = 0; oc < cout; ++oc)
                out[(oy * wo + ox) * cout + oc] =
                    x.data()[(oy * stride * w + ox * stride) * cin + oc % cin];
    Tensor<T> y(Shape{ho, wo, cout}, std::move(out));
    if (detail::grad_wanted<T>({&x})) {
        Tape<T>::active()->record(
            "subsample_replicate", y,
            [xn = x.node(), yn = y.node(), w, cin, cout, ho, wo, stride] {
                if (yn->grad.empty() || !xn->requires_grad) return;
                xn->ensure_grad();
                for (std::size_t oy = 0; oy < ho; ++oy)
                    for (std::size_t ox = 0; ox < wo; ++ox)
                        for (std::size_t oc = 0; oc < cout; ++oc)
                            xn->grad[(oy * stride * w + ox * stride) * cin + oc % cin] +=
                                yn->grad[(oy * wo + ox) * cout + oc];
            });
    }
    return y;
}

// ---------------------------------------------------------------------------
// patch embedding

template <typename T>
struct PatchEmbedParams {
    Tensor<T> w;  // [d_pe x P*P*C]
    Tensor<T> b;  // [d_pe]
    std::size_t patch = 0;
};

template <typename T>
PatchEmbedParams<T> make_patch_embed(ParamFactory<T>& f, const std::string& prefix,
                                     std::size_t patch, std::size_t channels, std::size_t d_pe) {
    PatchEmbedParams<T> p;
    p.patch = patch;
    const std::size_t flat = patch * patch * channels;
    p.w = f.uniform_fan(prefix + ".w", {d_pe, flat}, flat);
    p.b = f.constant(prefix + ".b", {d_pe}, T(0));
    return p;
}

// Rearranges [H x W x C] into non-overlapping P x P patches, row-major over
// the patch grid, each flattened in (py, px, c) order.
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& image, std::size_t patch) {
    if (image.rank() != 3)
        dim_fail("extract_patches", "image must be [HxWxC], got " + shape_str(image.shape()));
    const std::size_t h = image.extent(0), w = image.extent(1), c = image.extent(2);
    if (patch == 0 || h % patch != 0 || w % patch != 0)
        dim_fail("extract_patches", "image " + shape_str(image.shape()) +
                                        " is not divisible into patches of side " +
                                        std::to_string(patch));
    const std::size_t gh = h / patch, gw = w / patch, flat = patch * patch * c;
    std::vector<T> out(gh * gw * flat);
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px) {
            T* dst = out.data() + (py * gw + px) * flat;
            for (std::size_t iy = 0; iy < patch; ++iy)
                for (std::size_t ix = 0; ix < patch; ++ix)
                    for (std::size_t ic = 0; ic < c; ++ic)
                        *dst++ = image.data()[((py * patch + iy) * w + px * patch + ix) * c + ic];
        }
    Tensor<T> y(Shape{gh * gw, flat}, std::move(out));
    if (detail::grad_wanted<T>({&image})) {
        Tape<T>::active()->record(
            "extract_patches", y, [xn = image.node(), yn = y.node(), w, c, gh, gw, patch, flat] {
                if (yn->grad.empty() || !xn->requires_grad) return;
                xn->ensure_grad();
                for (std::size_t py = 0; py < gh; ++py)
                    for (std::size_t px = 0; px < gw; ++px) {
                        const T* src = yn->grad.data() + (py * gw + px) * flat;
                        for (std::size_t iy = 0; iy < patch; ++iy)
                            for (std::size_t ix = 0; ix < patch; ++ix)
                                for (std::size_t ic = 0; ic < c; ++ic)
                                    xn->grad[((py * patch + iy) * w + px * patch + ix) * c + ic] +=
                                        *src++;
                    }
            });
    }
    return y;
}

template <typename T>
Tensor<T> patch_embed(const Tensor<T>& image, const PatchEmbedParams<T>& p) {
    return linear(extract_patches(image, p.patch), p.w, p.b);
}

// ---------------------------------------------------------------------------
// SecMamba block

template <typename T>
struct SecMambaParams {
    Tensor<T> w_in, b_in;    // d_ie x d_pe
    SsmParams<T> ssm;
    Tensor<T> w_gate, b_gate;  // d_ie x d_ie
    Tensor<T> w_out, b_out;    // d_pe x d_ie
    Tensor<T> ln_gamma, ln_beta;
};

template <typename T>
SecMambaParams<T> make_secmamba(ParamFactory<T>& f, const std::string& prefix, std::size_t d_pe,
                                std::size_t d_ie, std::size_t d_hs) {
    SecMambaParams<T> p;
    p.w_in = f.uniform_fan(prefix + ".w_in", {d_ie, d_pe}, d_pe);
    p.b_in = f.constant(prefix + ".b_in", {d_ie}, T(0));
    p.ssm.raw_a = f.uniform(prefix + ".ssm.raw_a", {d_hs}, -2.0, 2.0);
    p.ssm.b_in = f.uniform_fan(prefix + ".ssm.b", {d_hs, d_ie}, d_hs);
    p.ssm.c_out = f.uniform_fan(prefix + ".ssm.c", {d_ie, d_hs}, d_hs);
    p.w_gate = f.uniform_fan(prefix + ".w_gate", {d_ie, d_ie}, d_ie);
    p.b_gate = f.constant(prefix + ".b_gate", {d_ie}, T(0));
    p.w_out = f.uniform_fan(prefix + ".w_out", {d_pe, d_ie}, d_ie);
    p.b_out = f.constant(prefix + ".b_out", {d_pe}, T(0));
    p.ln_gamma = f.constant(prefix + ".ln_gamma", {d_pe}, T(1));
    p.ln_beta = f.constant(prefix + ".ln_beta", {d_pe}, T(0));
    return p;
}

// tokens -> project in -> SSM -> sigmoid gate modulation -> project out ->
// LayerNorm(tokens + branch). The residual is taken against the block input
// in embedding space, so d_ie may differ from d_pe.
template <typename T>
Tensor<T> secmamba_forward(const Tensor<T>& tokens, const SecMambaParams<T>& p,
                           SsmRoute route = SsmRoute::Scan) {
    Tensor<T> x = linear(tokens, p.w_in, p.b_in);
    Tensor<T> y = ssm_forward(p.ssm, x, route);
    Tensor<T> gate = sigmoid(linear(x, p.w_gate, p.b_gate));
    Tensor<T> modulated = mul(gate, y);
    Tensor<T> back = linear(modulated, p.w_out, p.b_out);
    return layernorm(add(tokens, back), p.ln_gamma, p.ln_beta, T(kLayerNormEps));
}

// ---------------------------------------------------------------------------
// self-attention block (pre-LN, multi-head, 4x MLP)

template <typename T>
struct AttentionParams {
    std::vector<Tensor<T>> w_q, w_k, w_v;  // per head, [d_head x d]
    Tensor<T> w_o;                         // [d x n_heads*d_head]
    Tensor<T> ln1_gamma, ln1_beta;
    Tensor<T> mlp_w1, mlp_b1;  // [4d x d]
    Tensor<T> mlp_w2, mlp_b2;  // [d x 4d]
    Tensor<T> ln2_gamma, ln2_beta;
    std::size_t n_heads = 0;
};

template <typename T>
AttentionParams<T> make_attention(ParamFactory<T>& f, const std::string& prefix, std::size_t d,
                                  std::size_t n_heads) {
    if (n_heads == 0 || d % n_heads != 0)
        dim_fail("make_attention", "head count " + std::to_string(n_heads) +
                                       " must divide width " + std::to_string(d));
    const std::size_t dh = d / n_heads;
    AttentionParams<T> p;
    p.n_heads = n_heads;
    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::string hp = prefix + ".h" + std::to_string(h);
        p.w_q.push_back(f.uniform_fan(hp + ".w_q", {dh, d}, d));
        p.w_k.push_back(f.uniform_fan(hp + ".w_k", {dh, d}, d));
        p.w_v.push_back(f.uniform_fan(hp + ".w_v", {dh, d}, d));
    }
    p.w_o = f.uniform_fan(prefix + ".w_o", {d, d}, d);
    p.ln1_gamma = f.constant(prefix + ".ln1_gamma", {d}, T(1));
    p.ln1_beta = f.constant(prefix + ".ln1_beta", {d}, T(0));
    p.mlp_w1 = f.uniform_fan(prefix + ".mlp_w1", {4 * d, d}, d);
    p.mlp_b1 = f.constant(prefix + ".mlp_b1", {4 * d}, T(0));
    p.mlp_w2 = f.uniform_fan(prefix + ".mlp_w2", {d, 4 * d}, 4 * d);
    p.mlp_b2 = f.constant(prefix + ".mlp_b2", {d}, T(0));
    p.ln2_gamma = f.constant(prefix + ".ln2_gamma", {d}, T(1));
    p.ln2_beta = f.constant(prefix + ".ln2_beta", {d}, T(0));
    return p;
}

template <typename T>
Tensor<T> attention_forward(const Tensor<T>& tokens, const AttentionParams<T>& p) {
    const std::size_t d = tokens.extent(1);
    const std::size_t dh = d / p.n_heads;
    const T scale = T(1) / std::sqrt(T(dh));
    Tensor<T> ln = layernorm(tokens, p.ln1_gamma, p.ln1_beta, T(kLayerNormEps));
    Tensor<T> heads;
    for (std::size_t h = 0; h < p.n_heads; ++h) {
        Tensor<T> q = linear(ln, p.w_q[h]);
        Tensor<T> k = linear(ln, p.w_k[h]);
        Tensor<T> v = linear(ln, p.w_v[h]);
        Tensor<T> scores = mul_scalar(matmul(q, transpose(k)), scale);
        Tensor<T> weights = softmax(scores, 1);
        Tensor<T> ctx = matmul(weights, v);
        heads = h == 0 ? ctx : concat(heads, ctx);
    }
    Tensor<T> attended = add(tokens, linear(heads, p.w_o));
    Tensor<T> ln2 = layernorm(attended, p.ln2_gamma, p.ln2_beta, T(kLayerNormEps));
    Tensor<T> hidden = relu(linear(ln2, p.mlp_w1, p.mlp_b1));
    return add(attended, linear(hidden, p.mlp_w2, p.mlp_b2));
}

// Per-row attention weights of a single head, for inspection in tests.
template <typename T>
Tensor<T> attention_weights(const Tensor<T>& tokens, const AttentionParams<T>& p, std::size_t head) {
    const std::size_t d = tokens.extent(1);
    const std::size_t dh = d / p.n_heads;
    Tensor<T> ln = layernorm(tokens, p.ln1_gamma, p.ln1_beta, T(kLayerNormEps));
    Tensor<T> q = linear(ln, p.w_q[head]);
    Tensor<T> k = linear(ln, p.w_k[head]);
    return softmax(mul_scalar(matmul(q, transpose(k)), T(1) / std::sqrt(T(dh))), 1);
}

// ---------------------------------------------------------------------------
// convolutional stem: two residual 3x3 stride-2 blocks

template <typename T>
struct ConvStemParams {
    Tensor<T> w1, b1;  // [c1 x cin x 3 x 3]
    Tensor<T> w2, b2;  // [c2 x c1 x 3 x 3]
};

template <typename T>
ConvStemParams<T> make_conv_stem(ParamFactory<T>& f, const std::string& prefix, std::size_t cin,
                                 std::size_t c1, std::size_t c2) {
    ConvStemParams<T> p;
    p.w1 = f.uniform_fan(prefix + ".w1", {c1, cin, 3, 3}, cin * 9);
    p.b1 = f.constant(prefix + ".b1", {c1}, T(0));
    p.w2 = f.uniform_fan(prefix + ".w2", {c2, c1, 3, 3}, c1 * 9);
    p.b2 = f.constant(prefix + ".b2", {c2}, T(0));
    return p;
}

// Each block: relu(conv3x3 stride 2 + strided identity). Output spatial dims
// are ceil(H/4) x ceil(W/4).
template <typename T>
Tensor<T> conv_stem_forward(const Tensor<T>& image, const ConvStemParams<T>& p) {
    Tensor<T> a =
        relu(add(conv2d(image, p.w1, p.b1, 2, 1), subsample_replicate(image, 2, p.w1.extent(0))));
    return relu(add(conv2d(a, p.w2, p.b2, 2, 1), subsample_replicate(a, 2, p.w2.extent(0))));
}

// ---------------------------------------------------------------------------
// token-grid downsampling: 2x2 stride-2 conv doubling the channel count

template <typename T>
struct DownsampleParams {
    Tensor<T> w;  // [2d x d x 2 x 2]
    Tensor<T> b;  // [2d]
};

template <typename T>
DownsampleParams<T> make_downsample(ParamFactory<T>& f, const std::string& prefix, std::size_t d) {
    DownsampleParams<T> p;
    p.w = f.uniform_fan(prefix + ".w", {2 * d, d, 2, 2}, d * 4);
    p.b = f.constant(prefix + ".b", {2 * d}, T(0));
    return p;
}

template <typename T>
Tensor<T> downsample(const Tensor<T>& tokens, const DownsampleParams<T>& p) {
    if (tokens.rank() != 2)
        dim_fail("downsample", "tokens must be rank 2, got " + shape_str(tokens.shape()));
    const std::size_t n = tokens.extent(0), d = tokens.extent(1);
    const std::size_t side = static_cast<std::size_t>(std::llround(std::sqrt(double(n))));
    if (side * side != n)
        dim_fail("downsample", std::to_string(n) + " tokens do not form a square grid");
    if (side % 2 != 0)
        dim_fail("downsample", "grid side " + std::to_string(side) + " is not divisible by 2");
    Tensor<T> grid = reshape(tokens, {side, side, d});
    Tensor<T> pooled = conv2d(grid, p.w, p.b, 2, 0);
    return reshape(pooled, {(side / 2) * (side / 2), 2 * d});
}

// ---------------------------------------------------------------------------
// MLP classification head

template <typename T>
struct MlpHeadParams {
    Tensor<T> w1, b1;  // [d_hidden x d_in]
    Tensor<T> w2, b2;  // [n_classes x d_hidden]
};

template <typename T>
MlpHeadParams<T> make_mlp_head(ParamFactory<T>& f, const std::string& prefix, std::size_t d_in,
                               std::size_t d_hidden, std::size_t n_classes) {
    MlpHeadParams<T> p;
    p.w1 = f.uniform_fan(prefix + ".w1", {d_hidden, d_in}, d_in);
    p.b1 = f.constant(prefix + ".b1", {d_hidden}, T(0));
    p.w2 = f.uniform_fan(prefix + ".w2", {n_classes, d_hidden}, d_hidden);
    p.b2 = f.constant(prefix + ".b2", {n_classes}, T(0));
    return p;
}

template <typename T>
Tensor<T> mlp_head(const Tensor<T>& z, const MlpHeadParams<T>& p) {
    return linear(relu(linear(z, p.w1, p.b1)), p.w2, p.b2);
}

}  // namespace mvssm
