#pragma once

// Shared verification batteries: the finite-difference gradcheck sweep over
// every block and the scan/convolution equivalence sweep. All in double.

#include <chrono>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mvssm/gradcheck.hpp"
#include "mvssm/model.hpp"
#include "mvssm/train.hpp"

namespace mvssm {

struct CheckResult {
    std::string name;
    double max_rel_err = 0;
    bool pass = false;
};

namespace detail {

inline Tensor<double> rnd(Shape shape, std::mt19937_64& rng, double lo = -1.5, double hi = 1.5) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = dist(rng);
    return Tensor<double>(std::move(shape), std::move(v));
}

}  // namespace detail

// Central-difference verification of every differentiable block, dims <= 8.
inline std::vector<CheckResult> gradcheck_battery(const std::string& module = "all",
                                                  double h = 1e-6, double tol = 1e-5) {
    using D = Tensor<double>;
    std::vector<CheckResult> results;
    auto want = [&](const char* m) { return module == "all" || module == m; };
    auto run = [&](const std::string& name, const std::function<D()>& f,
                   const std::vector<D>& wrt) {
        auto rep = grad_check_multi(f, wrt, h, tol);
        results.push_back({name, rep.max_rel_err, rep.pass});
    };
    std::mt19937_64 rng(0x5eedull);

    if (want("tensor")) {
        D a = detail::rnd({4, 5}, rng), b = detail::rnd({5, 3}, rng);
        D w = detail::rnd({6, 5}, rng), bias = detail::rnd({6}, rng);
        D gamma = detail::rnd({5}, rng, 0.5, 1.5), beta = detail::rnd({5}, rng);
        run("tensor.matmul_linear",
            [&] { return add(sum(matmul(a, b)), sum(sigmoid(linear(a, w, bias)))); },
            {a, b, w, bias});
        run("tensor.norm_softmax",
            [&] {
                auto ln = layernorm(a, gamma, beta, 1e-5);
                return add(sum(softmax(ln, 1)), sum(mean_pool(tanh_op(ln))));
            },
            {a, gamma, beta});
        run("tensor.concat_pick",
            [&] { return pick(concat(mean_pool(a), mean_pool(transpose(a))), 2); }, {a});
    }

    if (want("ssm")) {
        D sa = detail::rnd({3}, rng, -0.9, 0.9);
        D sb = detail::rnd({3, 2}, rng), sc = detail::rnd({2, 3}, rng);
        D sx = detail::rnd({6, 2}, rng);
        run("ssm.scan", [&] { return sum(ssm_scan(sa, sb, sc, sx)); }, {sa, sb, sc, sx});
        run("ssm.kernel",
            [&] {
                auto k = ssm_kernel(sa, sb, sc, 6);
                return sum(mul(k, k));
            },
            {sa, sb, sc});
        run("ssm.conv", [&] { return sum(ssm_conv(ssm_kernel(sa, sb, sc, 6), sx)); },
            {sa, sb, sc, sx});
    }

    if (want("blocks")) {
        ParamFactory<double> f(11, nullptr);
        auto pe = make_patch_embed(f, "pe", 2, 1, 4);
        D img = detail::rnd({6, 6, 1}, rng, 0.0, 1.0);
        run("blocks.patch_embed", [&] { return sum(patch_embed(img, pe)); }, {img, pe.w, pe.b});

        auto sm = make_secmamba(f, "sm", 4, 3, 2);
        D tok = detail::rnd({5, 4}, rng);
        std::vector<D> smw = {tok,       sm.w_in,   sm.b_in,  sm.ssm.raw_a, sm.ssm.b_in,
                              sm.ssm.c_out, sm.w_gate, sm.b_gate, sm.w_out,     sm.b_out,
                              sm.ln_gamma, sm.ln_beta};
        run("blocks.secmamba_scan",
            [&] { return sum(secmamba_forward(tok, sm, SsmRoute::Scan)); }, smw);
        run("blocks.secmamba_conv",
            [&] { return sum(secmamba_forward(tok, sm, SsmRoute::Conv)); }, smw);

        auto at = make_attention(f, "at", 4, 2);
        std::vector<D> atw = {tok,     at.w_q[0], at.w_k[0],   at.w_v[0],  at.w_q[1],
                              at.w_k[1], at.w_v[1], at.w_o,      at.mlp_w1,  at.mlp_b1,
                              at.mlp_w2, at.mlp_b2, at.ln1_gamma, at.ln1_beta, at.ln2_gamma,
                              at.ln2_beta};
        run("blocks.attention", [&] { return sum(attention_forward(tok, at)); }, atw);

        auto stem = make_conv_stem(f, "stem", 1, 2, 2);
        D simg = detail::rnd({8, 8, 1}, rng, 0.0, 1.0);
        run("blocks.conv_stem", [&] { return sum(conv_stem_forward(simg, stem)); },
            {simg, stem.w1, stem.b1, stem.w2, stem.b2});

        auto ds = make_downsample(f, "ds", 2);
        D dtok = detail::rnd({16, 2}, rng);
        run("blocks.downsample", [&] { return sum(downsample(dtok, ds)); }, {dtok, ds.w, ds.b});

        auto head = make_mlp_head(f, "head", 6, 4, 2);
        D z = detail::rnd({6}, rng);
        run("blocks.mlp_head", [&] { return sum(mlp_head(z, head)); },
            {z, head.w1, head.b1, head.w2, head.b2});
    }

    if (want("seqmoe")) {
        ParamFactory<double> f(13, nullptr);
        StageParams<double> st;
        st.mode = GateMode::Learned;
        st.gate = make_gate(f, "g", 4, 4);
        for (double& v : st.gate.w_out.mutable_data())
            v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
        st.experts.push_back({ExpertKind::SecMamba, make_secmamba(f, "e0", 4, 4, 2)});
        st.experts.push_back({ExpertKind::Attention, make_attention(f, "e1", 4, 2)});
        D x = detail::rnd({4, 4}, rng);
        auto& sm = std::get<SecMambaParams<double>>(st.experts[0].params);
        auto& at = std::get<AttentionParams<double>>(st.experts[1].params);
        run("seqmoe.stage2",
            [&] { return sum(stage_forward(x, st)); },
            {x, st.gate.w_in, st.gate.w_out, sm.w_in, sm.ssm.raw_a, sm.w_gate, sm.w_out,
             at.w_q[0], at.w_v[1], at.mlp_w1});
    }

    if (want("model")) {
        ParamFactory<double> f(17, nullptr);
        auto fg = make_gate(f, "fusion", 6, 6);
        for (double& v : fg.w_out.mutable_data())
            v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
        D crop = detail::rnd({2, 6}, rng), whole = detail::rnd({2, 6}, rng);
        run("model.fusion_gate", [&] { return sum(fuse_streams(crop, whole, fg)); },
            {crop, whole, fg.w_in, fg.w_out});

        D logits = detail::rnd({4, 2}, rng);
        run("model.loss", [&] { return label_smoothed_ce(logits, {0, 1, 1, 0}, 0.1); }, {logits});
    }

    return results;
}

struct EquivalenceReport {
    double max_abs_diff = 0;
    int trials = 0;
    double seconds = 0;
};

// scan vs materialized-kernel convolution over random stable systems
inline EquivalenceReport equivalence_suite(int trials, std::uint64_t seed = 2024) {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> raw(-2.0, 2.0);
    std::uniform_real_distribution<double> wdist(-1.0, 1.0);
    const std::size_t ns[] = {1, 2, 3, 8, 32, 64};
    const std::size_t dhss[] = {1, 4, 16};
    const std::size_t dies[] = {1, 3, 8};
    EquivalenceReport rep;
    while (rep.trials < trials) {
        for (std::size_t n : ns)
            for (std::size_t dhs : dhss)
                for (std::size_t die : dies) {
                    if (rep.trials >= trials) break;
                    ++rep.trials;
                    std::vector<double> av(dhs), bv(dhs * die), cv(die * dhs), xv(n * die);
                    for (double& v : av) v = std::tanh(raw(rng));
                    for (double& v : bv) v = wdist(rng);
                    for (double& v : cv) v = wdist(rng);
                    for (double& v : xv) v = 2.0 * wdist(rng);
                    Tensor<double> a({dhs}, av), b({dhs, die}, bv), c({die, dhs}, cv);
                    Tensor<double> x({n, die}, xv);
                    auto ys = ssm_scan(a, b, c, x);
                    auto yc = ssm_conv(ssm_kernel(a, b, c, n), x);
                    for (std::size_t i = 0; i < ys.numel(); ++i)
                        rep.max_abs_diff = std::max(rep.max_abs_diff,
                                                    std::abs(ys.data()[i] - yc.data()[i]));
                }
    }
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

}  // namespace mvssm
