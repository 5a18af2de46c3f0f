#include <doctest.h>

#include <cmath>
#include <random>

#include "mvssm/blocks.hpp"
#include "mvssm/gradcheck.hpp"

using namespace mvssm;
using D = Tensor<double>;

namespace {

D random_tensor(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = dist(rng);
    return D(std::move(shape), std::move(v));
}

void fill(D& t, double v) { std::fill(t.mutable_data().begin(), t.mutable_data().end(), v); }

}  // namespace

TEST_CASE("patch_embed token counts and projection") {
    ParamFactory<double> f(1, nullptr);
    auto p = make_patch_embed(f, "pe", 2, 1, 3);
    std::mt19937_64 rng(4);
    D img = random_tensor({4, 4, 1}, rng, 0.0, 1.0);
    auto tokens = patch_embed(img, p);
    CHECK(tokens.shape() == Shape{4, 3});  // 16 / 4 patches

    // 224x224 with P=16 -> 196 tokens
    auto p16 = make_patch_embed(f, "pe16", 16, 1, 4);
    D big = D::zeros({224, 224, 1});
    CHECK(patch_embed(big, p16).extent(0) == 196);

    // zero projection: every row equals the bias
    fill(p.w, 0.0);
    p.b.mutable_data() = {0.5, -1.0, 2.0};
    auto rows = patch_embed(img, p);
    for (std::size_t r = 0; r < 4; ++r) {
        CHECK(rows.at(r, 0) == 0.5);
        CHECK(rows.at(r, 1) == -1.0);
        CHECK(rows.at(r, 2) == 2.0);
    }

    CHECK_THROWS_AS(patch_embed(random_tensor({5, 4, 1}, rng), p), DimensionError);
}

TEST_CASE("secmamba dead output branch reduces to normalized skip") {
    ParamFactory<double> f(2, nullptr);
    auto p = make_secmamba(f, "sm", 4, 3, 2);
    fill(p.w_out, 0.0);
    fill(p.b_out, 0.0);
    std::mt19937_64 rng(5);
    D tokens = random_tensor({5, 4}, rng);
    auto out = secmamba_forward(tokens, p);
    auto ref = layernorm(tokens, p.ln_gamma, p.ln_beta, kLayerNormEps);
    for (std::size_t i = 0; i < out.numel(); ++i)
        CHECK(out.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));
}

TEST_CASE("secmamba saturated gate opens the branch fully") {
    ParamFactory<double> f(3, nullptr);
    auto p = make_secmamba(f, "sm", 4, 4, 2);
    fill(p.w_gate, 0.0);
    fill(p.b_gate, 50.0);  // sigmoid(50) == 1.0 in double
    std::mt19937_64 rng(6);
    D tokens = random_tensor({3, 4}, rng);
    auto out = secmamba_forward(tokens, p);

    auto x = linear(tokens, p.w_in, p.b_in);
    auto open =
        layernorm(add(tokens, linear(ssm_forward(p.ssm, x, SsmRoute::Scan), p.w_out, p.b_out)),
                  p.ln_gamma, p.ln_beta, kLayerNormEps);
    for (std::size_t i = 0; i < out.numel(); ++i)
        CHECK(out.data()[i] == doctest::Approx(open.data()[i]).epsilon(1e-12));
}

TEST_CASE("secmamba scan route equals conv route") {
    ParamFactory<double> f(7, nullptr);
    auto p = make_secmamba(f, "sm", 4, 3, 2);
    std::mt19937_64 rng(8);
    D tokens = random_tensor({5, 4}, rng);
    auto a = secmamba_forward(tokens, p, SsmRoute::Scan);
    auto b = secmamba_forward(tokens, p, SsmRoute::Conv);
    for (std::size_t i = 0; i < a.numel(); ++i)
        CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-10);
}

TEST_CASE("secmamba output rows carry layernorm statistics") {
    ParamFactory<double> f(9, nullptr);
    auto p = make_secmamba(f, "sm", 8, 8, 4);  // gamma 1, beta 0 by init
    std::mt19937_64 rng(10);
    D tokens = random_tensor({6, 8}, rng);
    auto out = secmamba_forward(tokens, p);
    for (std::size_t r = 0; r < 6; ++r) {
        double mean = 0;
        for (std::size_t c = 0; c < 8; ++c) mean += out.at(r, c);
        mean /= 8;
        double var = 0;
        for (std::size_t c = 0; c < 8; ++c) var += (out.at(r, c) - mean) * (out.at(r, c) - mean);
        var /= 8;
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-3);
    }
}

TEST_CASE("secmamba selective gate stays strictly inside (0,1)") {
    ParamFactory<double> f(11, nullptr);
    auto p = make_secmamba(f, "sm", 4, 4, 2);
    std::mt19937_64 rng(12);
    D tokens = random_tensor({4, 4}, rng, -50.0, 50.0);
    auto x = linear(tokens, p.w_in, p.b_in);
    auto g = sigmoid(linear(x, p.w_gate, p.b_gate));
    for (double v : g.data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
}

TEST_CASE("secmamba gradcheck") {
    ParamFactory<double> f(13, nullptr);
    auto p = make_secmamba(f, "sm", 4, 3, 2);
    std::mt19937_64 rng(14);
    D tokens = random_tensor({5, 4}, rng);
    std::vector<D> wrt = {tokens,   p.w_in,   p.b_in,  p.ssm.raw_a, p.ssm.b_in, p.ssm.c_out,
                          p.w_gate, p.b_gate, p.w_out, p.b_out,     p.ln_gamma, p.ln_beta};
    for (SsmRoute route : {SsmRoute::Scan, SsmRoute::Conv}) {
        auto rep = grad_check_multi([&] { return sum(secmamba_forward(tokens, p, route)); }, wrt,
                                    1e-6, 1e-5);
        CAPTURE(rep.max_rel_err);
        CAPTURE(rep.worst);
        REQUIRE(rep.pass);
    }
}

TEST_CASE("attention single token and pure residual") {
    ParamFactory<double> f(15, nullptr);
    auto p = make_attention(f, "at", 4, 2);
    std::mt19937_64 rng(16);
    D one = random_tensor({1, 4}, rng);
    auto w = attention_weights(one, p, 0);
    CHECK(w.shape() == Shape{1, 1});
    CHECK(w.data()[0] == doctest::Approx(1.0));
    CHECK(attention_forward(one, p).shape() == Shape{1, 4});

    for (auto& wv : p.w_v) fill(wv, 0.0);
    fill(p.mlp_w1, 0.0);
    fill(p.mlp_b1, 0.0);
    fill(p.mlp_w2, 0.0);
    fill(p.mlp_b2, 0.0);
    D tokens = random_tensor({3, 4}, rng);
    auto out = attention_forward(tokens, p);
    for (std::size_t i = 0; i < out.numel(); ++i)
        CHECK(out.data()[i] == doctest::Approx(tokens.data()[i]).epsilon(1e-12));
}

TEST_CASE("attention weights rows sum to one") {
    ParamFactory<double> f(17, nullptr);
    auto p = make_attention(f, "at", 8, 4);
    std::mt19937_64 rng(18);
    D tokens = random_tensor({6, 8}, rng);
    for (std::size_t h = 0; h < 4; ++h) {
        auto w = attention_weights(tokens, p, h);
        for (std::size_t r = 0; r < 6; ++r) {
            double s = 0;
            for (std::size_t c = 0; c < 6; ++c) s += w.at(r, c);
            CHECK(std::abs(s - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("attention is permutation equivariant") {
    ParamFactory<double> f(19, nullptr);
    auto p = make_attention(f, "at", 4, 2);
    std::mt19937_64 rng(20);
    D tokens = random_tensor({5, 4}, rng);
    auto base = attention_forward(tokens, p);

    const std::size_t perm[5] = {3, 0, 4, 1, 2};
    std::vector<double> pv(20);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t c = 0; c < 4; ++c) pv[i * 4 + c] = tokens.at(perm[i], c);
    auto permuted = attention_forward(D({5, 4}, std::move(pv)), p);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t c = 0; c < 4; ++c)
            CHECK(permuted.at(i, c) == doctest::Approx(base.at(perm[i], c)).epsilon(1e-12));
}

TEST_CASE("attention gradcheck") {
    ParamFactory<double> f(21, nullptr);
    auto p = make_attention(f, "at", 4, 2);
    std::mt19937_64 rng(22);
    D tokens = random_tensor({3, 4}, rng);
    std::vector<D> wrt = {tokens,      p.w_o,       p.mlp_w1,    p.mlp_b1,   p.mlp_w2,
                          p.mlp_b2,    p.ln1_gamma, p.ln1_beta,  p.ln2_gamma, p.ln2_beta};
    for (std::size_t h = 0; h < 2; ++h) {
        wrt.push_back(p.w_q[h]);
        wrt.push_back(p.w_k[h]);
        wrt.push_back(p.w_v[h]);
    }
    auto rep =
        grad_check_multi([&] { return sum(attention_forward(tokens, p)); }, wrt, 1e-6, 1e-5);
    CAPTURE(rep.max_rel_err);
    REQUIRE(rep.pass);
}

TEST_CASE("downsample geometry") {
    ParamFactory<double> f(23, nullptr);
    auto p = make_downsample(f, "ds", 3);
    std::mt19937_64 rng(24);
    D tokens = random_tensor({16, 3}, rng);
    auto out = downsample(tokens, p);
    CHECK(out.shape() == Shape{4, 6});

    CHECK_THROWS_AS(downsample(random_tensor({9, 3}, rng), p), DimensionError);
    CHECK_THROWS_AS(downsample(random_tensor({10, 3}, rng), p), DimensionError);
}

TEST_CASE("downsample with identity-initialized kernel samples the top-left corner") {
    ParamFactory<double> f(25, nullptr);
    auto p = make_downsample(f, "ds", 2);
    fill(p.w, 0.0);
    fill(p.b, 0.0);
    // out channel o copies in channel o % d from kernel tap (0,0)
    for (std::size_t o = 0; o < 4; ++o) {
        const std::size_t i = o % 2;
        p.w.mutable_data()[((o * 2 + i) * 2 + 0) * 2 + 0] = 1.0;
    }
    std::mt19937_64 rng(26);
    D tokens = random_tensor({16, 2}, rng);
    auto out = downsample(tokens, p);
    // token grid is 4x4; output grid 2x2 with channel duplication
    for (std::size_t gy = 0; gy < 2; ++gy)
        for (std::size_t gx = 0; gx < 2; ++gx)
            for (std::size_t o = 0; o < 4; ++o) {
                const double expect = tokens.at((2 * gy) * 4 + 2 * gx, o % 2);
                CHECK(out.at(gy * 2 + gx, o) == doctest::Approx(expect));
            }
}

TEST_CASE("downsample gradcheck") {
    ParamFactory<double> f(27, nullptr);
    auto p = make_downsample(f, "ds", 2);
    std::mt19937_64 rng(28);
    D tokens = random_tensor({16, 2}, rng);
    auto rep = grad_check_multi([&] { return sum(downsample(tokens, p)); }, {tokens, p.w, p.b},
                                1e-6, 1e-6);
    REQUIRE(rep.pass);
}

TEST_CASE("conv stem: zero weights give a strided copy") {
    ParamFactory<double> f(29, nullptr);
    auto p = make_conv_stem(f, "stem", 1, 3, 2);
    fill(p.w1, 0.0);
    fill(p.b1, 0.0);
    fill(p.w2, 0.0);
    fill(p.b2, 0.0);
    std::mt19937_64 rng(30);
    D img = random_tensor({8, 8, 1}, rng, 0.0, 1.0);
    auto out = conv_stem_forward(img, p);
    CHECK(out.shape() == Shape{2, 2, 2});
    for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t x = 0; x < 2; ++x)
            for (std::size_t c = 0; c < 2; ++c)
                CHECK(out.at((y * 2 + x) * 2 + c) == doctest::Approx(img.at(4 * y * 8 + 4 * x)));
}

TEST_CASE("conv stem output dims are ceil(H/4) x ceil(W/4)") {
    ParamFactory<double> f(31, nullptr);
    auto p = make_conv_stem(f, "stem", 1, 2, 2);
    std::mt19937_64 rng(32);
    for (std::size_t h : {8u, 10u, 13u})
        for (std::size_t w : {8u, 9u, 15u}) {
            D img = random_tensor({h, w, 1}, rng, 0.0, 1.0);
            auto out = conv_stem_forward(img, p);
            CHECK(out.extent(0) == (h + 3) / 4);
            CHECK(out.extent(1) == (w + 3) / 4);
        }
}

TEST_CASE("conv stem gradcheck") {
    ParamFactory<double> f(33, nullptr);
    auto p = make_conv_stem(f, "stem", 1, 2, 2);
    std::mt19937_64 rng(34);
    D img = random_tensor({8, 8, 1}, rng, 0.0, 1.0);
    auto rep = grad_check_multi([&] { return sum(conv_stem_forward(img, p)); },
                                {img, p.w1, p.b1, p.w2, p.b2}, 1e-6, 1e-5);
    CAPTURE(rep.max_rel_err);
    REQUIRE(rep.pass);
}

TEST_CASE("mlp head") {
    ParamFactory<double> f(35, nullptr);
    auto p = make_mlp_head(f, "head", 4, 3, 2);
    fill(p.w1, 0.0);
    fill(p.b1, 0.0);
    fill(p.w2, 0.0);
    p.b2.mutable_data() = {0.3, -0.3};
    auto logits = mlp_head(D({4}, {1, 2, 3, 4}), p);
    CHECK(logits.data()[0] == doctest::Approx(0.3));
    CHECK(logits.data()[1] == doctest::Approx(-0.3));

    // identity weights pass non-negative inputs straight through
    auto q = make_mlp_head(f, "head2", 2, 2, 2);
    fill(q.w1, 0.0);
    fill(q.w2, 0.0);
    fill(q.b1, 0.0);
    fill(q.b2, 0.0);
    q.w1.mutable_data()[0] = 1.0;
    q.w1.mutable_data()[3] = 1.0;
    q.w2.mutable_data()[0] = 1.0;
    q.w2.mutable_data()[3] = 1.0;
    auto thru = mlp_head(D({2}, {0.7, 1.1}), q);
    CHECK(thru.data()[0] == doctest::Approx(0.7));
    CHECK(thru.data()[1] == doctest::Approx(1.1));
}

TEST_CASE("mlp head gradcheck") {
    ParamFactory<double> f(36, nullptr);
    auto p = make_mlp_head(f, "head", 5, 4, 2);
    std::mt19937_64 rng(37);
    D z = random_tensor({5}, rng);
    auto rep = grad_check_multi([&] { return sum(mlp_head(z, p)); }, {z, p.w1, p.b1, p.w2, p.b2},
                                1e-6, 1e-5);
    REQUIRE(rep.pass);
}
