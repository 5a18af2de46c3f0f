#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>

#include "mvssm/gradcheck.hpp"
#include "mvssm/model.hpp"

using namespace mvssm;
using D = Tensor<double>;

namespace {

ModelConfig tiny_config(Preset preset) {
    ModelConfig c;
    c.preset = preset;
    c.dims = {8, 8, 2, 4, 2, 4};  // d_pe, d_ie, d_hs, patch, heads, d_g
    c.image_size = 16;
    c.freeze_stem = false;
    c.stem_c1 = 2;
    c.stem_c2 = 2;
    return c;
}

template <typename T>
ViewImages<T> random_sample(std::size_t size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    auto img = [&] {
        std::vector<T> v(size * size);
        for (auto& x : v) x = T(dist(rng));
        return Tensor<T>({size, size, 1}, std::move(v));
    };
    return ViewImages<T>{img(), img(), img(), img()};
}

int count_params_matching(const Model<double>& m, const std::string& needle) {
    int n = 0;
    for (const auto& p : m.params)
        if (p.name.find(needle) != std::string::npos) ++n;
    return n;
}

}  // namespace

TEST_CASE("preset layouts match the expert tables") {
    auto d = build_model<double>(tiny_config(Preset::Full), 1);
    CHECK(d.streams.size() == 2);
    CHECK(d.streams[0].stage3.experts.size() == 10);
    CHECK(d.streams[0].stage4.experts.size() == 5);
    int sm3 = 0, at3 = 0;
    for (const auto& e : d.streams[0].stage3.experts)
        (e.kind == ExpertKind::SecMamba ? sm3 : at3)++;
    CHECK(sm3 == 5);
    CHECK(at3 == 5);
    int sm4 = 0, at4 = 0;
    for (const auto& e : d.streams[0].stage4.experts)
        (e.kind == ExpertKind::SecMamba ? sm4 : at4)++;
    CHECK(sm4 == 3);
    CHECK(at4 == 2);
    CHECK(d.streams[0].stage3.mode == GateMode::Learned);

    auto c = build_model<double>(tiny_config(Preset::SecMambaOnly), 1);
    CHECK(c.streams[0].stage3.experts.size() == 5);
    CHECK(c.streams[0].stage4.experts.size() == 3);
    CHECK(count_params_matching(c, ".w_q") == 0);  // no attention parameters at all
    CHECK(c.streams[0].stage3.mode == GateMode::Learned);

    auto a = build_model<double>(tiny_config(Preset::DualStream), 1);
    CHECK(a.streams[0].stage3.mode == GateMode::Bypass);
    CHECK(count_params_matching(a, "stage3.gate") == 0);

    auto b = build_model<double>(tiny_config(Preset::FourStream), 1);
    CHECK(b.streams.size() == 4);
    CHECK(count_params_matching(b, "fusion") == 0);
}

TEST_CASE("same seed builds bit-identical parameters") {
    auto m1 = build_model<double>(tiny_config(Preset::Full), 42);
    auto m2 = build_model<double>(tiny_config(Preset::Full), 42);
    REQUIRE(m1.params.size() == m2.params.size());
    for (std::size_t i = 0; i < m1.params.size(); ++i) {
        CHECK(m1.params[i].name == m2.params[i].name);
        CHECK(m1.params[i].tensor.data() == m2.params[i].tensor.data());
    }
    auto m3 = build_model<double>(tiny_config(Preset::Full), 43);
    bool all_same = true;
    for (std::size_t i = 0; i < m1.params.size(); ++i)
        if (m1.params[i].tensor.data() != m3.params[i].tensor.data()) all_same = false;
    CHECK_FALSE(all_same);
}

TEST_CASE("registry total matches the closed-form parameter count") {
    for (Preset p : {Preset::DualStream, Preset::FourStream, Preset::SecMambaOnly, Preset::Full}) {
        auto m = build_model<double>(tiny_config(p), 7);
        CAPTURE(preset_letter(p));
        CHECK(m.parameter_count() == expected_parameter_count(m.config));
    }
    // default-dimension config as well
    ModelConfig full;
    full.validate();
    auto m = build_model<double>(full, 3);
    CHECK(m.parameter_count() == expected_parameter_count(full));
}

TEST_CASE("exactly one shared gate parameter set per stage and stream in preset d") {
    auto m = build_model<double>(tiny_config(Preset::Full), 1);
    CHECK(count_params_matching(m, "stream0.stage3.gate") == 2);  // w_in + w_out
    CHECK(count_params_matching(m, "stream0.stage4.gate") == 2);
    CHECK(count_params_matching(m, "stream1.stage3.gate") == 2);
    CHECK(count_params_matching(m, "stream1.stage4.gate") == 2);
    CHECK(count_params_matching(m, ".gate.w_in") == 4);  // no per-expert gates anywhere
}

TEST_CASE("token counts along the backbone path") {
    // 16x16 image, patch 4 -> 16 tokens -> downsample -> 4 tokens
    auto m = build_model<double>(tiny_config(Preset::Full), 5);
    auto sample = random_sample<double>(16, 9);
    BackboneTrace<double> trace;
    auto emb = backbone_forward(m, 0, sample.crop_cc, std::nullopt, &trace);
    CHECK(trace.tokens.shape() == Shape{16, 8});
    CHECK(trace.stage3_out.shape() == Shape{16, 8});
    CHECK(trace.down_out.shape() == Shape{4, 16});
    CHECK(trace.stage4_out.shape() == Shape{4, 16});
    CHECK(emb.shape() == Shape{16});

    // the documented 224/16 path: 196 -> 196 -> 49 -> 49 tokens
    ModelConfig big;
    CHECK(big.tokens_after_embed() == 196);
    CHECK(big.tokens_after_embed() / 4 == 49);
}

TEST_CASE("gates forced to zero make the experts inert") {
    auto m = build_model<double>(tiny_config(Preset::Full), 11);
    auto sample = random_sample<double>(16, 12);
    BackboneTrace<double> trace;
    backbone_forward(m, 0, sample.crop_cc, 0.0, &trace);
    CHECK(trace.stage3_out.data() == trace.tokens.data());
    // embedding is the mean pool of the downsampled patch embeddings
    auto direct = mean_pool(downsample(trace.tokens, m.streams[0].down));
    CHECK(trace.pooled.data() == direct.data());
}

TEST_CASE("model forward produces two logits and no cross-sample leakage") {
    auto m = build_model<double>(tiny_config(Preset::Full), 13);
    auto s1 = random_sample<double>(16, 14);
    auto logits1 = model_forward(m, s1);
    CHECK(logits1.shape() == Shape{2});
    auto again = model_forward(m, s1);
    CHECK(logits1.data() == again.data());

    auto s2 = random_sample<double>(16, 15);
    auto logits2 = model_forward(m, s2);
    CHECK(logits1.data() != logits2.data());
}

TEST_CASE("missing view raises an input error naming the view") {
    auto m = build_model<double>(tiny_config(Preset::Full), 17);
    auto s = random_sample<double>(16, 18);
    s.whole_mlo = D();
    CHECK_THROWS_WITH_AS(model_forward(m, s), doctest::Contains("whole_mlo"), DimensionError);
}

TEST_CASE("wrong image size raises an input error") {
    auto m = build_model<double>(tiny_config(Preset::Full), 19);
    auto s = random_sample<double>(8, 20);
    CHECK_THROWS_AS(model_forward(m, s), DimensionError);
}

TEST_CASE("four-stream preset consumes one view per stream") {
    auto m = build_model<double>(tiny_config(Preset::FourStream), 21);
    auto s = random_sample<double>(16, 22);
    auto logits = model_forward(m, s);
    CHECK(logits.shape() == Shape{2});
}

TEST_CASE("fusion gate behaviour") {
    auto m = build_model<double>(tiny_config(Preset::Full), 23);
    std::mt19937_64 rng(24);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    std::vector<double> cv(2 * 16), wv(2 * 16);
    for (auto& v : cv) v = dist(rng);
    for (auto& v : wv) v = dist(rng);
    D crop({2, 16}, cv), whole({2, 16}, wv);

    // zero-initialized fusion gate averages the streams exactly
    auto fused = fuse_streams(crop, whole, m.fusion);
    for (std::size_t i = 0; i < fused.numel(); ++i)
        CHECK(fused.data()[i] == doctest::Approx(0.5 * cv[i] + 0.5 * wv[i]).epsilon(1e-15));

    // identical streams are a fixed point whatever the gate value
    std::mt19937_64 rng2(25);
    for (double& v : m.fusion.w_out.mutable_data()) v = dist(rng2);
    auto same = fuse_streams(crop, crop, m.fusion);
    for (std::size_t i = 0; i < same.numel(); ++i)
        CHECK(same.data()[i] == doctest::Approx(cv[i]).epsilon(1e-12));

    // forcing g = 1 through the interpolation returns the crop stream
    auto g1 = gated_interpolate(crop, whole, D::scalar(1.0));
    CHECK(g1.data() == crop.data());
}

TEST_CASE("presets a and d share non-gate parameters and diverge only at stage outputs") {
    auto a = build_model<double>(tiny_config(Preset::DualStream), 31);
    auto d = build_model<double>(tiny_config(Preset::Full), 31);

    // identical initialization for every shared component
    std::map<std::string, std::vector<double>> dvals;
    for (const auto& p : d.params) dvals[p.name] = p.tensor.data();
    for (const auto& p : a.params) {
        REQUIRE(dvals.count(p.name) == 1);
        CHECK(dvals[p.name] == p.tensor.data());
    }

    auto sample = random_sample<double>(16, 32);
    BackboneTrace<double> ta, td;
    backbone_forward(a, 0, sample.crop_cc, std::nullopt, &ta);
    backbone_forward(d, 0, sample.crop_cc, std::nullopt, &td);
    CHECK(ta.stem_out.data() == td.stem_out.data());
    CHECK(ta.tokens.data() == td.tokens.data());
    CHECK(ta.stage3_out.data() != td.stage3_out.data());
}

TEST_CASE("every trainable parameter receives a finite gradient") {
    auto cfg = tiny_config(Preset::Full);
    cfg.freeze_stem = true;
    auto m = build_model<double>(cfg, 33);
    auto sample = random_sample<double>(16, 34);
    Tape<double> tape;
    {
        auto g = tape.activate();
        tape.backward(sum(model_forward(m, sample)));
    }
    for (const auto& p : m.params) {
        CAPTURE(p.name);
        if (!p.trainable) {
            CHECK_FALSE(p.tensor.has_grad());
            continue;
        }
        REQUIRE(p.tensor.has_grad());
        for (double v : p.tensor.grad()) CHECK(std::isfinite(v));
    }
}

TEST_CASE("end-to-end gradcheck on a tiny image") {
    auto cfg = tiny_config(Preset::Full);
    auto m = build_model<double>(cfg, 35);
    auto sample = random_sample<double>(16, 36);
    // check a representative subset of parameters spread across the model
    std::vector<D> wrt;
    for (const auto& p : m.params) {
        if (p.name == "stream0.stem.w1" || p.name == "stream0.embed.w" ||
            p.name == "stream0.stage3.gate.w_in" || p.name == "stream0.stage3.e0.ssm.raw_a" ||
            p.name == "stream0.stage3.e5.h0.w_q" || p.name == "stream0.down.w" ||
            p.name == "stream1.stage4.e3.mlp_w2" || p.name == "fusion.w_in" ||
            p.name == "head.w1" || p.name == "head.b2")
            wrt.push_back(p.tensor);
    }
    REQUIRE(wrt.size() == 10);
    auto rep = grad_check_multi([&] { return sum(model_forward(m, sample)); }, wrt, 1e-6, 1e-5);
    CAPTURE(rep.max_rel_err);
    CAPTURE(rep.worst);
    REQUIRE(rep.pass);
}

TEST_CASE("checkpoint round trip preserves every parameter bit") {
    auto m = build_model<double>(tiny_config(Preset::Full), 40);
    // make values less regular than the init
    std::mt19937_64 rng(41);
    std::uniform_real_distribution<double> dist(-3.0, 3.0);
    for (auto& p : m.params)
        for (auto& v : p.tensor.mutable_data()) v = dist(rng);

    const std::string path = "ckpt_roundtrip.bin";
    save_checkpoint(m, path);
    auto loaded = load_checkpoint<double>(path);
    CHECK(loaded.seed == 40);
    CHECK(loaded.config.preset == Preset::Full);
    REQUIRE(loaded.params.size() == m.params.size());
    for (std::size_t i = 0; i < m.params.size(); ++i)
        CHECK(loaded.params[i].tensor.data() == m.params[i].tensor.data());
    std::remove(path.c_str());
}

TEST_CASE("checkpoint corruption is detected") {
    auto m = build_model<double>(tiny_config(Preset::SecMambaOnly), 44);
    const std::string path = "ckpt_corrupt.bin";
    save_checkpoint(m, path);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(200);
        char z = 0x5a;
        f.write(&z, 1);
    }
    CHECK_THROWS_WITH_AS(load_checkpoint<double>(path), doctest::Contains("checksum"),
                         std::runtime_error);
    std::remove(path.c_str());
}

TEST_CASE("config validation rejects inconsistent dims") {
    auto c = tiny_config(Preset::Full);
    c.dims.patch = 6;  // not divisible by 4
    CHECK_THROWS_AS(build_model<double>(c, 1), ConfigError);

    auto c2 = tiny_config(Preset::Full);
    c2.image_size = 20;  // 20/4 = 5 tokens per side: odd grid
    CHECK_THROWS_AS(build_model<double>(c2, 1), ConfigError);

    auto c3 = tiny_config(Preset::Full);
    c3.dims.n_heads = 3;
    CHECK_THROWS_AS(build_model<double>(c3, 1), ConfigError);
}

TEST_CASE("model config text round trip") {
    auto c = tiny_config(Preset::SecMambaOnly);
    c.route = SsmRoute::Conv;
    auto parsed = ModelConfig::from_text(c.to_text());
    CHECK(parsed.preset == c.preset);
    CHECK(parsed.dims.d_pe == c.dims.d_pe);
    CHECK(parsed.dims.patch == c.dims.patch);
    CHECK(parsed.route == SsmRoute::Conv);
    CHECK(parsed.freeze_stem == c.freeze_stem);

    CHECK_THROWS_AS(ModelConfig::from_text("preset = d\nnot_a_key = 1\n"), ConfigError);
}
