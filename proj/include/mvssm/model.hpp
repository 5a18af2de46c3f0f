#pragma once

// Full dual-stream model: per-view backbone (stem -> patch embedding ->
// stage 3 -> downsample -> stage 4 -> mean pool), per-stream concatenation
// of the CC and MLO embeddings, gated cross-stream fusion and an MLP head.
//
// Presets
//   a  dual stream (crop + whole), experts composed plainly, no gates
//   b  four streams (one per view, half width), concatenated, no gates
//   c  dual stream, SecMamba experts only, stage gates active
//   d  full model: SecMamba + attention experts with stage gates
//
// Stage 4 runs at twice the stage-3 width because downsampling doubles the
// channel count, so a view embedding has width 2*d_pe.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "mvssm/blocks.hpp"
#include "mvssm/config.hpp"
#include "mvssm/seqmoe.hpp"
#include "mvssm/tensor.hpp"

namespace mvssm {

enum class Preset { DualStream, FourStream, SecMambaOnly, Full };

inline char preset_letter(Preset p) {
    switch (p) {
        case Preset::DualStream: return 'a';
        case Preset::FourStream: return 'b';
        case Preset::SecMambaOnly: return 'c';
        case Preset::Full: return 'd';
    }
    return '?';
}

inline Preset preset_from_letter(const std::string& s) {
    if (s == "a") return Preset::DualStream;
    if (s == "b") return Preset::FourStream;
    if (s == "c") return Preset::SecMambaOnly;
    if (s == "d") return Preset::Full;
    throw ConfigError("unknown preset '" + s + "' (expected a, b, c or d)");
}

struct ModelDims {
    std::size_t d_pe = 64;
    std::size_t d_ie = 0;  // 0: match d_pe
    std::size_t d_hs = 16;
    std::size_t patch = 16;
    std::size_t n_heads = 4;
    std::size_t d_g = 0;  // 0: match d_pe
};

struct ModelConfig {
    Preset preset = Preset::Full;
    ModelDims dims;
    std::size_t image_size = 224;
    bool freeze_stem = true;
    SsmRoute route = SsmRoute::Scan;
    std::size_t stem_c1 = 4;
    std::size_t stem_c2 = 8;

    std::size_t n_streams() const { return preset == Preset::FourStream ? 4 : 2; }
    std::size_t stream_width() const {
        return preset == Preset::FourStream ? dims.d_pe / 2 : dims.d_pe;
    }
    std::size_t d_ie_eff() const { return dims.d_ie ? dims.d_ie : dims.d_pe; }
    std::size_t d_g_eff() const { return dims.d_g ? dims.d_g : dims.d_pe; }
    std::size_t view_embed_width() const { return 2 * stream_width(); }
    std::size_t head_input_width() const {
        // four half-width view embeddings and two full-width stream pairs
        // both concatenate to 4 * d_pe
        return preset == Preset::FourStream ? 4 * view_embed_width() : 2 * view_embed_width();
    }
    std::size_t tokens_after_embed() const {
        return (image_size / dims.patch) * (image_size / dims.patch);
    }

    void validate() const {
        if (dims.d_pe == 0 || dims.d_hs == 0 || dims.n_heads == 0)
            throw ConfigError("model dims must be positive");
        if (dims.patch % 4 != 0)
            throw ConfigError("patch size must be divisible by 4 (stem reduces resolution 4x)");
        if (image_size % dims.patch != 0)
            throw ConfigError("image size " + std::to_string(image_size) +
                              " is not divisible by patch " + std::to_string(dims.patch));
        if ((image_size / dims.patch) % 2 != 0)
            throw ConfigError("token grid side " + std::to_string(image_size / dims.patch) +
                              " must be even for downsampling");
        if (preset == Preset::FourStream && dims.d_pe % 2 != 0)
            throw ConfigError("four-stream preset needs an even d_pe");
        const std::size_t w = stream_width();
        if (w % dims.n_heads != 0 || (2 * w) % dims.n_heads != 0)
            throw ConfigError("n_heads " + std::to_string(dims.n_heads) +
                              " must divide stream width " + std::to_string(w));
        if (d_ie_eff() * w % dims.d_pe != 0)
            throw ConfigError("d_ie does not scale to the stream width");
    }

    std::string to_text() const {
        std::ostringstream os;
        os << "preset = " << preset_letter(preset) << "\n";
        os << "d_pe = " << dims.d_pe << "\n";
        os << "d_ie = " << dims.d_ie << "\n";
        os << "d_hs = " << dims.d_hs << "\n";
        os << "patch = " << dims.patch << "\n";
        os << "n_heads = " << dims.n_heads << "\n";
        os << "d_g = " << dims.d_g << "\n";
        os << "image_size = " << image_size << "\n";
        os << "freeze_stem = " << (freeze_stem ? 1 : 0) << "\n";
        os << "route = " << (route == SsmRoute::Scan ? "scan" : "conv") << "\n";
        os << "stem_c1 = " << stem_c1 << "\n";
        os << "stem_c2 = " << stem_c2 << "\n";
        return os.str();
    }

    static ModelConfig from_kv(KvConfig& kv) {
        ModelConfig c;
        c.preset = preset_from_letter(kv.get_string("preset", "d"));
        c.dims.d_pe = std::size_t(kv.get_int("d_pe", 64));
        c.dims.d_ie = std::size_t(kv.get_int("d_ie", 0));
        c.dims.d_hs = std::size_t(kv.get_int("d_hs", 16));
        c.dims.patch = std::size_t(kv.get_int("patch", 16));
        c.dims.n_heads = std::size_t(kv.get_int("n_heads", 4));
        c.dims.d_g = std::size_t(kv.get_int("d_g", 0));
        c.image_size = std::size_t(kv.get_int("image_size", 224));
        c.freeze_stem = kv.get_bool("freeze_stem", true);
        const std::string route = kv.get_string("route", "scan");
        if (route == "scan") c.route = SsmRoute::Scan;
        else if (route == "conv") c.route = SsmRoute::Conv;
        else throw ConfigError("unknown ssm route: " + route);
        c.stem_c1 = std::size_t(kv.get_int("stem_c1", 4));
        c.stem_c2 = std::size_t(kv.get_int("stem_c2", 8));
        return c;
    }

    static ModelConfig from_text(const std::string& text) {
        KvConfig kv = KvConfig::parse_text(text);
        ModelConfig c = from_kv(kv);
        kv.reject_unknown();
        return c;
    }
};

// ---------------------------------------------------------------------------

enum class View { CropCC, CropMLO, WholeCC, WholeMLO };

inline const char* view_name(View v) {
    switch (v) {
        case View::CropCC: return "crop_cc";
        case View::CropMLO: return "crop_mlo";
        case View::WholeCC: return "whole_cc";
        case View::WholeMLO: return "whole_mlo";
    }
    return "?";
}

// The four grayscale views of one sample as [S x S x 1] tensors.
template <typename T>
struct ViewImages {
    Tensor<T> crop_cc, crop_mlo, whole_cc, whole_mlo;

    const Tensor<T>& view(View v) const {
        switch (v) {
            case View::CropCC: return crop_cc;
            case View::CropMLO: return crop_mlo;
            case View::WholeCC: return whole_cc;
            case View::WholeMLO: return whole_mlo;
        }
        return crop_cc;
    }
};

template <typename T>
struct Stream {
    ConvStemParams<T> stem;
    PatchEmbedParams<T> embed;
    StageParams<T> stage3;
    DownsampleParams<T> down;
    StageParams<T> stage4;
    std::vector<View> views;
};

template <typename T>
struct Model {
    ModelConfig config;
    std::uint64_t seed = 0;
    std::vector<Stream<T>> streams;
    GateParams<T> fusion;  // invalid for the four-stream preset
    MlpHeadParams<T> head;
    std::vector<NamedParam<T>> params;

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params) n += p.tensor.numel();
        return n;
    }
    std::size_t trainable_parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params)
            if (p.trainable) n += p.tensor.numel();
        return n;
    }
};

namespace detail {

struct StageLayout {
    std::size_t n_secmamba;
    std::size_t n_attention;
    GateMode mode;
};

inline StageLayout stage_layout(Preset preset, int stage) {
    const bool gated = preset == Preset::SecMambaOnly || preset == Preset::Full;
    const bool with_attention = preset != Preset::SecMambaOnly;
    if (stage == 3)
        return {5, with_attention ? std::size_t(5) : 0, gated ? GateMode::Learned : GateMode::Bypass};
    return {3, with_attention ? std::size_t(2) : 0, gated ? GateMode::Learned : GateMode::Bypass};
}

template <typename T>
StageParams<T> build_stage(ParamFactory<T>& f, const std::string& prefix, const StageLayout& lay,
                           std::size_t width, std::size_t d_ie, std::size_t d_hs,
                           std::size_t n_heads, std::size_t d_g, SsmRoute route) {
    StageParams<T> st;
    st.mode = lay.mode;
    st.route = route;
    if (lay.mode == GateMode::Learned) st.gate = make_gate(f, prefix + ".gate", width, d_g);
    std::size_t idx = 0;
    for (std::size_t i = 0; i < lay.n_secmamba; ++i, ++idx) {
        Expert<T> e;
        e.kind = ExpertKind::SecMamba;
        e.params = make_secmamba(f, prefix + ".e" + std::to_string(idx), width, d_ie, d_hs);
        st.experts.push_back(std::move(e));
    }
    for (std::size_t i = 0; i < lay.n_attention; ++i, ++idx) {
        Expert<T> e;
        e.kind = ExpertKind::Attention;
        e.params = make_attention(f, prefix + ".e" + std::to_string(idx), width, n_heads);
        st.experts.push_back(std::move(e));
    }
    return st;
}

}  // namespace detail

template <typename T>
Model<T> build_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model<T> m;
    m.config = config;
    m.seed = seed;
    ParamFactory<T> f(seed, &m.params);

    const std::size_t w = config.stream_width();
    const std::size_t d_ie = config.d_ie_eff() * w / config.dims.d_pe;
    const std::size_t d_g = std::max<std::size_t>(1, config.d_g_eff() * w / config.dims.d_pe);
    const std::size_t patch_eff = config.dims.patch / 4;

    const std::size_t n_streams = config.n_streams();
    for (std::size_t s = 0; s < n_streams; ++s) {
        const std::string prefix = "stream" + std::to_string(s);
        Stream<T> stream;
        f.trainable = !config.freeze_stem;
        stream.stem = make_conv_stem(f, prefix + ".stem", 1, config.stem_c1, config.stem_c2);
        f.trainable = true;
        stream.embed =
            make_patch_embed(f, prefix + ".embed", patch_eff, config.stem_c2, w);
        stream.stage3 = detail::build_stage(f, prefix + ".stage3",
                                            detail::stage_layout(config.preset, 3), w, d_ie,
                                            config.dims.d_hs, config.dims.n_heads, d_g,
                                            config.route);
        stream.down = make_downsample(f, prefix + ".down", w);
        stream.stage4 = detail::build_stage(f, prefix + ".stage4",
                                            detail::stage_layout(config.preset, 4), 2 * w,
                                            2 * d_ie, config.dims.d_hs, config.dims.n_heads,
                                            2 * d_g, config.route);
        if (n_streams == 2)
            stream.views = s == 0 ? std::vector<View>{View::CropCC, View::CropMLO}
                                  : std::vector<View>{View::WholeCC, View::WholeMLO};
        else
            stream.views = {static_cast<View>(s)};
        m.streams.push_back(std::move(stream));
    }

    const std::size_t d_view = config.view_embed_width();
    if (config.preset != Preset::FourStream) m.fusion = make_gate(f, "fusion", d_view, d_view);
    m.head = make_mlp_head(f, "head", config.head_input_width(), 2 * config.dims.d_pe, 2);
    return m;
}

// Optional per-stage activation capture for inspection.
template <typename T>
struct BackboneTrace {
    Tensor<T> stem_out, tokens, stage3_out, down_out, stage4_out, pooled;
};

template <typename T>
Tensor<T> backbone_forward(const Model<T>& m, std::size_t stream_idx, const Tensor<T>& image,
                           std::optional<double> forced_gate = std::nullopt,
                           BackboneTrace<T>* trace = nullptr) {
    const Stream<T>& s = m.streams.at(stream_idx);
    if (image.rank() != 3 || image.extent(0) != m.config.image_size ||
        image.extent(1) != m.config.image_size || image.extent(2) != 1)
        dim_fail("backbone_forward", "image " + shape_str(image.shape()) +
                                         " does not match configured size " +
                                         std::to_string(m.config.image_size));
    Tensor<T> feat = conv_stem_forward(image, s.stem);
    Tensor<T> tokens = patch_embed(feat, s.embed);
    Tensor<T> s3 = stage_forward(tokens, s.stage3, forced_gate);
    Tensor<T> dn = downsample(s3, s.down);
    Tensor<T> s4 = stage_forward(dn, s.stage4, forced_gate);
    Tensor<T> pooled = mean_pool(s4);
    if (trace) *trace = BackboneTrace<T>{feat, tokens, s3, dn, s4, pooled};
    return pooled;
}

// Gated fusion of the two stream representations, each a [2 x d_view] stack
// of its CC and MLO embeddings; the gate pools each pair to one vector.
template <typename T>
Tensor<T> fuse_streams(const Tensor<T>& crop_pair, const Tensor<T>& whole_pair,
                       const GateParams<T>& fusion) {
    if (crop_pair.shape() != whole_pair.shape())
        dim_fail("fuse_streams", "stream representations differ: " + shape_str(crop_pair.shape()) +
                                     " vs " + shape_str(whole_pair.shape()));
    Tensor<T> g = gate_forward(crop_pair, whole_pair, fusion);
    return gated_interpolate(crop_pair, whole_pair, g);
}

template <typename T>
Tensor<T> model_forward(const Model<T>& m, const ViewImages<T>& sample,
                        std::optional<double> forced_gate = std::nullopt) {
    for (View v : {View::CropCC, View::CropMLO, View::WholeCC, View::WholeMLO})
        if (!sample.view(v).valid())
            dim_fail("model_forward", std::string("missing view: ") + view_name(v));

    if (m.config.preset == Preset::FourStream) {
        Tensor<T> joined;
        for (std::size_t s = 0; s < 4; ++s) {
            Tensor<T> emb = backbone_forward(m, s, sample.view(m.streams[s].views[0]), forced_gate);
            joined = s == 0 ? emb : concat(joined, emb);
        }
        return mlp_head(joined, m.head);
    }

    Tensor<T> crop_pair = stack_rows<T>({backbone_forward(m, 0, sample.crop_cc, forced_gate),
                                         backbone_forward(m, 0, sample.crop_mlo, forced_gate)});
    Tensor<T> whole_pair = stack_rows<T>({backbone_forward(m, 1, sample.whole_cc, forced_gate),
                                          backbone_forward(m, 1, sample.whole_mlo, forced_gate)});
    Tensor<T> fused = fuse_streams(crop_pair, whole_pair, m.fusion);
    return mlp_head(reshape(fused, {fused.numel()}), m.head);
}

// ---------------------------------------------------------------------------
// checkpoint container: magic, version, seed, config echo, named blobs, crc32

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

struct ByteReader {
    const unsigned char* p;
    std::size_t n, off = 0;

    void need(std::size_t k) const {
        if (off + k > n) throw std::runtime_error("checkpoint: truncated file");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[off + i]) << (8 * i);
        off += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[off + i]) << (8 * i);
        off += 8;
        return v;
    }
    std::string bytes(std::size_t k) {
        need(k);
        std::string s(reinterpret_cast<const char*>(p + off), k);
        off += k;
        return s;
    }
};

}  // namespace detail

inline constexpr char kCheckpointMagic[9] = "MVSSMCP1";

template <typename T>
void save_checkpoint(const Model<T>& m, const std::string& path) {
    std::string out(kCheckpointMagic, 8);
    detail::put_u32(out, 1);
    detail::put_u64(out, m.seed);
    const std::string cfg = m.config.to_text();
    detail::put_u32(out, std::uint32_t(cfg.size()));
    out += cfg;
    detail::put_u32(out, std::uint32_t(m.params.size()));
    for (const auto& p : m.params) {
        detail::put_u32(out, std::uint32_t(p.name.size()));
        out += p.name;
        out.push_back(char(sizeof(T)));
        detail::put_u32(out, std::uint32_t(p.tensor.rank()));
        for (std::size_t d : p.tensor.shape()) detail::put_u64(out, d);
        for (T v : p.tensor.data()) {
            // little-endian scalar bytes
            unsigned char raw[sizeof(T)];
            std::memcpy(raw, &v, sizeof(T));
            out.append(reinterpret_cast<char*>(raw), sizeof(T));
        }
    }
    const auto crc =
        crc32(0, reinterpret_cast<const unsigned char*>(out.data()), uInt(out.size()));
    detail::put_u32(out, std::uint32_t(crc));

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
    f.write(out.data(), std::streamsize(out.size()));
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 16) throw std::runtime_error("checkpoint: truncated file");

    const std::size_t body = buf.size() - 4;
    detail::ByteReader tail{reinterpret_cast<const unsigned char*>(buf.data()), buf.size(), body};
    const std::uint32_t want_crc = tail.u32();
    const auto got_crc =
        crc32(0, reinterpret_cast<const unsigned char*>(buf.data()), uInt(body));
    if (std::uint32_t(got_crc) != want_crc)
        throw std::runtime_error("checkpoint: checksum mismatch (corrupt file)");

    detail::ByteReader r{reinterpret_cast<const unsigned char*>(buf.data()), body};
    if (r.bytes(8) != std::string(kCheckpointMagic, 8))
        throw std::runtime_error("checkpoint: bad magic");
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const std::uint64_t seed = r.u64();
    const std::string cfg_text = r.bytes(r.u32());
    ModelConfig config = ModelConfig::from_text(cfg_text);

    Model<T> m = build_model<T>(config, seed);
    std::map<std::string, Tensor<T>> by_name;
    for (auto& p : m.params) by_name.emplace(p.name, p.tensor);

    const std::uint32_t count = r.u32();
    if (count != m.params.size())
        throw std::runtime_error("checkpoint: parameter count " + std::to_string(count) +
                                 " does not match config (" + std::to_string(m.params.size()) +
                                 ")");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.bytes(r.u32());
        const std::string dtype = r.bytes(1);
        if (std::size_t(dtype[0]) != sizeof(T))
            throw std::runtime_error("checkpoint: scalar width mismatch for " + name);
        const std::uint32_t ndim = r.u32();
        Shape shape(ndim);
        for (auto& d : shape) d = std::size_t(r.u64());
        auto it = by_name.find(name);
        if (it == by_name.end()) throw std::runtime_error("checkpoint: unknown parameter " + name);
        if (it->second.shape() != shape)
            throw std::runtime_error("checkpoint: shape mismatch for " + name + ": file has " +
                                     shape_str(shape) + ", config wants " +
                                     shape_str(it->second.shape()));
        const std::string raw = r.bytes(shape_numel(shape) * sizeof(T));
        std::memcpy(it->second.mutable_data().data(), raw.data(), raw.size());
    }
    return m;
}

// Closed-form parameter count for one config, checked against the registry.
inline std::size_t expected_parameter_count(const ModelConfig& c) {
    const std::size_t w = c.stream_width();
    const std::size_t d_ie = c.d_ie_eff() * w / c.dims.d_pe;
    const std::size_t d_g = std::max<std::size_t>(1, c.d_g_eff() * w / c.dims.d_pe);
    const std::size_t patch_eff = c.dims.patch / 4;
    const std::size_t dhs = c.dims.d_hs;

    auto secmamba = [&](std::size_t width, std::size_t ie) {
        return ie * width + ie                // in proj
               + dhs + dhs * ie + ie * dhs    // ssm a, B, C
               + ie * ie + ie                 // gate
               + width * ie + width           // out proj
               + 2 * width;                   // layernorm
    };
    auto attention = [&](std::size_t width) {
        return 3 * width * width              // per-head QKV, summed over heads
               + width * width                // output proj
               + 2 * width                    // ln1
               + 4 * width * width + 4 * width  // mlp in
               + 4 * width * width + width    // mlp out
               + 2 * width;                   // ln2
    };
    auto gate = [&](std::size_t width, std::size_t hidden) {
        return hidden * 2 * width + 2 * hidden;
    };

    const auto l3 = detail::stage_layout(c.preset, 3);
    const auto l4 = detail::stage_layout(c.preset, 4);
    std::size_t stream = 0;
    stream += c.stem_c1 * 1 * 9 + c.stem_c1 + c.stem_c2 * c.stem_c1 * 9 + c.stem_c2;  // stem
    stream += w * patch_eff * patch_eff * c.stem_c2 + w;                              // embed
    stream += l3.n_secmamba * secmamba(w, d_ie) + l3.n_attention * attention(w);
    if (l3.mode == GateMode::Learned) stream += gate(w, d_g);
    stream += 2 * w * w * 4 + 2 * w;  // downsample conv
    stream += l4.n_secmamba * secmamba(2 * w, 2 * d_ie) + l4.n_attention * attention(2 * w);
    if (l4.mode == GateMode::Learned) stream += gate(2 * w, 2 * d_g);

    std::size_t total = c.n_streams() * stream;
    if (c.preset != Preset::FourStream) total += gate(c.view_embed_width(), c.view_embed_width());
    const std::size_t head_in = c.head_input_width(), head_hidden = 2 * c.dims.d_pe;
    total += head_hidden * head_in + head_hidden + 2 * head_hidden + 2;
    return total;
}

}  // namespace mvssm
