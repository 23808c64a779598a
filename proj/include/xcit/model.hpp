// Full model assembly: patch embedding, positional encoding, the layer
// stack, class-attention aggregation, and the classifier head. Includes the
// published configuration presets, analytic parameter/MAC accounting, and a
// named-record checkpoint format.
#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "xcit/embed.hpp"
#include "xcit/io.hpp"
#include "xcit/layers.hpp"
#include "xcit/tensor.hpp"

namespace xcit {

struct XcitConfig {
    std::string name;  // preset tag, empty for custom configurations
    int depth = 12;
    std::int64_t dim = 128;
    std::int64_t heads = 4;
    std::int64_t patch_size = 16;
    std::int64_t n_classes = 1000;
    double eps_ls = 1.0;     // LayerScale initialization
    double drop_rate = 0.0;  // stochastic depth, uniform across layers
    int n_cls_layers = 2;
    bool linear_patch = false;

    void validate() const {
        if (depth < 1) throw ConfigError("config field depth: must be >= 1");
        if (dim < 1) throw ConfigError("config field dim: must be >= 1");
        if (heads < 1 || dim % heads != 0) {
            throw ConfigError("config field heads: width " + std::to_string(dim) +
                              " not divisible by " + std::to_string(heads));
        }
        if (!linear_patch && patch_size != 8 && patch_size != 16) {
            throw ConfigError("config field patch_size: conv stem supports 8 or 16, got " +
                              std::to_string(patch_size));
        }
        if (linear_patch && patch_size < 1) throw ConfigError("config field patch_size: must be >= 1");
        if (n_classes < 1) throw ConfigError("config field n_classes: must be >= 1");
        if (n_cls_layers < 0) throw ConfigError("config field n_cls_layers: must be >= 0");
        if (drop_rate < 0.0 || drop_rate >= 1.0) {
            throw ConfigError("config field drop_rate: must lie in [0, 1)");
        }
    }
};

inline const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names = {"N12", "T12", "T24", "S12", "S24", "M24", "L24"};
    return names;
}

// Depth / width / heads per model, with the stochastic-depth rate and
// LayerScale initialization published alongside them.
inline XcitConfig preset(const std::string& name, std::int64_t patch_size = 16) {
    XcitConfig cfg;
    cfg.name = name;
    cfg.patch_size = patch_size;
    if (name == "N12") {
        cfg.depth = 12; cfg.dim = 128; cfg.heads = 4; cfg.drop_rate = 0.0; cfg.eps_ls = 1.0;
    } else if (name == "T12") {
        cfg.depth = 12; cfg.dim = 192; cfg.heads = 4; cfg.drop_rate = 0.0; cfg.eps_ls = 1.0;
    } else if (name == "T24") {
        cfg.depth = 24; cfg.dim = 192; cfg.heads = 4; cfg.drop_rate = 0.05; cfg.eps_ls = 1e-5;
    } else if (name == "S12") {
        cfg.depth = 12; cfg.dim = 384; cfg.heads = 8; cfg.drop_rate = 0.05; cfg.eps_ls = 1.0;
    } else if (name == "S24") {
        cfg.depth = 24; cfg.dim = 384; cfg.heads = 8; cfg.drop_rate = 0.1; cfg.eps_ls = 1e-5;
    } else if (name == "M24") {
        cfg.depth = 24; cfg.dim = 512; cfg.heads = 8; cfg.drop_rate = 0.15; cfg.eps_ls = 1e-5;
    } else if (name == "L24") {
        cfg.depth = 24; cfg.dim = 768; cfg.heads = 16; cfg.eps_ls = 1e-5;
        cfg.drop_rate = patch_size == 8 ? 0.3 : 0.25;  // the L24 rate is per patch size
    } else {
        std::string valid;
        for (const auto& n : preset_names()) valid += (valid.empty() ? "" : ", ") + n;
        throw ConfigError("unknown preset '" + name + "'; valid presets: " + valid);
    }
    cfg.validate();
    return cfg;
}

template <typename T>
struct XcitModel {
    XcitConfig cfg;
    ConvStem<T> stem;       // one of the two embeddings is active per config
    LinearPatch<T> linear;
    PosEncoder<T> pos;
    Param<T> cls_token;  // [1, d]; enters only the class-attention stage
    std::vector<XcitLayer<T>> layers;
    std::vector<ClassAttnLayer<T>> cls_layers;
    LayerNormParams<T> final_norm;
    Param<T> head_w, head_b;  // [d, n_classes], [n_classes]
};

template <typename T>
XcitModel<T> build(const XcitConfig& cfg, Rng& rng) {
    cfg.validate();
    XcitModel<T> m;
    m.cfg = cfg;
    if (cfg.linear_patch) {
        m.linear = make_linear_patch<T>(cfg.patch_size, cfg.dim, rng);
    } else {
        m.stem = make_conv_stem<T>(cfg.patch_size, cfg.dim, rng);
    }
    m.pos = make_pos_encoder<T>(cfg.dim, rng);
    m.cls_token = Param<T>(Tensor<T>({1, cfg.dim}));
    fill_trunc_normal(m.cls_token.value, rng, 0.02);
    m.layers.reserve(static_cast<std::size_t>(cfg.depth));
    for (int i = 0; i < cfg.depth; ++i) {
        m.layers.push_back(make_xcit_layer<T>(cfg.dim, cfg.heads, cfg.eps_ls, cfg.drop_rate, rng));
    }
    for (int i = 0; i < cfg.n_cls_layers; ++i) {
        m.cls_layers.push_back(make_class_attn_layer<T>(cfg.dim, cfg.heads, cfg.eps_ls, rng));
    }
    m.final_norm = make_layer_norm<T>(cfg.dim);
    m.head_w = Param<T>(Tensor<T>({cfg.dim, cfg.n_classes}));
    fill_trunc_normal(m.head_w.value, rng, 0.02);
    m.head_b = Param<T>(Tensor<T>({cfg.n_classes}));
    return m;
}

// Canonical parameter walk; checkpoint records, the optimizer, and the
// counters all follow this order.
template <typename T, typename Fn>
void for_each_param(XcitModel<T>& m, Fn&& fn) {
    if (m.cfg.linear_patch) {
        fn("patch_proj.weight", m.linear.w);
        fn("patch_proj.bias", m.linear.b);
    } else {
        for (std::size_t i = 0; i < m.stem.conv_w.size(); ++i) {
            const std::string base = "stem.conv" + std::to_string(i);
            fn(base + ".weight", m.stem.conv_w[i]);
            fn(base + ".bias", m.stem.conv_b[i]);
        }
    }
    fn("pos.proj.weight", m.pos.proj_w);
    fn("pos.proj.bias", m.pos.proj_b);
    fn("cls_token", m.cls_token);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const std::string base = "layer" + std::to_string(i);
        XcitLayer<T>& l = m.layers[i];
        fn(base + ".norm1.gain", l.norm1.gain);
        fn(base + ".norm1.bias", l.norm1.bias);
        fn(base + ".xca.qkv.weight", l.xca.qkv_w);
        fn(base + ".xca.qkv.bias", l.xca.qkv_b);
        fn(base + ".xca.temp", l.xca.temp);
        fn(base + ".xca.proj.weight", l.xca.proj_w);
        fn(base + ".xca.proj.bias", l.xca.proj_b);
        fn(base + ".norm2.gain", l.norm2.gain);
        fn(base + ".norm2.bias", l.norm2.bias);
        fn(base + ".lpi.conv1.weight", l.lpi.conv1_w);
        fn(base + ".lpi.conv1.bias", l.lpi.conv1_b);
        fn(base + ".lpi.bn.gain", l.lpi.bn_gain);
        fn(base + ".lpi.bn.bias", l.lpi.bn_bias);
        fn(base + ".lpi.conv2.weight", l.lpi.conv2_w);
        fn(base + ".lpi.conv2.bias", l.lpi.conv2_b);
        fn(base + ".norm3.gain", l.norm3.gain);
        fn(base + ".norm3.bias", l.norm3.bias);
        fn(base + ".ffn.fc1.weight", l.ffn.fc1_w);
        fn(base + ".ffn.fc1.bias", l.ffn.fc1_b);
        fn(base + ".ffn.fc2.weight", l.ffn.fc2_w);
        fn(base + ".ffn.fc2.bias", l.ffn.fc2_b);
        fn(base + ".ls.xca", l.ls.gamma_xca);
        fn(base + ".ls.lpi", l.ls.gamma_lpi);
        fn(base + ".ls.ffn", l.ls.gamma_ffn);
    }
    for (std::size_t i = 0; i < m.cls_layers.size(); ++i) {
        const std::string base = "cls_layer" + std::to_string(i);
        ClassAttnLayer<T>& l = m.cls_layers[i];
        fn(base + ".norm1.gain", l.norm1.gain);
        fn(base + ".norm1.bias", l.norm1.bias);
        fn(base + ".attn.qkv.weight", l.attn.qkv_w);
        fn(base + ".attn.qkv.bias", l.attn.qkv_b);
        fn(base + ".attn.proj.weight", l.attn.proj_w);
        fn(base + ".attn.proj.bias", l.attn.proj_b);
        fn(base + ".norm2.gain", l.norm2.gain);
        fn(base + ".norm2.bias", l.norm2.bias);
        fn(base + ".ffn.fc1.weight", l.ffn.fc1_w);
        fn(base + ".ffn.fc1.bias", l.ffn.fc1_b);
        fn(base + ".ffn.fc2.weight", l.ffn.fc2_w);
        fn(base + ".ffn.fc2.bias", l.ffn.fc2_b);
        fn(base + ".ls.attn", l.gamma_attn);
        fn(base + ".ls.ffn", l.gamma_ffn);
    }
    fn("final_norm.gain", m.final_norm.gain);
    fn("final_norm.bias", m.final_norm.bias);
    fn("head.weight", m.head_w);
    fn("head.bias", m.head_b);
}

// Non-trainable state (batch-norm running statistics).
template <typename T, typename Fn>
void for_each_state(XcitModel<T>& m, Fn&& fn) {
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const std::string base = "layer" + std::to_string(i) + ".lpi.bn";
        fn(base + ".running_mean", m.layers[i].lpi.bn_stats.running_mean);
        fn(base + ".running_var", m.layers[i].lpi.bn_stats.running_var);
    }
}

template <typename T>
std::vector<Param<T>*> all_params(XcitModel<T>& m) {
    std::vector<Param<T>*> out;
    for_each_param(m, [&](const std::string&, Param<T>& p) { out.push_back(&p); });
    return out;
}

template <typename T>
std::int64_t count_params(XcitModel<T>& m) {
    std::int64_t total = 0;
    for_each_param(m, [&](const std::string&, Param<T>& p) { total += p.numel(); });
    return total;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

template <class E>
typename E::Value model_forward_sample(E& eng, XcitModel<typename E::Scalar>& m,
                                       typename E::Value img) {
    using T = typename E::Scalar;
    const Tensor<T>& iv = eng.value(img);
    detail::require(iv.rank() == 4 && iv.extent(0) == 1 && iv.extent(1) == 3,
                    "model forward expects one [1,3,H,W] sample, got " + shape_str(iv.shape()));
    PatchGrid grid = make_patch_grid(iv.extent(2), iv.extent(3), m.cfg.patch_size);
    auto tokens = m.cfg.linear_patch ? linear_patch_forward(eng, img, m.linear)
                                     : conv_stem_forward(eng, img, m.stem);
    tokens = eng.add(tokens, positional_encoding(eng, grid.grid(), m.pos));
    for (auto& layer : m.layers) tokens = xcit_layer_forward(eng, tokens, grid.grid(), layer);
    auto cls = eng.param(m.cls_token);
    for (auto& ca : m.cls_layers) cls = class_attention_layer_forward(eng, cls, tokens, ca).cls;
    auto u = eng.layer_norm(cls, eng.param(m.final_norm.gain), eng.param(m.final_norm.bias));
    return eng.add_row_broadcast(eng.matmul(u, eng.param(m.head_w)), eng.param(m.head_b));
}

// imgs: [B,3,H,W] -> logits [B, n_classes]; samples stream one at a time.
template <typename T>
Tensor<T> forward(XcitModel<T>& m, const Tensor<T>& imgs, RunMode mode = RunMode::kEval,
                  Rng* rng = nullptr) {
    detail::require(imgs.rank() == 4 && imgs.extent(1) == 3, "forward expects [B,3,H,W]");
    const std::int64_t b = imgs.extent(0), h = imgs.extent(2), w = imgs.extent(3);
    Tensor<T> logits({b, m.cfg.n_classes});
    for (std::int64_t i = 0; i < b; ++i) {
        EvalEngine<T> eng(mode, rng);
        Tensor<T> sample({1, 3, h, w});
        std::copy(imgs.data() + i * 3 * h * w, imgs.data() + (i + 1) * 3 * h * w, sample.data());
        auto out = model_forward_sample(eng, m, eng.constant(std::move(sample)));
        const Tensor<T>& row = eng.value(out);
        row.check_finite("model forward");
        std::copy(row.data(), row.data() + m.cfg.n_classes, logits.data() + i * m.cfg.n_classes);
    }
    return logits;
}

// Per-head class-attention weights of the first aggregation layer over
// [cls; patches]: [h, N+1]. The patch slice reshaped to the grid is the
// visualization payload.
template <typename T>
Tensor<T> class_attention_weights(XcitModel<T>& m, const Tensor<T>& img) {
    detail::require(img.rank() == 4 && img.extent(0) == 1 && img.extent(1) == 3,
                    "class_attention_weights expects [1,3,H,W]");
    detail::require(!m.cls_layers.empty(), "model has no class-attention layers");
    EvalEngine<T> eng;
    PatchGrid grid = make_patch_grid(img.extent(2), img.extent(3), m.cfg.patch_size);
    auto tokens = m.cfg.linear_patch ? linear_patch_forward(eng, eng.constant(img), m.linear)
                                     : conv_stem_forward(eng, eng.constant(img), m.stem);
    tokens = eng.add(tokens, positional_encoding(eng, grid.grid(), m.pos));
    for (auto& layer : m.layers) tokens = xcit_layer_forward(eng, tokens, grid.grid(), layer);
    auto res = class_attention_layer_forward(eng, eng.param(m.cls_token), tokens, m.cls_layers[0]);
    return eng.value(*res.weights);
}

// ---------------------------------------------------------------------------
// Analytic MAC count for a configuration at a given input size; the XCA term
// keeps the whole sum linear in the token count.
// ---------------------------------------------------------------------------

inline std::int64_t count_flops(const XcitConfig& cfg, std::int64_t height, std::int64_t width) {
    cfg.validate();
    PatchGrid grid = make_patch_grid(height, width, cfg.patch_size);
    const std::int64_t n = grid.tokens(), d = cfg.dim;
    std::int64_t total = 0;

    if (cfg.linear_patch) {
        total += n * 3 * cfg.patch_size * cfg.patch_size * d;
    } else {
        std::vector<std::int64_t> channels = cfg.patch_size == 16
                                                 ? std::vector<std::int64_t>{3, d / 8, d / 4, d / 2, d}
                                                 : std::vector<std::int64_t>{3, d / 4, d / 2, d};
        std::int64_t sh = height, sw = width;
        for (std::size_t i = 0; i + 1 < channels.size(); ++i) {
            sh /= 2;
            sw /= 2;
            total += sh * sw * channels[i + 1] * channels[i] * 9;
        }
    }
    total += n * kPosEncodeWidth * d;

    const std::int64_t per_layer = xca_flops(n, d, cfg.heads)  // attention
                                   + 2 * n * d * 9             // two depthwise convolutions
                                   + 8 * n * d * d;            // d -> 4d -> d
    total += static_cast<std::int64_t>(cfg.depth) * per_layer;

    total += static_cast<std::int64_t>(cfg.n_cls_layers) *
             (class_attention_flops(n, d, cfg.heads) + 8 * d * d);
    total += d * cfg.n_classes;
    return total;
}

// ---------------------------------------------------------------------------
// Checkpoints: "XCKP" magic, version, record count, then named records of
// (name, shape, row-major f32 payload). Parameter records follow the
// for_each_param order, then batch-norm running stats.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointMagic = 0x504b4358;  // "XCKP"
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace ckpt_detail {

template <typename T>
void put_record(std::ostream& os, const std::string& name, const Tensor<T>& t) {
    io_detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    io_detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) io_detail::put_u32(os, static_cast<std::uint32_t>(t.extent(i)));
    for (std::int64_t i = 0; i < t.numel(); ++i) io_detail::put_f32(os, static_cast<float>(t[i]));
}

template <typename T>
void get_record(std::istream& is, const std::string& want_name, Tensor<T>& dst) {
    const std::uint32_t len = io_detail::get_u32(is, "record name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("checkpoint: truncated record name");
    if (name != want_name) {
        throw FormatError("checkpoint: expected record '" + want_name + "', found '" + name + "'");
    }
    const std::uint32_t rank = io_detail::get_u32(is, "record rank");
    if (rank != static_cast<std::uint32_t>(dst.rank())) {
        throw FormatError("checkpoint: rank mismatch for '" + name + "'");
    }
    for (std::uint32_t i = 0; i < rank; ++i) {
        const std::uint32_t e = io_detail::get_u32(is, "record extent");
        if (static_cast<std::int64_t>(e) != dst.extent(static_cast<int>(i))) {
            throw FormatError("checkpoint: shape mismatch for '" + name + "'");
        }
    }
    for (std::int64_t i = 0; i < dst.numel(); ++i)
        dst[i] = static_cast<T>(io_detail::get_f32(is, "record payload"));
}

}  // namespace ckpt_detail

template <typename T>
void save_checkpoint(XcitModel<T>& m, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    std::uint32_t count = 0;
    for_each_param(m, [&](const std::string&, Param<T>&) { ++count; });
    for_each_state(m, [&](const std::string&, Tensor<T>&) { ++count; });
    io_detail::put_u32(os, kCheckpointMagic);
    io_detail::put_u32(os, kCheckpointVersion);
    io_detail::put_u32(os, count);
    for_each_param(m, [&](const std::string& name, Param<T>& p) {
        ckpt_detail::put_record(os, name, p.value);
    });
    for_each_state(m, [&](const std::string& name, Tensor<T>& t) {
        ckpt_detail::put_record(os, name, t);
    });
}

template <typename T>
void load_checkpoint(XcitModel<T>& m, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path);
    if (io_detail::get_u32(is, "magic") != kCheckpointMagic)
        throw FormatError("checkpoint: bad magic");
    const std::uint32_t version = io_detail::get_u32(is, "version");
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    std::uint32_t want = 0;
    for_each_param(m, [&](const std::string&, Param<T>&) { ++want; });
    for_each_state(m, [&](const std::string&, Tensor<T>&) { ++want; });
    const std::uint32_t count = io_detail::get_u32(is, "record count");
    if (count != want) {
        throw FormatError("checkpoint: has " + std::to_string(count) + " records, model wants " +
                          std::to_string(want));
    }
    for_each_param(m, [&](const std::string& name, Param<T>& p) {
        ckpt_detail::get_record(is, name, p.value);
    });
    for_each_state(m, [&](const std::string& name, Tensor<T>& t) {
        ckpt_detail::get_record(is, name, t);
    });
}

}  // namespace xcit
