// Image tokenization: the LeViT-style convolutional stem (3x3 stride-2
// stack), the linear patch-projection alternative, and the 2-D sinusoidal
// positional encoding generated in 64 dimensions and projected to d.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "xcit/autodiff.hpp"
#include "xcit/layers.hpp"
#include "xcit/tensor.hpp"

namespace xcit {

struct PatchGrid {
    std::int64_t hp = 0;
    std::int64_t wp = 0;
    std::int64_t patch = 16;
    std::int64_t tokens() const { return hp * wp; }
    GridShape grid() const { return {hp, wp}; }
};

inline PatchGrid make_patch_grid(std::int64_t height, std::int64_t width, std::int64_t patch) {
    if (patch <= 0 || height % patch != 0 || width % patch != 0) {
        throw ConfigError("image " + std::to_string(height) + "x" + std::to_string(width) +
                          " not divisible by patch size " + std::to_string(patch));
    }
    return {height / patch, width / patch, patch};
}

// ---------------------------------------------------------------------------
// Convolutional stem: stride-2 3x3 convolutions with GELU between, total
// stride equal to the patch size. Channel ramp d/8 -> d/4 -> d/2 -> d for
// patch 16, d/4 -> d/2 -> d for patch 8.
// ---------------------------------------------------------------------------

template <typename T>
struct ConvStem {
    std::int64_t patch = 16;
    std::int64_t dim = 0;
    std::vector<Param<T>> conv_w;  // [Cout,Cin,3,3]
    std::vector<Param<T>> conv_b;  // [Cout]
};

template <typename T>
ConvStem<T> make_conv_stem(std::int64_t patch, std::int64_t d, Rng& rng, double init_std = 0.02) {
    std::vector<std::int64_t> channels;
    if (patch == 16) {
        if (d % 8 != 0) throw ConfigError("conv stem with patch 16 needs width divisible by 8");
        channels = {3, d / 8, d / 4, d / 2, d};
    } else if (patch == 8) {
        if (d % 4 != 0) throw ConfigError("conv stem with patch 8 needs width divisible by 4");
        channels = {3, d / 4, d / 2, d};
    } else {
        throw ConfigError("patch size must be 8 or 16, got " + std::to_string(patch));
    }
    ConvStem<T> stem;
    stem.patch = patch;
    stem.dim = d;
    for (std::size_t i = 0; i + 1 < channels.size(); ++i) {
        Tensor<T> w({channels[i + 1], channels[i], 3, 3});
        fill_trunc_normal(w, rng, init_std);
        stem.conv_w.emplace_back(std::move(w));
        stem.conv_b.emplace_back(Tensor<T>({channels[i + 1]}));
    }
    return stem;
}

// img: [1, 3, H, W] -> tokens [N, d]
template <class E>
typename E::Value conv_stem_forward(E& eng, typename E::Value img, ConvStem<typename E::Scalar>& stem) {
    using T = typename E::Scalar;
    const Tensor<T>& iv = eng.value(img);
    detail::require(iv.rank() == 4 && iv.extent(0) == 1 && iv.extent(1) == 3,
                    "conv stem expects [1,3,H,W], got " + shape_str(iv.shape()));
    PatchGrid grid = make_patch_grid(iv.extent(2), iv.extent(3), stem.patch);
    auto x = img;
    for (std::size_t i = 0; i < stem.conv_w.size(); ++i) {
        x = eng.conv3x3_stride2(x, eng.param(stem.conv_w[i]), eng.param(stem.conv_b[i]));
        if (i + 1 < stem.conv_w.size()) x = eng.gelu(x);
    }
    return eng.transpose(eng.reshape(x, {stem.dim, grid.tokens()}));
}

// ---------------------------------------------------------------------------
// Linear patch projection: flatten each non-overlapping 3 x p x p patch and
// apply one linear map.
// ---------------------------------------------------------------------------

template <typename T>
struct LinearPatch {
    std::int64_t patch = 16;
    std::int64_t dim = 0;
    Param<T> w;  // [3*p*p, d]
    Param<T> b;  // [d]
};

template <typename T>
LinearPatch<T> make_linear_patch(std::int64_t patch, std::int64_t d, Rng& rng, double init_std = 0.02) {
    if (patch <= 0) throw ConfigError("patch size must be positive");
    LinearPatch<T> lp;
    lp.patch = patch;
    lp.dim = d;
    lp.w = Param<T>(Tensor<T>({3 * patch * patch, d}));
    fill_trunc_normal(lp.w.value, rng, init_std);
    lp.b = Param<T>(Tensor<T>({d}));
    return lp;
}

template <class E>
typename E::Value linear_patch_forward(E& eng, typename E::Value img,
                                       LinearPatch<typename E::Scalar>& lp) {
    using T = typename E::Scalar;
    const Tensor<T>& iv = eng.value(img);
    detail::require(iv.rank() == 4 && iv.extent(0) == 1 && iv.extent(1) == 3,
                    "linear patch embed expects [1,3,H,W], got " + shape_str(iv.shape()));
    make_patch_grid(iv.extent(2), iv.extent(3), lp.patch);
    auto patches = eng.extract_patches(eng.reshape(img, {3, iv.extent(2), iv.extent(3)}), lp.patch);
    return eng.add_row_broadcast(eng.matmul(patches, eng.param(lp.w)), eng.param(lp.b));
}

// Batched convenience wrappers returning [B, N, d].
template <typename T>
Tensor<T> conv_patch_embed(ConvStem<T>& stem, const Tensor<T>& imgs) {
    detail::require(imgs.rank() == 4 && imgs.extent(1) == 3, "conv_patch_embed expects [B,3,H,W]");
    const std::int64_t b = imgs.extent(0), h = imgs.extent(2), w = imgs.extent(3);
    PatchGrid grid = make_patch_grid(h, w, stem.patch);
    Tensor<T> out({b, grid.tokens(), stem.dim});
    for (std::int64_t i = 0; i < b; ++i) {
        EvalEngine<T> eng;
        Tensor<T> sample({1, 3, h, w});
        std::copy(imgs.data() + i * 3 * h * w, imgs.data() + (i + 1) * 3 * h * w, sample.data());
        auto tokens = conv_stem_forward(eng, eng.constant(std::move(sample)), stem);
        std::copy(eng.value(tokens).data(), eng.value(tokens).data() + grid.tokens() * stem.dim,
                  out.data() + i * grid.tokens() * stem.dim);
    }
    return out;
}

template <typename T>
Tensor<T> linear_patch_embed(LinearPatch<T>& lp, const Tensor<T>& imgs) {
    detail::require(imgs.rank() == 4 && imgs.extent(1) == 3, "linear_patch_embed expects [B,3,H,W]");
    const std::int64_t b = imgs.extent(0), h = imgs.extent(2), w = imgs.extent(3);
    PatchGrid grid = make_patch_grid(h, w, lp.patch);
    Tensor<T> out({b, grid.tokens(), lp.dim});
    for (std::int64_t i = 0; i < b; ++i) {
        EvalEngine<T> eng;
        Tensor<T> sample({1, 3, h, w});
        std::copy(imgs.data() + i * 3 * h * w, imgs.data() + (i + 1) * 3 * h * w, sample.data());
        auto tokens = linear_patch_forward(eng, eng.constant(std::move(sample)), lp);
        std::copy(eng.value(tokens).data(), eng.value(tokens).data() + grid.tokens() * lp.dim,
                  out.data() + i * grid.tokens() * lp.dim);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sinusoidal positional encoding. Patch-center coordinates are normalized to
// (0,1), scaled by 2*pi, and expanded with 16 geometric frequencies per axis
// (base 10000), sin and cos each: 32 dims per axis, x then y, 64 total. A
// learned linear map takes the code to width d. No stored tables, so any
// grid works with the same weights.
// ---------------------------------------------------------------------------

inline constexpr std::int64_t kPosFrequencies = 16;
inline constexpr std::int64_t kPosEncodeWidth = 64;  // 2 coords * (16 sin + 16 cos)

template <typename T>
struct PosEncoder {
    Param<T> proj_w;  // [64, d]
    Param<T> proj_b;  // [d]
};

template <typename T>
PosEncoder<T> make_pos_encoder(std::int64_t d, Rng& rng, double init_std = 0.02) {
    PosEncoder<T> p;
    p.proj_w = Param<T>(Tensor<T>({kPosEncodeWidth, d}));
    fill_trunc_normal(p.proj_w.value, rng, init_std);
    p.proj_b = Param<T>(Tensor<T>({d}));
    return p;
}

template <typename T>
Tensor<T> sinusoid_table(GridShape grid) {
    const double two_pi = 2.0 * 3.14159265358979323846;
    Tensor<T> table({grid.tokens(), kPosEncodeWidth});
    for (std::int64_t gy = 0; gy < grid.hp; ++gy) {
        for (std::int64_t gx = 0; gx < grid.wp; ++gx) {
            T* row = table.data() + (gy * grid.wp + gx) * kPosEncodeWidth;
            const double ux = two_pi * (static_cast<double>(gx) + 0.5) / static_cast<double>(grid.wp);
            const double uy = two_pi * (static_cast<double>(gy) + 0.5) / static_cast<double>(grid.hp);
            for (std::int64_t k = 0; k < kPosFrequencies; ++k) {
                const double div = std::pow(10000.0, 2.0 * static_cast<double>(k) /
                                                         static_cast<double>(2 * kPosFrequencies));
                row[2 * k] = static_cast<T>(std::sin(ux / div));
                row[2 * k + 1] = static_cast<T>(std::cos(ux / div));
                row[32 + 2 * k] = static_cast<T>(std::sin(uy / div));
                row[32 + 2 * k + 1] = static_cast<T>(std::cos(uy / div));
            }
        }
    }
    return table;
}

template <class E>
typename E::Value positional_encoding(E& eng, GridShape grid, PosEncoder<typename E::Scalar>& pos) {
    using T = typename E::Scalar;
    auto table = eng.constant(sinusoid_table<T>(grid));
    return eng.add_row_broadcast(eng.matmul(table, eng.param(pos.proj_w)), eng.param(pos.proj_b));
}

}  // namespace xcit
