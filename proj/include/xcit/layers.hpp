// One XCiT layer: pre-norm XCA, local patch interaction, and FFN, each with
// a LayerScale-weighted residual and optional stochastic depth; plus the
// class-attention layer that folds patch information into the CLS token.
#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>

#include "xcit/attention.hpp"
#include "xcit/autodiff.hpp"
#include "xcit/tensor.hpp"

namespace xcit {

template <typename T>
struct LayerNormParams {
    Param<T> gain;
    Param<T> bias;
};

template <typename T>
LayerNormParams<T> make_layer_norm(std::int64_t d) {
    return {Param<T>(Tensor<T>::full({d}, T(1))), Param<T>(Tensor<T>({d}))};
}

template <typename T>
struct LpiWeights {
    Param<T> conv1_w, conv1_b;  // [d,3,3], [d]
    Param<T> conv2_w, conv2_b;
    Param<T> bn_gain, bn_bias;  // [d]
    BnStats<T> bn_stats;
};

template <typename T>
LpiWeights<T> make_lpi(std::int64_t d, Rng& rng, double init_std = 0.02) {
    LpiWeights<T> w;
    w.conv1_w = Param<T>(Tensor<T>({d, 3, 3}));
    fill_trunc_normal(w.conv1_w.value, rng, init_std);
    w.conv1_b = Param<T>(Tensor<T>({d}));
    w.conv2_w = Param<T>(Tensor<T>({d, 3, 3}));
    fill_trunc_normal(w.conv2_w.value, rng, init_std);
    w.conv2_b = Param<T>(Tensor<T>({d}));
    w.bn_gain = Param<T>(Tensor<T>::full({d}, T(1)));
    w.bn_bias = Param<T>(Tensor<T>({d}));
    w.bn_stats = BnStats<T>(d);
    return w;
}

template <typename T>
struct FfnWeights {
    Param<T> fc1_w, fc1_b;  // [d, 4d], [4d]
    Param<T> fc2_w, fc2_b;  // [4d, d], [d]
};

template <typename T>
FfnWeights<T> make_ffn(std::int64_t d, Rng& rng, double init_std = 0.02) {
    FfnWeights<T> w;
    w.fc1_w = Param<T>(Tensor<T>({d, 4 * d}));
    fill_trunc_normal(w.fc1_w.value, rng, init_std);
    w.fc1_b = Param<T>(Tensor<T>({4 * d}));
    w.fc2_w = Param<T>(Tensor<T>({4 * d, d}));
    fill_trunc_normal(w.fc2_w.value, rng, init_std);
    w.fc2_b = Param<T>(Tensor<T>({d}));
    return w;
}

template <typename T>
struct LayerScale {
    Param<T> gamma_xca, gamma_lpi, gamma_ffn;  // each [d], initialized to eps
};

template <typename T>
LayerScale<T> make_layer_scale(std::int64_t d, double eps) {
    return {Param<T>(Tensor<T>::full({d}, static_cast<T>(eps))),
            Param<T>(Tensor<T>::full({d}, static_cast<T>(eps))),
            Param<T>(Tensor<T>::full({d}, static_cast<T>(eps)))};
}

// Sub-blocks run in the order XCA -> LPI -> FFN; norm1/2/3 precede them in
// that order.
template <typename T>
struct XcitLayer {
    LayerNormParams<T> norm1, norm2, norm3;
    XcaWeights<T> xca;
    LpiWeights<T> lpi;
    FfnWeights<T> ffn;
    LayerScale<T> ls;
    T drop_path = T(0);
};

template <typename T>
XcitLayer<T> make_xcit_layer(std::int64_t d, std::int64_t h, double eps_ls, double drop_path,
                             Rng& rng) {
    XcitLayer<T> l;
    l.norm1 = make_layer_norm<T>(d);
    l.norm2 = make_layer_norm<T>(d);
    l.norm3 = make_layer_norm<T>(d);
    l.xca = make_xca_weights<T>(d, h, rng);
    l.lpi = make_lpi<T>(d, rng);
    l.ffn = make_ffn<T>(d, rng);
    l.ls = make_layer_scale<T>(d, eps_ls);
    l.drop_path = static_cast<T>(drop_path);
    return l;
}

struct GridShape {
    std::int64_t hp = 0;
    std::int64_t wp = 0;
    std::int64_t tokens() const { return hp * wp; }
};

// conv3x3 -> batchnorm -> gelu -> conv3x3, depthwise, on the token grid
template <class E>
typename E::Value lpi_forward(E& eng, typename E::Value x, GridShape grid,
                              LpiWeights<typename E::Scalar>& w) {
    using T = typename E::Scalar;
    const Tensor<T>& xv = eng.value(x);
    detail::require(xv.rank() == 2, "lpi_forward expects [N, d]");
    const std::int64_t n = xv.rows(), d = xv.cols();
    if (n != grid.tokens()) {
        throw ShapeError("lpi grid " + std::to_string(grid.hp) + "x" + std::to_string(grid.wp) +
                         " does not cover " + std::to_string(n) + " tokens");
    }
    auto img = eng.reshape(eng.transpose(x), {1, d, grid.hp, grid.wp});
    auto h1 = eng.depthwise_conv3x3(img, eng.param(w.conv1_w), eng.param(w.conv1_b));
    auto h2 = eng.gelu(eng.batch_norm_2d(h1, eng.param(w.bn_gain), eng.param(w.bn_bias), w.bn_stats));
    auto h3 = eng.depthwise_conv3x3(h2, eng.param(w.conv2_w), eng.param(w.conv2_b));
    return eng.transpose(eng.reshape(h3, {d, n}));
}

template <class E>
typename E::Value ffn_forward(E& eng, typename E::Value x, FfnWeights<typename E::Scalar>& w) {
    auto h = eng.gelu(eng.add_row_broadcast(eng.matmul(x, eng.param(w.fc1_w)), eng.param(w.fc1_b)));
    return eng.add_row_broadcast(eng.matmul(h, eng.param(w.fc2_w)), eng.param(w.fc2_b));
}

// x + drop_path(gamma * branch(...)). In train mode the branch is skipped
// entirely with probability p and scaled by 1/(1-p) when kept; eval is
// deterministic.
template <class E, class BranchFn>
typename E::Value drop_path_residual(E& eng, typename E::Value x, typename E::Scalar drop_p,
                                     Param<typename E::Scalar>& gamma, BranchFn&& branch) {
    using T = typename E::Scalar;
    T keep_scale = T(1);
    if (eng.training() && drop_p > T(0)) {
        std::bernoulli_distribution keep(1.0 - static_cast<double>(drop_p));
        if (!keep(eng.rng())) return x;
        keep_scale = T(1) / (T(1) - drop_p);
    }
    auto scaled = eng.mul_row_broadcast(branch(), eng.param(gamma));
    if (keep_scale != T(1)) scaled = eng.scale(scaled, keep_scale);
    return eng.add(x, scaled);
}

template <class E>
typename E::Value xcit_layer_forward(E& eng, typename E::Value x, GridShape grid,
                                     XcitLayer<typename E::Scalar>& layer) {
    x = drop_path_residual(eng, x, layer.drop_path, layer.ls.gamma_xca, [&] {
        auto u = eng.layer_norm(x, eng.param(layer.norm1.gain), eng.param(layer.norm1.bias));
        return xca_forward(eng, u, layer.xca).y;
    });
    x = drop_path_residual(eng, x, layer.drop_path, layer.ls.gamma_lpi, [&] {
        auto u = eng.layer_norm(x, eng.param(layer.norm2.gain), eng.param(layer.norm2.bias));
        return lpi_forward(eng, u, grid, layer.lpi);
    });
    x = drop_path_residual(eng, x, layer.drop_path, layer.ls.gamma_ffn, [&] {
        auto u = eng.layer_norm(x, eng.param(layer.norm3.gain), eng.param(layer.norm3.bias));
        return ffn_forward(eng, u, layer.ffn);
    });
    return x;
}

// CLS aggregation layer: pre-norm one-way attention plus an FFN applied to
// the CLS token only. Patches pass through untouched.
template <typename T>
struct ClassAttnLayer {
    LayerNormParams<T> norm1, norm2;
    TokenAttnWeights<T> attn;
    FfnWeights<T> ffn;
    Param<T> gamma_attn, gamma_ffn;  // [d]
    T drop_path = T(0);
};

template <typename T>
ClassAttnLayer<T> make_class_attn_layer(std::int64_t d, std::int64_t h, double eps_ls, Rng& rng) {
    ClassAttnLayer<T> l;
    l.norm1 = make_layer_norm<T>(d);
    l.norm2 = make_layer_norm<T>(d);
    l.attn = make_token_attn_weights<T>(d, h, rng);
    l.ffn = make_ffn<T>(d, rng);
    l.gamma_attn = Param<T>(Tensor<T>::full({d}, static_cast<T>(eps_ls)));
    l.gamma_ffn = Param<T>(Tensor<T>::full({d}, static_cast<T>(eps_ls)));
    return l;
}

template <class E>
struct ClassLayerResult {
    typename E::Value cls;  // [1, d]
    // [h, N+1] attention over [cls; patches]; absent if stochastic depth
    // skipped the attention branch
    std::optional<typename E::Value> weights;
};

template <class E>
ClassLayerResult<E> class_attention_layer_forward(E& eng, typename E::Value cls,
                                                  typename E::Value patches,
                                                  ClassAttnLayer<typename E::Scalar>& layer) {
    // LayerNorm is per-row, so normalizing cls and patches separately equals
    // normalizing their concatenation.
    ClassLayerResult<E> out;
    auto g1 = eng.param(layer.norm1.gain);
    auto b1 = eng.param(layer.norm1.bias);
    std::optional<typename E::Value> attn_weights;
    cls = drop_path_residual(eng, cls, layer.drop_path, layer.gamma_attn, [&] {
        auto ucls = eng.layer_norm(cls, g1, b1);
        auto upatch = eng.layer_norm(patches, g1, b1);
        auto res = class_attention_forward(eng, ucls, std::optional(upatch), layer.attn);
        attn_weights = res.weights;
        return res.y;
    });
    cls = drop_path_residual(eng, cls, layer.drop_path, layer.gamma_ffn, [&] {
        auto u = eng.layer_norm(cls, eng.param(layer.norm2.gain), eng.param(layer.norm2.bias));
        return ffn_forward(eng, u, layer.ffn);
    });
    out.cls = cls;
    out.weights = attn_weights;
    return out;
}

}  // namespace xcit
