// Cross-covariance attention (XCA), the token self-attention baseline, and
// the one-way class attention used for CLS aggregation. All are multi-head
// with a fused d -> 3d query/key/value projection, and all are written once
// against the engine interface so the same code runs plain or on a tape.
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "xcit/autodiff.hpp"
#include "xcit/tensor.hpp"

namespace xcit {

// Per-head projections packed as [d, 3d] (query | key | value sections, each
// head a contiguous d/h column band), a learnable per-head temperature, and
// an output projection.
template <typename T>
struct XcaWeights {
    std::int64_t dim = 0;
    std::int64_t heads = 1;
    Param<T> qkv_w, qkv_b;    // [d, 3d], [3d]
    Param<T> temp;            // [h], multiplicative, initialized to 1
    Param<T> proj_w, proj_b;  // [d, d], [d]

    std::int64_t head_dim() const { return dim / heads; }
};

// Same projection layout but attention runs across tokens with the usual
// 1/sqrt(d_k) scale; no temperature.
template <typename T>
struct TokenAttnWeights {
    std::int64_t dim = 0;
    std::int64_t heads = 1;
    Param<T> qkv_w, qkv_b;
    Param<T> proj_w, proj_b;

    std::int64_t head_dim() const { return dim / heads; }
};

namespace detail {

inline void check_heads(std::int64_t d, std::int64_t h) {
    if (h <= 0 || d <= 0 || d % h != 0) {
        throw ConfigError("width " + std::to_string(d) + " not divisible into " + std::to_string(h) +
                          " heads");
    }
}

}  // namespace detail

template <typename T>
XcaWeights<T> make_xca_weights(std::int64_t d, std::int64_t h, Rng& rng, double init_std = 0.02) {
    detail::check_heads(d, h);
    XcaWeights<T> w;
    w.dim = d;
    w.heads = h;
    w.qkv_w = Param<T>(Tensor<T>({d, 3 * d}));
    fill_trunc_normal(w.qkv_w.value, rng, init_std);
    w.qkv_b = Param<T>(Tensor<T>({3 * d}));
    w.temp = Param<T>(Tensor<T>::full({h}, T(1)));
    w.proj_w = Param<T>(Tensor<T>({d, d}));
    fill_trunc_normal(w.proj_w.value, rng, init_std);
    w.proj_b = Param<T>(Tensor<T>({d}));
    return w;
}

template <typename T>
TokenAttnWeights<T> make_token_attn_weights(std::int64_t d, std::int64_t h, Rng& rng,
                                            double init_std = 0.02) {
    detail::check_heads(d, h);
    TokenAttnWeights<T> w;
    w.dim = d;
    w.heads = h;
    w.qkv_w = Param<T>(Tensor<T>({d, 3 * d}));
    fill_trunc_normal(w.qkv_w.value, rng, init_std);
    w.qkv_b = Param<T>(Tensor<T>({3 * d}));
    w.proj_w = Param<T>(Tensor<T>({d, d}));
    fill_trunc_normal(w.proj_w.value, rng, init_std);
    w.proj_b = Param<T>(Tensor<T>({d}));
    return w;
}

template <class E>
struct XcaResult {
    typename E::Value y;     // [N, d]
    typename E::Value maps;  // [h, d/h, d/h], post-softmax, rows sum to 1
    // Per-token magnitudes of the normalized queries/keys, the cheap saliency
    // readout. Plain tensors; they are not part of the differentiable path.
    Tensor<typename E::Scalar> q_norms;  // [h, N]
    Tensor<typename E::Scalar> k_norms;  // [h, N]
};

// Eq-style cross-covariance attention. Per head: project, l2-normalize each
// channel across tokens, form the (d/h)^2 channel-by-channel cross-covariance
// scaled by the head temperature, softmax per row, and mix V's channels.
template <class E>
XcaResult<E> xca_forward(E& eng, typename E::Value x, XcaWeights<typename E::Scalar>& w) {
    using T = typename E::Scalar;
    const Tensor<T>& xv = eng.value(x);
    detail::require(xv.rank() == 2 && xv.cols() == w.dim,
                    "xca_forward input " + shape_str(xv.shape()) + " does not match width " +
                        std::to_string(w.dim));
    const std::int64_t n = xv.rows(), d = w.dim, h = w.heads, dh = w.head_dim();

    auto qkv = eng.add_row_broadcast(eng.matmul(x, eng.param(w.qkv_w)), eng.param(w.qkv_b));
    auto temp = eng.param(w.temp);

    XcaResult<E> out;
    out.q_norms = Tensor<T>({h, n});
    out.k_norms = Tensor<T>({h, n});
    std::vector<typename E::Value> head_outs;
    std::vector<typename E::Value> head_maps;
    head_outs.reserve(static_cast<std::size_t>(h));
    head_maps.reserve(static_cast<std::size_t>(h));

    for (std::int64_t head = 0; head < h; ++head) {
        auto q = eng.slice_cols(qkv, head * dh, (head + 1) * dh);
        auto k = eng.slice_cols(qkv, d + head * dh, d + (head + 1) * dh);
        auto v = eng.slice_cols(qkv, 2 * d + head * dh, 2 * d + (head + 1) * dh);
        auto qn = eng.l2_normalize_axis(q, 0);
        auto kn = eng.l2_normalize_axis(k, 0);

        const Tensor<T>& qnv = eng.value(qn);
        const Tensor<T>& knv = eng.value(kn);
        for (std::int64_t t = 0; t < n; ++t) {
            T sq = T(0), sk = T(0);
            for (std::int64_t c = 0; c < dh; ++c) {
                sq += qnv.at(t, c) * qnv.at(t, c);
                sk += knv.at(t, c) * knv.at(t, c);
            }
            out.q_norms.at(head, t) = std::sqrt(sq);
            out.k_norms.at(head, t) = std::sqrt(sk);
        }

        auto cov = eng.matmul(eng.transpose(kn), qn);  // [dh, dh], entries in [-1, 1]
        auto tau = eng.slice_flat(temp, head, head + 1);
        auto probs = eng.softmax_last_axis(eng.mul_scalar(cov, tau));
        head_maps.push_back(probs);
        head_outs.push_back(eng.matmul(v, eng.transpose(probs)));
    }

    auto cat = h == 1 ? head_outs[0] : eng.concat_cols(head_outs);
    out.y = eng.add_row_broadcast(eng.matmul(cat, eng.param(w.proj_w)), eng.param(w.proj_b));
    auto stacked = h == 1 ? head_maps[0] : eng.concat_rows(head_maps);
    out.maps = eng.reshape(stacked, {h, dh, dh});
    return out;
}

// Conventional softmax(Q K^T / sqrt(d_k)) V over tokens; the quadratic
// baseline the scaling benchmarks compare against. All head maps are
// materialized at once, as a dense framework implementation would.
template <class E>
typename E::Value token_attention_forward(E& eng, typename E::Value x,
                                          TokenAttnWeights<typename E::Scalar>& w) {
    using T = typename E::Scalar;
    const Tensor<T>& xv = eng.value(x);
    detail::require(xv.rank() == 2 && xv.cols() == w.dim,
                    "token_attention input " + shape_str(xv.shape()) + " does not match width " +
                        std::to_string(w.dim));
    const std::int64_t n = xv.rows(), d = w.dim, h = w.heads, dh = w.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    auto qkv = eng.add_row_broadcast(eng.matmul(x, eng.param(w.qkv_w)), eng.param(w.qkv_b));

    typename E::Value probs;
    {
        std::vector<typename E::Value> logits;
        logits.reserve(static_cast<std::size_t>(h));
        for (std::int64_t head = 0; head < h; ++head) {
            auto q = eng.slice_cols(qkv, head * dh, (head + 1) * dh);
            auto k = eng.slice_cols(qkv, d + head * dh, d + (head + 1) * dh);
            logits.push_back(eng.scale(eng.matmul(q, eng.transpose(k)), scale));
        }
        auto all = h == 1 ? logits[0] : eng.concat_rows(logits);  // [h*N, N]
        logits.clear();
        probs = eng.softmax_last_axis(all);
    }

    std::vector<typename E::Value> head_outs;
    head_outs.reserve(static_cast<std::size_t>(h));
    for (std::int64_t head = 0; head < h; ++head) {
        auto v = eng.slice_cols(qkv, 2 * d + head * dh, 2 * d + (head + 1) * dh);
        auto p = h == 1 ? probs : eng.slice_rows(probs, head * n, (head + 1) * n);
        head_outs.push_back(eng.matmul(p, v));
    }
    auto cat = h == 1 ? head_outs[0] : eng.concat_cols(head_outs);
    return eng.add_row_broadcast(eng.matmul(cat, eng.param(w.proj_w)), eng.param(w.proj_b));
}

template <class E>
struct ClassAttnResult {
    typename E::Value y;        // [1, d]
    typename E::Value weights;  // [h, N+1]; column 0 is the CLS self-weight
};

// One-way attention: the query comes from the CLS token only, keys and
// values from [cls; patches], and patch embeddings are left untouched.
template <class E>
ClassAttnResult<E> class_attention_forward(E& eng, typename E::Value cls,
                                           std::optional<typename E::Value> patches,
                                           TokenAttnWeights<typename E::Scalar>& w) {
    using T = typename E::Scalar;
    const Tensor<T>& cv = eng.value(cls);
    detail::require(cv.rank() == 2 && cv.rows() == 1 && cv.cols() == w.dim,
                    "class_attention cls must be [1, d], got " + shape_str(cv.shape()));
    const std::int64_t d = w.dim, h = w.heads, dh = w.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    auto z = patches ? eng.concat_rows({cls, *patches}) : cls;  // [N+1, d]
    auto qkv = eng.add_row_broadcast(eng.matmul(z, eng.param(w.qkv_w)), eng.param(w.qkv_b));
    auto q_row = eng.slice_rows(qkv, 0, 1);

    std::vector<typename E::Value> head_outs, head_weights;
    head_outs.reserve(static_cast<std::size_t>(h));
    head_weights.reserve(static_cast<std::size_t>(h));
    for (std::int64_t head = 0; head < h; ++head) {
        auto q = eng.slice_cols(q_row, head * dh, (head + 1) * dh);  // [1, dh]
        auto k = eng.slice_cols(qkv, d + head * dh, d + (head + 1) * dh);
        auto v = eng.slice_cols(qkv, 2 * d + head * dh, 2 * d + (head + 1) * dh);
        auto probs = eng.softmax_last_axis(eng.scale(eng.matmul(q, eng.transpose(k)), scale));
        head_weights.push_back(probs);
        head_outs.push_back(eng.matmul(probs, v));  // [1, dh]
    }
    auto cat = h == 1 ? head_outs[0] : eng.concat_cols(head_outs);
    ClassAttnResult<E> out;
    out.y = eng.add_row_broadcast(eng.matmul(cat, eng.param(w.proj_w)), eng.param(w.proj_b));
    out.weights = h == 1 ? head_weights[0] : eng.concat_rows(head_weights);
    return out;
}

// ---------------------------------------------------------------------------
// Analytic multiply-accumulate counts. One MAC is one FLOP-unit throughout,
// matching the GFLOP convention of the usual model tables; normalizations,
// softmax and activations are not counted.
// ---------------------------------------------------------------------------

inline std::int64_t xca_flops(std::int64_t n, std::int64_t d, std::int64_t h) {
    detail::check_heads(d, h);
    const std::int64_t proj_qkv = n * d * 3 * d;
    const std::int64_t covariance = n * d * d / h;
    const std::int64_t mixing = n * d * d / h;
    const std::int64_t proj_out = n * d * d;
    return proj_qkv + covariance + mixing + proj_out;
}

inline std::int64_t token_attention_flops(std::int64_t n, std::int64_t d, std::int64_t h) {
    detail::check_heads(d, h);
    return n * d * 3 * d + 2 * n * n * d + n * d * d;
}

inline std::int64_t class_attention_flops(std::int64_t n_patches, std::int64_t d, std::int64_t h) {
    detail::check_heads(d, h);
    const std::int64_t rows = n_patches + 1;
    return rows * d * 3 * d + 2 * rows * d + d * d;
}

}  // namespace xcit
