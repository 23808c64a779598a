// Numerical primitives and their analytic adjoints. Everything is a pure
// function of its inputs; adjoints accumulate (+=) into caller-owned buffers
// so one backward pass can collect several contributions.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "xcit/tensor.hpp"

namespace xcit {

inline constexpr double kNormEps = 1e-12;  // divisor floor for l2 normalization
inline constexpr double kLnEps = 1e-6;     // variance stabilizer in layer/batch norm

namespace detail {

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul. nn is the public product; the nt/tn accumulating variants serve the
// adjoints dA = dC.B^T and dB = A^T.dC.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.rank() == 2 && b.rank() == 2 && a.cols() == b.rows(),
                    "matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::int64_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor<T> c({m, n});
    const T* pa = a.data();
    const T* pb = b.data();
    T* pc = c.data();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const T aik = pa[i * k + kk];
            const T* brow = pb + kk * n;
            T* crow = pc + i * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
    c.check_finite("matmul");
    return c;
}

// c += a . b^T   (a: m x k, b: n x k, c: m x n)
template <typename T>
void matmul_nt_acc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
    const std::int64_t m = a.rows(), k = a.cols(), n = b.rows();
    const T* pa = a.data();
    const T* pb = b.data();
    T* pc = c.data();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            const T* arow = pa + i * k;
            const T* brow = pb + j * k;
            T acc = T(0);
            for (std::int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            pc[i * n + j] += acc;
        }
    }
}

// c += a^T . b   (a: m x k, b: m x n, c: k x n)
template <typename T>
void matmul_tn_acc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
    const std::int64_t m = a.rows(), k = a.cols(), n = b.cols();
    const T* pa = a.data();
    const T* pb = b.data();
    T* pc = c.data();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const T aik = pa[i * k + kk];
            const T* brow = pb + i * n;
            T* crow = pc + kk * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

template <typename T>
void matmul_adjoint(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dc,
                    Tensor<T>& da, Tensor<T>& db) {
    matmul_nt_acc(dc, b, da);
    matmul_tn_acc(a, dc, db);
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    detail::require(a.rank() == 2, "transpose expects a matrix, got " + shape_str(a.shape()));
    Tensor<T> out({a.cols(), a.rows()});
    for (std::int64_t i = 0; i < a.rows(); ++i)
        for (std::int64_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.same_shape(b),
                    "add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = a;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += b[i];
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.same_shape(b),
                    "mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = a;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    Tensor<T> out = a;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
    return out;
}

// x: [m,n], v: [n] broadcast along rows
template <typename T>
Tensor<T> add_row_broadcast(const Tensor<T>& x, const Tensor<T>& v) {
    detail::require(x.rank() == 2 && v.numel() == x.cols(), "row broadcast width mismatch");
    Tensor<T> out = x;
    for (std::int64_t i = 0; i < x.rows(); ++i)
        for (std::int64_t j = 0; j < x.cols(); ++j) out.at(i, j) += v[j];
    return out;
}

template <typename T>
Tensor<T> mul_row_broadcast(const Tensor<T>& x, const Tensor<T>& v) {
    detail::require(x.rank() == 2 && v.numel() == x.cols(), "row broadcast width mismatch");
    Tensor<T> out = x;
    for (std::int64_t i = 0; i < x.rows(); ++i)
        for (std::int64_t j = 0; j < x.cols(); ++j) out.at(i, j) *= v[j];
    return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T acc = T(0);
    for (std::int64_t i = 0; i < a.numel(); ++i) acc += a[i];
    return Tensor<T>::scalar(acc);
}

// ---------------------------------------------------------------------------
// Softmax over the last axis, max-subtracted for stability. The unstable
// variant exists only so the invariant suite can demonstrate it fails.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_last_axis_impl(const Tensor<T>& x, bool subtract_max) {
    detail::require(x.rank() >= 1 && x.extent(x.rank() - 1) >= 1, "softmax needs a last axis");
    const std::int64_t n = x.extent(x.rank() - 1);
    const std::int64_t slices = x.numel() / n;
    Tensor<T> out = x;
    for (std::int64_t s = 0; s < slices; ++s) {
        T* row = out.data() + s * n;
        T mx = T(0);
        if (subtract_max) {
            mx = row[0];
            for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        }
        T denom = T(0);
        for (std::int64_t j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            denom += row[j];
        }
        for (std::int64_t j = 0; j < n; ++j) row[j] /= denom;
    }
    out.check_finite("softmax_last_axis");
    return out;
}

template <typename T>
Tensor<T> softmax_last_axis(const Tensor<T>& x) {
    return softmax_last_axis_impl(x, true);
}

// dx = p * (dy - sum(dy * p))  per slice, with p the forward output
template <typename T>
void softmax_last_axis_adjoint(const Tensor<T>& p, const Tensor<T>& dy, Tensor<T>& dx) {
    const std::int64_t n = p.extent(p.rank() - 1);
    const std::int64_t slices = p.numel() / n;
    for (std::int64_t s = 0; s < slices; ++s) {
        const T* pr = p.data() + s * n;
        const T* dyr = dy.data() + s * n;
        T* dxr = dx.data() + s * n;
        T dot = T(0);
        for (std::int64_t j = 0; j < n; ++j) dot += dyr[j] * pr[j];
        for (std::int64_t j = 0; j < n; ++j) dxr[j] += pr[j] * (dyr[j] - dot);
    }
}

// ---------------------------------------------------------------------------
// l2 normalization along an arbitrary axis. Slices with norm below kNormEps
// are divided by kNormEps instead, which keeps zero slices at zero.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename Fn>
void for_each_axis_slice(const Tensor<T>& x, int axis, Fn&& fn) {
    const std::int64_t n = x.extent(axis);
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.extent(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.extent(i);
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            fn(o * n * inner + in, inner, n);  // base offset, stride, count
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> l2_normalize_axis(const Tensor<T>& x, int axis) {
    detail::require(axis >= 0 && axis < x.rank(), "l2_normalize axis out of range");
    Tensor<T> out = x;
    detail::for_each_axis_slice(x, axis, [&](std::int64_t base, std::int64_t stride, std::int64_t n) {
        T sq = T(0);
        for (std::int64_t k = 0; k < n; ++k) {
            T v = x[base + k * stride];
            sq += v * v;
        }
        T norm = std::sqrt(sq);
        T denom = std::max(norm, static_cast<T>(kNormEps));
        for (std::int64_t k = 0; k < n; ++k) out[base + k * stride] = x[base + k * stride] / denom;
    });
    out.check_finite("l2_normalize_axis");
    return out;
}

template <typename T>
void l2_normalize_axis_adjoint(const Tensor<T>& x, int axis, const Tensor<T>& dy, Tensor<T>& dx) {
    detail::for_each_axis_slice(x, axis, [&](std::int64_t base, std::int64_t stride, std::int64_t n) {
        T sq = T(0);
        for (std::int64_t k = 0; k < n; ++k) {
            T v = x[base + k * stride];
            sq += v * v;
        }
        T norm = std::sqrt(sq);
        if (norm < static_cast<T>(kNormEps)) {
            for (std::int64_t k = 0; k < n; ++k)
                dx[base + k * stride] += dy[base + k * stride] / static_cast<T>(kNormEps);
            return;
        }
        // y = v/n;  dv = (dy - y (y.dy)) / n
        T dot = T(0);
        for (std::int64_t k = 0; k < n; ++k)
            dot += dy[base + k * stride] * x[base + k * stride] / norm;
        for (std::int64_t k = 0; k < n; ++k) {
            T y = x[base + k * stride] / norm;
            dx[base + k * stride] += (dy[base + k * stride] - y * dot) / norm;
        }
    });
}

// ---------------------------------------------------------------------------
// LayerNorm over the channel (last) axis
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
    const std::int64_t d = x.extent(x.rank() - 1);
    detail::require(gain.numel() == d && bias.numel() == d,
                    "layer_norm affine width mismatch with " + shape_str(x.shape()));
    const std::int64_t rows = x.numel() / d;
    Tensor<T> out = x;
    for (std::int64_t r = 0; r < rows; ++r) {
        T* row = out.data() + r * d;
        T mean = T(0);
        for (std::int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<T>(d);
        T var = T(0);
        for (std::int64_t j = 0; j < d; ++j) {
            T c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<T>(d);
        T istd = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
        for (std::int64_t j = 0; j < d; ++j) row[j] = gain[j] * ((row[j] - mean) * istd) + bias[j];
    }
    out.check_finite("layer_norm");
    return out;
}

template <typename T>
void layer_norm_adjoint(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& dy,
                        Tensor<T>& dx, Tensor<T>& dgain, Tensor<T>& dbias) {
    const std::int64_t d = x.extent(x.rank() - 1);
    const std::int64_t rows = x.numel() / d;
    std::vector<T> xhat(static_cast<std::size_t>(d));
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = x.data() + r * d;
        const T* dyr = dy.data() + r * d;
        T* dxr = dx.data() + r * d;
        T mean = T(0);
        for (std::int64_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<T>(d);
        T var = T(0);
        for (std::int64_t j = 0; j < d; ++j) {
            T c = xr[j] - mean;
            var += c * c;
        }
        var /= static_cast<T>(d);
        T istd = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
        T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
        for (std::int64_t j = 0; j < d; ++j) {
            xhat[static_cast<std::size_t>(j)] = (xr[j] - mean) * istd;
            T dxh = dyr[j] * gain[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[static_cast<std::size_t>(j)];
        }
        mean_dxhat /= static_cast<T>(d);
        mean_dxhat_xhat /= static_cast<T>(d);
        for (std::int64_t j = 0; j < d; ++j) {
            T dxh = dyr[j] * gain[j];
            dxr[j] += istd * (dxh - mean_dxhat - xhat[static_cast<std::size_t>(j)] * mean_dxhat_xhat);
            dgain[j] += dyr[j] * xhat[static_cast<std::size_t>(j)];
            dbias[j] += dyr[j];
        }
    }
}

// ---------------------------------------------------------------------------
// BatchNorm over [B,C,H,W]; population statistics in train mode, running
// stats (momentum update) for eval.
// ---------------------------------------------------------------------------

template <typename T>
struct BnStats {
    Tensor<T> running_mean;  // [C]
    Tensor<T> running_var;   // [C]
    T momentum = T(0.1);

    explicit BnStats(std::int64_t channels = 0, T mom = T(0.1)) : momentum(mom) {
        if (channels > 0) {
            running_mean = Tensor<T>({channels});
            running_var = Tensor<T>::full({channels}, T(1));
        }
    }
};

template <typename T>
Tensor<T> batch_norm_2d(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                        BnStats<T>& stats, bool training) {
    detail::require(x.rank() == 4, "batch_norm_2d expects [B,C,H,W], got " + shape_str(x.shape()));
    const std::int64_t b = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    detail::require(stats.running_mean.numel() == c, "batch_norm_2d channel mismatch");
    const std::int64_t plane = h * w;
    const std::int64_t m = b * plane;
    Tensor<T> out = x;
    for (std::int64_t ch = 0; ch < c; ++ch) {
        T mean, var;
        if (training) {
            mean = T(0);
            for (std::int64_t bi = 0; bi < b; ++bi) {
                const T* p = x.data() + (bi * c + ch) * plane;
                for (std::int64_t i = 0; i < plane; ++i) mean += p[i];
            }
            mean /= static_cast<T>(m);
            var = T(0);
            for (std::int64_t bi = 0; bi < b; ++bi) {
                const T* p = x.data() + (bi * c + ch) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    T d = p[i] - mean;
                    var += d * d;
                }
            }
            var /= static_cast<T>(m);
            stats.running_mean[ch] = (T(1) - stats.momentum) * stats.running_mean[ch] + stats.momentum * mean;
            stats.running_var[ch] = (T(1) - stats.momentum) * stats.running_var[ch] + stats.momentum * var;
        } else {
            mean = stats.running_mean[ch];
            var = stats.running_var[ch];
        }
        const T istd = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
        for (std::int64_t bi = 0; bi < b; ++bi) {
            T* p = out.data() + (bi * c + ch) * plane;
            for (std::int64_t i = 0; i < plane; ++i) p[i] = gain[ch] * ((p[i] - mean) * istd) + bias[ch];
        }
    }
    out.check_finite("batch_norm_2d");
    return out;
}

// Adjoint recomputes batch statistics from the captured input; `training`
// selects between the coupled batch-stat backward and the affine eval path.
template <typename T>
void batch_norm_2d_adjoint(const Tensor<T>& x, const Tensor<T>& gain, const BnStats<T>& stats,
                           bool training, const Tensor<T>& dy, Tensor<T>& dx, Tensor<T>& dgain,
                           Tensor<T>& dbias) {
    const std::int64_t b = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    const std::int64_t plane = h * w;
    const std::int64_t m = b * plane;
    for (std::int64_t ch = 0; ch < c; ++ch) {
        T mean = T(0), var = T(0);
        if (training) {
            for (std::int64_t bi = 0; bi < b; ++bi) {
                const T* p = x.data() + (bi * c + ch) * plane;
                for (std::int64_t i = 0; i < plane; ++i) mean += p[i];
            }
            mean /= static_cast<T>(m);
            for (std::int64_t bi = 0; bi < b; ++bi) {
                const T* p = x.data() + (bi * c + ch) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    T d = p[i] - mean;
                    var += d * d;
                }
            }
            var /= static_cast<T>(m);
        } else {
            mean = stats.running_mean[ch];
            var = stats.running_var[ch];
        }
        const T istd = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
        T sum_dy = T(0), sum_dy_xhat = T(0);
        for (std::int64_t bi = 0; bi < b; ++bi) {
            const T* px = x.data() + (bi * c + ch) * plane;
            const T* pdy = dy.data() + (bi * c + ch) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                sum_dy += pdy[i];
                sum_dy_xhat += pdy[i] * (px[i] - mean) * istd;
            }
        }
        dgain[ch] += sum_dy_xhat;
        dbias[ch] += sum_dy;
        for (std::int64_t bi = 0; bi < b; ++bi) {
            const T* px = x.data() + (bi * c + ch) * plane;
            const T* pdy = dy.data() + (bi * c + ch) * plane;
            T* pdx = dx.data() + (bi * c + ch) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                if (training) {
                    T xhat = (px[i] - mean) * istd;
                    pdx[i] += gain[ch] * istd *
                              (pdy[i] - sum_dy / static_cast<T>(m) - xhat * sum_dy_xhat / static_cast<T>(m));
                } else {
                    pdx[i] += gain[ch] * istd * pdy[i];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// GELU, exact form x * Phi(x)
// ---------------------------------------------------------------------------

template <typename T>
inline T gaussian_cdf(T x) {
    return T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475)));
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> out = x;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = x[i] * gaussian_cdf(x[i]);
    return out;
}

template <typename T>
void gelu_adjoint(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>& dx) {
    constexpr T inv_sqrt_2pi = T(0.3989422804014327);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x[i] * x[i]);
        dx[i] += dy[i] * (gaussian_cdf(x[i]) + x[i] * pdf);
    }
}

// ---------------------------------------------------------------------------
// Depthwise 3x3 convolution, zero padding of width 1, stride 1
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> depthwise_conv3x3(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    detail::require(x.rank() == 4, "depthwise_conv3x3 expects [B,C,H,W]");
    const std::int64_t nb = x.extent(0), c = x.extent(1), h = x.extent(2), wd = x.extent(3);
    detail::require(w.rank() == 3 && w.extent(0) == c && w.extent(1) == 3 && w.extent(2) == 3,
                    "depthwise kernel must be [C,3,3]");
    detail::require(b.numel() == c, "depthwise bias must be [C]");
    Tensor<T> out({nb, c, h, wd});
    for (std::int64_t bi = 0; bi < nb; ++bi) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const T* px = x.data() + (bi * c + ch) * h * wd;
            const T* pw = w.data() + ch * 9;
            T* po = out.data() + (bi * c + ch) * h * wd;
            for (std::int64_t y = 0; y < h; ++y) {
                for (std::int64_t xx = 0; xx < wd; ++xx) {
                    T acc = b[ch];
                    for (std::int64_t ky = 0; ky < 3; ++ky) {
                        const std::int64_t sy = y + ky - 1;
                        if (sy < 0 || sy >= h) continue;
                        for (std::int64_t kx = 0; kx < 3; ++kx) {
                            const std::int64_t sx = xx + kx - 1;
                            if (sx < 0 || sx >= wd) continue;
                            acc += pw[ky * 3 + kx] * px[sy * wd + sx];
                        }
                    }
                    po[y * wd + xx] = acc;
                }
            }
        }
    }
    out.check_finite("depthwise_conv3x3");
    return out;
}

template <typename T>
void depthwise_conv3x3_adjoint(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                               Tensor<T>& dx, Tensor<T>& dw, Tensor<T>& db) {
    const std::int64_t nb = x.extent(0), c = x.extent(1), h = x.extent(2), wd = x.extent(3);
    for (std::int64_t bi = 0; bi < nb; ++bi) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const T* px = x.data() + (bi * c + ch) * h * wd;
            const T* pw = w.data() + ch * 9;
            const T* pdy = dy.data() + (bi * c + ch) * h * wd;
            T* pdx = dx.data() + (bi * c + ch) * h * wd;
            T* pdw = dw.data() + ch * 9;
            for (std::int64_t y = 0; y < h; ++y) {
                for (std::int64_t xx = 0; xx < wd; ++xx) {
                    const T g = pdy[y * wd + xx];
                    db[ch] += g;
                    for (std::int64_t ky = 0; ky < 3; ++ky) {
                        const std::int64_t sy = y + ky - 1;
                        if (sy < 0 || sy >= h) continue;
                        for (std::int64_t kx = 0; kx < 3; ++kx) {
                            const std::int64_t sx = xx + kx - 1;
                            if (sx < 0 || sx >= wd) continue;
                            pdw[ky * 3 + kx] += g * px[sy * wd + sx];
                            pdx[sy * wd + sx] += g * pw[ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dense 3x3 stride-2 convolution, zero padding 1 (the patch-embedding stem)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv3x3_stride2(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    detail::require(x.rank() == 4, "conv3x3_stride2 expects [B,Cin,H,W]");
    const std::int64_t nb = x.extent(0), cin = x.extent(1), h = x.extent(2), wd = x.extent(3);
    detail::require(w.rank() == 4 && w.extent(1) == cin && w.extent(2) == 3 && w.extent(3) == 3,
                    "conv kernel must be [Cout,Cin,3,3]");
    const std::int64_t cout = w.extent(0);
    const std::int64_t oh = h / 2, ow = wd / 2;
    detail::require(h % 2 == 0 && wd % 2 == 0, "conv3x3_stride2 expects even spatial extents");
    Tensor<T> out({nb, cout, oh, ow});
    for (std::int64_t bi = 0; bi < nb; ++bi) {
        for (std::int64_t co = 0; co < cout; ++co) {
            T* po = out.data() + (bi * cout + co) * oh * ow;
            for (std::int64_t oy = 0; oy < oh; ++oy) {
                for (std::int64_t ox = 0; ox < ow; ++ox) {
                    T acc = b[co];
                    for (std::int64_t ci = 0; ci < cin; ++ci) {
                        const T* px = x.data() + (bi * cin + ci) * h * wd;
                        const T* pw = w.data() + ((co * cin + ci) * 9);
                        for (std::int64_t ky = 0; ky < 3; ++ky) {
                            const std::int64_t sy = 2 * oy + ky - 1;
                            if (sy < 0 || sy >= h) continue;
                            for (std::int64_t kx = 0; kx < 3; ++kx) {
                                const std::int64_t sx = 2 * ox + kx - 1;
                                if (sx < 0 || sx >= wd) continue;
                                acc += pw[ky * 3 + kx] * px[sy * wd + sx];
                            }
                        }
                    }
                    po[oy * ow + ox] = acc;
                }
            }
        }
    }
    out.check_finite("conv3x3_stride2");
    return out;
}

template <typename T>
void conv3x3_stride2_adjoint(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                             Tensor<T>& dx, Tensor<T>& dw, Tensor<T>& db) {
    const std::int64_t nb = x.extent(0), cin = x.extent(1), h = x.extent(2), wd = x.extent(3);
    const std::int64_t cout = w.extent(0);
    const std::int64_t oh = h / 2, ow = wd / 2;
    for (std::int64_t bi = 0; bi < nb; ++bi) {
        for (std::int64_t co = 0; co < cout; ++co) {
            const T* pdy = dy.data() + (bi * cout + co) * oh * ow;
            for (std::int64_t oy = 0; oy < oh; ++oy) {
                for (std::int64_t ox = 0; ox < ow; ++ox) {
                    const T g = pdy[oy * ow + ox];
                    db[co] += g;
                    for (std::int64_t ci = 0; ci < cin; ++ci) {
                        const T* px = x.data() + (bi * cin + ci) * h * wd;
                        T* pdx = dx.data() + (bi * cin + ci) * h * wd;
                        const T* pw = w.data() + ((co * cin + ci) * 9);
                        T* pdw = dw.data() + ((co * cin + ci) * 9);
                        for (std::int64_t ky = 0; ky < 3; ++ky) {
                            const std::int64_t sy = 2 * oy + ky - 1;
                            if (sy < 0 || sy >= h) continue;
                            for (std::int64_t kx = 0; kx < 3; ++kx) {
                                const std::int64_t sx = 2 * ox + kx - 1;
                                if (sx < 0 || sx >= wd) continue;
                                pdw[ky * 3 + kx] += g * px[sy * wd + sx];
                                pdx[sy * wd + sx] += g * pw[ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Non-overlapping patch extraction: [C,H,W] -> [N, C*p*p], N = (H/p)(W/p)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> extract_patches(const Tensor<T>& x, std::int64_t p) {
    detail::require(x.rank() == 3, "extract_patches expects [C,H,W]");
    const std::int64_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
    detail::require(h % p == 0 && w % p == 0,
                    "image " + shape_str(x.shape()) + " not divisible by patch " + std::to_string(p));
    const std::int64_t gh = h / p, gw = w / p;
    Tensor<T> out({gh * gw, c * p * p});
    for (std::int64_t gy = 0; gy < gh; ++gy)
        for (std::int64_t gx = 0; gx < gw; ++gx) {
            T* row = out.data() + (gy * gw + gx) * c * p * p;
            for (std::int64_t ch = 0; ch < c; ++ch)
                for (std::int64_t py = 0; py < p; ++py)
                    for (std::int64_t px = 0; px < p; ++px)
                        row[(ch * p + py) * p + px] = x[(ch * h + gy * p + py) * w + gx * p + px];
        }
    return out;
}

template <typename T>
void extract_patches_adjoint(const Shape& xshape, std::int64_t p, const Tensor<T>& dy, Tensor<T>& dx) {
    const std::int64_t c = xshape[0], h = xshape[1], w = xshape[2];
    const std::int64_t gh = h / p, gw = w / p;
    for (std::int64_t gy = 0; gy < gh; ++gy)
        for (std::int64_t gx = 0; gx < gw; ++gx) {
            const T* row = dy.data() + (gy * gw + gx) * c * p * p;
            for (std::int64_t ch = 0; ch < c; ++ch)
                for (std::int64_t py = 0; py < p; ++py)
                    for (std::int64_t px = 0; px < p; ++px)
                        dx[(ch * h + gy * p + py) * w + gx * p + px] += row[(ch * p + py) * p + px];
        }
}

// ---------------------------------------------------------------------------
// Concatenation / slicing on matrices
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_rows(const std::vector<const Tensor<T>*>& parts) {
    detail::require(!parts.empty(), "concat_rows of nothing");
    const std::int64_t cols = parts[0]->cols();
    std::int64_t rows = 0;
    for (const auto* p : parts) {
        detail::require(p->rank() == 2 && p->cols() == cols, "concat_rows column mismatch");
        rows += p->rows();
    }
    Tensor<T> out({rows, cols});
    std::int64_t r = 0;
    for (const auto* p : parts) {
        std::copy(p->data(), p->data() + p->numel(), out.data() + r * cols);
        r += p->rows();
    }
    return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<const Tensor<T>*>& parts) {
    detail::require(!parts.empty(), "concat_cols of nothing");
    const std::int64_t rows = parts[0]->rows();
    std::int64_t cols = 0;
    for (const auto* p : parts) {
        detail::require(p->rank() == 2 && p->rows() == rows, "concat_cols row mismatch");
        cols += p->cols();
    }
    Tensor<T> out({rows, cols});
    for (std::int64_t i = 0; i < rows; ++i) {
        std::int64_t c = 0;
        for (const auto* p : parts) {
            std::copy(p->data() + i * p->cols(), p->data() + (i + 1) * p->cols(),
                      out.data() + i * cols + c);
            c += p->cols();
        }
    }
    return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::int64_t r0, std::int64_t r1) {
    detail::require(a.rank() == 2 && 0 <= r0 && r0 < r1 && r1 <= a.rows(), "slice_rows out of range");
    Tensor<T> out({r1 - r0, a.cols()});
    std::copy(a.data() + r0 * a.cols(), a.data() + r1 * a.cols(), out.data());
    return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::int64_t c0, std::int64_t c1) {
    detail::require(a.rank() == 2 && 0 <= c0 && c0 < c1 && c1 <= a.cols(), "slice_cols out of range");
    Tensor<T> out({a.rows(), c1 - c0});
    for (std::int64_t i = 0; i < a.rows(); ++i)
        std::copy(a.data() + i * a.cols() + c0, a.data() + i * a.cols() + c1,
                  out.data() + i * (c1 - c0));
    return out;
}

template <typename T>
Tensor<T> slice_flat(const Tensor<T>& a, std::int64_t i0, std::int64_t i1) {
    detail::require(0 <= i0 && i0 < i1 && i1 <= a.numel(), "slice_flat out of range");
    Tensor<T> out({i1 - i0});
    std::copy(a.data() + i0, a.data() + i1, out.data());
    return out;
}

// ---------------------------------------------------------------------------
// Cross entropy over logits, mean across rows
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    detail::require(logits.rank() == 2 && logits.rows() == static_cast<std::int64_t>(labels.size()),
                    "cross_entropy label count mismatch");
    const std::int64_t b = logits.rows(), c = logits.cols();
    T loss = T(0);
    for (std::int64_t i = 0; i < b; ++i) {
        const T* row = logits.data() + i * c;
        T mx = row[0];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        T denom = T(0);
        for (std::int64_t j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
        loss += std::log(denom) + mx - row[labels[static_cast<std::size_t>(i)]];
    }
    return Tensor<T>::scalar(loss / static_cast<T>(b));
}

template <typename T>
void cross_entropy_adjoint(const Tensor<T>& logits, const std::vector<int>& labels, T dloss,
                           Tensor<T>& dlogits) {
    const std::int64_t b = logits.rows(), c = logits.cols();
    for (std::int64_t i = 0; i < b; ++i) {
        const T* row = logits.data() + i * c;
        T* drow = dlogits.data() + i * c;
        T mx = row[0];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        T denom = T(0);
        for (std::int64_t j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
        for (std::int64_t j = 0; j < c; ++j) {
            T p = std::exp(row[j] - mx) / denom;
            T onehot = (j == labels[static_cast<std::size_t>(i)]) ? T(1) : T(0);
            drow[j] += dloss * (p - onehot) / static_cast<T>(b);
        }
    }
}

}  // namespace xcit
