// Test-side reference implementations: straight scalar loops over flat
// arrays, written independently of the engine/kernel code they check. The
// XCA oracle also counts multiply-accumulates so the analytic FLOP formulas
// can be cross-checked against an instrumented run.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "xcit/attention.hpp"
#include "xcit/tensor.hpp"

namespace oracle {

using xcit::Tensor;

inline std::vector<double> stable_softmax_row(const std::vector<double>& row) {
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    std::vector<double> out(row.size());
    double denom = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) {
        out[i] = std::exp(row[i] - mx);
        denom += out[i];
    }
    for (double& v : out) v /= denom;
    return out;
}

struct XcaOracleOut {
    Tensor<double> y;     // [N, d]
    Tensor<double> cov;   // [h, dh, dh] before temperature
    Tensor<double> maps;  // [h, dh, dh] after softmax
    long long macs = 0;   // multiplies in the four matmul stages
};

inline XcaOracleOut xca_oracle(const Tensor<double>& x, const xcit::XcaWeights<double>& w) {
    const std::int64_t n = x.rows(), d = w.dim, h = w.heads, dh = d / h;
    XcaOracleOut out;
    out.y = Tensor<double>({n, d});
    out.cov = Tensor<double>({h, dh, dh});
    out.maps = Tensor<double>({h, dh, dh});

    // fused projection
    std::vector<double> qkv(static_cast<std::size_t>(n * 3 * d));
    for (std::int64_t t = 0; t < n; ++t)
        for (std::int64_t j = 0; j < 3 * d; ++j) {
            double acc = w.qkv_b.value[j];
            for (std::int64_t c = 0; c < d; ++c) {
                acc += x.at(t, c) * w.qkv_w.value[c * 3 * d + j];
                ++out.macs;
            }
            qkv[static_cast<std::size_t>(t * 3 * d + j)] = acc;
        }

    std::vector<double> concat(static_cast<std::size_t>(n * d));
    for (std::int64_t head = 0; head < h; ++head) {
        auto qat = [&](std::int64_t t, std::int64_t c) {
            return qkv[static_cast<std::size_t>(t * 3 * d + head * dh + c)];
        };
        auto kat = [&](std::int64_t t, std::int64_t c) {
            return qkv[static_cast<std::size_t>(t * 3 * d + d + head * dh + c)];
        };
        auto vat = [&](std::int64_t t, std::int64_t c) {
            return qkv[static_cast<std::size_t>(t * 3 * d + 2 * d + head * dh + c)];
        };

        // euclidean norm of each channel column across tokens
        std::vector<double> qden(static_cast<std::size_t>(dh)), kden(static_cast<std::size_t>(dh));
        for (std::int64_t c = 0; c < dh; ++c) {
            double sq = 0, sk = 0;
            for (std::int64_t t = 0; t < n; ++t) {
                sq += qat(t, c) * qat(t, c);
                sk += kat(t, c) * kat(t, c);
            }
            qden[static_cast<std::size_t>(c)] = std::max(std::sqrt(sq), 1e-12);
            kden[static_cast<std::size_t>(c)] = std::max(std::sqrt(sk), 1e-12);
        }

        for (std::int64_t i = 0; i < dh; ++i) {
            std::vector<double> row(static_cast<std::size_t>(dh));
            for (std::int64_t j = 0; j < dh; ++j) {
                double acc = 0;
                for (std::int64_t t = 0; t < n; ++t) {
                    acc += (kat(t, i) / kden[static_cast<std::size_t>(i)]) *
                           (qat(t, j) / qden[static_cast<std::size_t>(j)]);
                    ++out.macs;
                }
                out.cov[(head * dh + i) * dh + j] = acc;
                row[static_cast<std::size_t>(j)] = acc * w.temp.value[head];
            }
            std::vector<double> sm = stable_softmax_row(row);
            for (std::int64_t j = 0; j < dh; ++j)
                out.maps[(head * dh + i) * dh + j] = sm[static_cast<std::size_t>(j)];
        }

        for (std::int64_t t = 0; t < n; ++t)
            for (std::int64_t i = 0; i < dh; ++i) {
                double acc = 0;
                for (std::int64_t j = 0; j < dh; ++j) {
                    acc += out.maps[(head * dh + i) * dh + j] * vat(t, j);
                    ++out.macs;
                }
                concat[static_cast<std::size_t>(t * d + head * dh + i)] = acc;
            }
    }

    for (std::int64_t t = 0; t < n; ++t)
        for (std::int64_t j = 0; j < d; ++j) {
            double acc = w.proj_b.value[j];
            for (std::int64_t c = 0; c < d; ++c) {
                acc += concat[static_cast<std::size_t>(t * d + c)] * w.proj_w.value[c * d + j];
                ++out.macs;
            }
            out.y.at(t, j) = acc;
        }
    return out;
}

inline Tensor<double> token_attn_oracle(const Tensor<double>& x,
                                        const xcit::TokenAttnWeights<double>& w) {
    const std::int64_t n = x.rows(), d = w.dim, h = w.heads, dh = d / h;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<double> qkv(static_cast<std::size_t>(n * 3 * d));
    for (std::int64_t t = 0; t < n; ++t)
        for (std::int64_t j = 0; j < 3 * d; ++j) {
            double acc = w.qkv_b.value[j];
            for (std::int64_t c = 0; c < d; ++c) acc += x.at(t, c) * w.qkv_w.value[c * 3 * d + j];
            qkv[static_cast<std::size_t>(t * 3 * d + j)] = acc;
        }

    std::vector<double> concat(static_cast<std::size_t>(n * d));
    for (std::int64_t head = 0; head < h; ++head) {
        for (std::int64_t a = 0; a < n; ++a) {
            std::vector<double> row(static_cast<std::size_t>(n));
            for (std::int64_t b = 0; b < n; ++b) {
                double acc = 0;
                for (std::int64_t c = 0; c < dh; ++c)
                    acc += qkv[static_cast<std::size_t>(a * 3 * d + head * dh + c)] *
                           qkv[static_cast<std::size_t>(b * 3 * d + d + head * dh + c)];
                row[static_cast<std::size_t>(b)] = acc * scale;
            }
            std::vector<double> sm = stable_softmax_row(row);
            for (std::int64_t c = 0; c < dh; ++c) {
                double acc = 0;
                for (std::int64_t b = 0; b < n; ++b)
                    acc += sm[static_cast<std::size_t>(b)] *
                           qkv[static_cast<std::size_t>(b * 3 * d + 2 * d + head * dh + c)];
                concat[static_cast<std::size_t>(a * d + head * dh + c)] = acc;
            }
        }
    }

    Tensor<double> y({n, d});
    for (std::int64_t t = 0; t < n; ++t)
        for (std::int64_t j = 0; j < d; ++j) {
            double acc = w.proj_b.value[j];
            for (std::int64_t c = 0; c < d; ++c)
                acc += concat[static_cast<std::size_t>(t * d + c)] * w.proj_w.value[c * d + j];
            y.at(t, j) = acc;
        }
    return y;
}

// keys/values over [cls; patches], query from cls only
inline Tensor<double> class_attn_oracle(const Tensor<double>& cls, const Tensor<double>* patches,
                                        const xcit::TokenAttnWeights<double>& w) {
    const std::int64_t np = patches ? patches->rows() : 0;
    const std::int64_t n = np + 1, d = w.dim, h = w.heads, dh = d / h;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    auto zat = [&](std::int64_t t, std::int64_t c) {
        return t == 0 ? cls.at(0, c) : patches->at(t - 1, c);
    };
    std::vector<double> qkv(static_cast<std::size_t>(n * 3 * d));
    for (std::int64_t t = 0; t < n; ++t)
        for (std::int64_t j = 0; j < 3 * d; ++j) {
            double acc = w.qkv_b.value[j];
            for (std::int64_t c = 0; c < d; ++c) acc += zat(t, c) * w.qkv_w.value[c * 3 * d + j];
            qkv[static_cast<std::size_t>(t * 3 * d + j)] = acc;
        }

    std::vector<double> concat(static_cast<std::size_t>(d));
    for (std::int64_t head = 0; head < h; ++head) {
        std::vector<double> row(static_cast<std::size_t>(n));
        for (std::int64_t b = 0; b < n; ++b) {
            double acc = 0;
            for (std::int64_t c = 0; c < dh; ++c)
                acc += qkv[static_cast<std::size_t>(head * dh + c)] *
                       qkv[static_cast<std::size_t>(b * 3 * d + d + head * dh + c)];
            row[static_cast<std::size_t>(b)] = acc * scale;
        }
        std::vector<double> sm = stable_softmax_row(row);
        for (std::int64_t c = 0; c < dh; ++c) {
            double acc = 0;
            for (std::int64_t b = 0; b < n; ++b)
                acc += sm[static_cast<std::size_t>(b)] *
                       qkv[static_cast<std::size_t>(b * 3 * d + 2 * d + head * dh + c)];
            concat[static_cast<std::size_t>(head * dh + c)] = acc;
        }
    }

    Tensor<double> y({1, d});
    for (std::int64_t j = 0; j < d; ++j) {
        double acc = w.proj_b.value[j];
        for (std::int64_t c = 0; c < d; ++c) acc += concat[static_cast<std::size_t>(c)] * w.proj_w.value[c * d + j];
        y.at(0, j) = acc;
    }
    return y;
}

inline Tensor<double> layer_norm_oracle(const Tensor<double>& x, const Tensor<double>& gain,
                                        const Tensor<double>& bias) {
    const std::int64_t rows = x.rows(), d = x.cols();
    Tensor<double> y({rows, d});
    for (std::int64_t r = 0; r < rows; ++r) {
        double mean = 0;
        for (std::int64_t c = 0; c < d; ++c) mean += x.at(r, c);
        mean /= static_cast<double>(d);
        double var = 0;
        for (std::int64_t c = 0; c < d; ++c) var += (x.at(r, c) - mean) * (x.at(r, c) - mean);
        var /= static_cast<double>(d);
        for (std::int64_t c = 0; c < d; ++c)
            y.at(r, c) = gain[c] * (x.at(r, c) - mean) / std::sqrt(var + 1e-6) + bias[c];
    }
    return y;
}

inline double gelu_scalar(double v) { return v * 0.5 * (1.0 + std::erf(v / std::sqrt(2.0))); }

inline Tensor<double> ffn_oracle(const Tensor<double>& x, const Tensor<double>& w1,
                                 const Tensor<double>& b1, const Tensor<double>& w2,
                                 const Tensor<double>& b2) {
    const std::int64_t n = x.rows(), d = x.cols(), hid = w1.cols();
    Tensor<double> y({n, d});
    for (std::int64_t t = 0; t < n; ++t) {
        std::vector<double> h(static_cast<std::size_t>(hid));
        for (std::int64_t j = 0; j < hid; ++j) {
            double acc = b1[j];
            for (std::int64_t c = 0; c < d; ++c) acc += x.at(t, c) * w1.at(c, j);
            h[static_cast<std::size_t>(j)] = gelu_scalar(acc);
        }
        for (std::int64_t j = 0; j < d; ++j) {
            double acc = b2[j];
            for (std::int64_t c = 0; c < hid; ++c) acc += h[static_cast<std::size_t>(c)] * w2.at(c, j);
            y.at(t, j) = acc;
        }
    }
    return y;
}

// conv -> batchnorm(eval running stats) -> gelu -> conv on an Hp x Wp token grid
inline Tensor<double> lpi_eval_oracle(const Tensor<double>& x, std::int64_t hp, std::int64_t wp,
                                      const Tensor<double>& w1, const Tensor<double>& b1,
                                      const Tensor<double>& bn_gain, const Tensor<double>& bn_bias,
                                      const Tensor<double>& bn_mean, const Tensor<double>& bn_var,
                                      const Tensor<double>& w2, const Tensor<double>& b2) {
    const std::int64_t n = x.rows(), d = x.cols();
    auto conv = [&](const std::vector<double>& img, const Tensor<double>& w, const Tensor<double>& b) {
        std::vector<double> out(static_cast<std::size_t>(d * hp * wp));
        for (std::int64_t c = 0; c < d; ++c)
            for (std::int64_t y = 0; y < hp; ++y)
                for (std::int64_t xx = 0; xx < wp; ++xx) {
                    double acc = b[c];
                    for (std::int64_t ky = 0; ky < 3; ++ky)
                        for (std::int64_t kx = 0; kx < 3; ++kx) {
                            std::int64_t sy = y + ky - 1, sx = xx + kx - 1;
                            if (sy < 0 || sy >= hp || sx < 0 || sx >= wp) continue;
                            acc += w[(c * 3 + ky) * 3 + kx] *
                                   img[static_cast<std::size_t>((c * hp + sy) * wp + sx)];
                        }
                    out[static_cast<std::size_t>((c * hp + y) * wp + xx)] = acc;
                }
        return out;
    };

    std::vector<double> img(static_cast<std::size_t>(d * hp * wp));
    for (std::int64_t t = 0; t < n; ++t)
        for (std::int64_t c = 0; c < d; ++c)
            img[static_cast<std::size_t>(c * hp * wp + t)] = x.at(t, c);

    std::vector<double> h1 = conv(img, w1, b1);
    for (std::int64_t c = 0; c < d; ++c)
        for (std::int64_t i = 0; i < hp * wp; ++i) {
            double v = h1[static_cast<std::size_t>(c * hp * wp + i)];
            v = bn_gain[c] * (v - bn_mean[c]) / std::sqrt(bn_var[c] + 1e-6) + bn_bias[c];
            h1[static_cast<std::size_t>(c * hp * wp + i)] = gelu_scalar(v);
        }
    std::vector<double> h2 = conv(h1, w2, b2);

    Tensor<double> y({n, d});
    for (std::int64_t t = 0; t < n; ++t)
        for (std::int64_t c = 0; c < d; ++c) y.at(t, c) = h2[static_cast<std::size_t>(c * hp * wp + t)];
    return y;
}

}  // namespace oracle
