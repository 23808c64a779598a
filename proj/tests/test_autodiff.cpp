#include <gtest/gtest.h>

#include <cmath>

#include "xcit/autodiff.hpp"
#include "xcit/tensor.hpp"

using xcit::Param;
using xcit::Tensor;

namespace {

Param<double> random_param(xcit::Shape shape, xcit::Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    xcit::fill_uniform(t, rng, lo, hi);
    return Param<double>(std::move(t));
}

TEST(Gradcheck, QuadraticIsExact) {
    xcit::Rng rng(1);
    Param<double> x = random_param({3, 4}, rng);
    auto f = [&](auto& eng) {
        auto v = eng.param(x);
        return eng.sum_all(eng.mul(v, v));
    };
    auto rep = xcit::gradcheck({&x}, f);
    EXPECT_LT(rep.max_rel_err, 1e-8);
    // analytic gradient of sum(x^2) is 2x
    for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(x.grad[i], 2.0 * x.value[i], 1e-12);
}

TEST(Gradcheck, MatmulChain) {
    xcit::Rng rng(2);
    Param<double> a = random_param({3, 4}, rng);
    Param<double> b = random_param({4, 2}, rng);
    auto f = [&](auto& eng) {
        auto c = eng.matmul(eng.param(a), eng.param(b));
        return eng.sum_all(eng.mul(c, c));
    };
    EXPECT_LT(xcit::gradcheck({&a, &b}, f).max_rel_err, 1e-7);
}

TEST(Gradcheck, TransposeReshapeSliceConcat) {
    xcit::Rng rng(3);
    Param<double> a = random_param({4, 6}, rng);
    auto f = [&](auto& eng) {
        auto v = eng.param(a);
        auto t = eng.transpose(v);  // [6,4]
        auto r = eng.reshape(t, {4, 6});
        auto s1 = eng.slice_cols(r, 0, 3);       // [4,3]
        auto s2 = eng.slice_rows(r, 1, 3);       // [2,6]
        auto cat = eng.concat_rows({s1, eng.slice_cols(s2, 0, 3)});  // [6,3]
        auto flat = eng.slice_flat(cat, 2, 14);
        return eng.sum_all(eng.mul(flat, flat));
    };
    EXPECT_LT(xcit::gradcheck({&a}, f).max_rel_err, 1e-7);
}

TEST(Gradcheck, SoftmaxAndNormalize) {
    xcit::Rng rng(4);
    Param<double> a = random_param({5, 3}, rng, -2.0, 2.0);
    Tensor<double> mix({5, 3});
    xcit::fill_uniform(mix, rng, -1.0, 1.0);
    auto f = [&](auto& eng) {
        auto v = eng.param(a);
        auto s = eng.softmax_last_axis(v);
        auto n0 = eng.l2_normalize_axis(eng.add(s, v), 0);
        auto n1 = eng.l2_normalize_axis(n0, 1);
        auto w = eng.mul(n1, eng.constant(mix));
        return eng.sum_all(eng.mul(w, w));
    };
    EXPECT_LT(xcit::gradcheck({&a}, f).max_rel_err, 1e-4);
}

TEST(Gradcheck, SoftmaxSaturation) {
    // +-30 logits drive softmax into its flat region; the check tolerance
    // widens accordingly.
    Param<double> a(Tensor<double>({2, 3}, {30.0, -30.0, 0.5, -30.0, 30.0, 0.25}));
    auto f = [&](auto& eng) {
        auto s = eng.softmax_last_axis(eng.param(a));
        return eng.sum_all(eng.mul(s, eng.constant(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}))));
    };
    EXPECT_LT(xcit::gradcheck({&a}, f).max_rel_err, 1e-3);
}

TEST(Gradcheck, LayerNormGainBias) {
    xcit::Rng rng(5);
    Param<double> x = random_param({4, 6}, rng);
    Param<double> g = random_param({6}, rng, 0.5, 1.5);
    Param<double> b = random_param({6}, rng);
    auto f = [&](auto& eng) {
        auto y = eng.layer_norm(eng.param(x), eng.param(g), eng.param(b));
        return eng.sum_all(eng.mul(y, y));
    };
    EXPECT_LT(xcit::gradcheck({&x, &g, &b}, f).max_rel_err, 1e-6);
}

TEST(Gradcheck, BatchNormEvalAndTrain) {
    xcit::Rng rng(6);
    Param<double> x = random_param({2, 3, 2, 2}, rng);
    Param<double> g = random_param({3}, rng, 0.5, 1.5);
    Param<double> b = random_param({3}, rng);
    // random mixing weights keep the loss sensitive to x (a plain sum of
    // squares of a train-normalized batch is constant by construction)
    Tensor<double> mix({2, 3, 2, 2});
    xcit::fill_uniform(mix, rng, -1.0, 1.0);
    xcit::BnStats<double> stats(3);
    xcit::fill_uniform(stats.running_mean, rng, -0.5, 0.5);
    xcit::fill_uniform(stats.running_var, rng, 0.5, 2.0);
    const Tensor<double> rm = stats.running_mean, rv = stats.running_var;

    auto eval_f = [&](auto& eng) {
        auto y = eng.batch_norm_2d(eng.param(x), eng.param(g), eng.param(b), stats);
        return eng.sum_all(eng.mul(y, y));
    };
    EXPECT_LT(xcit::gradcheck({&x, &g, &b}, eval_f).max_rel_err, 1e-6);

    // Train mode mutates running stats per evaluation; restore around each
    // probe so finite differences see a pure function.
    x.zero_grad();
    g.zero_grad();
    b.zero_grad();
    {
        stats.running_mean = rm;
        stats.running_var = rv;
        xcit::GradEngine<double> eng(xcit::RunMode::kTrain);
        auto y = eng.batch_norm_2d(eng.param(x), eng.param(g), eng.param(b), stats);
        auto w = eng.mul(y, eng.constant(mix));
        eng.backward(eng.sum_all(eng.mul(w, w)));
    }
    const double h = 1e-5;
    double max_rel = 0.0;
    for (Param<double>* p : {&x, &g, &b}) {
        for (std::int64_t i = 0; i < p->numel(); ++i) {
            auto probe = [&](double delta) {
                const double saved = p->value[i];
                p->value[i] = saved + delta;
                stats.running_mean = rm;
                stats.running_var = rv;
                xcit::EvalEngine<double> eng(xcit::RunMode::kTrain);
                auto y = eng.batch_norm_2d(eng.param(x), eng.param(g), eng.param(b), stats);
                auto w = eng.mul(y, eng.constant(mix));
                double out = eng.value(eng.sum_all(eng.mul(w, w)))[0];
                p->value[i] = saved;
                return out;
            };
            const double numeric = (probe(h) - probe(-h)) / (2 * h);
            const double denom = std::max({std::abs(numeric), std::abs(p->grad[i]), 1e-6});
            max_rel = std::max(max_rel, std::abs(numeric - p->grad[i]) / denom);
        }
    }
    EXPECT_LT(max_rel, 1e-4);
}

TEST(Gradcheck, GeluConvPatches) {
    xcit::Rng rng(7);
    Param<double> x = random_param({1, 2, 4, 4}, rng);
    Param<double> dw = random_param({2, 3, 3}, rng);
    Param<double> dbias = random_param({2}, rng);
    Param<double> sw = random_param({3, 2, 3, 3}, rng);
    Param<double> sb = random_param({3}, rng);
    auto f = [&](auto& eng) {
        auto h1 = eng.gelu(eng.depthwise_conv3x3(eng.param(x), eng.param(dw), eng.param(dbias)));
        auto h2 = eng.conv3x3_stride2(h1, eng.param(sw), eng.param(sb));  // [1,3,2,2]
        auto flat = eng.reshape(h2, {3, 4});
        auto patches = eng.extract_patches(eng.reshape(eng.param(x), {2, 4, 4}), 2);
        auto joined = eng.concat_cols({eng.transpose(flat), patches});  // [4, 3+8]
        return eng.sum_all(eng.mul(joined, joined));
    };
    EXPECT_LT(xcit::gradcheck({&x, &dw, &dbias, &sw, &sb}, f).max_rel_err, 1e-6);
}

TEST(Gradcheck, BroadcastAndScalarOps) {
    xcit::Rng rng(8);
    Param<double> x = random_param({3, 4}, rng);
    Param<double> gain = random_param({4}, rng, 0.5, 1.5);
    Param<double> bias = random_param({4}, rng);
    Param<double> tau = random_param({2}, rng, 0.5, 2.0);
    auto f = [&](auto& eng) {
        auto y = eng.add_row_broadcast(eng.mul_row_broadcast(eng.param(x), eng.param(gain)),
                                       eng.param(bias));
        auto t0 = eng.slice_flat(eng.param(tau), 0, 1);
        auto scaled = eng.mul_scalar(y, t0);
        return eng.sum_all(eng.mul(scaled, eng.scale(scaled, 0.5)));
    };
    EXPECT_LT(xcit::gradcheck({&x, &gain, &bias, &tau}, f).max_rel_err, 1e-7);
}

TEST(Gradcheck, CrossEntropy) {
    xcit::Rng rng(9);
    Param<double> logits = random_param({4, 3}, rng, -2.0, 2.0);
    std::vector<int> labels = {0, 2, 1, 2};
    auto f = [&](auto& eng) { return eng.cross_entropy(eng.param(logits), labels); };
    EXPECT_LT(xcit::gradcheck({&logits}, f).max_rel_err, 1e-7);
}

TEST(Tape, GradsAccumulateAcrossBackwardPasses) {
    Param<double> x(Tensor<double>({2}, {1.0, 2.0}));
    for (int pass = 0; pass < 2; ++pass) {
        xcit::GradEngine<double> eng;
        auto v = eng.param(x);
        eng.backward(eng.sum_all(eng.mul(v, v)));
    }
    EXPECT_NEAR(x.grad[0], 2.0 * 2.0 * 1.0, 1e-12);  // two passes, each adds 2x
    EXPECT_NEAR(x.grad[1], 2.0 * 2.0 * 2.0, 1e-12);
    x.zero_grad();
    EXPECT_DOUBLE_EQ(x.grad[0], 0.0);
}

TEST(Tape, ParamUsedTwiceGetsBothContributions) {
    Param<double> x(Tensor<double>({2, 2}, {1.0, 0.5, -0.5, 2.0}));
    xcit::GradEngine<double> eng;
    auto v = eng.param(x);
    auto w = eng.param(x);  // same leaf
    eng.backward(eng.sum_all(eng.matmul(v, w)));
    // d/dx sum(x.x) has both left and right contributions
    Param<double> ref(x.value);
    auto f = [&](auto& e) {
        auto a = e.param(ref);
        return e.sum_all(e.matmul(a, a));
    };
    EXPECT_LT(xcit::gradcheck({&ref}, f).max_rel_err, 1e-7);
    for (std::int64_t i = 0; i < 4; ++i) EXPECT_NEAR(x.grad[i], ref.grad[i], 1e-10);
}

TEST(Engines, EvalMatchesGradForward) {
    xcit::Rng rng(10);
    Param<double> a = random_param({3, 5}, rng);
    Param<double> g = random_param({5}, rng, 0.5, 1.5);
    Param<double> b = random_param({5}, rng);

    xcit::EvalEngine<double> ee;
    auto y1 = ee.softmax_last_axis(ee.layer_norm(ee.param(a), ee.param(g), ee.param(b)));

    xcit::GradEngine<double> ge;
    auto y2 = ge.softmax_last_axis(ge.layer_norm(ge.param(a), ge.param(g), ge.param(b)));

    for (std::int64_t i = 0; i < ee.value(y1).numel(); ++i)
        EXPECT_DOUBLE_EQ(ee.value(y1)[i], ge.value(y2)[i]);
}

TEST(Engines, EvalParamIsViewNotCopy) {
    Param<double> p(Tensor<double>({64, 64}));
    const std::size_t base = xcit::mem::reset_peak();
    xcit::EvalEngine<double> eng;
    auto v = eng.param(p);
    EXPECT_EQ(xcit::mem::peak_since(base), 0u);
    EXPECT_EQ(&eng.value(v), &p.value);
}

}  // namespace
