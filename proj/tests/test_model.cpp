#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>

#include "xcit/model.hpp"

using xcit::Tensor;
using xcit::XcitConfig;

namespace {

XcitConfig tiny_config() {
    XcitConfig cfg;
    cfg.depth = 1;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.patch_size = 8;
    cfg.n_classes = 3;
    cfg.eps_ls = 0.5;
    cfg.drop_rate = 0.0;
    cfg.n_cls_layers = 1;
    return cfg;
}

TEST(Presets, TableRowsAndUnknownName) {
    auto s12 = xcit::preset("S12");
    EXPECT_EQ(s12.depth, 12);
    EXPECT_EQ(s12.dim, 384);
    EXPECT_EQ(s12.heads, 8);
    EXPECT_DOUBLE_EQ(s12.drop_rate, 0.05);
    EXPECT_DOUBLE_EQ(s12.eps_ls, 1.0);

    auto l24 = xcit::preset("L24");
    EXPECT_DOUBLE_EQ(l24.drop_rate, 0.25);
    EXPECT_DOUBLE_EQ(xcit::preset("L24", 8).drop_rate, 0.3);

    try {
        xcit::preset("bogus");
        FAIL();
    } catch (const xcit::ConfigError& e) {
        const std::string msg = e.what();
        for (const auto& name : xcit::preset_names())
            EXPECT_NE(msg.find(name), std::string::npos) << name;
    }
}

TEST(Presets, ConfigValidationNamesField) {
    XcitConfig cfg = tiny_config();
    cfg.heads = 3;
    try {
        cfg.validate();
        FAIL();
    } catch (const xcit::ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("heads"), std::string::npos);
    }
}

TEST(Build, DeterministicUnderSeed) {
    XcitConfig cfg = tiny_config();
    xcit::Rng r1(7), r2(7), r3(8);
    auto m1 = xcit::build<double>(cfg, r1);
    auto m2 = xcit::build<double>(cfg, r2);
    auto m3 = xcit::build<double>(cfg, r3);

    std::vector<double> v1, v2, v3;
    for_each_param(m1, [&](const std::string&, xcit::Param<double>& p) {
        for (std::int64_t i = 0; i < p.numel(); ++i) v1.push_back(p.value[i]);
    });
    for_each_param(m2, [&](const std::string&, xcit::Param<double>& p) {
        for (std::int64_t i = 0; i < p.numel(); ++i) v2.push_back(p.value[i]);
    });
    for_each_param(m3, [&](const std::string&, xcit::Param<double>& p) {
        for (std::int64_t i = 0; i < p.numel(); ++i) v3.push_back(p.value[i]);
    });
    ASSERT_EQ(v1.size(), v2.size());
    bool all_eq = true, any_diff = false;
    for (std::size_t i = 0; i < v1.size(); ++i) {
        all_eq = all_eq && v1[i] == v2[i];
        any_diff = any_diff || v1[i] != v3[i];
    }
    EXPECT_TRUE(all_eq);
    EXPECT_TRUE(any_diff);
}

TEST(Counts, SmallPresetParameterBands) {
    xcit::Rng rng(1);
    auto n12 = xcit::build<float>(xcit::preset("N12"), rng);
    const double pn12 = static_cast<double>(count_params(n12));
    EXPECT_GE(pn12, 2.7e6);
    EXPECT_LE(pn12, 3.3e6);

    auto s12 = xcit::build<float>(xcit::preset("S12"), rng);
    const double ps12 = static_cast<double>(count_params(s12));
    EXPECT_GE(ps12, 24e6);
    EXPECT_LE(ps12, 28e6);
}

TEST(Counts, FlopExamplesFromTheTable) {
    EXPECT_NEAR(static_cast<double>(xcit::count_flops(xcit::preset("S12"), 224, 224)), 4.8e9,
                0.15 * 4.8e9);
    EXPECT_NEAR(static_cast<double>(xcit::count_flops(xcit::preset("S12", 8), 384, 384)), 55.6e9,
                0.15 * 55.6e9);
    EXPECT_NEAR(static_cast<double>(xcit::count_flops(xcit::preset("N12"), 224, 224)), 0.5e9,
                0.15 * 0.5e9);
    EXPECT_NEAR(static_cast<double>(xcit::count_flops(xcit::preset("L24"), 224, 224)), 36.1e9,
                0.15 * 36.1e9);
}

TEST(Forward, ZeroHeadGivesZeroLogits) {
    xcit::Rng rng(2);
    auto m = xcit::build<double>(tiny_config(), rng);
    m.head_w.value.fill(0.0);
    m.head_b.value.fill(0.0);
    Tensor<double> imgs({2, 3, 16, 16});
    xcit::fill_uniform(imgs, rng, -1.0, 1.0);
    Tensor<double> logits = xcit::forward(m, imgs);
    EXPECT_EQ(logits.shape(), (xcit::Shape{2, 3}));
    for (std::int64_t i = 0; i < logits.numel(); ++i) EXPECT_DOUBLE_EQ(logits[i], 0.0);
}

TEST(Forward, BatchIndependence) {
    xcit::Rng rng(3);
    auto m = xcit::build<double>(tiny_config(), rng);
    Tensor<double> one({1, 3, 16, 16});
    xcit::fill_uniform(one, rng, -1.0, 1.0);
    Tensor<double> batch({3, 3, 16, 16});
    for (int b = 0; b < 3; ++b)
        std::copy(one.data(), one.data() + one.numel(), batch.data() + b * one.numel());
    Tensor<double> logits = xcit::forward(m, batch);
    for (int b = 1; b < 3; ++b)
        for (std::int64_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(logits.at(b, c), logits.at(0, c));
}

TEST(Forward, SameWeightsAcrossResolutions) {
    xcit::Rng rng(4);
    XcitConfig cfg = tiny_config();
    cfg.depth = 2;
    auto m = xcit::build<double>(cfg, rng);
    const std::int64_t params_before = count_params(m);

    Tensor<double> small({1, 3, 16, 16});
    Tensor<double> large({1, 3, 40, 24});
    xcit::fill_uniform(small, rng, -1.0, 1.0);
    xcit::fill_uniform(large, rng, -1.0, 1.0);
    Tensor<double> l1 = xcit::forward(m, small);
    Tensor<double> l2 = xcit::forward(m, large);
    for (std::int64_t i = 0; i < l1.numel(); ++i) EXPECT_TRUE(std::isfinite(l1[i]));
    for (std::int64_t i = 0; i < l2.numel(); ++i) EXPECT_TRUE(std::isfinite(l2[i]));
    // no resolution-dependent weights were created
    EXPECT_EQ(count_params(m), params_before);
}

TEST(Forward, LinearPatchVariantRuns) {
    xcit::Rng rng(5);
    XcitConfig cfg = tiny_config();
    cfg.linear_patch = true;
    cfg.patch_size = 4;
    auto m = xcit::build<double>(cfg, rng);
    Tensor<double> imgs({1, 3, 8, 8});
    xcit::fill_uniform(imgs, rng, -1.0, 1.0);
    Tensor<double> logits = xcit::forward(m, imgs);
    EXPECT_EQ(logits.shape(), (xcit::Shape{1, 3}));
}

TEST(Forward, ClassAttentionWeightsShape) {
    xcit::Rng rng(6);
    auto m = xcit::build<double>(tiny_config(), rng);
    Tensor<double> img = xcit::make_synthetic_image<double>(16, 16, 11);
    Tensor<double> w = xcit::class_attention_weights(m, img);
    ASSERT_EQ(w.shape(), (xcit::Shape{2, 5}));  // 2 heads, cls + 4 patches
    for (std::int64_t h = 0; h < 2; ++h) {
        double total = 0;
        for (std::int64_t j = 0; j < 5; ++j) total += w.at(h, j);
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(Checkpoint, RoundTripRestoresForward) {
    xcit::Rng r1(7), r2(8);
    XcitConfig cfg = tiny_config();
    auto m1 = xcit::build<float>(cfg, r1);
    auto m2 = xcit::build<float>(cfg, r2);

    Tensor<float> img({1, 3, 16, 16});
    xcit::fill_uniform(img, r1, -1.0, 1.0);
    Tensor<float> want = xcit::forward(m1, img);

    const std::string path = "/tmp/xcit_test_ckpt.bin";
    xcit::save_checkpoint(m1, path);
    xcit::load_checkpoint(m2, path);
    Tensor<float> got = xcit::forward(m2, img);
    for (std::int64_t i = 0; i < want.numel(); ++i) EXPECT_EQ(got[i], want[i]);
    std::remove(path.c_str());
}

TEST(Checkpoint, MismatchedModelIsRejected) {
    xcit::Rng rng(9);
    auto m1 = xcit::build<float>(tiny_config(), rng);
    const std::string path = "/tmp/xcit_test_ckpt_mismatch.bin";
    xcit::save_checkpoint(m1, path);

    XcitConfig other = tiny_config();
    other.dim = 16;
    auto m2 = xcit::build<float>(other, rng);
    EXPECT_THROW(xcit::load_checkpoint(m2, path), xcit::FormatError);
    std::remove(path.c_str());
}

TEST(Gradcheck, TinyModelEndToEnd) {
    xcit::Rng rng(10);
    auto m = xcit::build<double>(tiny_config(), rng);
    Tensor<double> img({1, 3, 16, 16});
    xcit::fill_uniform(img, rng, -0.5, 0.5);
    std::vector<int> label = {1};

    auto f = [&](auto& eng) {
        auto logits = model_forward_sample(eng, m, eng.constant(img));
        return eng.cross_entropy(logits, label);
    };
    auto rep = xcit::gradcheck(all_params(m), f);
    EXPECT_LT(rep.max_rel_err, 1e-4);
    EXPECT_GT(rep.checked, 2000u);
}

}  // namespace
