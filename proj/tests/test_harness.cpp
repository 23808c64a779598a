#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "xcit/harness.hpp"

using xcit::Param;
using xcit::Tensor;

namespace {

TEST(AdamW, ZeroGradZeroDecayIsNoOp) {
    Param<double> p(Tensor<double>({3}, {1.0, -2.0, 0.5}));
    std::vector<Param<double>*> params = {&p};
    xcit::AdamWState<double> state(params);
    xcit::AdamWHyper hp;
    hp.weight_decay = 0.0;
    adamw_step(params, state, hp);
    EXPECT_DOUBLE_EQ(p.value[0], 1.0);
    EXPECT_DOUBLE_EQ(p.value[1], -2.0);
    EXPECT_DOUBLE_EQ(p.value[2], 0.5);
}

TEST(AdamW, SingleStepClosedForm) {
    Param<double> p(Tensor<double>({1}, {0.0}));
    p.grad[0] = 1.0;
    std::vector<Param<double>*> params = {&p};
    xcit::AdamWState<double> state(params);
    xcit::AdamWHyper hp;
    hp.lr = 0.1;
    hp.weight_decay = 0.0;
    adamw_step(params, state, hp);
    // bias correction makes mhat/sqrt(vhat) = 1 on the first step
    EXPECT_NEAR(p.value[0], -0.1, 1e-7);
}

TEST(AdamW, DecoupledDecayShrinksMultiplicatively) {
    Param<double> p(Tensor<double>({2}, {2.0, -4.0}));
    std::vector<Param<double>*> params = {&p};
    xcit::AdamWState<double> state(params);
    xcit::AdamWHyper hp;
    hp.lr = 0.1;
    hp.weight_decay = 0.01;
    adamw_step(params, state, hp);  // grad is zero
    EXPECT_NEAR(p.value[0], 2.0 * (1.0 - 0.1 * 0.01), 1e-15);
    EXPECT_NEAR(p.value[1], -4.0 * (1.0 - 0.1 * 0.01), 1e-15);
}

TEST(Cosine, EndpointsAndMonotonicity) {
    EXPECT_DOUBLE_EQ(xcit::cosine_lr(0, 100, 5e-4), 5e-4);
    EXPECT_NEAR(xcit::cosine_lr(99, 100, 5e-4), 1e-6, 1e-12);
    double prev = 1.0;
    for (int s = 0; s < 100; ++s) {
        const double lr = xcit::cosine_lr(s, 100, 5e-4);
        EXPECT_LE(lr, prev);
        prev = lr;
    }
}

TEST(Bench, RecordsAndAnalyticSlope) {
    std::vector<std::int64_t> ns = {16, 32, 64, 128, 256};
    auto records = xcit::bench_scaling<float>(xcit::BenchOp::kXca, 32, 4, ns);
    ASSERT_EQ(records.size(), 5u);
    for (const auto& r : records) {
        EXPECT_FALSE(r.oom);
        EXPECT_GT(r.wall_ns, 0);
        EXPECT_GT(r.peak_bytes, 0);
        EXPECT_EQ(r.op, "xca");
    }
    auto mac_slope = fit_loglog_slope(records, [](const xcit::BenchRecord& r) { return r.macs; });
    ASSERT_TRUE(mac_slope.has_value());
    EXPECT_NEAR(*mac_slope, 1.0, 1e-9);
}

TEST(Bench, RejectsBadTokenLists) {
    EXPECT_THROW(xcit::bench_scaling<float>(xcit::BenchOp::kXca, 32, 4, {16, 32, 64}),
                 xcit::ConfigError);
    EXPECT_THROW(xcit::bench_scaling<float>(xcit::BenchOp::kXca, 32, 4, {64, 32, 16, 256}),
                 xcit::ConfigError);
    EXPECT_THROW(xcit::bench_scaling<float>(xcit::BenchOp::kXca, 32, 4, {16, 32, 64, 128}),
                 xcit::ConfigError);
}

TEST(Bench, MemoryCapMarksOomAndRunContinues) {
    xcit::BenchOptions opts;
    opts.mem_cap_bytes = 200 * 1024;  // tiny cap: large points must be skipped
    auto records =
        xcit::bench_scaling<float>(xcit::BenchOp::kTokenAttn, 32, 4, {16, 32, 64, 128, 256}, opts);
    ASSERT_EQ(records.size(), 5u);
    EXPECT_FALSE(records[0].oom);
    EXPECT_TRUE(records.back().oom);
    EXPECT_EQ(records.back().wall_ns, -1);
    EXPECT_EQ(records.back().peak_bytes, -1);
    EXPECT_GT(records.back().macs, 0);  // analytic count still reported
}

TEST(Bench, CsvSchema) {
    std::vector<xcit::BenchRecord> records(1);
    records[0] = {"xca", 64, 32, 4, 1234, 5678, 999, false};
    std::ostringstream os;
    write_bench_csv(os, records);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "op,N,d,h,wall_ns,peak_bytes,macs");
    std::getline(is, line);
    EXPECT_EQ(line, "xca,64,32,4,1234,5678,999");
}

TEST(Bench, GridFactorization) {
    auto g = xcit::bench_grid(512);
    EXPECT_EQ(g.tokens(), 512);
    EXPECT_EQ(g.hp, 16);
    EXPECT_EQ(g.wp, 32);
    auto sq = xcit::bench_grid(256);
    EXPECT_EQ(sq.hp, 16);
    EXPECT_EQ(sq.wp, 16);
}

TEST(ToyTask, DeterministicAndLinearlyProbeable) {
    auto t1 = xcit::make_toy_task<double>(3, 60, 30, 99);
    auto t2 = xcit::make_toy_task<double>(3, 60, 30, 99);
    ASSERT_EQ(t1.train_images.size(), 60u);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::int64_t j = 0; j < t1.train_images[i].numel(); ++j)
            EXPECT_EQ(t1.train_images[i][j], t2.train_images[i][j]);

    // linear probe on the class-pattern responses
    std::vector<Tensor<double>> patterns;
    for (int c = 0; c < 3; ++c) patterns.push_back(xcit::toy_class_pattern<double>(c, 32));
    auto probe = [&](const std::vector<Tensor<double>>& images, const std::vector<int>& labels) {
        std::int64_t hits = 0;
        for (std::size_t i = 0; i < images.size(); ++i) {
            int best = 0;
            double best_score = -1e300;
            for (int c = 0; c < 3; ++c) {
                double score = 0;
                for (std::int64_t j = 0; j < images[i].numel(); ++j)
                    score += images[i][j] * patterns[static_cast<std::size_t>(c)][j];
                if (score > best_score) {
                    best_score = score;
                    best = c;
                }
            }
            if (best == labels[i]) ++hits;
        }
        return static_cast<double>(hits) / static_cast<double>(images.size());
    };
    EXPECT_GT(probe(t1.train_images, t1.train_labels), 0.99);
    EXPECT_GT(probe(t1.holdout_images, t1.holdout_labels), 0.99);
}

xcit::XcitConfig micro_config(std::int64_t n_classes) {
    xcit::XcitConfig cfg;
    cfg.depth = 2;
    cfg.dim = 16;
    cfg.heads = 4;
    cfg.patch_size = 8;
    cfg.n_classes = n_classes;
    cfg.eps_ls = 1.0;
    cfg.drop_rate = 0.0;
    cfg.n_cls_layers = 1;
    return cfg;
}

TEST(TrainToy, InitialLossIsLogClasses) {
    auto task = xcit::make_toy_task<double>(2, 32, 16, 1);
    xcit::Rng rng(2);
    auto model = xcit::build<double>(micro_config(2), rng);
    model.head_w.value.fill(0.0);
    model.head_b.value.fill(0.0);
    xcit::TrainOptions opts;
    opts.epochs = 1;
    opts.batch_size = 16;
    opts.seed = 3;
    auto history = train_toy(model, task, opts);
    ASSERT_EQ(history.size(), 1u);
    EXPECT_NEAR(history[0].loss, std::log(2.0), 0.05 * std::log(2.0));
}

TEST(TrainToy, LossTrendsDownDeterministically) {
    auto task = xcit::make_toy_task<double>(2, 64, 32, 4);
    xcit::Rng rng(5);
    auto model = xcit::build<double>(micro_config(2), rng);
    xcit::TrainOptions opts;
    opts.epochs = 6;
    opts.batch_size = 16;
    opts.seed = 6;
    opts.hyper.lr = 2e-3;
    auto history = train_toy(model, task, opts);
    ASSERT_EQ(history.size(), 6u);
    EXPECT_LT(history.back().loss, history.front().loss);

    xcit::Rng rng2(5);
    auto model2 = xcit::build<double>(micro_config(2), rng2);
    auto history2 = train_toy(model2, task, opts);
    for (std::size_t i = 0; i < history.size(); ++i) {
        EXPECT_EQ(history[i].loss, history2[i].loss);
        EXPECT_EQ(history[i].holdout_acc, history2[i].holdout_acc);
    }
}

TEST(TrainToy, TrainingCsvFormat) {
    std::vector<xcit::EpochStats> history = {{0.6931, 0.5}, {0.5, 0.75}};
    std::ostringstream os;
    write_training_csv(os, history);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "epoch,loss,holdout_acc");
    std::getline(is, line);
    EXPECT_EQ(line.substr(0, 2), "0,");
}

TEST(InvariantSuite, AllGreenByDefault) {
    auto report = xcit::run_invariant_suite();
    for (const auto& r : report.results) EXPECT_TRUE(r.pass) << r.name << " measured " << r.measured;
    EXPECT_TRUE(report.all_pass());
    EXPECT_GE(report.results.size(), 15u);
}

TEST(InvariantSuite, DetectsSabotagedSoftmax) {
    xcit::InvariantOptions opts;
    opts.break_softmax_stability = true;
    auto report = xcit::run_invariant_suite(opts);
    EXPECT_FALSE(report.all_pass());
    bool found = false;
    for (const auto& r : report.results) {
        if (r.name == "softmax.stability") {
            EXPECT_FALSE(r.pass);
            found = true;
        }
    }
    EXPECT_TRUE(found);
}

}  // namespace
