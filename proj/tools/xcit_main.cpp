// Command-line entry point: scaling benchmarks, parameter/MAC verification
// against the published tables, gradient checks, toy training, attention-map
// dumps, and the invariant suite.
//
// Exit codes: 0 success, 1 check failure, 2 usage error.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "xcit/harness.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsageError = 2;

struct TableEntry {
    double params;      // published #params
    double gflops_224;  // @224 patch 16
    double gflops_384;  // @384 patch 8
};

const std::map<std::string, TableEntry>& reference_table() {
    static const std::map<std::string, TableEntry> table = {
        {"N12", {3e6, 0.5, 6.4}},    {"T12", {7e6, 1.2, 14.3}},  {"T24", {12e6, 2.3, 27.3}},
        {"S12", {26e6, 4.8, 55.6}},  {"S24", {48e6, 9.1, 106.0}}, {"M24", {84e6, 16.2, 188.0}},
        {"L24", {189e6, 36.1, 417.9}},
    };
    return table;
}

std::vector<std::int64_t> parse_n_list(const std::string& csv) {
    std::vector<std::int64_t> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            const long long v = std::stoll(item, &used);
            if (used != item.size() || v <= 0) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw xcit::ConfigError("bad token count '" + item + "' in --n-list");
        }
    }
    if (out.empty()) throw xcit::ConfigError("--n-list is empty");
    return out;
}

// The canonical small training configuration; stays below 200k parameters.
xcit::XcitConfig toy_config(std::int64_t n_classes) {
    xcit::XcitConfig cfg;
    cfg.name = "toy";
    cfg.depth = 2;
    cfg.dim = 32;
    cfg.heads = 4;
    cfg.patch_size = 8;
    cfg.n_classes = n_classes;
    cfg.eps_ls = 1.0;
    cfg.drop_rate = 0.0;
    cfg.n_cls_layers = 1;
    return cfg;
}

int cmd_bench(const std::string& op_name, std::int64_t d, std::int64_t h, const std::string& n_csv,
              const std::string& out_path, int reps, int warmup, double mem_cap_gb,
              std::uint64_t seed) {
    auto op = xcit::parse_bench_op(op_name);
    if (!op) {
        std::cerr << "unknown --op '" << op_name << "' (valid: xca, token_attn, xcit_layer)\n";
        return kUsageError;
    }
    std::vector<std::int64_t> n_list;
    xcit::BenchOptions opts;
    opts.reps = reps;
    opts.warmup = warmup;
    opts.seed = seed;
    opts.mem_cap_bytes = static_cast<std::size_t>(mem_cap_gb * 1024.0 * 1024.0 * 1024.0);
    std::vector<xcit::BenchRecord> records;
    try {
        n_list = parse_n_list(n_csv);
        records = xcit::bench_scaling<float>(*op, d, h, n_list, opts);
    } catch (const xcit::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return kUsageError;
    }

    if (out_path.empty()) {
        write_bench_csv(std::cout, records);
    } else {
        std::ofstream os(out_path);
        if (!os) {
            std::cerr << "cannot open " << out_path << " for writing\n";
            return kUsageError;
        }
        write_bench_csv(os, records);
    }

    auto report_slope = [&](const char* name, auto metric) {
        auto slope = fit_loglog_slope(records, metric);
        if (slope) {
            std::cout << "slope " << name << " = " << *slope << "\n";
        } else {
            std::cout << "slope " << name << " = n/a (too few points)\n";
        }
    };
    std::cout << "# log-log least-squares slopes over N (oom points excluded)\n";
    report_slope("wall_ns", [](const xcit::BenchRecord& r) { return r.wall_ns; });
    report_slope("peak_bytes", [](const xcit::BenchRecord& r) { return r.peak_bytes; });
    report_slope("macs", [](const xcit::BenchRecord& r) { return r.macs; });
    return kOk;
}

int cmd_count(const std::string& preset_name, int depth, std::int64_t width, std::int64_t heads,
              std::int64_t res, std::int64_t patch, std::uint64_t seed) {
    std::cout << "# counting convention: 1 MAC (multiply-accumulate) = 1 FLOP-unit; "
                 "activations and normalizations are not counted\n";
    xcit::XcitConfig cfg;
    bool has_band = false;
    TableEntry band{};
    if (!preset_name.empty()) {
        try {
            cfg = xcit::preset(preset_name, patch);
        } catch (const xcit::ConfigError& e) {
            std::cerr << e.what() << "\n";
            return kUsageError;
        }
        has_band = true;
        band = reference_table().at(preset_name);
    } else {
        cfg = toy_config(1000);
        cfg.name = "custom";
        cfg.depth = depth;
        cfg.dim = width;
        cfg.heads = heads;
        cfg.patch_size = patch;
        cfg.n_cls_layers = 2;
        try {
            cfg.validate();
        } catch (const xcit::ConfigError& e) {
            std::cerr << e.what() << "\n";
            return kUsageError;
        }
    }

    xcit::Rng rng(seed);
    auto model = xcit::build<float>(cfg, rng);
    const auto params = static_cast<double>(count_params(model));
    const auto macs = static_cast<double>(xcit::count_flops(cfg, res, res));
    std::cout << "config " << cfg.name << "  depth=" << cfg.depth << " d=" << cfg.dim
              << " h=" << cfg.heads << " patch=" << cfg.patch_size << " res=" << res << "\n";
    std::cout << "params = " << params << "\n";
    std::cout << "macs   = " << macs << "\n";

    if (!has_band) return kOk;

    bool ok = std::abs(params - band.params) <= 0.10 * band.params;
    std::cout << "params reference " << band.params << "  (tolerance 10%): "
              << (ok ? "within band" : "OUT OF BAND") << "\n";
    const double ref_gflops = (res == 224 && patch == 16)   ? band.gflops_224
                              : (res == 384 && patch == 8) ? band.gflops_384
                                                           : -1.0;
    if (ref_gflops > 0) {
        const bool flops_ok = std::abs(macs - ref_gflops * 1e9) <= 0.15 * ref_gflops * 1e9;
        std::cout << "macs reference " << ref_gflops << "e9  (tolerance 15%): "
                  << (flops_ok ? "within band" : "OUT OF BAND") << "\n";
        ok = ok && flops_ok;
    } else {
        std::cout << "macs reference: none for res=" << res << " patch=" << patch << "\n";
    }
    return ok ? kOk : kCheckFailed;
}

int cmd_gradcheck(const std::string& config, std::uint64_t seed) {
    struct Unit {
        std::string name;
        double err;
        double tol;
    };
    std::vector<Unit> units;
    xcit::Rng rng(seed);

    if (config == "op") {
        {
            xcit::Param<double> x(xcit::Tensor<double>({3, 4}));
            xcit::fill_uniform(x.value, rng, -1.0, 1.0);
            auto f = [&](auto& eng) {
                auto v = eng.param(x);
                return eng.sum_all(eng.mul(v, v));
            };
            units.push_back({"quadratic_sum_squares", xcit::gradcheck({&x}, f).max_rel_err, 1e-8});
        }
        {
            xcit::Param<double> a(xcit::Tensor<double>({3, 5}));
            xcit::Param<double> b(xcit::Tensor<double>({5, 2}));
            xcit::fill_uniform(a.value, rng, -1.0, 1.0);
            xcit::fill_uniform(b.value, rng, -1.0, 1.0);
            auto f = [&](auto& eng) {
                auto c = eng.matmul(eng.param(a), eng.param(b));
                return eng.sum_all(eng.mul(c, c));
            };
            units.push_back({"matmul", xcit::gradcheck({&a, &b}, f).max_rel_err, 1e-4});
        }
        {
            xcit::Param<double> x(xcit::Tensor<double>({4, 6}));
            xcit::fill_uniform(x.value, rng, -2.0, 2.0);
            xcit::Tensor<double> mix({4, 6});
            xcit::fill_uniform(mix, rng, -1.0, 1.0);
            auto f = [&](auto& eng) {
                auto s = eng.softmax_last_axis(eng.param(x));
                auto n = eng.l2_normalize_axis(s, 0);
                auto w = eng.mul(n, eng.constant(mix));
                return eng.sum_all(eng.mul(w, w));
            };
            units.push_back({"softmax_l2norm", xcit::gradcheck({&x}, f).max_rel_err, 1e-4});
        }
        {
            xcit::Param<double> x(
                xcit::Tensor<double>({2, 3}, {30.0, -30.0, 0.5, -30.0, 30.0, 0.25}));
            xcit::Tensor<double> mix({2, 3}, {1, 2, 3, 4, 5, 6});
            auto f = [&](auto& eng) {
                auto s = eng.softmax_last_axis(eng.param(x));
                return eng.sum_all(eng.mul(s, eng.constant(mix)));
            };
            units.push_back({"softmax_saturated", xcit::gradcheck({&x}, f).max_rel_err, 1e-3});
        }
        {
            xcit::Param<double> x(xcit::Tensor<double>({1, 3, 4, 4}));
            xcit::Param<double> w(xcit::Tensor<double>({3, 3, 3}));
            xcit::Param<double> b(xcit::Tensor<double>({3}));
            xcit::fill_uniform(x.value, rng, -1.0, 1.0);
            xcit::fill_uniform(w.value, rng, -1.0, 1.0);
            auto f = [&](auto& eng) {
                auto y = eng.gelu(eng.depthwise_conv3x3(eng.param(x), eng.param(w), eng.param(b)));
                return eng.sum_all(eng.mul(y, y));
            };
            units.push_back({"dwconv_gelu", xcit::gradcheck({&x, &w, &b}, f).max_rel_err, 1e-4});
        }
        {
            xcit::Param<double> x(xcit::Tensor<double>({4, 6}));
            xcit::Param<double> g(xcit::Tensor<double>::full({6}, 1.0));
            xcit::Param<double> b(xcit::Tensor<double>({6}));
            xcit::fill_uniform(x.value, rng, -1.0, 1.0);
            xcit::Tensor<double> mix({4, 6});
            xcit::fill_uniform(mix, rng, -1.0, 1.0);
            auto f = [&](auto& eng) {
                auto y = eng.layer_norm(eng.param(x), eng.param(g), eng.param(b));
                auto w = eng.mul(y, eng.constant(mix));
                return eng.sum_all(eng.mul(w, w));
            };
            units.push_back({"layer_norm", xcit::gradcheck({&x, &g, &b}, f).max_rel_err, 1e-4});
        }
    } else if (config == "layer") {
        auto layer = xcit::make_xcit_layer<double>(8, 2, 0.5, 0.0, rng);
        xcit::Param<double> x(xcit::Tensor<double>({4, 8}));
        xcit::fill_uniform(x.value, rng, -1.0, 1.0);
        auto f = [&](auto& eng) {
            auto y = xcit_layer_forward(eng, eng.param(x), {2, 2}, layer);
            return eng.sum_all(eng.mul(y, y));
        };
        std::vector<xcit::Param<double>*> params = {&x};
        auto add_params = [&](auto&... ps) { (params.push_back(&ps), ...); };
        add_params(layer.norm1.gain, layer.norm1.bias, layer.norm2.gain, layer.norm2.bias,
                   layer.norm3.gain, layer.norm3.bias, layer.xca.qkv_w, layer.xca.qkv_b,
                   layer.xca.temp, layer.xca.proj_w, layer.xca.proj_b, layer.lpi.conv1_w,
                   layer.lpi.conv1_b, layer.lpi.conv2_w, layer.lpi.conv2_b, layer.lpi.bn_gain,
                   layer.lpi.bn_bias, layer.ffn.fc1_w, layer.ffn.fc1_b, layer.ffn.fc2_w,
                   layer.ffn.fc2_b, layer.ls.gamma_xca, layer.ls.gamma_lpi, layer.ls.gamma_ffn);
        units.push_back({"xcit_layer_full", xcit::gradcheck(params, f).max_rel_err, 1e-4});
    } else if (config == "small") {
        xcit::XcitConfig cfg;
        cfg.depth = 2;
        cfg.dim = 16;
        cfg.heads = 4;
        cfg.patch_size = 8;
        cfg.n_classes = 3;
        cfg.eps_ls = 1.0;
        cfg.n_cls_layers = 2;
        auto model = xcit::build<double>(cfg, rng);
        xcit::Tensor<double> img({1, 3, 16, 16});
        xcit::fill_uniform(img, rng, -0.5, 0.5);
        auto f = [&](auto& eng) {
            auto logits = model_forward_sample(eng, model, eng.constant(img));
            return eng.cross_entropy(logits, {1});
        };
        units.push_back({"xcit_2layer_d16_h4_end_to_end",
                         xcit::gradcheck(all_params(model), f).max_rel_err, 1e-4});
    } else {
        std::cerr << "unknown --config '" << config << "' (valid: small, layer, op)\n";
        return kUsageError;
    }

    bool all_ok = true;
    for (const Unit& u : units) {
        const bool ok = u.err < u.tol;
        all_ok = all_ok && ok;
        std::cout << (ok ? "PASS " : "FAIL ") << u.name << "  max_rel_err=" << u.err
                  << "  tol=" << u.tol << "\n";
    }
    return all_ok ? kOk : kCheckFailed;
}

int cmd_train_toy(std::int64_t classes, int epochs, std::uint64_t seed, const std::string& out_path,
                  bool ablate, std::int64_t train_samples, std::int64_t holdout_samples,
                  double lr) {
    if (classes < 2 || classes > 10) {
        std::cerr << "--classes must lie in 2..10\n";
        return kUsageError;
    }
    auto task = xcit::make_toy_task<double>(classes, train_samples, holdout_samples, seed);
    xcit::Rng rng(seed + 1);
    auto model = xcit::build<double>(toy_config(classes), rng);
    xcit::TrainOptions opts;
    opts.epochs = epochs;
    opts.seed = seed + 2;
    opts.ablate_xca = ablate;
    opts.hyper.lr = lr;

    std::vector<xcit::EpochStats> history;
    try {
        history = train_toy(model, task, opts);
    } catch (const xcit::NumericError& e) {
        std::cerr << e.what() << "\n";
        return kCheckFailed;
    }
    if (out_path.empty()) {
        write_training_csv(std::cout, history);
    } else {
        std::ofstream os(out_path);
        if (!os) {
            std::cerr << "cannot open " << out_path << " for writing\n";
            return kUsageError;
        }
        write_training_csv(os, history);
    }
    std::cout << "final loss = " << history.back().loss
              << ", holdout accuracy = " << history.back().holdout_acc << "\n";
    return kOk;
}

int cmd_dump_attn(const std::string& preset_name, const std::string& image_path,
                  const std::string& out_prefix, const std::string& format, std::int64_t res,
                  std::uint64_t seed) {
    xcit::XcitConfig cfg;
    try {
        cfg = xcit::preset(preset_name);
    } catch (const xcit::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return kUsageError;
    }
    if (format != "csv" && format != "pgm") {
        std::cerr << "unknown --format '" << format << "' (valid: csv, pgm)\n";
        return kUsageError;
    }

    xcit::Tensor<float> img;
    try {
        img = image_path.empty() ? xcit::make_synthetic_image<float>(res, res, seed)
                                 : xcit::read_raw_image<float>(image_path);
    } catch (const xcit::FormatError& e) {
        std::cerr << e.what() << "\n";
        return kCheckFailed;
    }
    if (img.extent(0) != 1) {
        std::cerr << "attention dump expects a single image (B = 1), got B = " << img.extent(0)
                  << "\n";
        return kCheckFailed;
    }

    xcit::Rng rng(seed);
    auto model = xcit::build<float>(cfg, rng);
    xcit::PatchGrid grid;
    xcit::Tensor<float> weights;
    try {
        grid = xcit::make_patch_grid(img.extent(2), img.extent(3), cfg.patch_size);
        weights = xcit::class_attention_weights(model, img);
    } catch (const xcit::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return kCheckFailed;
    }

    // drop the CLS self-weight; reshape the patch slice onto the grid
    const std::int64_t heads = weights.rows();
    xcit::Tensor<float> patch_maps({heads, grid.hp, grid.wp});
    for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t t = 0; t < grid.tokens(); ++t)
            patch_maps[h * grid.tokens() + t] = weights.at(h, t + 1);

    if (format == "csv") {
        const std::string path = out_prefix.empty() ? "" : out_prefix + ".csv";
        if (path.empty()) {
            write_attention_maps_csv(std::cout, patch_maps);
        } else {
            std::ofstream os(path);
            if (!os) {
                std::cerr << "cannot open " << path << " for writing\n";
                return kUsageError;
            }
            write_attention_maps_csv(os, patch_maps);
            std::cout << "wrote " << path << "\n";
        }
    } else {
        if (out_prefix.empty()) {
            std::cerr << "--format pgm requires --out <prefix>\n";
            return kUsageError;
        }
        for (std::int64_t h = 0; h < heads; ++h) {
            xcit::Tensor<float> map({grid.hp, grid.wp});
            for (std::int64_t t = 0; t < grid.tokens(); ++t)
                map[t] = patch_maps[h * grid.tokens() + t];
            const std::string path = out_prefix + "_head" + std::to_string(h) + ".pgm";
            xcit::write_pgm(path, map);
            std::cout << "wrote " << path << "\n";
        }
    }
    return kOk;
}

int cmd_invariants(std::uint64_t seed, bool break_softmax) {
    xcit::InvariantOptions opts;
    opts.seed = seed;
    opts.break_softmax_stability = break_softmax;
    auto report = xcit::run_invariant_suite(opts);
    print_invariant_report(std::cout, report);
    return report.all_pass() ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cross-covariance image transformer toolkit"};
    app.require_subcommand(1);

    auto* bench = app.add_subcommand("bench", "scaling benchmark over token counts");
    std::string bench_op = "xca", bench_nlist, bench_out;
    std::int64_t bench_d = 384, bench_h = 8;
    int bench_reps = 5, bench_warmup = 1;
    double bench_cap_gb = 8.0;
    std::uint64_t bench_seed = 7;
    bench->add_option("--op", bench_op, "xca | token_attn | xcit_layer");
    bench->add_option("--d", bench_d, "model width");
    bench->add_option("--heads", bench_h, "head count");
    bench->add_option("--n-list", bench_nlist, "comma-separated token counts")->required();
    bench->add_option("--out", bench_out, "CSV path (default: stdout)");
    bench->add_option("--reps", bench_reps, "timed repetitions per point");
    bench->add_option("--warmup", bench_warmup, "warm-up runs per point");
    bench->add_option("--mem-cap-gb", bench_cap_gb, "skip points estimated above this cap");
    bench->add_option("--seed", bench_seed, "rng seed");

    auto* count = app.add_subcommand("count", "parameter and MAC counts vs the reference table");
    std::string count_preset;
    std::int64_t count_res = 224, count_patch = 16, count_width = 128, count_heads = 4;
    int count_depth = 12;
    std::uint64_t count_seed = 1;
    count->add_option("--preset", count_preset, "N12|T12|T24|S12|S24|M24|L24");
    count->add_option("--res", count_res, "input resolution");
    count->add_option("--patch", count_patch, "patch size");
    count->add_option("--depth", count_depth, "layer count (custom config)");
    count->add_option("--width", count_width, "model width d (custom config)");
    count->add_option("--heads", count_heads, "head count (custom config)");
    count->add_option("--seed", count_seed, "rng seed");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    std::string gc_config = "op";
    std::uint64_t gc_seed = 3;
    gc->add_option("--config", gc_config, "small | layer | op");
    gc->add_option("--seed", gc_seed, "rng seed");

    auto* tt = app.add_subcommand("train-toy", "train a small model on the synthetic task");
    std::int64_t tt_classes = 2, tt_train = 256, tt_holdout = 128;
    int tt_epochs = 30;
    std::uint64_t tt_seed = 0;
    std::string tt_out;
    bool tt_ablate = false;
    double tt_lr = 5e-4;
    tt->add_option("--classes", tt_classes, "number of classes (2..10)");
    tt->add_option("--epochs", tt_epochs, "training epochs");
    tt->add_option("--seed", tt_seed, "rng seed");
    tt->add_option("--out", tt_out, "training CSV path (default: stdout)");
    tt->add_flag("--ablate-xca", tt_ablate, "freeze all XCA LayerScale gains at zero");
    tt->add_option("--train-samples", tt_train, "training set size");
    tt->add_option("--holdout-samples", tt_holdout, "held-out set size");
    tt->add_option("--lr", tt_lr, "peak learning rate");

    auto* da = app.add_subcommand("dump-attn", "class-attention maps per head");
    std::string da_preset = "N12", da_image, da_out, da_format = "csv";
    std::int64_t da_res = 224;
    std::uint64_t da_seed = 5;
    da->add_option("--preset", da_preset, "model preset");
    da->add_option("--image", da_image, "raw image file (default: synthetic)");
    da->add_option("--out", da_out, "output path prefix");
    da->add_option("--format", da_format, "csv | pgm");
    da->add_option("--res", da_res, "synthetic image resolution");
    da->add_option("--seed", da_seed, "rng seed");

    auto* inv = app.add_subcommand("invariants", "run the structural invariant suite");
    std::uint64_t inv_seed = 1234;
    bool inv_break = false;
    inv->add_option("--seed", inv_seed, "rng seed");
    inv->add_flag("--break-softmax", inv_break, "sabotage softmax stability (suite self-test)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e);
        return kOk;
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsageError;
    }

    try {
        if (bench->parsed()) {
            return cmd_bench(bench_op, bench_d, bench_h, bench_nlist, bench_out, bench_reps,
                             bench_warmup, bench_cap_gb, bench_seed);
        }
        if (count->parsed()) {
            return cmd_count(count_preset, count_depth, count_width, count_heads, count_res,
                             count_patch, count_seed);
        }
        if (gc->parsed()) return cmd_gradcheck(gc_config, gc_seed);
        if (tt->parsed()) {
            return cmd_train_toy(tt_classes, tt_epochs, tt_seed, tt_out, tt_ablate, tt_train,
                                 tt_holdout, tt_lr);
        }
        if (da->parsed()) {
            return cmd_dump_attn(da_preset, da_image, da_out, da_format, da_res, da_seed);
        }
        if (inv->parsed()) return cmd_invariants(inv_seed, inv_break);
    } catch (const xcit::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return kUsageError;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return kCheckFailed;
    }
    return kUsageError;
}
