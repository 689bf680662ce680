// Command-line surface: channel-config generation, toy pretraining, the
// verification suite and the scaling benchmarks. Every command takes an
// explicit --seed and is reproducible from its manifest.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lrss/bench.hpp"
#include "lrss/checkpoint.hpp"
#include "lrss/hypermae.hpp"
#include "lrss/spectral.hpp"
#include "lrss/verify.hpp"

namespace {

using nlohmann::json;

std::string timestamp_utc() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm_utc{};
    gmtime_r(&t, &tm_utc);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

void write_manifest(const std::string& dir, const json& manifest) {
    std::filesystem::create_directories(dir);
    lrss::write_text_file(dir + "/manifest.json", manifest.dump(2) + "\n");
}

int run_gen_config(const std::string& kind, const std::string& out) {
    lrss::ConfigKind ck;
    if (kind == "vnir-plus")
        ck = lrss::ConfigKind::kVnirPlus;
    else if (kind == "swir-plus")
        ck = lrss::ConfigKind::kSwirPlus;
    else if (kind == "disjoint")
        ck = lrss::ConfigKind::kDisjoint;
    else if (kind == "full")
        ck = lrss::ConfigKind::kFull;
    else
        throw lrss::ConfigError("unknown config kind: " + kind);

    const auto grid = lrss::make_reference_grid();
    const auto cfg = lrss::make_config(grid, ck);
    lrss::write_config_file(cfg, out);
    int64_t vnir = 0;
    for (double w : cfg.wavelengths) vnir += (w < lrss::kVnirSwirSplitNm);
    std::printf("%s: %lld channels (%lld VNIR + %lld SWIR) -> %s\n", cfg.name.c_str(),
                static_cast<long long>(cfg.size()), static_cast<long long>(vnir),
                static_cast<long long>(cfg.size() - vnir), out.c_str());
    return 0;
}

template <typename T>
int run_pretrain(const std::string& preset, int64_t steps, uint64_t seed, const std::string& precision,
                 const std::string& out_dir, double lr) {
    lrss::ModelConfig cfg;
    lrss::TrainConfig tc;
    tc.seed = seed;
    tc.lr = lr;
    if (preset == "toy") {
        cfg = lrss::toy_preset();
        tc.steps = steps;
    } else if (preset == "reference-shape-only") {
        cfg = lrss::reference_preset();
        tc.steps = 1;
        tc.batch_size = 1;
        tc.dataset_size = 1;
    } else {
        throw lrss::ConfigError("unknown preset: " + preset);
    }

    auto model = lrss::HyperMaeModel<T>::init(cfg, seed);
    const std::string loss_path = out_dir + "/loss.csv";
    const std::string ckpt_path = out_dir + "/checkpoint.bin";

    json manifest = {
        {"command", "pretrain"},
        {"preset", preset},
        {"seed", seed},
        {"precision", precision},
        {"timestamp", timestamp_utc()},
        {"steps", tc.steps},
        {"lr", tc.lr},
        {"optimizer", "sgd-momentum"},
        {"momentum", tc.momentum},
        {"batch_size", tc.batch_size},
        {"dataset_size", tc.dataset_size},
        {"hcs_range", {cfg.hcs.r_lo, cfg.hcs.r_hi}},
        {"mask_ratios", {cfg.mask_ratio_spatial, cfg.mask_ratio_spectral}},
        {"cube_shape", {cfg.cube_channels, cfg.cube_height, cfg.cube_width}},
        {"parameter_count", model.param_count()},
        {"outputs", {loss_path, ckpt_path}},
    };
    write_manifest(out_dir, manifest);

    const auto losses = lrss::run_pretrain(model, tc);

    std::string csv = "step,loss\n";
    char buf[64];
    for (size_t i = 0; i < losses.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i + 1, static_cast<double>(losses[i]));
        csv += buf;
    }
    lrss::write_text_file(loss_path, csv);
    lrss::save_checkpoint<T>(ckpt_path, manifest.dump(), model.named_params());
    std::printf("preset=%s params=%lld steps=%lld first_loss=%.6g last_loss=%.6g\n", preset.c_str(),
                static_cast<long long>(model.param_count()), static_cast<long long>(tc.steps),
                static_cast<double>(losses.front()), static_cast<double>(losses.back()));
    return 0;
}

int run_verify(const std::string& precision, uint64_t seed) {
    const auto results = lrss::run_verification(precision == "f64", seed);
    bool all_pass = true;
    for (const auto& r : results) {
        std::printf("[%s] %-22s max_err=%-12.3g %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(),
                    r.max_err, r.detail.c_str());
        all_pass = all_pass && r.pass;
    }
    std::printf("%s\n", all_pass ? "verification passed" : "verification FAILED");
    return all_pass ? 0 : 1;
}

int run_bench(const std::vector<std::string>& mechanisms, std::vector<int64_t> channels, int64_t reps,
              int64_t token_cap, uint64_t seed, const std::string& out) {
    if (channels.empty()) channels = {10, 50, 100, 200};
    const std::string out_dir = std::filesystem::path(out).parent_path().string();
    json manifest = {
        {"command", "bench"},      {"mechanisms", mechanisms}, {"channels", channels},
        {"reps", reps},            {"token_cap", token_cap},   {"seed", seed},
        {"precision", "f32"},      {"timestamp", timestamp_utc()},
        {"outputs", {out}},
    };
    if (!out_dir.empty()) write_manifest(out_dir, manifest);

    std::vector<lrss::LatencyRow> all_rows;
    std::string summary;
    const lrss::BenchShape shape;
    for (const auto& name : mechanisms) {
        const auto mech = name == "less" ? lrss::Mechanism::kLess : lrss::Mechanism::kDense;
        const auto rows = lrss::measure_latency(mech, channels, reps, shape, token_cap, seed);
        all_rows.insert(all_rows.end(), rows.begin(), rows.end());
        char buf[96];
        try {
            const double expn = lrss::fit_scaling_exponent(rows);
            std::snprintf(buf, sizeof(buf), "%s,exponent,%.4f\n", name.c_str(), expn);
        } catch (const lrss::InsufficientDataError&) {
            std::snprintf(buf, sizeof(buf), "%s,exponent,insufficient-data\n", name.c_str());
        }
        summary += buf;
        for (const auto& r : rows)
            std::printf("%s C=%-4lld %s median=%.6gs (min %.6g, max %.6g) normalized=%.3g\n",
                        r.mechanism.c_str(), static_cast<long long>(r.channels), r.status.c_str(),
                        r.median_s, r.min_s, r.max_s, r.normalized);

        // counted-vs-predicted FLOPs at the largest channel count the
        // mechanism can run
        lrss::ShapeConfig sc;
        sc.n_spatial = shape.n_spatial;
        sc.width = shape.width;
        sc.heads = shape.heads;
        sc.rank = shape.rank;
        sc.d1 = shape.d1;
        sc.d2 = shape.d2;
        sc.n_spectral = 0;
        for (int64_t c : channels)
            if (mech == lrss::Mechanism::kLess || (sc.n_spatial + 1) * (c + 1) <= token_cap)
                sc.n_spectral = std::max(sc.n_spectral, c);
        if (sc.n_spectral > 0) {
            const auto report = lrss::count_flops(sc, mech, seed, token_cap);
            const std::string flops_path =
                (std::filesystem::path(out).parent_path() /
                 (std::filesystem::path(out).stem().string() + "_flops_" + name + ".csv"))
                    .string();
            lrss::write_text_file(flops_path, lrss::flop_report_csv(report));
        }
    }
    lrss::write_text_file(out, lrss::latency_csv(all_rows));
    const std::string expo_path =
        (std::filesystem::path(out).parent_path() / (std::filesystem::path(out).stem().string() + "_exponents.csv"))
            .string();
    lrss::write_text_file(expo_path, "mechanism,metric,value\n" + summary);
    std::fputs(summary.c_str(), stdout);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"low-rank spatial-spectral attention toolkit"};
    app.require_subcommand(1);

    std::string kind = "full", gen_out = "config.csv";
    auto* gen = app.add_subcommand("gen-config", "write a channel configuration file");
    gen->add_option("--kind", kind, "vnir-plus | swir-plus | disjoint | full")->required();
    gen->add_option("--out", gen_out, "output path");

    std::string preset = "toy", precision = "f32", train_out = "runs/toy";
    int64_t steps = 200;
    uint64_t seed = 0;
    double lr = 1e-2;
    auto* pre = app.add_subcommand("pretrain", "masked-autoencoder pretraining on synthetic cubes");
    pre->add_option("--preset", preset, "toy | reference-shape-only");
    pre->add_option("--steps", steps, "training steps");
    pre->add_option("--seed", seed, "run seed");
    pre->add_option("--precision", precision, "f32 | f64")->check(CLI::IsMember({"f32", "f64"}));
    pre->add_option("--lr", lr, "learning rate");
    pre->add_option("--out", train_out, "output directory");

    std::string verify_precision = "f64";
    uint64_t verify_seed = 0;
    auto* ver = app.add_subcommand("verify", "oracle and property checks");
    ver->add_option("--precision", verify_precision, "tolerance profile: f32 | f64")
        ->check(CLI::IsMember({"f32", "f64"}));
    ver->add_option("--seed", verify_seed, "run seed");

    std::vector<std::string> mechanisms = {"less", "dense"};
    std::vector<int64_t> channels;
    int64_t reps = 5, token_cap = lrss::kDefaultTokenCap;
    uint64_t bench_seed = 0;
    std::string bench_out = "bench.csv";
    auto* ben = app.add_subcommand("bench", "latency scaling vs channel count");
    ben->add_option("--mechanisms", mechanisms, "subset of {less, dense}")
        ->check(CLI::IsMember({"less", "dense"}));
    ben->add_option("--channels", channels, "ascending channel counts (default 10 50 100 200)");
    ben->add_option("--reps", reps, "measured repetitions per point");
    ben->add_option("--token-cap", token_cap, "dense flattened-token cap");
    ben->add_option("--seed", bench_seed, "run seed");
    ben->add_option("--out", bench_out, "latency CSV path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) return run_gen_config(kind, gen_out);
        if (pre->parsed()) {
            std::filesystem::create_directories(train_out);
            return precision == "f64" ? run_pretrain<double>(preset, steps, seed, precision, train_out, lr)
                                      : run_pretrain<float>(preset, steps, seed, precision, train_out, lr);
        }
        if (ver->parsed()) return run_verify(verify_precision, verify_seed);
        if (ben->parsed()) return run_bench(mechanisms, channels, reps, token_cap, bench_seed, bench_out);
    } catch (const lrss::NumericError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 3;
    } catch (const lrss::CapacityError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 3;
    } catch (const lrss::ConfigError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 2;
    } catch (const lrss::IoError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 2;
    }
    return 2;
}
