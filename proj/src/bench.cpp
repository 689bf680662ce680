#include "lrss/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace lrss {

namespace {

// Synthetic token grid for instrumented forwards: N patches laid out in one
// row, channels evenly spread over the reference wavelength span.
TokenGrid<float> bench_grid(int64_t n_spatial, int64_t channels, int64_t width, uint64_t seed) {
    if (n_spatial < 1) throw ConfigError("bench grid: need at least one spatial patch");
    if (channels < 1) throw ConfigError("bench grid: need at least one channel");
    TokenGrid<float> grid;
    grid.meta.n_spatial = n_spatial;
    grid.meta.n_spectral = channels;
    grid.meta.width = width;
    for (int64_t n = 0; n < n_spatial; ++n) grid.meta.coords.emplace_back(0, n);
    for (int64_t c = 0; c < channels; ++c)
        grid.meta.wavelengths.push_back(420.0 + 2025.0 * static_cast<double>(c) /
                                                    static_cast<double>(std::max<int64_t>(channels - 1, 1)));
    Rng rng(mix_seed(seed, 0xbe4c4));
    grid.tokens = Tensor<float>::randn({n_spatial + 1, channels + 1, width}, rng);
    return grid;
}

struct BenchModels {
    LessBlockParams<float> less;
    DenseAttentionParams<float> dense;
};

BenchModels bench_models(const ShapeConfig& cfg, uint64_t seed) {
    Rng rng(mix_seed(seed, 0x9a4a));
    BenchModels m{LessBlockParams<float>::init(cfg.width, cfg.heads, cfg.rank, cfg.d1, cfg.d2, rng),
                  DenseAttentionParams<float>::init(cfg.width, cfg.heads, rng)};
    return m;
}

}  // namespace

FlopReport count_flops(const ShapeConfig& config, Mechanism mechanism, uint64_t seed, int64_t token_cap) {
    if (config.n_spatial < 1) throw ConfigError("count_flops: need N >= 1 spatial patches");
    FlopReport report;
    report.config = config;
    report.mechanism = mechanism;
    const auto grid = bench_grid(config.n_spatial, config.n_spectral, config.width, seed);
    const auto models = bench_models(config, seed);
    FlopCounter fc;
    std::vector<FlopLabel> labels;
    if (mechanism == Mechanism::kLess) {
        RopeConfig rope;
        rope.d_s = config.d1;
        rope.d_c = config.d2;
        less_attention_values(grid, models.less, rope, &fc);
        labels = {FlopLabel::kPool, FlopLabel::kSpatial, FlopLabel::kSpectral, FlopLabel::kCompose,
                  FlopLabel::kProj};
    } else {
        full_ss_attention_values(grid, models.dense, token_cap, &fc);
        labels = {FlopLabel::kDense, FlopLabel::kDenseProj};
    }
    for (FlopLabel l : labels) {
        FlopReportRow row;
        row.label = flop_label_name(l);
        row.counted = fc.labeled(l);
        row.predicted = predicted_flops(config, l);
        row.match = row.counted == row.predicted;
        report.rows.push_back(row);
    }
    return report;
}

std::vector<LatencyRow> measure_latency(Mechanism mechanism, const std::vector<int64_t>& channel_counts,
                                        int64_t reps, const BenchShape& shape, int64_t token_cap,
                                        uint64_t seed) {
    if (reps < 5) throw ConfigError("measure_latency: need at least 5 measured repetitions");
    for (size_t i = 1; i < channel_counts.size(); ++i)
        if (channel_counts[i] <= channel_counts[i - 1])
            throw ConfigError("measure_latency: channel counts must be ascending");

    ShapeConfig cfg;
    cfg.n_spatial = shape.n_spatial;
    cfg.width = shape.width;
    cfg.heads = shape.heads;
    cfg.rank = shape.rank;
    cfg.d1 = shape.d1;
    cfg.d2 = shape.d2;

    std::vector<LatencyRow> rows;
    double first_ok_median = 0.0;
    for (int64_t c : channel_counts) {
        cfg.n_spectral = c;
        LatencyRow row;
        row.mechanism = mechanism_name(mechanism);
        row.channels = c;
        const auto grid = bench_grid(cfg.n_spatial, c, cfg.width, mix_seed(seed, static_cast<uint64_t>(c)));
        const auto models = bench_models(cfg, seed);
        RopeConfig rope;
        rope.d_s = cfg.d1;
        rope.d_c = cfg.d2;
        try {
            auto run_once = [&]() {
                if (mechanism == Mechanism::kLess)
                    less_attention_values(grid, models.less, rope);
                else
                    full_ss_attention_values(grid, models.dense, token_cap);
            };
            for (int64_t w = 0; w < shape.warmup; ++w) run_once();
            std::vector<double> times;
            for (int64_t r = 0; r < reps; ++r) {
                const auto t0 = std::chrono::steady_clock::now();
                run_once();
                const auto t1 = std::chrono::steady_clock::now();
                times.push_back(std::chrono::duration<double>(t1 - t0).count());
            }
            std::sort(times.begin(), times.end());
            row.reps = reps;
            row.median_s = times[times.size() / 2];
            row.min_s = times.front();
            row.max_s = times.back();
            if (first_ok_median == 0.0) first_ok_median = row.median_s;
            row.normalized = row.median_s / first_ok_median;
            row.status = "ok";
        } catch (const CapacityError&) {
            row.reps = 0;
            row.median_s = std::nan("");
            row.min_s = std::nan("");
            row.max_s = std::nan("");
            row.normalized = std::nan("");
            row.status = "capacity-exceeded";
        }
        rows.push_back(row);
    }
    return rows;
}

double fit_scaling_exponent(const std::vector<LatencyRow>& rows) {
    std::vector<std::pair<double, double>> pts;
    for (const auto& row : rows)
        if (row.status == "ok") pts.emplace_back(std::log(static_cast<double>(row.channels)), std::log(row.median_s));
    if (pts.size() < 3) throw InsufficientDataError("fit_scaling_exponent: need >= 3 ok rows");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (auto [x, y] : pts) {
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    const double n = static_cast<double>(pts.size());
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

std::string latency_csv(const std::vector<LatencyRow>& rows) {
    std::ostringstream os;
    os << "mechanism,C,reps,median_s,normalized,status\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%lld,%lld,%.9g,%.9g,%s\n", r.mechanism.c_str(),
                      static_cast<long long>(r.channels), static_cast<long long>(r.reps), r.median_s,
                      r.normalized, r.status.c_str());
        os << buf;
    }
    return os.str();
}

std::string flop_report_csv(const FlopReport& report) {
    std::ostringstream os;
    os << "label,counted,predicted,match\n";
    char buf[160];
    for (const auto& r : report.rows) {
        std::snprintf(buf, sizeof(buf), "%s,%lld,%lld,%s\n", r.label.c_str(),
                      static_cast<long long>(r.counted), static_cast<long long>(r.predicted),
                      r.match ? "true" : "false");
        os << buf;
    }
    return os.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw IoError("cannot open " + tmp + " for writing");
        os << content;
        if (!os) throw IoError("short write to " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename " + tmp + " -> " + path + ": " + ec.message());
}

}  // namespace lrss
