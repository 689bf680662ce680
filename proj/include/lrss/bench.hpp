#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lrss/attention.hpp"

namespace lrss {

enum class Mechanism { kLess, kDense };

inline const char* mechanism_name(Mechanism m) { return m == Mechanism::kLess ? "less" : "dense"; }

// Counted-vs-predicted FLOPs of one instrumented forward.
struct FlopReportRow {
    std::string label;
    int64_t counted = 0;
    int64_t predicted = 0;
    bool match = false;
};

struct FlopReport {
    ShapeConfig config;
    Mechanism mechanism = Mechanism::kLess;
    std::vector<FlopReportRow> rows;

    bool all_match() const {
        for (const auto& r : rows)
            if (!r.match) return false;
        return true;
    }
    int64_t counted(const std::string& label) const {
        for (const auto& r : rows)
            if (r.label == label) return r.counted;
        return 0;
    }
};

// Runs one instrumented forward on random data and compares the counted
// matmul FLOPs per label against the closed forms.
FlopReport count_flops(const ShapeConfig& config, Mechanism mechanism, uint64_t seed = 0,
                       int64_t token_cap = kDefaultTokenCap);

struct LatencyRow {
    std::string mechanism;
    int64_t channels = 0;
    int64_t reps = 0;
    double median_s = 0.0;
    double min_s = 0.0;
    double max_s = 0.0;
    double normalized = 0.0;
    std::string status;  // ok | capacity-exceeded
};

// Fixed-N forward shape swept over channel counts.
struct BenchShape {
    int64_t n_spatial = 16;
    int64_t width = 64;
    int64_t heads = 4;
    int64_t rank = 1;
    int64_t d1 = 8;
    int64_t d2 = 2;
    int64_t warmup = 3;
};

// Median wall time over `reps` measured runs (after warm-up) per channel
// count, normalized to the first row. A dense run past the token cap yields
// a capacity-exceeded row instead of failing the sweep.
std::vector<LatencyRow> measure_latency(Mechanism mechanism, const std::vector<int64_t>& channel_counts,
                                        int64_t reps, const BenchShape& shape,
                                        int64_t token_cap = kDefaultTokenCap, uint64_t seed = 0);

// Least-squares slope of log(median) vs log(C) over ok rows.
double fit_scaling_exponent(const std::vector<LatencyRow>& rows);

// CSV surfaces. Headers are part of the interface:
//   latency: mechanism,C,reps,median_s,normalized,status
//   flops:   label,counted,predicted,match
std::string latency_csv(const std::vector<LatencyRow>& rows);
std::string flop_report_csv(const FlopReport& report);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace lrss
