#include "lrss/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "lrss/errors.hpp"

namespace lrss {

namespace {

std::vector<double> linspace(double lo, double hi, int64_t n) {
    std::vector<double> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        out[static_cast<size_t>(i)] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    return out;
}

// Evenly spaced selection of k indices from [0, m): round(j*(m-1)/(k-1)).
// Strictly increasing whenever k <= m.
std::vector<int64_t> evenly_spaced(int64_t m, int64_t k) {
    if (k < 1 || k > m) throw ConfigError("evenly_spaced: k out of range");
    std::vector<int64_t> out(static_cast<size_t>(k));
    if (k == 1) {
        out[0] = 0;
        return out;
    }
    for (int64_t j = 0; j < k; ++j)
        out[static_cast<size_t>(j)] = llround(static_cast<double>(j) * static_cast<double>(m - 1) /
                                              static_cast<double>(k - 1));
    return out;
}

ChannelConfig from_indices(const WavelengthGrid& grid, std::string name, std::vector<int64_t> indices) {
    ChannelConfig cfg;
    cfg.name = std::move(name);
    cfg.indices = std::move(indices);
    for (int64_t i : cfg.indices) {
        if (i < 0 || i >= grid.size()) throw ConfigError("channel index out of grid bounds");
        cfg.wavelengths.push_back(grid.wavelengths[static_cast<size_t>(i)]);
    }
    return cfg;
}

}  // namespace

WavelengthGrid make_reference_grid() {
    WavelengthGrid grid;
    auto vnir = linspace(420.0, 995.0, 100);
    auto swir = linspace(1005.0, 2445.0, 102);
    grid.wavelengths = vnir;
    grid.wavelengths.insert(grid.wavelengths.end(), swir.begin(), swir.end());
    grid.vnir_count = 100;
    grid.swir_count = 102;
    return grid;
}

const char* config_kind_name(ConfigKind kind) {
    switch (kind) {
        case ConfigKind::kVnirPlus: return "C120_VNIR+";
        case ConfigKind::kSwirPlus: return "C120_SWIR+";
        case ConfigKind::kDisjoint: return "C82_disjoint";
        case ConfigKind::kFull: return "C202_full";
        default: return "custom";
    }
}

ChannelConfig make_config(const WavelengthGrid& grid, ConfigKind kind) {
    const int64_t vn = grid.vnir_count, sw = grid.swir_count;
    switch (kind) {
        case ConfigKind::kVnirPlus: {
            auto idx = evenly_spaced(vn, 80);
            for (int64_t j : evenly_spaced(sw, 40)) idx.push_back(vn + j);
            return from_indices(grid, config_kind_name(kind), std::move(idx));
        }
        case ConfigKind::kSwirPlus: {
            auto idx = evenly_spaced(vn, 40);
            for (int64_t j : evenly_spaced(sw, 80)) idx.push_back(vn + j);
            return from_indices(grid, config_kind_name(kind), std::move(idx));
        }
        case ConfigKind::kDisjoint: {
            ChannelConfig base = make_config(grid, ConfigKind::kVnirPlus);
            ChannelConfig out = complement_config(grid, base);
            out.name = config_kind_name(kind);
            return out;
        }
        case ConfigKind::kFull: {
            std::vector<int64_t> idx(static_cast<size_t>(grid.size()));
            for (int64_t i = 0; i < grid.size(); ++i) idx[static_cast<size_t>(i)] = i;
            return from_indices(grid, config_kind_name(kind), std::move(idx));
        }
        default:
            throw ConfigError("make_config: unknown kind");
    }
}

ChannelConfig complement_config(const WavelengthGrid& grid, const ChannelConfig& base) {
    std::set<int64_t> taken;
    for (int64_t i : base.indices) {
        if (i < 0 || i >= grid.size()) throw ConfigError("complement_config: base index out of bounds");
        taken.insert(i);
    }
    std::vector<int64_t> idx;
    for (int64_t i = 0; i < grid.size(); ++i)
        if (!taken.count(i)) idx.push_back(i);
    return from_indices(grid, "complement(" + base.name + ")", std::move(idx));
}

std::string config_to_text(const ChannelConfig& config) {
    std::ostringstream os;
    os << config.name << "," << config.size() << "\n";
    char buf[64];
    for (int64_t i = 0; i < config.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%lld,%.17g\n",
                      static_cast<long long>(config.indices[static_cast<size_t>(i)]),
                      config.wavelengths[static_cast<size_t>(i)]);
        os << buf;
    }
    return os.str();
}

ChannelConfig config_from_text(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line)) throw IoError("config text: missing header");
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw IoError("config text: malformed header");
    ChannelConfig cfg;
    cfg.name = line.substr(0, comma);
    const long long count = std::atoll(line.c_str() + comma + 1);
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto c2 = line.find(',');
        if (c2 == std::string::npos) throw IoError("config text: malformed row");
        cfg.indices.push_back(std::atoll(line.substr(0, c2).c_str()));
        cfg.wavelengths.push_back(std::strtod(line.c_str() + c2 + 1, nullptr));
    }
    if (static_cast<long long>(cfg.size()) != count)
        throw IoError("config text: row count does not match header");
    return cfg;
}

void write_config_file(const ChannelConfig& config, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw IoError("cannot open " + tmp + " for writing");
        os << config_to_text(config);
        if (!os) throw IoError("short write to " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename " + tmp + " -> " + path + ": " + ec.message());
}

ChannelConfig read_config_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return config_from_text(os.str());
}

}  // namespace lrss
