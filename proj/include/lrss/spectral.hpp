#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lrss/rng.hpp"
#include "lrss/tensor.hpp"

namespace lrss {

constexpr double kVnirSwirSplitNm = 1000.0;

// Ordered list of band centers in nanometers, split into VNIR (< 1000 nm)
// and SWIR (>= 1000 nm) regions.
struct WavelengthGrid {
    std::vector<double> wavelengths;
    int64_t vnir_count = 0;
    int64_t swir_count = 0;

    int64_t size() const { return static_cast<int64_t>(wavelengths.size()); }
};

enum class ConfigKind { kVnirPlus, kSwirPlus, kDisjoint, kFull, kCustom };

// An ordered wavelength/index subset emulating one sensor design.
struct ChannelConfig {
    std::string name;
    std::vector<int64_t> indices;     // strictly increasing grid indices
    std::vector<double> wavelengths;  // matching band centers, nm

    int64_t size() const { return static_cast<int64_t>(indices.size()); }
};

// Synthetic grid standing in for a 202-band VNIR+SWIR sensor: 100 bands
// linearly spaced over [420, 995] nm and 102 over [1005, 2445] nm.
WavelengthGrid make_reference_grid();

const char* config_kind_name(ConfigKind kind);

// Named channel subsets built by evenly spaced index selection within each
// spectral region: index j of k chosen from m is round(j*(m-1)/(k-1)).
ChannelConfig make_config(const WavelengthGrid& grid, ConfigKind kind);

// All grid indices not present in `base`, sorted.
ChannelConfig complement_config(const WavelengthGrid& grid, const ChannelConfig& base);

// Line-oriented text format: header `name,count`, then `index,wavelength_nm`
// per channel. Wavelengths round-trip bit-exactly.
std::string config_to_text(const ChannelConfig& config);
ChannelConfig config_from_text(const std::string& text);
void write_config_file(const ChannelConfig& config, const std::string& path);
ChannelConfig read_config_file(const std::string& path);

// ---------------------------------------------------------------------------
// Synthetic cubes
// ---------------------------------------------------------------------------

// Synthetic hyperspectral image: values C x H x W with per-channel band
// centers. Channels are normalized to zero mean / unit variance.
template <typename T>
struct HyperCube {
    Tensor<T> values;  // C x H x W
    std::vector<double> wavelengths;
    uint64_t seed = 0;

    int64_t channels() const { return values.dim(0); }
    int64_t height() const { return values.dim(1); }
    int64_t width() const { return values.dim(2); }

    // Channel subset by position list; wavelengths follow.
    HyperCube restricted(const std::vector<int64_t>& channel_ids) const {
        HyperCube out;
        out.seed = seed;
        out.values = Tensor<T>({static_cast<int64_t>(channel_ids.size()), height(), width()});
        const int64_t hw = height() * width();
        for (size_t i = 0; i < channel_ids.size(); ++i) {
            const int64_t c = channel_ids[i];
            out.wavelengths.push_back(wavelengths[static_cast<size_t>(c)]);
            for (int64_t p = 0; p < hw; ++p)
                out.values[static_cast<int64_t>(i) * hw + p] = values[c * hw + p];
        }
        return out;
    }
};

// Sum of smooth spatial blobs, each carrying a Gaussian-in-wavelength
// spectral signature, plus small noise; deterministic per seed.
template <typename T>
HyperCube<T> synth_cube(const std::vector<double>& wavelengths, int64_t height, int64_t width,
                        uint64_t seed) {
    const int64_t channels = static_cast<int64_t>(wavelengths.size());
    if (channels < 1 || height < 1 || width < 1) throw ConfigError("synth_cube: empty extent");
    HyperCube<T> cube;
    cube.seed = seed;
    cube.wavelengths = wavelengths;
    cube.values = Tensor<T>({channels, height, width});

    Rng rng(mix_seed(seed, 0x5c0be5));
    const int num_blobs = 8;
    struct Blob {
        double cy, cx, sigma_sp, center_nm, sigma_nm, amp;
    };
    std::vector<Blob> blobs;
    const double lo = wavelengths.front(), hi = wavelengths.back();
    for (int b = 0; b < num_blobs; ++b) {
        Blob bl;
        bl.cy = rng.uniform(0.0, static_cast<double>(height - 1));
        bl.cx = rng.uniform(0.0, static_cast<double>(width - 1));
        bl.sigma_sp = rng.uniform(0.25, 0.55) * static_cast<double>(std::max(height, width));
        bl.center_nm = rng.uniform(lo, hi);
        bl.sigma_nm = rng.uniform(0.1, 0.35) * (hi - lo + 1.0);
        bl.amp = rng.uniform(0.5, 1.5) * (rng.uniform01() < 0.5 ? -1.0 : 1.0);
        blobs.push_back(bl);
    }
    // Two planar ramps with smooth spectral weights keep within-patch
    // structure coherent across the image, so reconstruction is learnable.
    struct Ramp {
        double gx, gy, center_nm, sigma_nm, amp;
    };
    std::vector<Ramp> ramps;
    for (int r = 0; r < 2; ++r) {
        Ramp rp;
        const double phi = rng.uniform(0.0, 6.283185307179586);
        rp.gx = std::cos(phi) / static_cast<double>(width);
        rp.gy = std::sin(phi) / static_cast<double>(height);
        rp.center_nm = rng.uniform(lo, hi);
        rp.sigma_nm = rng.uniform(0.2, 0.5) * (hi - lo + 1.0);
        rp.amp = rng.uniform(0.8, 1.6) * (rng.uniform01() < 0.5 ? -1.0 : 1.0);
        ramps.push_back(rp);
    }

    const int64_t hw = height * width;
    for (int64_t c = 0; c < channels; ++c) {
        const double lam = wavelengths[static_cast<size_t>(c)];
        for (int64_t y = 0; y < height; ++y)
            for (int64_t x = 0; x < width; ++x) {
                double v = 0.0;
                for (const Blob& bl : blobs) {
                    const double dy = (static_cast<double>(y) - bl.cy) / bl.sigma_sp;
                    const double dx = (static_cast<double>(x) - bl.cx) / bl.sigma_sp;
                    const double dl = (lam - bl.center_nm) / bl.sigma_nm;
                    v += bl.amp * std::exp(-0.5 * (dy * dy + dx * dx)) * std::exp(-0.5 * dl * dl);
                }
                for (const Ramp& rp : ramps) {
                    const double dl = (lam - rp.center_nm) / rp.sigma_nm;
                    v += rp.amp * (rp.gx * static_cast<double>(x) + rp.gy * static_cast<double>(y)) *
                         std::exp(-0.5 * dl * dl);
                }
                v += 0.005 * rng.normal();
                cube.values[c * hw + y * width + x] = static_cast<T>(v);
            }
    }

    // Per-channel normalization to zero mean / unit variance.
    for (int64_t c = 0; c < channels; ++c) {
        T* p = cube.values.data() + c * hw;
        double mean = 0.0;
        for (int64_t i = 0; i < hw; ++i) mean += static_cast<double>(p[i]);
        mean /= static_cast<double>(hw);
        double var = 0.0;
        for (int64_t i = 0; i < hw; ++i) {
            const double d = static_cast<double>(p[i]) - mean;
            var += d * d;
        }
        var /= static_cast<double>(hw);
        const double inv = 1.0 / std::sqrt(var + 1e-12);
        for (int64_t i = 0; i < hw; ++i)
            p[i] = static_cast<T>((static_cast<double>(p[i]) - mean) * inv);
    }
    return cube;
}

}  // namespace lrss
