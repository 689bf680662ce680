#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "lrss/errors.hpp"
#include "lrss/tensor.hpp"

namespace lrss {

// Axial rotary embedding configuration. Spatial coordinates (u, v) each get
// half of the spatial branch; the spectral branch rotates by physical
// wavelength. Wavelengths are scaled to micrometers before phase computation
// so the lowest frequency stays in a sane range.
struct RopeConfig {
    double base_spatial = 10000.0;
    double base_spectral = 100.0;
    double lambda_scale = 1e-3;  // nm -> phase domain (micrometers)
    int64_t d_s = 0;             // spatial branch width per head, divisible by 4
    int64_t d_c = 0;             // spectral branch width per head, divisible by 2

    void validate() const {
        if (d_s <= 0 || d_s % 4 != 0) throw ConfigError("RopeConfig: d_s must be positive and divisible by 4");
        if (d_c <= 0 || d_c % 2 != 0) throw ConfigError("RopeConfig: d_c must be positive and divisible by 2");
        if (base_spatial <= 1.0 || base_spectral <= 1.0) throw ConfigError("RopeConfig: bases must exceed 1");
    }
};

// theta(position, i) = position / base^(2i / d_axis), i < d_axis/2.
inline double rope_phase(double position, int64_t i, double base, int64_t d_axis) {
    return position / std::pow(base, 2.0 * static_cast<double>(i) / static_cast<double>(d_axis));
}

// Rotates pairs (x[2i], x[2i+1]) of every row by angles[i].
template <typename T>
Tensor<T> rotate_pairs(const Tensor<T>& x, const std::vector<T>& angles) {
    if (x.rank() < 1) throw ShapeError("rotate_pairs expects rank >= 1");
    const int64_t w = x.dim(x.rank() - 1);
    if (w % 2 != 0) throw ShapeError("rotate_pairs needs an even last extent");
    if (static_cast<int64_t>(angles.size()) != w / 2) throw ShapeError("rotate_pairs angle count mismatch");
    Tensor<T> y = x;
    const int64_t rows = x.size() / w;
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t i = 0; i < w / 2; ++i) {
            const T c = std::cos(angles[static_cast<size_t>(i)]);
            const T s = std::sin(angles[static_cast<size_t>(i)]);
            const T u = x[r * w + 2 * i], v = x[r * w + 2 * i + 1];
            y[r * w + 2 * i] = u * c - v * s;
            y[r * w + 2 * i + 1] = u * s + v * c;
        }
    return y;
}

// Phase table for the spatial branch: row 0 (the CLS entry) is all zeros,
// row n >= 1 carries pair phases for coords[n-1]. The first d_s/4 pairs
// rotate by u, the second d_s/4 by v; each axis spans frequencies
// base^(2i / (d_s/2)).
template <typename T>
Tensor<T> spatial_phase_table(const std::vector<std::pair<int64_t, int64_t>>& coords,
                              const RopeConfig& cfg) {
    cfg.validate();
    const int64_t pairs = cfg.d_s / 2;
    const int64_t per_axis = cfg.d_s / 4;
    Tensor<T> table({static_cast<int64_t>(coords.size()) + 1, pairs});
    for (size_t t = 0; t < coords.size(); ++t) {
        const auto [u, v] = coords[t];
        for (int64_t i = 0; i < per_axis; ++i) {
            table.at2(static_cast<int64_t>(t) + 1, i) =
                static_cast<T>(rope_phase(static_cast<double>(u), i, cfg.base_spatial, cfg.d_s / 2));
            table.at2(static_cast<int64_t>(t) + 1, per_axis + i) =
                static_cast<T>(rope_phase(static_cast<double>(v), i, cfg.base_spatial, cfg.d_s / 2));
        }
    }
    return table;
}

// Phase table for the spectral branch: row 0 zeros (CLS), row c >= 1 uses the
// scaled wavelength of channel c-1 over d_c/2 pair frequencies.
template <typename T>
Tensor<T> spectral_phase_table(const std::vector<double>& wavelengths_nm, const RopeConfig& cfg) {
    cfg.validate();
    const int64_t pairs = cfg.d_c / 2;
    Tensor<T> table({static_cast<int64_t>(wavelengths_nm.size()) + 1, pairs});
    for (size_t c = 0; c < wavelengths_nm.size(); ++c) {
        const double lam = wavelengths_nm[c] * cfg.lambda_scale;
        for (int64_t i = 0; i < pairs; ++i)
            table.at2(static_cast<int64_t>(c) + 1, i) =
                static_cast<T>(rope_phase(lam, i, cfg.base_spectral, cfg.d_c));
    }
    return table;
}

template <typename T>
Tensor<T> rotate_by_table(const Tensor<T>& x, const Tensor<T>& table) {
    if (x.rank() != 2 || x.dim(0) != table.dim(0) || x.dim(1) != 2 * table.dim(1))
        throw ShapeError("rotate_by_table shape mismatch");
    Tensor<T> y = x;
    for (int64_t r = 0; r < x.dim(0); ++r)
        for (int64_t i = 0; i < table.dim(1); ++i) {
            const T c = std::cos(table.at2(r, i));
            const T s = std::sin(table.at2(r, i));
            const T u = x.at2(r, 2 * i), v = x.at2(r, 2 * i + 1);
            y.at2(r, 2 * i) = u * c - v * s;
            y.at2(r, 2 * i + 1) = u * s + v * c;
        }
    return y;
}

// Rotary transform of spatial-branch queries/keys: (N+1) x d_s, CLS row
// passes through unchanged.
template <typename T>
Tensor<T> apply_spatial(const Tensor<T>& qk, const std::vector<std::pair<int64_t, int64_t>>& coords,
                        const RopeConfig& cfg) {
    if (qk.rank() != 2 || qk.dim(1) != cfg.d_s) throw ShapeError("apply_spatial width mismatch");
    if (qk.dim(0) != static_cast<int64_t>(coords.size()) + 1)
        throw ShapeError("apply_spatial token count mismatch");
    return rotate_by_table(qk, spatial_phase_table<T>(coords, cfg));
}

// Rotary transform of spectral-branch queries/keys: (C+1) x d_c, CLS row
// passes through unchanged.
template <typename T>
Tensor<T> apply_spectral(const Tensor<T>& qk, const std::vector<double>& wavelengths_nm,
                         const RopeConfig& cfg) {
    if (qk.rank() != 2 || qk.dim(1) != cfg.d_c) throw ShapeError("apply_spectral width mismatch");
    if (qk.dim(0) != static_cast<int64_t>(wavelengths_nm.size()) + 1)
        throw ShapeError("apply_spectral token count mismatch");
    return rotate_by_table(qk, spectral_phase_table<T>(wavelengths_nm, cfg));
}

// Precomputed tables for one forward pass; shared read-only by all blocks
// operating on the same grid.
template <typename T>
struct RopeContext {
    RopeConfig config;
    std::shared_ptr<const Tensor<T>> spatial;   // (N+1) x d_s/2
    std::shared_ptr<const Tensor<T>> spectral;  // (C+1) x d_c/2
};

template <typename T>
RopeContext<T> make_rope_context(const std::vector<std::pair<int64_t, int64_t>>& coords,
                                 const std::vector<double>& wavelengths_nm, const RopeConfig& cfg) {
    RopeContext<T> ctx;
    ctx.config = cfg;
    ctx.spatial = std::make_shared<const Tensor<T>>(spatial_phase_table<T>(coords, cfg));
    ctx.spectral = std::make_shared<const Tensor<T>>(spectral_phase_table<T>(wavelengths_nm, cfg));
    return ctx;
}

}  // namespace lrss
