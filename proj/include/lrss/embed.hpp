#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lrss/autodiff.hpp"
#include "lrss/spectral.hpp"
#include "lrss/tensor.hpp"

namespace lrss {

// Index metadata for a CLS-augmented token grid. Grid rows are stored
// n-major: row_of(n, c) = n * (C+1) + c, with index 0 on each axis being the
// CLS entry. coords/wavelengths cover only non-CLS indices.
struct GridMeta {
    int64_t n_spatial = 0;   // N, non-CLS spatial positions
    int64_t n_spectral = 0;  // C, non-CLS channels
    int64_t width = 0;       // D
    std::vector<std::pair<int64_t, int64_t>> coords;  // (u, v) per spatial index
    std::vector<double> wavelengths;                  // nm per channel

    int64_t rows() const { return (n_spatial + 1) * (n_spectral + 1); }
    int64_t row_of(int64_t n, int64_t c) const { return n * (n_spectral + 1) + c; }
};

// Patch-grid coordinates for N = (H/P)*(W/P) patches, rows then columns.
inline std::vector<std::pair<int64_t, int64_t>> patch_coords(int64_t height, int64_t width, int64_t patch) {
    std::vector<std::pair<int64_t, int64_t>> coords;
    for (int64_t u = 0; u < height / patch; ++u)
        for (int64_t v = 0; v < width / patch; ++v) coords.emplace_back(u, v);
    return coords;
}

// The (N+1) x (C+1) x D token array with its metadata.
template <typename T>
struct TokenGrid {
    Tensor<T> tokens;
    GridMeta meta;
};

// Tied patch embedding: one P^2 x D projection shared by every channel, plus
// the three learnable CLS vectors.
template <typename T>
struct EmbedParams {
    Tensor<T> proj;  // P^2 x D
    Tensor<T> bias;
    Tensor<T> cls_spatial;
    Tensor<T> cls_spectral;
    Tensor<T> cls_global;

    int64_t patch_area() const { return proj.dim(0); }
    int64_t width() const { return proj.dim(1); }

    static EmbedParams init(int64_t patch, int64_t width, Rng& rng, T gain = T(1)) {
        EmbedParams p;
        p.proj = Tensor<T>::randn({patch * patch, width}, rng,
                                  gain / std::sqrt(static_cast<T>(patch * patch)));
        p.bias = Tensor<T>::zeros({width});
        p.cls_spatial = Tensor<T>::randn({width}, rng, T(0.5));
        p.cls_spectral = Tensor<T>::randn({width}, rng, T(0.5));
        p.cls_global = Tensor<T>::randn({width}, rng, T(0.5));
        return p;
    }

    std::vector<std::pair<std::string, Tensor<T>*>> named_params(const std::string& prefix) {
        return {{prefix + ".proj", &proj},
                {prefix + ".bias", &bias},
                {prefix + ".cls_spatial", &cls_spatial},
                {prefix + ".cls_spectral", &cls_spectral},
                {prefix + ".cls_global", &cls_global}};
    }
};

// Splits a cube into N x C x P^2 patches. Patch (n, c) is the P x P window
// of channel c at spatial index n = pu * (W/P) + pv, flattened row-major.
template <typename T>
Tensor<T> patchify(const HyperCube<T>& cube, int64_t patch) {
    const int64_t c_n = cube.channels(), h = cube.height(), w = cube.width();
    if (patch < 1 || h % patch != 0 || w % patch != 0)
        throw ShapeError("patchify: height/width not divisible by patch size");
    const int64_t ph = h / patch, pw = w / patch;
    const int64_t n = ph * pw;
    Tensor<T> out({n, c_n, patch * patch});
    for (int64_t pu = 0; pu < ph; ++pu)
        for (int64_t pv = 0; pv < pw; ++pv) {
            const int64_t np = pu * pw + pv;
            for (int64_t c = 0; c < c_n; ++c)
                for (int64_t i = 0; i < patch; ++i)
                    for (int64_t j = 0; j < patch; ++j)
                        out.at3(np, c, i * patch + j) =
                            cube.values.at3(c, pu * patch + i, pv * patch + j);
        }
    return out;
}

// Tape embedding of patch rows ((N*C) x P^2, n-major) into token rows
// ((N*C) x D). The same projection applies to every (n, c).
template <typename T>
typename Graph<T>::Var embed_rows(Graph<T>& g, typename Graph<T>::Var patch_rows,
                                  const EmbedParams<T>& params) {
    if (g.value(patch_rows).dim(1) != params.patch_area())
        throw ShapeError("embed: patch area does not match projection");
    auto proj = g.param(&params.proj);
    auto bias = g.param(&params.bias);
    return g.add_rowvec(g.matmul(patch_rows, proj, FlopLabel::kEmbed), bias);
}

// Tape CLS augmentation: wraps assemble_grid and carries grid metadata.
template <typename T>
struct GridVar {
    typename Graph<T>::Var tokens;  // rows() x D
    GridMeta meta;
};

template <typename T>
GridVar<T> augment_cls_rows(Graph<T>& g, typename Graph<T>::Var token_rows, const EmbedParams<T>& params,
                            std::vector<std::pair<int64_t, int64_t>> coords, std::vector<double> wavelengths) {
    GridMeta meta;
    meta.n_spatial = static_cast<int64_t>(coords.size());
    meta.n_spectral = static_cast<int64_t>(wavelengths.size());
    meta.width = params.width();
    meta.coords = std::move(coords);
    meta.wavelengths = std::move(wavelengths);
    if (g.value(token_rows).dim(0) != meta.n_spatial * meta.n_spectral)
        throw ShapeError("augment_cls: token count does not match coords x wavelengths");
    auto grid = g.assemble_grid(token_rows, g.param(&params.cls_spatial), g.param(&params.cls_spectral),
                                g.param(&params.cls_global), meta.n_spatial, meta.n_spectral);
    return GridVar<T>{grid, std::move(meta)};
}

// Value-level embedding of N x C x P^2 patches.
template <typename T>
Tensor<T> embed(const Tensor<T>& patches, const EmbedParams<T>& params) {
    if (patches.rank() != 3 || patches.dim(2) != params.patch_area())
        throw ShapeError("embed expects N x C x P^2 patches");
    Graph<T> g;
    auto rows = g.constant(patches.reshaped({patches.dim(0) * patches.dim(1), patches.dim(2)}));
    auto out = embed_rows(g, rows, params);
    return g.value(out).reshaped({patches.dim(0), patches.dim(1), params.width()});
}

// Value-level CLS augmentation producing the (N+1) x (C+1) x D grid.
template <typename T>
TokenGrid<T> augment_cls(const Tensor<T>& tokens, const EmbedParams<T>& params,
                         std::vector<std::pair<int64_t, int64_t>> coords, std::vector<double> wavelengths) {
    if (tokens.rank() != 3) throw ShapeError("augment_cls expects N x C x D tokens");
    Graph<T> g;
    auto rows = g.constant(tokens.reshaped({tokens.dim(0) * tokens.dim(1), tokens.dim(2)}));
    auto grid = augment_cls_rows(g, rows, params, std::move(coords), std::move(wavelengths));
    TokenGrid<T> out;
    out.meta = grid.meta;
    out.tokens = g.value(grid.tokens)
                     .reshaped({out.meta.n_spatial + 1, out.meta.n_spectral + 1, out.meta.width});
    return out;
}

}  // namespace lrss
