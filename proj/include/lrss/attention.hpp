#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "lrss/autodiff.hpp"
#include "lrss/embed.hpp"
#include "lrss/rope.hpp"
#include "lrss/tensor.hpp"

namespace lrss {

constexpr int64_t kDefaultTokenCap = 20000;

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

// Single-query pooling stage of one head for one axis: project queries, keys
// and values to the per-head width, attend, then project to the branch
// sub-dimension.
template <typename T>
struct PoolParams {
    Tensor<T> w_q;  // D x d_head
    Tensor<T> w_k;
    Tensor<T> w_v;
    Tensor<T> w_d;  // d_head x d_branch
};

// Per-rank Q/K/V maps of one branch of one head.
template <typename T>
struct BranchParams {
    Tensor<T> w_q;  // d x d
    Tensor<T> w_k;
    Tensor<T> w_v;
};

// All learnable state of one factorized attention block. The factorization
// is per head: d1 * d2 == D / H, with d1 devoted to the spatial branch and
// d2 to the spectral branch. Pooling maps are per head and shared across
// ranks; branch maps are per head and per rank.
template <typename T>
struct LessBlockParams {
    int64_t width = 0;  // D
    int64_t heads = 0;  // H
    int64_t rank = 1;   // Kronecker terms
    int64_t d1 = 0;     // spatial sub-dimension per head
    int64_t d2 = 0;     // spectral sub-dimension per head

    std::vector<PoolParams<T>> pool_spatial;   // per head; yields (N+1) x d1 spatial tokens
    std::vector<PoolParams<T>> pool_spectral;  // per head; yields (C+1) x d2 spectral tokens
    std::vector<std::vector<BranchParams<T>>> branch_spatial;   // [head][rank]
    std::vector<std::vector<BranchParams<T>>> branch_spectral;  // [head][rank]
    Tensor<T> w_out;  // D x D
    Tensor<T> ln1_gamma, ln1_beta;
    Tensor<T> ln2_gamma, ln2_beta;
    Tensor<T> mlp_w1, mlp_b1;  // D x 4D
    Tensor<T> mlp_w2, mlp_b2;  // 4D x D

    int64_t d_head() const { return width / heads; }

    void validate() const {
        if (width < 1 || heads < 1 || width % heads != 0)
            throw ConfigError("LessBlockParams: width must be a positive multiple of heads");
        if (d1 * d2 != width / heads)
            throw ConfigError("LessBlockParams: d1*d2 must equal the per-head width");
        if (d1 % 4 != 0) throw ConfigError("LessBlockParams: d1 must be divisible by 4");
        if (d2 % 2 != 0) throw ConfigError("LessBlockParams: d2 must be divisible by 2");
        if (rank < 1) throw ConfigError("LessBlockParams: rank must be >= 1");
    }

    // gain scales the fan-in initialization (std = gain / sqrt(fan_in));
    // unit-variance propagation matters here because the composed output is a
    // product of branch activations.
    static LessBlockParams init(int64_t width, int64_t heads, int64_t rank, int64_t d1, int64_t d2,
                                Rng& rng, T gain = T(1)) {
        LessBlockParams p;
        p.width = width;
        p.heads = heads;
        p.rank = rank;
        p.d1 = d1;
        p.d2 = d2;
        p.validate();
        const int64_t dh = p.d_head();
        auto mat = [&](int64_t rows, int64_t cols) {
            return Tensor<T>::randn({rows, cols}, rng, gain / std::sqrt(static_cast<T>(rows)));
        };
        for (int64_t h = 0; h < heads; ++h) {
            p.pool_spatial.push_back(PoolParams<T>{mat(width, dh), mat(width, dh), mat(width, dh), mat(dh, d1)});
            p.pool_spectral.push_back(PoolParams<T>{mat(width, dh), mat(width, dh), mat(width, dh), mat(dh, d2)});
            std::vector<BranchParams<T>> bs, bc;
            for (int64_t r = 0; r < rank; ++r) {
                bs.push_back({mat(d1, d1), mat(d1, d1), mat(d1, d1)});
                bc.push_back({mat(d2, d2), mat(d2, d2), mat(d2, d2)});
            }
            p.branch_spatial.push_back(std::move(bs));
            p.branch_spectral.push_back(std::move(bc));
        }
        p.w_out = mat(width, width);
        p.ln1_gamma = Tensor<T>::full({width}, T(1));
        p.ln1_beta = Tensor<T>::zeros({width});
        p.ln2_gamma = Tensor<T>::full({width}, T(1));
        p.ln2_beta = Tensor<T>::zeros({width});
        p.mlp_w1 = mat(width, 4 * width);
        p.mlp_b1 = Tensor<T>::zeros({4 * width});
        p.mlp_w2 = mat(4 * width, width);
        p.mlp_b2 = Tensor<T>::zeros({width});
        return p;
    }

    std::vector<std::pair<std::string, Tensor<T>*>> named_params(const std::string& prefix) {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        auto add_pool = [&](const std::string& tag, std::vector<PoolParams<T>>& pool) {
            for (size_t h = 0; h < pool.size(); ++h) {
                const std::string base = prefix + "." + tag + ".h" + std::to_string(h);
                out.emplace_back(base + ".w_q", &pool[h].w_q);
                out.emplace_back(base + ".w_k", &pool[h].w_k);
                out.emplace_back(base + ".w_v", &pool[h].w_v);
                out.emplace_back(base + ".w_d", &pool[h].w_d);
            }
        };
        auto add_branch = [&](const std::string& tag, std::vector<std::vector<BranchParams<T>>>& br) {
            for (size_t h = 0; h < br.size(); ++h)
                for (size_t r = 0; r < br[h].size(); ++r) {
                    const std::string base =
                        prefix + "." + tag + ".h" + std::to_string(h) + ".r" + std::to_string(r);
                    out.emplace_back(base + ".w_q", &br[h][r].w_q);
                    out.emplace_back(base + ".w_k", &br[h][r].w_k);
                    out.emplace_back(base + ".w_v", &br[h][r].w_v);
                }
        };
        add_pool("pool_spatial", pool_spatial);
        add_pool("pool_spectral", pool_spectral);
        add_branch("branch_spatial", branch_spatial);
        add_branch("branch_spectral", branch_spectral);
        out.emplace_back(prefix + ".w_out", &w_out);
        out.emplace_back(prefix + ".ln1_gamma", &ln1_gamma);
        out.emplace_back(prefix + ".ln1_beta", &ln1_beta);
        out.emplace_back(prefix + ".ln2_gamma", &ln2_gamma);
        out.emplace_back(prefix + ".ln2_beta", &ln2_beta);
        out.emplace_back(prefix + ".mlp_w1", &mlp_w1);
        out.emplace_back(prefix + ".mlp_b1", &mlp_b1);
        out.emplace_back(prefix + ".mlp_w2", &mlp_w2);
        out.emplace_back(prefix + ".mlp_b2", &mlp_b2);
        return out;
    }
};

// ---------------------------------------------------------------------------
// Pooling and branch attention
// ---------------------------------------------------------------------------

enum class PoolAxis {
    kSpatialTokens,   // pool the spectral axis; one token per spatial index
    kSpectralTokens,  // pool the spatial axis; one token per channel index
};

inline std::shared_ptr<const GroupIndex> pool_groups(const GridMeta& meta, PoolAxis axis) {
    auto gi = std::make_shared<GroupIndex>();
    const int64_t cols = meta.n_spectral + 1;
    if (axis == PoolAxis::kSpatialTokens) {
        gi->groups = meta.n_spatial + 1;
        gi->group_size = cols;
        for (int64_t n = 0; n <= meta.n_spatial; ++n)
            for (int64_t c = 0; c < cols; ++c) gi->rows.push_back(n * cols + c);
    } else {
        gi->groups = cols;
        gi->group_size = meta.n_spatial + 1;
        for (int64_t c = 0; c < cols; ++c)
            for (int64_t n = 0; n <= meta.n_spatial; ++n) gi->rows.push_back(n * cols + c);
    }
    return gi;
}

// Rows holding the query CLS token of each group: the axis CLS at index 0.
inline std::shared_ptr<const std::vector<int64_t>> pool_query_rows(const GridMeta& meta, PoolAxis axis) {
    auto rows = std::make_shared<std::vector<int64_t>>();
    const int64_t cols = meta.n_spectral + 1;
    if (axis == PoolAxis::kSpatialTokens) {
        for (int64_t n = 0; n <= meta.n_spatial; ++n) rows->push_back(n * cols);
    } else {
        for (int64_t c = 0; c < cols; ++c) rows->push_back(c);
    }
    return rows;
}

// Collapses one grid axis with single-query attention, using that axis's CLS
// entry as the query, then projects to the branch sub-dimension.
template <typename T>
typename Graph<T>::Var atten_pool(Graph<T>& g, typename Graph<T>::Var grid_rows, const GridMeta& meta,
                                  PoolAxis axis, const PoolParams<T>& params,
                                  Tensor<T>* attn_out = nullptr) {
    const int64_t dh = params.w_q.dim(1);
    if (params.w_q.dim(0) != meta.width) throw ShapeError("atten_pool width mismatch");
    if (params.w_d.dim(0) != dh) throw ConfigError("atten_pool: w_d incompatible with head layout");
    auto cls = g.gather_rows(grid_rows, pool_query_rows(meta, axis));
    auto q = g.matmul(cls, g.param(&params.w_q), FlopLabel::kPool);
    auto k = g.matmul(grid_rows, g.param(&params.w_k), FlopLabel::kPool);
    auto v = g.matmul(grid_rows, g.param(&params.w_v), FlopLabel::kPool);
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    auto pooled = g.pooled_attention(q, k, v, pool_groups(meta, axis), scale, FlopLabel::kPool, attn_out);
    return g.matmul(pooled, g.param(&params.w_d), FlopLabel::kPool);
}

// Factor tensors of one (head, rank) branch pair, exposed for oracle tests.
template <typename T>
struct BranchDebug {
    Tensor<T> attn;    // G x G row-stochastic
    Tensor<T> values;  // G x d (not rotated)
    Tensor<T> out;     // G x d
};

template <typename T>
struct LessAttnDebug {
    std::vector<Tensor<T>> pooled_spatial;                // per head, (N+1) x d1
    std::vector<Tensor<T>> pooled_spectral;               // per head, (C+1) x d2
    std::vector<std::vector<BranchDebug<T>>> spatial;     // [head][rank]
    std::vector<std::vector<BranchDebug<T>>> spectral;    // [head][rank]
    Tensor<T> composed;                                   // rows x D, before w_out
};

// Sum of per-rank compositions: out[n*(C+1)+c, i*d2+j] = sum_r ys_r[n,i] * yc_r[c,j].
template <typename T>
typename Graph<T>::Var kron_compose(Graph<T>& g, const std::vector<typename Graph<T>::Var>& ys,
                                    const std::vector<typename Graph<T>::Var>& yc,
                                    FlopLabel label = FlopLabel::kCompose) {
    if (ys.empty() || ys.size() != yc.size())
        throw ShapeError("kron_compose needs matching per-rank factor lists");
    typename Graph<T>::Var out;
    for (size_t r = 0; r < ys.size(); ++r) {
        auto term = g.kron_pair(ys[r], yc[r], label);
        out = (r == 0) ? term : g.add(out, term);
    }
    return out;
}

// Scaled dot-product attention over one pooled token list. Rotary phases are
// applied to Q and K only; row 0 (CLS) has zero phase. Returns (A, Y).
template <typename T>
std::pair<typename Graph<T>::Var, typename Graph<T>::Var> branch_attention(
    Graph<T>& g, typename Graph<T>::Var tokens, const BranchParams<T>& params,
    std::shared_ptr<const Tensor<T>> phases, FlopLabel label) {
    const int64_t d = g.value(tokens).dim(1);
    if (params.w_q.dim(0) != d) throw ShapeError("branch_attention width mismatch");
    auto q = g.matmul(tokens, g.param(&params.w_q), FlopLabel::kProj);
    auto k = g.matmul(tokens, g.param(&params.w_k), FlopLabel::kProj);
    auto v = g.matmul(tokens, g.param(&params.w_v), FlopLabel::kProj);
    q = g.rotate_pairs(q, phases);
    k = g.rotate_pairs(k, phases);
    auto scores = g.scale(g.matmul_nt(q, k, label), T(1) / std::sqrt(static_cast<T>(d)));
    auto attn = g.softmax_rows(scores);
    auto out = g.matmul(attn, v, label);
    return {attn, out};
}

// ---------------------------------------------------------------------------
// Factorized attention
// ---------------------------------------------------------------------------

// Full factorized attention over the augmented grid: per head, pool both
// axes, run per-rank branch attention, compose the branch outputs, then
// concatenate heads and apply the output projection.
template <typename T>
typename Graph<T>::Var less_attention(Graph<T>& g, typename Graph<T>::Var grid_rows, const GridMeta& meta,
                                      const LessBlockParams<T>& params, const RopeContext<T>& rope,
                                      LessAttnDebug<T>* debug = nullptr) {
    params.validate();
    if (meta.width != params.width) throw ShapeError("less_attention grid width mismatch");
    if (params.rank > std::min(meta.n_spatial + 1, meta.n_spectral + 1))
        throw ConfigError("less_attention: rank exceeds min(N+1, C+1)");
    if (rope.config.d_s != params.d1 || rope.config.d_c != params.d2)
        throw ConfigError("less_attention: rope context widths do not match (d1, d2)");

    std::vector<typename Graph<T>::Var> head_outputs;
    for (int64_t h = 0; h < params.heads; ++h) {
        auto xs = atten_pool(g, grid_rows, meta, PoolAxis::kSpatialTokens,
                             params.pool_spatial[static_cast<size_t>(h)]);
        auto xc = atten_pool(g, grid_rows, meta, PoolAxis::kSpectralTokens,
                             params.pool_spectral[static_cast<size_t>(h)]);
        if (debug) {
            debug->pooled_spatial.push_back(g.value(xs));
            debug->pooled_spectral.push_back(g.value(xc));
            debug->spatial.emplace_back();
            debug->spectral.emplace_back();
        }
        std::vector<typename Graph<T>::Var> y_s_ranks, y_c_ranks;
        for (int64_t r = 0; r < params.rank; ++r) {
            auto [attn_s, y_s] = branch_attention(g, xs, params.branch_spatial[static_cast<size_t>(h)][static_cast<size_t>(r)],
                                                  rope.spatial, FlopLabel::kSpatial);
            auto [attn_c, y_c] = branch_attention(g, xc, params.branch_spectral[static_cast<size_t>(h)][static_cast<size_t>(r)],
                                                  rope.spectral, FlopLabel::kSpectral);
            if (debug) {
                debug->spatial.back().push_back(
                    {g.value(attn_s),
                     lrss::matmul(g.value(xs), params.branch_spatial[static_cast<size_t>(h)][static_cast<size_t>(r)].w_v),
                     g.value(y_s)});
                debug->spectral.back().push_back(
                    {g.value(attn_c),
                     lrss::matmul(g.value(xc), params.branch_spectral[static_cast<size_t>(h)][static_cast<size_t>(r)].w_v),
                     g.value(y_c)});
            }
            y_s_ranks.push_back(y_s);
            y_c_ranks.push_back(y_c);
        }
        head_outputs.push_back(kron_compose(g, y_s_ranks, y_c_ranks));
    }
    auto composed = params.heads == 1 ? head_outputs[0] : g.concat_cols(head_outputs);
    if (debug) debug->composed = g.value(composed);
    return g.matmul(composed, g.param(&params.w_out), FlopLabel::kProj);
}

// Pre-norm residual block: x + attention(norm(x)), then x + MLP(norm(x)).
// Grid metadata passes through unchanged.
template <typename T>
GridVar<T> less_block(Graph<T>& g, const GridVar<T>& grid, const LessBlockParams<T>& params,
                      const RopeContext<T>& rope) {
    auto normed = g.layer_norm(grid.tokens, g.param(&params.ln1_gamma), g.param(&params.ln1_beta));
    auto attn = less_attention(g, normed, grid.meta, params, rope);
    auto x1 = g.add(grid.tokens, attn);
    auto normed2 = g.layer_norm(x1, g.param(&params.ln2_gamma), g.param(&params.ln2_beta));
    auto hidden = g.gelu(g.add_rowvec(g.matmul(normed2, g.param(&params.mlp_w1), FlopLabel::kMlp),
                                      g.param(&params.mlp_b1)));
    auto mlp = g.add_rowvec(g.matmul(hidden, g.param(&params.mlp_w2), FlopLabel::kMlp),
                            g.param(&params.mlp_b2));
    return GridVar<T>{g.add(x1, mlp), grid.meta};
}

// ---------------------------------------------------------------------------
// Dense oracle
// ---------------------------------------------------------------------------

// Standard multi-head attention over every flattened grid token; the O(T^2)
// reference that the factorized path is checked and benchmarked against.
template <typename T>
struct DenseAttentionParams {
    int64_t width = 0;
    int64_t heads = 0;
    Tensor<T> w_q, w_k, w_v, w_out;  // D x D

    void validate() const {
        if (width < 1 || heads < 1 || width % heads != 0)
            throw ConfigError("DenseAttentionParams: width must be a positive multiple of heads");
    }

    static DenseAttentionParams init(int64_t width, int64_t heads, Rng& rng, T gain = T(1)) {
        DenseAttentionParams p;
        p.width = width;
        p.heads = heads;
        p.validate();
        const T std_dev = gain / std::sqrt(static_cast<T>(width));
        p.w_q = Tensor<T>::randn({width, width}, rng, std_dev);
        p.w_k = Tensor<T>::randn({width, width}, rng, std_dev);
        p.w_v = Tensor<T>::randn({width, width}, rng, std_dev);
        p.w_out = Tensor<T>::randn({width, width}, rng, std_dev);
        return p;
    }
};

template <typename T>
struct DenseDebug {
    std::vector<Tensor<T>> attn;  // per head, T x T
};

template <typename T>
typename Graph<T>::Var full_ss_attention(Graph<T>& g, typename Graph<T>::Var grid_rows,
                                         const GridMeta& meta, const DenseAttentionParams<T>& params,
                                         int64_t token_cap = kDefaultTokenCap,
                                         DenseDebug<T>* debug = nullptr) {
    params.validate();
    if (meta.width != params.width) throw ShapeError("full_ss_attention grid width mismatch");
    const int64_t tokens = meta.rows();
    if (tokens > token_cap)
        throw CapacityError("full_ss_attention: " + std::to_string(tokens) + " tokens exceed cap of " +
                            std::to_string(token_cap));
    auto q = g.matmul(grid_rows, g.param(&params.w_q), FlopLabel::kDenseProj);
    auto k = g.matmul(grid_rows, g.param(&params.w_k), FlopLabel::kDenseProj);
    auto v = g.matmul(grid_rows, g.param(&params.w_v), FlopLabel::kDenseProj);
    const int64_t dh = params.width / params.heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<typename Graph<T>::Var> heads;
    for (int64_t h = 0; h < params.heads; ++h) {
        auto qh = g.slice_cols(q, h * dh, dh);
        auto kh = g.slice_cols(k, h * dh, dh);
        auto vh = g.slice_cols(v, h * dh, dh);
        auto attn = g.softmax_rows(g.scale(g.matmul_nt(qh, kh, FlopLabel::kDense), scale));
        if (debug) debug->attn.push_back(g.value(attn));
        heads.push_back(g.matmul(attn, vh, FlopLabel::kDense));
    }
    auto cat = params.heads == 1 ? heads[0] : g.concat_cols(heads);
    return g.matmul(cat, g.param(&params.w_out), FlopLabel::kDenseProj);
}

// ---------------------------------------------------------------------------
// Value-level wrappers
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> less_attention_values(const TokenGrid<T>& grid, const LessBlockParams<T>& params,
                                const RopeConfig& rope_cfg, FlopCounter* fc = nullptr,
                                LessAttnDebug<T>* debug = nullptr) {
    Graph<T> g(fc);
    auto rows = g.constant(grid.tokens.reshaped({grid.meta.rows(), grid.meta.width}));
    auto rope = make_rope_context<T>(grid.meta.coords, grid.meta.wavelengths, rope_cfg);
    auto out = less_attention(g, rows, grid.meta, params, rope, debug);
    return g.value(out).reshaped(grid.tokens.shape());
}

template <typename T>
Tensor<T> less_block_values(const TokenGrid<T>& grid, const LessBlockParams<T>& params,
                            const RopeConfig& rope_cfg, FlopCounter* fc = nullptr) {
    Graph<T> g(fc);
    auto rows = g.constant(grid.tokens.reshaped({grid.meta.rows(), grid.meta.width}));
    auto rope = make_rope_context<T>(grid.meta.coords, grid.meta.wavelengths, rope_cfg);
    auto out = less_block(g, GridVar<T>{rows, grid.meta}, params, rope);
    return g.value(out.tokens).reshaped(grid.tokens.shape());
}

template <typename T>
Tensor<T> full_ss_attention_values(const TokenGrid<T>& grid, const DenseAttentionParams<T>& params,
                                   int64_t token_cap = kDefaultTokenCap, FlopCounter* fc = nullptr,
                                   DenseDebug<T>* debug = nullptr) {
    Graph<T> g(fc);
    auto rows = g.constant(grid.tokens.reshaped({grid.meta.rows(), grid.meta.width}));
    auto out = full_ss_attention(g, rows, grid.meta, params, token_cap, debug);
    return g.value(out).reshaped(grid.tokens.shape());
}

// ---------------------------------------------------------------------------
// FLOP closed forms (matmul labels only)
// ---------------------------------------------------------------------------

struct ShapeConfig {
    int64_t n_spatial = 0;   // N
    int64_t n_spectral = 0;  // C
    int64_t width = 0;       // D
    int64_t heads = 0;       // H
    int64_t rank = 1;
    int64_t d1 = 0;
    int64_t d2 = 0;

    int64_t grid_rows() const { return (n_spatial + 1) * (n_spectral + 1); }
};

inline int64_t predicted_flops(const ShapeConfig& c, FlopLabel label) {
    const int64_t gs = c.n_spatial + 1, gc = c.n_spectral + 1;
    const int64_t t = gs * gc, d = c.width, h = c.heads, r = c.rank;
    switch (label) {
        case FlopLabel::kPool:
            // Q/K/V projections, grouped attention, branch projections.
            return 2 * (gs + gc) * d * d + 8 * t * d * d + 8 * t * d +
                   2 * d * (gs * c.d1 + gc * c.d2);
        case FlopLabel::kSpatial:
            return 4 * r * h * gs * gs * c.d1;
        case FlopLabel::kSpectral:
            return 4 * r * h * gc * gc * c.d2;
        case FlopLabel::kCompose:
            return 2 * r * t * d;
        case FlopLabel::kProj:
            return 6 * r * h * (gs * c.d1 * c.d1 + gc * c.d2 * c.d2) + 2 * t * d * d;
        case FlopLabel::kDense:
            return 4 * t * t * d;
        case FlopLabel::kDenseProj:
            return 8 * t * d * d;
        default:
            return 0;
    }
}

}  // namespace lrss
