#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "lrss/attention.hpp"
#include "lrss/verify.hpp"

using namespace lrss;

namespace {

template <typename T>
TokenGrid<T> random_grid(int64_t n, int64_t c, int64_t width, Rng& rng) {
    TokenGrid<T> grid;
    grid.meta.n_spatial = n;
    grid.meta.n_spectral = c;
    grid.meta.width = width;
    for (int64_t i = 0; i < n; ++i) grid.meta.coords.emplace_back(i / 4, i % 4);
    for (int64_t i = 0; i < c; ++i)
        grid.meta.wavelengths.push_back(500.0 + 200.0 * static_cast<double>(i));
    grid.tokens = Tensor<T>::randn({n + 1, c + 1, width}, rng);
    return grid;
}

RopeConfig rope_for(int64_t d1, int64_t d2) {
    RopeConfig cfg;
    cfg.d_s = d1;
    cfg.d_c = d2;
    return cfg;
}

}  // namespace

TEST_CASE("atten_pool normalizes and stays convex") {
    Rng rng(0);
    // C == 1 real channel: each spatial row pools over 2 entries
    auto grid = random_grid<double>(2, 1, 8, rng);
    const auto params = LessBlockParams<double>::init(8, 1, 1, 4, 2, rng);

    Graph<double> g;
    auto rows = g.constant(grid.tokens.reshaped({grid.meta.rows(), 8}));
    Tensor<double> attn;
    auto pooled = atten_pool(g, rows, grid.meta, PoolAxis::kSpatialTokens, params.pool_spatial[0], &attn);
    CHECK(g.value(pooled).shape() == std::vector<int64_t>{3, 4});
    REQUIRE(attn.shape() == std::vector<int64_t>{3, 2});
    for (int64_t r = 0; r < 3; ++r) {
        double sum = 0;
        for (int64_t s = 0; s < 2; ++s) {
            CHECK(attn.at2(r, s) >= 0.0);
            sum += attn.at2(r, s);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("atten_pool of identical tokens ignores the weights") {
    Rng rng(1);
    auto grid = random_grid<double>(2, 3, 8, rng);
    // make every token of each spatial row identical
    for (int64_t n = 0; n <= 2; ++n)
        for (int64_t c = 1; c <= 3; ++c)
            for (int64_t j = 0; j < 8; ++j) grid.tokens.at3(n, c, j) = grid.tokens.at3(n, 0, j);
    const auto params = LessBlockParams<double>::init(8, 1, 1, 4, 2, rng);

    Graph<double> g;
    auto rows = g.constant(grid.tokens.reshaped({grid.meta.rows(), 8}));
    auto pooled = atten_pool(g, rows, grid.meta, PoolAxis::kSpatialTokens, params.pool_spatial[0]);
    // pooled == project(v(token)) for the shared token of each row
    for (int64_t n = 0; n <= 2; ++n) {
        Tensor<double> tok({1, 8});
        for (int64_t j = 0; j < 8; ++j) tok.at2(0, j) = grid.tokens.at3(n, 0, j);
        const auto expect = matmul(matmul(tok, params.pool_spatial[0].w_v), params.pool_spatial[0].w_d);
        for (int64_t j = 0; j < 4; ++j)
            CHECK(g.value(pooled).at2(n, j) == doctest::Approx(expect.at2(0, j)).epsilon(1e-10));
    }
}

TEST_CASE("atten_pool against an explicit loop") {
    Rng rng(2);
    auto grid = random_grid<double>(2, 2, 4, rng);
    PoolParams<double> pool{Tensor<double>::randn({4, 4}, rng, 0.7), Tensor<double>::randn({4, 4}, rng, 0.7),
                            Tensor<double>::randn({4, 4}, rng, 0.7), Tensor<double>::randn({4, 1}, rng, 0.7)};

    Graph<double> g;
    auto rows = g.constant(grid.tokens.reshaped({9, 4}));
    auto pooled = atten_pool(g, rows, grid.meta, PoolAxis::kSpectralTokens, pool);

    const auto& p = pool;
    const int64_t dh = p.w_q.dim(1);
    const Tensor<double> x = grid.tokens.reshaped({9, 4});
    for (int64_t c = 0; c <= 2; ++c) {
        // query: grid[0, c]; keys/values: grid[:, c]
        std::vector<double> q(static_cast<size_t>(dh));
        for (int64_t j = 0; j < dh; ++j)
            for (int64_t k = 0; k < 4; ++k) q[static_cast<size_t>(j)] += x.at2(c, k) * p.w_q.at2(k, j);
        std::vector<double> scores(3), weights(3);
        for (int64_t n = 0; n <= 2; ++n) {
            double acc = 0;
            for (int64_t j = 0; j < dh; ++j) {
                double kj = 0;
                for (int64_t k = 0; k < 4; ++k) kj += x.at2(n * 3 + c, k) * p.w_k.at2(k, j);
                acc += q[static_cast<size_t>(j)] * kj;
            }
            scores[static_cast<size_t>(n)] = acc / std::sqrt(static_cast<double>(dh));
        }
        const double mx = std::max({scores[0], scores[1], scores[2]});
        double z = 0;
        for (int64_t n = 0; n <= 2; ++n) z += std::exp(scores[static_cast<size_t>(n)] - mx);
        for (int64_t n = 0; n <= 2; ++n) weights[static_cast<size_t>(n)] = std::exp(scores[static_cast<size_t>(n)] - mx) / z;
        for (int64_t d = 0; d < 1; ++d) {
            double out = 0;
            for (int64_t j = 0; j < dh; ++j) {
                double av = 0;
                for (int64_t n = 0; n <= 2; ++n) {
                    double vj = 0;
                    for (int64_t k = 0; k < 4; ++k) vj += x.at2(n * 3 + c, k) * p.w_v.at2(k, j);
                    av += weights[static_cast<size_t>(n)] * vj;
                }
                out += av * p.w_d.at2(j, d);
            }
            CHECK(g.value(pooled).at2(c, d) == doctest::Approx(out).epsilon(1e-10));
        }
    }
}

TEST_CASE("branch attention on a single token") {
    Rng rng(3);
    const auto params = LessBlockParams<double>::init(8, 1, 1, 4, 2, rng);
    Graph<double> g;
    auto tokens = g.constant(Tensor<double>::randn({1, 4}, rng));
    auto phases = std::make_shared<const Tensor<double>>(Tensor<double>::zeros({1, 2}));
    auto [attn, out] = branch_attention(g, tokens, params.branch_spatial[0][0], phases, FlopLabel::kSpatial);
    CHECK(g.value(attn).size() == 1);
    CHECK(g.value(attn)[0] == doctest::Approx(1.0));
    const auto v = matmul(g.value(tokens), params.branch_spatial[0][0].w_v);
    CHECK(max_abs_diff(g.value(out), v) < 1e-12);
}

TEST_CASE("identical tokens at identical positions attend uniformly") {
    Rng rng(4);
    const auto params = LessBlockParams<double>::init(8, 1, 1, 4, 2, rng);
    Graph<double> g;
    Tensor<double> same({5, 4});
    const auto one = Tensor<double>::randn({4}, rng);
    for (int64_t r = 0; r < 5; ++r)
        for (int64_t j = 0; j < 4; ++j) same.at2(r, j) = one[j];
    auto tokens = g.constant(same);
    auto phases = std::make_shared<const Tensor<double>>(Tensor<double>::zeros({5, 2}));
    auto [attn, out] = branch_attention(g, tokens, params.branch_spatial[0][0], phases, FlopLabel::kSpatial);
    for (int64_t r = 0; r < 5; ++r)
        for (int64_t s = 0; s < 5; ++s) CHECK(g.value(attn).at2(r, s) == doctest::Approx(0.2).epsilon(1e-9));
}

TEST_CASE("branch attention against a dense computation") {
    Rng rng(5);
    const auto params = LessBlockParams<double>::init(8, 1, 1, 4, 2, rng, 0.8);
    std::vector<std::pair<int64_t, int64_t>> coords = {{0, 0}, {1, 2}, {3, 1}};
    const auto cfg = rope_for(4, 2);
    const auto x = Tensor<double>::randn({4, 4}, rng);

    Graph<double> g;
    auto tokens = g.leaf(&x, false);
    auto phases = std::make_shared<const Tensor<double>>(spatial_phase_table<double>(coords, cfg));
    auto [attn, out] = branch_attention(g, tokens, params.branch_spatial[0][0], phases, FlopLabel::kSpatial);

    const auto& b = params.branch_spatial[0][0];
    const auto q = apply_spatial(matmul(x, b.w_q), coords, cfg);
    const auto k = apply_spatial(matmul(x, b.w_k), coords, cfg);
    const auto v = matmul(x, b.w_v);
    const auto a = softmax_rows(scale(matmul_nt(q, k), 1.0 / 2.0));
    CHECK(max_abs_diff(g.value(attn), a) < 1e-12);
    CHECK(max_abs_diff(g.value(out), matmul(a, v)) < 1e-12);
}

TEST_CASE("kron_pair degenerate and outer-product cases") {
    Rng rng(6);
    Graph<double> g;
    // d1 == 1, ys all ones: out[n*nc + c, j] == yc[c, j]
    auto ys = g.constant(Tensor<double>::full({3, 1}, 1.0));
    auto yc = g.constant(Tensor<double>::randn({2, 2}, rng));
    auto out = g.kron_pair(ys, yc);
    CHECK(g.value(out).shape() == std::vector<int64_t>{6, 2});
    for (int64_t n = 0; n < 3; ++n)
        for (int64_t c = 0; c < 2; ++c)
            for (int64_t j = 0; j < 2; ++j) CHECK(g.value(out).at2(n * 2 + c, j) == g.value(yc).at2(c, j));

    // d1 == d2 == 1: plain outer product
    auto s1 = g.constant(Tensor<double>::randn({4, 1}, rng));
    auto c1 = g.constant(Tensor<double>::randn({3, 1}, rng));
    auto o1 = g.kron_pair(s1, c1);
    for (int64_t n = 0; n < 4; ++n)
        for (int64_t c = 0; c < 3; ++c)
            CHECK(g.value(o1).at2(n * 3 + c, 0) ==
                  doctest::Approx(g.value(s1).at2(n, 0) * g.value(c1).at2(c, 0)));
}

TEST_CASE("rank-2 composition equals the sum of materialized products") {
    Rng rng(7);
    Graph<double> g;
    const int64_t ns = 3, nc = 2, d1 = 2, d2 = 2;
    std::vector<Tensor<double>> ys, yc;
    std::vector<Graph<double>::Var> vs, vc;
    for (int r = 0; r < 2; ++r) {
        ys.push_back(Tensor<double>::randn({ns, d1}, rng));
        yc.push_back(Tensor<double>::randn({nc, d2}, rng));
        vs.push_back(g.constant(ys.back()));
        vc.push_back(g.constant(yc.back()));
    }
    auto acc = kron_compose(g, vs, vc);
    for (int64_t n = 0; n < ns; ++n)
        for (int64_t c = 0; c < nc; ++c)
            for (int64_t i = 0; i < d1; ++i)
                for (int64_t j = 0; j < d2; ++j) {
                    double expect = 0;
                    for (int r = 0; r < 2; ++r) expect += ys[r].at2(n, i) * yc[r].at2(c, j);
                    // kron(yc, ys) holds the same number at [c*ns + n, j*d1 + i]
                    double via_kron = 0;
                    for (int r = 0; r < 2; ++r) via_kron += kron(yc[r], ys[r]).at2(c * ns + n, j * d1 + i);
                    CHECK(expect == doctest::Approx(via_kron).epsilon(1e-12));
                    CHECK(g.value(acc).at2(n * nc + c, i * d2 + j) == doctest::Approx(expect).epsilon(1e-12));
                }
}

TEST_CASE("factorized attention preserves the grid shape") {
    Rng rng(8);
    auto grid = random_grid<float>(4, 3, 16, rng);
    const auto params = LessBlockParams<float>::init(16, 2, 1, 4, 2, rng);
    const auto out = less_attention_values(grid, params, rope_for(4, 2));
    CHECK(out.shape() == grid.tokens.shape());
}

TEST_CASE("rank-1 factorization identity on random small grids") {
    // r = 1, one head: composed output must equal the materialized
    // (A_C (x) A_S)(V_C (x) V_S) under the spatial-major index convention.
    Rng rng(9);
    for (int trial = 0; trial < 12; ++trial) {
        const int64_t n = 1 + static_cast<int64_t>(rng.below(7));
        const int64_t c = 1 + static_cast<int64_t>(rng.below(5));
        auto grid = random_grid<double>(n, c, 8, rng);
        const auto params = LessBlockParams<double>::init(8, 1, 1, 4, 2, rng, 0.6);
        LessAttnDebug<double> dbg;
        less_attention_values(grid, params, rope_for(4, 2), nullptr, &dbg);
        const auto m = matmul(kron(dbg.spectral[0][0].attn, dbg.spatial[0][0].attn),
                              kron(dbg.spectral[0][0].values, dbg.spatial[0][0].values));
        double worst = 0;
        for (int64_t nn = 0; nn <= n; ++nn)
            for (int64_t cc = 0; cc <= c; ++cc)
                for (int64_t i = 0; i < 4; ++i)
                    for (int64_t j = 0; j < 2; ++j)
                        worst = std::max(worst, std::abs(dbg.composed.at2(nn * (c + 1) + cc, i * 2 + j) -
                                                         m.at2(cc * (n + 1) + nn, j * 4 + i)));
        CHECK(worst < 1e-10);
    }
}

TEST_CASE("attention rows in the factors are stochastic") {
    Rng rng(10);
    auto grid = random_grid<double>(3, 4, 8, rng);
    const auto params = LessBlockParams<double>::init(8, 1, 2, 4, 2, rng);
    LessAttnDebug<double> dbg;
    less_attention_values(grid, params, rope_for(4, 2), nullptr, &dbg);
    for (const auto& per_head : {dbg.spatial, dbg.spectral})
        for (const auto& per_rank : per_head)
            for (const auto& branch : per_rank)
                for (int64_t r = 0; r < branch.attn.dim(0); ++r) {
                    double sum = 0;
                    for (int64_t s = 0; s < branch.attn.dim(1); ++s) sum += branch.attn.at2(r, s);
                    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
                }
}

TEST_CASE("flop labels match the closed forms") {
    const ShapeConfig cfgs[] = {
        {4, 3, 16, 2, 1, 4, 2},
        {6, 5, 8, 1, 2, 4, 2},
        {16, 15, 64, 4, 1, 8, 2},
    };
    for (const auto& sc : cfgs) {
        Rng rng(1);
        TokenGrid<float> grid;
        grid.meta.n_spatial = sc.n_spatial;
        grid.meta.n_spectral = sc.n_spectral;
        grid.meta.width = sc.width;
        for (int64_t i = 0; i < sc.n_spatial; ++i) grid.meta.coords.emplace_back(0, i);
        for (int64_t i = 0; i < sc.n_spectral; ++i) grid.meta.wavelengths.push_back(600.0 + i);
        grid.tokens = Tensor<float>::randn({sc.n_spatial + 1, sc.n_spectral + 1, sc.width}, rng);

        const auto params = LessBlockParams<float>::init(sc.width, sc.heads, sc.rank, sc.d1, sc.d2, rng);
        FlopCounter fc;
        less_attention_values(grid, params, rope_for(sc.d1, sc.d2), &fc);
        CHECK(fc.labeled(FlopLabel::kPool) == predicted_flops(sc, FlopLabel::kPool));
        CHECK(fc.labeled(FlopLabel::kSpatial) == predicted_flops(sc, FlopLabel::kSpatial));
        CHECK(fc.labeled(FlopLabel::kSpectral) == predicted_flops(sc, FlopLabel::kSpectral));
        CHECK(fc.labeled(FlopLabel::kCompose) == predicted_flops(sc, FlopLabel::kCompose));
        CHECK(fc.labeled(FlopLabel::kProj) == predicted_flops(sc, FlopLabel::kProj));

        const auto dense = DenseAttentionParams<float>::init(sc.width, sc.heads, rng);
        FlopCounter fd;
        full_ss_attention_values(grid, dense, kDefaultTokenCap, &fd);
        CHECK(fd.labeled(FlopLabel::kDense) == predicted_flops(sc, FlopLabel::kDense));
        CHECK(fd.labeled(FlopLabel::kDenseProj) == predicted_flops(sc, FlopLabel::kDenseProj));
    }
}

TEST_CASE("zero output projections make the block an identity") {
    Rng rng(11);
    auto grid = random_grid<double>(3, 2, 8, rng);
    auto params = LessBlockParams<double>::init(8, 1, 1, 4, 2, rng);
    params.w_out = Tensor<double>::zeros({8, 8});
    params.mlp_w2 = Tensor<double>::zeros({32, 8});
    const auto out = less_block_values(grid, params, rope_for(4, 2));
    CHECK(max_abs_diff(out, grid.tokens) < 1e-12);
}

TEST_CASE("block passes grid metadata through unchanged") {
    Rng rng(12);
    auto grid = random_grid<float>(4, 3, 8, rng);
    const auto params = LessBlockParams<float>::init(8, 1, 1, 4, 2, rng);
    Graph<float> g;
    auto rows = g.constant(grid.tokens.reshaped({grid.meta.rows(), 8}));
    const auto rope = make_rope_context<float>(grid.meta.coords, grid.meta.wavelengths, rope_for(4, 2));
    const auto out = less_block(g, GridVar<float>{rows, grid.meta}, params, rope);
    CHECK(out.meta.coords == grid.meta.coords);
    CHECK(out.meta.wavelengths == grid.meta.wavelengths);
    CHECK(out.meta.n_spatial == grid.meta.n_spatial);
    CHECK(g.value(out.tokens).all_finite());
}

TEST_CASE("block gradient w.r.t. an input token passes the oracle") {
    // 2 x 2 x 8 toy grid, scalar readout, 64-bit
    Rng rng(13);
    auto grid = random_grid<double>(2, 2, 8, rng);
    const auto params = LessBlockParams<double>::init(8, 1, 1, 4, 2, rng);
    const auto rope_cfg = rope_for(4, 2);
    auto w = std::make_shared<const Tensor<double>>(Tensor<double>::randn({9, 8}, rng));
    const Tensor<double> x = grid.tokens.reshaped({9, 8});

    auto f = [&](const Tensor<double>& probe) {
        Graph<double> g;
        auto rows = g.leaf(&probe, false);
        const auto rope = make_rope_context<double>(grid.meta.coords, grid.meta.wavelengths, rope_cfg);
        auto out = less_block(g, GridVar<double>{rows, grid.meta}, params, rope);
        double acc = 0;
        const auto& yv = g.value(out.tokens);
        for (int64_t i = 0; i < yv.size(); ++i) acc += yv[i] * (*w)[i];
        return acc;
    };

    Graph<double> g;
    auto rows = g.leaf(&x);
    const auto rope = make_rope_context<double>(grid.meta.coords, grid.meta.wavelengths, rope_cfg);
    auto out = less_block(g, GridVar<double>{rows, grid.meta}, params, rope);
    auto readout = g.weighted_sum(out.tokens, w);
    g.backward(readout);
    CHECK(grad_check<double>(f, x, g.grad(rows), 1e-5) < 1e-4);
}

TEST_CASE("block output stays finite for large bounded inputs") {
    Rng rng(20);
    auto grid = random_grid<float>(3, 3, 8, rng);
    for (int64_t i = 0; i < grid.tokens.size(); ++i) grid.tokens[i] *= 100.0f;
    const auto params = LessBlockParams<float>::init(8, 1, 1, 4, 2, rng);
    const auto out = less_block_values(grid, params, rope_for(4, 2));
    CHECK(out.all_finite());
}

TEST_CASE("rank validation") {
    Rng rng(14);
    auto grid = random_grid<double>(1, 1, 8, rng);  // min(N+1, C+1) == 2
    const auto params = LessBlockParams<double>::init(8, 1, 3, 4, 2, rng);
    CHECK_THROWS_AS(less_attention_values(grid, params, rope_for(4, 2)), ConfigError);
}

TEST_CASE("dense attention matches explicit loops on a 1x1 grid") {
    Rng rng(15);
    auto grid = random_grid<double>(1, 1, 8, rng);  // 4 flattened tokens
    const auto params = DenseAttentionParams<double>::init(8, 2, rng, 0.8);
    DenseDebug<double> dbg;
    const auto got = full_ss_attention_values(grid, params, kDefaultTokenCap, nullptr, &dbg);

    // independent loop computation
    const Tensor<double> x = grid.tokens.reshaped({4, 8});
    Tensor<double> cat({4, 8});
    for (int64_t h = 0; h < 2; ++h)
        for (int64_t t = 0; t < 4; ++t) {
            double scores[4];
            double mx = -1e300;
            for (int64_t s = 0; s < 4; ++s) {
                double acc = 0;
                for (int64_t j = 0; j < 4; ++j) {
                    double qj = 0, kj = 0;
                    for (int64_t k = 0; k < 8; ++k) {
                        qj += x.at2(t, k) * params.w_q.at2(k, h * 4 + j);
                        kj += x.at2(s, k) * params.w_k.at2(k, h * 4 + j);
                    }
                    acc += qj * kj;
                }
                scores[s] = acc / 2.0;
                mx = std::max(mx, scores[s]);
            }
            double z = 0;
            for (double& sv : scores) {
                sv = std::exp(sv - mx);
                z += sv;
            }
            for (int64_t j = 0; j < 4; ++j) {
                double acc = 0;
                for (int64_t s = 0; s < 4; ++s) {
                    double vj = 0;
                    for (int64_t k = 0; k < 8; ++k) vj += x.at2(s, k) * params.w_v.at2(k, h * 4 + j);
                    acc += scores[s] / z * vj;
                }
                cat.at2(t, h * 4 + j) = acc;
            }
        }
    const auto expect = matmul(cat, params.w_out).reshaped(got.shape());
    CHECK(max_abs_diff(got, expect) < 1e-12);

    for (const auto& a : dbg.attn)
        for (int64_t r = 0; r < a.dim(0); ++r) {
            double sum = 0;
            for (int64_t s = 0; s < a.dim(1); ++s) sum += a.at2(r, s);
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
        }
}

TEST_CASE("dense attention refuses grids past the token cap") {
    Rng rng(16);
    auto grid = random_grid<float>(4, 5, 8, rng);  // 30 tokens
    const auto params = DenseAttentionParams<float>::init(8, 2, rng);
    CHECK_THROWS_AS(full_ss_attention_values(grid, params, 29), CapacityError);
    CHECK_NOTHROW(full_ss_attention_values(grid, params, 30));
}

TEST_CASE("rank-1 identity holds in 32-bit at its own tolerance") {
    const auto r = check_rank1_equivalence(false, 31, 20);
    CHECK(r.pass);
    CHECK(r.max_err < 1e-5);
}

TEST_CASE("a sign flip in the composition breaks the equivalence check") {
    const auto honest = check_rank1_equivalence(true, 123, 10, false);
    CHECK(honest.pass);
    const auto mutated = check_rank1_equivalence(true, 123, 10, true);
    CHECK_FALSE(mutated.pass);
}
