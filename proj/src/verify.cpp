#include "lrss/verify.hpp"
#include <utility>

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "lrss/attention.hpp"
#include "lrss/bench.hpp"
#include "lrss/hypermae.hpp"
#include "lrss/rope.hpp"

namespace lrss {

namespace {

template <typename T>
double kron_mixed_product_err(uint64_t seed) {
    Rng rng(seed);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const int64_t p = 2 + static_cast<int64_t>(rng.below(3));
        const int64_t q = 2 + static_cast<int64_t>(rng.below(3));
        const int64_t m = 2 + static_cast<int64_t>(rng.below(3));
        const int64_t n = 2 + static_cast<int64_t>(rng.below(3));
        auto a = Tensor<T>::randn({p, q}, rng, T(0.5));
        auto b = Tensor<T>::randn({m, n}, rng, T(0.5));
        auto c = Tensor<T>::randn({q, p}, rng, T(0.5));
        auto d = Tensor<T>::randn({n, m}, rng, T(0.5));
        const auto lhs = matmul(kron(a, b), kron(c, d));
        const auto rhs = kron(matmul(a, c), matmul(b, d));
        worst = std::max(worst, static_cast<double>(max_abs_diff(lhs, rhs)));
    }
    return worst;
}

// Random tiny grid for the factorization oracle: N+1 <= 8, C+1 <= 6,
// per-head split (4, 2), one head, rank 1.
template <typename T>
double rank1_equivalence_err(uint64_t seed, int trials, bool inject_sign_flip) {
    Rng rng(seed);
    double worst = 0.0;
    for (int trial = 0; trial < trials; ++trial) {
        const int64_t n = 1 + static_cast<int64_t>(rng.below(7));  // N in [1, 7]
        const int64_t c = 1 + static_cast<int64_t>(rng.below(5));  // C in [1, 5]
        const int64_t d1 = 4, d2 = 2, width = d1 * d2;
        TokenGrid<T> grid;
        grid.meta.n_spatial = n;
        grid.meta.n_spectral = c;
        grid.meta.width = width;
        for (int64_t i = 0; i < n; ++i) grid.meta.coords.emplace_back(i / 4, i % 4);
        for (int64_t i = 0; i < c; ++i) grid.meta.wavelengths.push_back(rng.uniform(420.0, 2445.0));
        grid.tokens = Tensor<T>::randn({n + 1, c + 1, width}, rng);
        auto params = LessBlockParams<T>::init(width, 1, 1, d1, d2, rng, T(0.5));
        RopeConfig rope;
        rope.d_s = d1;
        rope.d_c = d2;
        LessAttnDebug<T> dbg;
        less_attention_values(grid, params, rope, nullptr, &dbg);
        Tensor<T> composed = dbg.composed;
        if (inject_sign_flip) composed[0] = -composed[0];
        const auto materialized =
            matmul(kron(dbg.spectral[0][0].attn, dbg.spatial[0][0].attn),
                   kron(dbg.spectral[0][0].values, dbg.spatial[0][0].values));
        // composed[n*(C+1)+c, i*d2+j] vs materialized[c*(N+1)+n, j*d1+i]
        for (int64_t nn = 0; nn <= n; ++nn)
            for (int64_t cc = 0; cc <= c; ++cc)
                for (int64_t i = 0; i < d1; ++i)
                    for (int64_t j = 0; j < d2; ++j) {
                        const double a = composed.at2(nn * (c + 1) + cc, i * d2 + j);
                        const double b = materialized.at2(cc * (n + 1) + nn, j * d1 + i);
                        worst = std::max(worst, std::abs(a - b));
                    }
    }
    return worst;
}

// Dense attention recomputed with plain loops, fully independent of the
// tensor ops used by the implementation.
template <typename T>
Tensor<T> dense_attention_loops(const TokenGrid<T>& grid, const DenseAttentionParams<T>& p) {
    const int64_t t_n = grid.meta.rows(), d = p.width, heads = p.heads, dh = d / heads;
    const Tensor<T> x = grid.tokens.reshaped({t_n, d});
    auto project = [&](const Tensor<T>& w) {
        Tensor<T> out({t_n, d});
        for (int64_t t = 0; t < t_n; ++t)
            for (int64_t j = 0; j < d; ++j) {
                T acc = T(0);
                for (int64_t k = 0; k < d; ++k) acc += x.at2(t, k) * w.at2(k, j);
                out.at2(t, j) = acc;
            }
        return out;
    };
    const Tensor<T> q = project(p.w_q), k = project(p.w_k), v = project(p.w_v);
    Tensor<T> cat({t_n, d});
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    for (int64_t h = 0; h < heads; ++h) {
        for (int64_t ti = 0; ti < t_n; ++ti) {
            std::vector<T> scores(static_cast<size_t>(t_n));
            T mx = -std::numeric_limits<T>::infinity();
            for (int64_t s = 0; s < t_n; ++s) {
                T acc = T(0);
                for (int64_t j = 0; j < dh; ++j) acc += q.at2(ti, h * dh + j) * k.at2(s, h * dh + j);
                scores[static_cast<size_t>(s)] = acc * scale;
                mx = std::max(mx, scores[static_cast<size_t>(s)]);
            }
            T sum = T(0);
            for (int64_t s = 0; s < t_n; ++s) {
                scores[static_cast<size_t>(s)] = std::exp(scores[static_cast<size_t>(s)] - mx);
                sum += scores[static_cast<size_t>(s)];
            }
            for (int64_t j = 0; j < dh; ++j) {
                T acc = T(0);
                for (int64_t s = 0; s < t_n; ++s) acc += scores[static_cast<size_t>(s)] * v.at2(s, h * dh + j);
                cat.at2(ti, h * dh + j) = acc / sum;
            }
        }
    }
    Tensor<T> out({t_n, d});
    for (int64_t t = 0; t < t_n; ++t)
        for (int64_t j = 0; j < d; ++j) {
            T acc = T(0);
            for (int64_t k2 = 0; k2 < d; ++k2) acc += cat.at2(t, k2) * p.w_out.at2(k2, j);
            out.at2(t, j) = acc;
        }
    return out;
}

template <typename T>
double dense_oracle_err(uint64_t seed) {
    Rng rng(seed);
    double worst = 0.0;
    const std::pair<int64_t, int64_t> shapes[] = {{1, 1}, {2, 3}, {4, 4}, {1, 8}};  // (N+1)(C+1) <= 30
    for (auto [n, c] : shapes) {
        TokenGrid<T> grid;
        grid.meta.n_spatial = n;
        grid.meta.n_spectral = c;
        grid.meta.width = 8;
        for (int64_t i = 0; i < n; ++i) grid.meta.coords.emplace_back(0, i);
        for (int64_t i = 0; i < c; ++i) grid.meta.wavelengths.push_back(rng.uniform(420.0, 2445.0));
        grid.tokens = Tensor<T>::randn({n + 1, c + 1, 8}, rng);
        auto params = DenseAttentionParams<T>::init(8, 2, rng, T(0.5));
        const auto got = full_ss_attention_values(grid, params);
        const auto expect = dense_attention_loops(grid, params).reshaped(got.shape());
        worst = std::max(worst, static_cast<double>(max_abs_diff(got, expect)));
    }
    return worst;
}

}  // namespace

CheckResult check_kron_mixed_product(bool f64, uint64_t seed) {
    const double tol = verify_tolerances(f64).kron_mixed_product;
    const double err = f64 ? kron_mixed_product_err<double>(seed) : kron_mixed_product_err<float>(seed);
    return {"kron_mixed_product", err < tol, err, "(A(x)B)(C(x)D) vs (AC)(x)(BD)"};
}

CheckResult check_rank1_equivalence(bool f64, uint64_t seed, int trials, bool inject_sign_flip) {
    const double tol = verify_tolerances(f64).rank1_equivalence;
    const double err = f64 ? rank1_equivalence_err<double>(seed, trials, inject_sign_flip)
                           : rank1_equivalence_err<float>(seed, trials, inject_sign_flip);
    return {"rank1_factorization", err < tol, err, "factorized vs materialized Kronecker output"};
}

CheckResult check_dense_oracle(bool f64, uint64_t seed) {
    const double tol = verify_tolerances(f64).dense_oracle;
    const double err = f64 ? dense_oracle_err<double>(seed) : dense_oracle_err<float>(seed);
    return {"dense_oracle", err < tol, err, "matmul path vs explicit per-pair loops"};
}

CheckResult check_rope_norms(uint64_t seed) {
    Rng rng(seed);
    RopeConfig cfg;
    cfg.d_s = 8;
    cfg.d_c = 4;
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::pair<int64_t, int64_t>> coords;
        for (int64_t i = 0; i < 6; ++i)
            coords.emplace_back(static_cast<int64_t>(rng.below(16)), static_cast<int64_t>(rng.below(16)));
        auto qs = Tensor<float>::randn({7, 8}, rng);
        auto rs = apply_spatial(qs, coords, cfg);
        for (int64_t r = 0; r < 7; ++r) {
            double n0 = 0, n1 = 0;
            for (int64_t j = 0; j < 8; ++j) {
                n0 += static_cast<double>(qs.at2(r, j)) * qs.at2(r, j);
                n1 += static_cast<double>(rs.at2(r, j)) * rs.at2(r, j);
            }
            worst = std::max(worst, std::abs(std::sqrt(n0) - std::sqrt(n1)));
        }
        std::vector<double> lams;
        for (int64_t i = 0; i < 5; ++i) lams.push_back(rng.uniform(420.0, 2445.0));
        auto qc = Tensor<float>::randn({6, 4}, rng);
        auto rc = apply_spectral(qc, lams, cfg);
        for (int64_t r = 0; r < 6; ++r) {
            double n0 = 0, n1 = 0;
            for (int64_t j = 0; j < 4; ++j) {
                n0 += static_cast<double>(qc.at2(r, j)) * qc.at2(r, j);
                n1 += static_cast<double>(rc.at2(r, j)) * rc.at2(r, j);
            }
            worst = std::max(worst, std::abs(std::sqrt(n0) - std::sqrt(n1)));
        }
    }
    return {"ssrope_norm", worst < 1e-6, worst, "per-token norm preservation"};
}

CheckResult check_rope_shift_invariance(uint64_t seed) {
    Rng rng(seed);
    RopeConfig cfg;
    cfg.d_s = 8;
    cfg.d_c = 4;
    double worst = 0.0;
    // Spatial axis: logits must depend only on coordinate differences.
    for (int trial = 0; trial < 100; ++trial) {
        const int64_t u1 = static_cast<int64_t>(rng.below(12)), v1 = static_cast<int64_t>(rng.below(12));
        const int64_t u2 = static_cast<int64_t>(rng.below(12)), v2 = static_cast<int64_t>(rng.below(12));
        const int64_t du = static_cast<int64_t>(rng.below(8)), dv = static_cast<int64_t>(rng.below(8));
        auto qk = Tensor<float>::randn({3, 8}, rng);
        auto base = apply_spatial(qk, {{u1, v1}, {u2, v2}}, cfg);
        auto shifted = apply_spatial(qk, {{u1 + du, v1 + dv}, {u2 + du, v2 + dv}}, cfg);
        double l0 = 0, l1 = 0;
        for (int64_t j = 0; j < 8; ++j) {
            l0 += static_cast<double>(base.at2(1, j)) * base.at2(2, j);
            l1 += static_cast<double>(shifted.at2(1, j)) * shifted.at2(2, j);
        }
        worst = std::max(worst, std::abs(l0 - l1));
    }
    // Spectral axis: logits must depend only on wavelength differences.
    for (int trial = 0; trial < 100; ++trial) {
        const double lam1 = rng.uniform(420.0, 1800.0), lam2 = rng.uniform(420.0, 1800.0);
        const double shift = rng.uniform(0.0, 600.0);
        auto qk = Tensor<float>::randn({3, 4}, rng);
        auto base = apply_spectral(qk, {lam1, lam2}, cfg);
        auto shifted = apply_spectral(qk, {lam1 + shift, lam2 + shift}, cfg);
        double l0 = 0, l1 = 0;
        for (int64_t j = 0; j < 4; ++j) {
            l0 += static_cast<double>(base.at2(1, j)) * base.at2(2, j);
            l1 += static_cast<double>(shifted.at2(1, j)) * shifted.at2(2, j);
        }
        worst = std::max(worst, std::abs(l0 - l1));
    }
    return {"ssrope_shift", worst < 1e-5, worst, "joint-translation invariance of logits"};
}

CheckResult check_rope_cls_passthrough(uint64_t seed) {
    Rng rng(seed);
    RopeConfig cfg;
    cfg.d_s = 8;
    cfg.d_c = 4;
    auto qs = Tensor<float>::randn({4, 8}, rng);
    auto rs = apply_spatial(qs, {{5, 3}, {1, 1}, {7, 2}}, cfg);
    auto qc = Tensor<float>::randn({3, 4}, rng);
    auto rc = apply_spectral(qc, {612.0, 2100.0}, cfg);
    double worst = 0.0;
    for (int64_t j = 0; j < 8; ++j) worst = std::max(worst, std::abs(static_cast<double>(rs.at2(0, j)) - qs.at2(0, j)));
    for (int64_t j = 0; j < 4; ++j) worst = std::max(worst, std::abs(static_cast<double>(rc.at2(0, j)) - qc.at2(0, j)));
    return {"ssrope_cls", worst == 0.0, worst, "CLS rows bypass rotation"};
}

CheckResult check_mask_structure() {
    std::vector<int64_t> channels;
    for (int64_t c = 0; c < 8; ++c) channels.push_back(c);
    bool ok = true;
    for (uint64_t seed = 0; seed < 50; ++seed) {
        const MaskPlan plan = make_mask_plan(16, channels, 0.75, 0.75, seed);
        ok = ok && plan.spatial_masked.size() == 12 && plan.spatial_visible.size() == 4;
        ok = ok && plan.spectral_masked.size() == 6 && plan.spectral_visible.size() == 2;
        std::vector<int64_t> all = plan.spatial_masked;
        all.insert(all.end(), plan.spatial_visible.begin(), plan.spatial_visible.end());
        std::sort(all.begin(), all.end());
        for (int64_t i = 0; i < 16; ++i) ok = ok && all[static_cast<size_t>(i)] == i;
        // One spatial set for every channel: the plan stores exactly one.
        const auto mask = masked_token_rows(plan);
        for (int64_t n = 0; n < 16; ++n) {
            const bool row_masked =
                !std::binary_search(plan.spatial_visible.begin(), plan.spatial_visible.end(), n);
            if (row_masked)
                for (int64_t c = 0; c < 8; ++c) ok = ok && mask[static_cast<size_t>(n * 8 + c)] == 1;
        }
    }
    return {"mask_structure", ok, ok ? 0.0 : 1.0, "75% per axis, identical spatial mask across channels"};
}

CheckResult check_hcs_ranges() {
    bool ok = true;
    double mean_err = 0.0;
    {
        const HcsRange range{0.2, 0.3};
        for (uint64_t seed = 0; seed < 10000; ++seed) {
            const auto k = static_cast<int64_t>(hcs_sample(120, range, seed).size());
            ok = ok && k >= 24 && k <= 36;
        }
    }
    {
        const HcsRange range{0.4, 0.5};
        double sum = 0.0;
        for (uint64_t seed = 0; seed < 10000; ++seed) {
            const auto k = static_cast<int64_t>(hcs_sample(100, range, seed).size());
            ok = ok && k >= 40 && k <= 50;
            sum += static_cast<double>(k);
        }
        const double mean = sum / 10000.0;
        mean_err = std::abs(mean - 45.0);
        ok = ok && mean >= 44.0 && mean <= 46.0;
    }
    return {"hcs_ranges", ok, mean_err, "draw counts within [round(r_l C), round(r_h C)]"};
}

CheckResult check_flop_closed_forms() {
    const ShapeConfig grid_configs[] = {
        {16, 7, 64, 4, 1, 8, 2},  {16, 15, 64, 4, 1, 8, 2}, {16, 31, 64, 4, 1, 8, 2},
        {16, 63, 64, 4, 1, 8, 2}, {16, 15, 64, 4, 2, 8, 2}, {16, 31, 64, 4, 2, 8, 2},
        {4, 16, 32, 2, 1, 8, 2},  {4, 32, 32, 2, 1, 8, 2},  {8, 16, 32, 4, 1, 4, 2},
        {8, 32, 32, 4, 1, 4, 2},  {2, 10, 16, 2, 1, 4, 2},  {2, 20, 16, 2, 1, 4, 2},
    };
    bool ok = true;
    for (const auto& cfg : grid_configs) {
        ok = ok && count_flops(cfg, Mechanism::kLess).all_match();
        ok = ok && count_flops(cfg, Mechanism::kDense).all_match();
    }
    return {"flop_closed_forms", ok, ok ? 0.0 : 1.0, "counted == predicted over 12 configs"};
}

CheckResult check_gradients(uint64_t seed) {
    ModelConfig cfg = toy_preset();
    cfg.name = "grad-check";
    cfg.patch = 2;
    cfg.enc_width = 8;
    cfg.enc_heads = 1;
    cfg.enc_depth = 1;
    cfg.enc_d1 = 4;
    cfg.enc_d2 = 2;
    cfg.dec_width = 8;
    cfg.dec_heads = 1;
    cfg.dec_depth = 1;
    cfg.dec_d1 = 4;
    cfg.dec_d2 = 2;
    cfg.cube_channels = 3;
    cfg.cube_height = 4;
    cfg.cube_width = 4;

    auto model = HyperMaeModel<double>::init(cfg, seed);
    const auto cubes = synth_dataset<double>(cfg, 1, seed);
    std::vector<int64_t> channels = {0, 1, 2};
    const MaskPlan plan = make_mask_plan(4, channels, 0.75, 0.75, seed);

    Graph<double> g;
    auto loss = hypermae_forward(g, model, cubes[0], plan);
    g.backward(loss);

    auto params = model.named_params();
    Rng rng(mix_seed(seed, 0x6d));
    double worst = 0.0;
    int64_t checked = 0;
    for (size_t i = 0; checked < 24; ++i) {
        Tensor<double>* t = params[i % params.size()].second;
        if (!g.bound(t)) continue;
        const Tensor<double> analytic = g.grad_of(t);
        const int64_t coord = static_cast<int64_t>(rng.below(static_cast<uint64_t>(t->size())));
        auto f = [&](const Tensor<double>& x) {
            const Tensor<double> saved = *t;
            *t = x;
            Graph<double> g2;
            auto l = hypermae_forward(g2, model, cubes[0], plan);
            const double value = g2.value(l)[0];
            *t = saved;
            return value;
        };
        worst = std::max(worst, grad_check_coords<double>(f, *t, analytic, 1e-5, {coord}));
        ++checked;
    }
    return {"grad_check", worst < 1e-4, worst, "central differences over 24 sampled coordinates"};
}

std::vector<CheckResult> run_verification(bool f64, uint64_t seed) {
    std::vector<CheckResult> out;
    out.push_back(check_kron_mixed_product(f64, seed));
    out.push_back(check_rank1_equivalence(f64, seed));
    out.push_back(check_dense_oracle(f64, seed));
    out.push_back(check_rope_norms(seed));
    out.push_back(check_rope_shift_invariance(seed));
    out.push_back(check_rope_cls_passthrough(seed));
    out.push_back(check_mask_structure());
    out.push_back(check_hcs_ranges());
    out.push_back(check_flop_closed_forms());
    out.push_back(check_gradients(seed));
    return out;
}

}  // namespace lrss
