#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "lrss/rope.hpp"

using namespace lrss;

namespace {

RopeConfig test_config() {
    RopeConfig cfg;
    cfg.d_s = 8;
    cfg.d_c = 4;
    return cfg;
}

template <typename T>
double row_norm(const Tensor<T>& t, int64_t row) {
    double acc = 0;
    for (int64_t j = 0; j < t.dim(1); ++j) acc += static_cast<double>(t.at2(row, j)) * t.at2(row, j);
    return std::sqrt(acc);
}

template <typename T>
double logit(const Tensor<T>& q, int64_t r1, const Tensor<T>& k, int64_t r2) {
    double acc = 0;
    for (int64_t j = 0; j < q.dim(1); ++j) acc += static_cast<double>(q.at2(r1, j)) * k.at2(r2, j);
    return acc;
}

}  // namespace

TEST_CASE("rotate_pairs identity, quarter turn, odd extent") {
    Rng rng(0);
    const auto x = Tensor<double>::randn({3, 6}, rng);
    CHECK(max_abs_diff(rotate_pairs(x, {0.0, 0.0, 0.0}), x) == 0.0);

    const Tensor<double> pair({2}, {1.0, 0.0});
    const auto r = rotate_pairs(pair, {M_PI / 2});
    CHECK(r[0] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r[1] == doctest::Approx(1.0));

    CHECK_THROWS_AS(rotate_pairs(Tensor<double>({3, 5}), std::vector<double>{0.0, 0.0}), ShapeError);
    CHECK_THROWS_AS(rotate_pairs(x, std::vector<double>{0.0}), ShapeError);
}

TEST_CASE("rotations are isometries") {
    Rng rng(1);
    const auto x = Tensor<double>::randn({5, 8}, rng, 2.0);
    std::vector<double> angles = {0.3, -1.2, 2.9, 0.01};
    const auto y = rotate_pairs(x, angles);
    for (int64_t r = 0; r < 5; ++r) CHECK(std::abs(row_norm(y, r) - row_norm(x, r)) < 1e-6);
}

TEST_CASE("spatial rotation: zero coordinate and CLS pass through") {
    Rng rng(2);
    const auto cfg = test_config();
    const auto qk = Tensor<float>::randn({3, 8}, rng);
    const auto out = apply_spatial(qk, {{0, 0}, {5, 7}}, cfg);
    for (int64_t j = 0; j < 8; ++j) {
        CHECK(out.at2(0, j) == qk.at2(0, j));  // CLS row
        CHECK(out.at2(1, j) == qk.at2(1, j));  // (0, 0) has zero phase
        if (j == 0) continue;
    }
    bool rotated = false;
    for (int64_t j = 0; j < 8; ++j) rotated = rotated || out.at2(2, j) != qk.at2(2, j);
    CHECK(rotated);
}

TEST_CASE("spatial attention logits depend only on relative offsets") {
    Rng rng(3);
    const auto cfg = test_config();
    for (int trial = 0; trial < 100; ++trial) {
        const auto q = Tensor<float>::randn({3, 8}, rng);
        const int64_t u1 = static_cast<int64_t>(rng.below(10)), v1 = static_cast<int64_t>(rng.below(10));
        const int64_t u2 = static_cast<int64_t>(rng.below(10)), v2 = static_cast<int64_t>(rng.below(10));
        const int64_t du = static_cast<int64_t>(rng.below(6)), dv = static_cast<int64_t>(rng.below(6));
        const auto a = apply_spatial(q, {{u1, v1}, {u2, v2}}, cfg);
        const auto b = apply_spatial(q, {{u1 + du, v1 + dv}, {u2 + du, v2 + dv}}, cfg);
        CHECK(std::abs(logit(a, 1, a, 2) - logit(b, 1, b, 2)) < 1e-5);
    }
}

TEST_CASE("spectral rotation: zero wavelength and equal wavelengths") {
    Rng rng(4);
    auto cfg = test_config();
    const auto qk = Tensor<float>::randn({3, 4}, rng);
    const auto out = apply_spectral(qk, {0.0, 612.0}, cfg);
    for (int64_t j = 0; j < 4; ++j) {
        CHECK(out.at2(0, j) == qk.at2(0, j));  // CLS
        CHECK(out.at2(1, j) == qk.at2(1, j));  // lambda' == 0
    }

    // identical wavelengths rotate identically
    Tensor<float> same({3, 4});
    for (int64_t j = 0; j < 4; ++j) {
        same.at2(1, j) = qk.at2(2, j);
        same.at2(2, j) = qk.at2(2, j);
    }
    const auto rs = apply_spectral(same, {1500.0, 1500.0}, cfg);
    for (int64_t j = 0; j < 4; ++j) CHECK(rs.at2(1, j) == rs.at2(2, j));
}

TEST_CASE("spectral logits depend only on wavelength differences") {
    Rng rng(5);
    const auto cfg = test_config();
    for (int trial = 0; trial < 100; ++trial) {
        const auto q = Tensor<float>::randn({3, 4}, rng);
        const double l1 = rng.uniform(420.0, 1800.0), l2 = rng.uniform(420.0, 1800.0);
        const double shift = rng.uniform(0.0, 600.0);
        const auto a = apply_spectral(q, {l1, l2}, cfg);
        const auto b = apply_spectral(q, {l1 + shift, l2 + shift}, cfg);
        CHECK(std::abs(logit(a, 1, a, 2) - logit(b, 1, b, 2)) < 1e-5);
    }
}

TEST_CASE("norm preservation across both axes") {
    Rng rng(6);
    const auto cfg = test_config();
    std::vector<std::pair<int64_t, int64_t>> coords;
    for (int64_t i = 0; i < 9; ++i) coords.emplace_back(i / 3, i % 3);
    const auto qs = Tensor<float>::randn({10, 8}, rng, 2.0f);
    const auto rs = apply_spatial(qs, coords, cfg);
    for (int64_t r = 0; r < 10; ++r) CHECK(std::abs(row_norm(rs, r) - row_norm(qs, r)) < 1e-6);

    std::vector<double> wl;
    for (int64_t i = 0; i < 7; ++i) wl.push_back(500.0 + 250.0 * static_cast<double>(i));
    const auto qc = Tensor<float>::randn({8, 4}, rng, 2.0f);
    const auto rc = apply_spectral(qc, wl, cfg);
    for (int64_t r = 0; r < 8; ++r) CHECK(std::abs(row_norm(rc, r) - row_norm(qc, r)) < 1e-6);
}

TEST_CASE("rotations are bijective: inverse phases restore the input") {
    Rng rng(7);
    const auto cfg = test_config();
    std::vector<std::pair<int64_t, int64_t>> coords = {{2, 5}, {7, 1}, {4, 4}};
    const auto table = spatial_phase_table<double>(coords, cfg);
    Tensor<double> inverse = table;
    for (int64_t i = 0; i < inverse.size(); ++i) inverse[i] = -inverse[i];
    const auto x = Tensor<double>::randn({4, 8}, rng);
    const auto back = rotate_by_table(rotate_by_table(x, table), inverse);
    CHECK(max_abs_diff(back, x) < 1e-12);
}

TEST_CASE("phase table layout follows the axial split") {
    RopeConfig cfg = test_config();
    const auto table = spatial_phase_table<double>({{3, 5}}, cfg);
    CHECK(table.shape() == std::vector<int64_t>{2, 4});
    // row 0 is CLS: all zero
    for (int64_t j = 0; j < 4; ++j) CHECK(table.at2(0, j) == 0.0);
    // first d_s/4 pairs rotate by u over base^(2i/(d_s/2)), rest by v
    CHECK(table.at2(1, 0) == doctest::Approx(3.0));
    CHECK(table.at2(1, 1) == doctest::Approx(3.0 / std::pow(cfg.base_spatial, 2.0 / 4.0)));
    CHECK(table.at2(1, 2) == doctest::Approx(5.0));
    CHECK(table.at2(1, 3) == doctest::Approx(5.0 / std::pow(cfg.base_spatial, 2.0 / 4.0)));

    const auto spec = spectral_phase_table<double>({1500.0}, cfg);
    CHECK(spec.shape() == std::vector<int64_t>{2, 2});
    CHECK(spec.at2(1, 0) == doctest::Approx(1.5));  // micrometers
    CHECK(spec.at2(1, 1) == doctest::Approx(1.5 / std::pow(cfg.base_spectral, 2.0 / 4.0)));
}

TEST_CASE("config validation") {
    RopeConfig cfg;
    cfg.d_s = 6;  // not divisible by 4
    cfg.d_c = 2;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.d_s = 8;
    cfg.d_c = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.d_c = 2;
    cfg.base_spatial = 0.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    RopeConfig ok;
    ok.d_s = 8;
    ok.d_c = 2;
    const auto qk = Tensor<float>::zeros({2, 4});
    CHECK_THROWS_AS(apply_spatial(qk, {{0, 0}}, ok), ShapeError);  // width mismatch
}
