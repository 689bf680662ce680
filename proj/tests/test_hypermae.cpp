#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <set>

#include "lrss/checkpoint.hpp"
#include "lrss/hypermae.hpp"

using namespace lrss;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg = toy_preset();
    cfg.name = "tiny";
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
    cfg.cube_channels = 4;
    cfg.cube_height = 8;
    cfg.cube_width = 8;
    return cfg;
}

}  // namespace

TEST_CASE("hcs sampling stays inside the ratio range") {
    const HcsRange range{0.2, 0.3};
    for (uint64_t seed = 0; seed < 500; ++seed) {
        const auto k = hcs_sample(120, range, seed).size();
        CHECK(k >= 24);
        CHECK(k <= 36);
    }
    const auto all = hcs_sample(17, HcsRange{1.0, 1.0}, 5);
    CHECK(all.size() == 17);
    for (int64_t i = 0; i < 17; ++i) CHECK(all[static_cast<size_t>(i)] == i);

    CHECK_THROWS_AS(hcs_sample(10, HcsRange{0.0, 0.5}, 0), ConfigError);
    CHECK_THROWS_AS(hcs_sample(10, HcsRange{0.6, 0.5}, 0), ConfigError);
    CHECK_THROWS_AS(hcs_sample(10, HcsRange{0.5, 1.2}, 0), ConfigError);
}

TEST_CASE("hcs draw counts concentrate around the range midpoint") {
    const HcsRange range{0.4, 0.5};
    double sum = 0;
    for (uint64_t seed = 0; seed < 10000; ++seed)
        sum += static_cast<double>(hcs_sample(100, range, seed).size());
    const double mean = sum / 10000.0;
    CHECK(mean >= 44.0);
    CHECK(mean <= 46.0);
}

TEST_CASE("mask plans follow the stated ratios") {
    std::vector<int64_t> channels = {0, 1, 2, 3, 4, 5, 6, 7};
    const auto plan = make_mask_plan(16, channels, 0.75, 0.75, 9);
    CHECK(plan.spatial_masked.size() == 12);
    CHECK(plan.spatial_visible.size() == 4);
    CHECK(plan.spectral_masked.size() == 6);
    CHECK(plan.spectral_visible.size() == 2);

    const auto zero = make_mask_plan(16, channels, 0.0, 0.0, 9);
    CHECK(zero.spatial_visible.size() == 16);
    CHECK(zero.spectral_visible.size() == 8);

    CHECK_THROWS_AS(make_mask_plan(16, channels, 1.0, 0.75, 9), ConfigError);
    CHECK_THROWS_AS(make_mask_plan(16, channels, -0.1, 0.75, 9), ConfigError);
}

TEST_CASE("mask plan partitions each axis") {
    std::vector<int64_t> channels = {3, 5, 8, 11, 13};
    for (uint64_t seed = 0; seed < 50; ++seed) {
        const auto plan = make_mask_plan(10, channels, 0.75, 0.75, seed);
        std::set<int64_t> sp(plan.spatial_visible.begin(), plan.spatial_visible.end());
        for (int64_t m : plan.spatial_masked) CHECK(sp.count(m) == 0);
        sp.insert(plan.spatial_masked.begin(), plan.spatial_masked.end());
        CHECK(sp.size() == 10);

        std::set<int64_t> ch(plan.spectral_visible.begin(), plan.spectral_visible.end());
        for (int64_t m : plan.spectral_masked) CHECK(ch.count(m) == 0);
        ch.insert(plan.spectral_masked.begin(), plan.spectral_masked.end());
        CHECK(ch == std::set<int64_t>(channels.begin(), channels.end()));
    }
    const auto a = make_mask_plan(10, channels, 0.75, 0.75, 7);
    const auto b = make_mask_plan(10, channels, 0.75, 0.75, 7);
    CHECK(a.spatial_visible == b.spatial_visible);
    CHECK(a.spectral_visible == b.spectral_visible);
}

TEST_CASE("visible token count matches the closed form") {
    std::vector<int64_t> channels;
    for (int64_t c = 0; c < 9; ++c) channels.push_back(c);
    for (uint64_t seed = 0; seed < 20; ++seed) {
        const auto plan = make_mask_plan(12, channels, 0.75, 0.75, seed);
        const auto mask = masked_token_rows(plan);
        int64_t visible = 0;
        for (uint8_t m : mask) visible += (m == 0);
        CHECK(visible == (12 - 9) * (9 - 6));  // (N - floor(.75N)) * (C - floor(.75C))
    }
}

TEST_CASE("encoding with everything visible equals a plain forward") {
    const auto cfg = tiny_config();
    const auto model = HyperMaeModel<double>::init(cfg, 3);
    const auto cubes = synth_dataset<double>(cfg, 1, 3);
    std::vector<int64_t> all = {0, 1, 2, 3};
    const auto plan = full_visibility_plan(16, all);

    Graph<double> g;
    const auto grid = encode_visible(g, model, cubes[0], plan);
    CHECK(g.value(grid.tokens).shape() == std::vector<int64_t>{17 * 5, 8});

    // plain forward without any plan machinery
    Graph<double> g2;
    const auto patches = patchify(cubes[0], cfg.patch);
    auto tokens = embed_rows(g2, g2.constant(patches.reshaped({16 * 4, 4})), model.embed);
    auto grid2 = augment_cls_rows(g2, tokens, model.embed, patch_coords(8, 8, 2), cubes[0].wavelengths);
    const auto rope = make_rope_context<double>(grid2.meta.coords, grid2.meta.wavelengths, cfg.encoder_rope());
    for (const auto& block : model.encoder) grid2 = less_block(g2, grid2, block, rope);
    CHECK(max_abs_diff(g.value(grid.tokens), g2.value(grid2.tokens)) < 1e-12);
}

TEST_CASE("visible sub-grid keeps original coordinates and wavelengths") {
    const auto cfg = tiny_config();
    const auto model = HyperMaeModel<double>::init(cfg, 4);
    const auto cubes = synth_dataset<double>(cfg, 1, 4);
    const auto hcs = hcs_sample(4, HcsRange{0.75, 1.0}, 11);
    const auto plan = make_mask_plan(16, hcs, 0.5, 0.5, 11);

    Graph<double> g;
    const auto grid = encode_visible(g, model, cubes[0], plan);
    CHECK(grid.meta.n_spatial == static_cast<int64_t>(plan.spatial_visible.size()));
    CHECK(grid.meta.n_spectral == static_cast<int64_t>(plan.spectral_visible.size()));

    const auto all_coords = patch_coords(8, 8, 2);
    for (size_t i = 0; i < plan.spatial_visible.size(); ++i)
        CHECK(grid.meta.coords[i] == all_coords[static_cast<size_t>(plan.spatial_visible[i])]);
    const auto cube_hcs = cubes[0].restricted(plan.hcs_channels);
    const auto vis_pos = plan.spectral_visible_positions();
    for (size_t j = 0; j < vis_pos.size(); ++j)
        CHECK(grid.meta.wavelengths[j] == cube_hcs.wavelengths[static_cast<size_t>(vis_pos[j])]);

    // rotation phases of a surviving token match the unmasked table
    const auto table_full = spatial_phase_table<double>(all_coords, cfg.encoder_rope());
    const auto table_vis = spatial_phase_table<double>(grid.meta.coords, cfg.encoder_rope());
    for (size_t i = 0; i < plan.spatial_visible.size(); ++i)
        for (int64_t p = 0; p < table_vis.dim(1); ++p)
            CHECK(table_vis.at2(static_cast<int64_t>(i) + 1, p) ==
                  table_full.at2(plan.spatial_visible[i] + 1, p));
}

TEST_CASE("empty visible axes are rejected") {
    const auto cfg = tiny_config();
    const auto model = HyperMaeModel<double>::init(cfg, 5);
    const auto cubes = synth_dataset<double>(cfg, 1, 5);
    MaskPlan plan = full_visibility_plan(16, {0, 1, 2, 3});
    plan.spatial_visible.clear();
    Graph<double> g;
    CHECK_THROWS_AS(encode_visible(g, model, cubes[0], plan), DegenerateInputError);
}

TEST_CASE("decoder output shape and mask-token propagation") {
    auto cfg = tiny_config();
    cfg.dec_depth = 0;  // zero-depth decoder: masked rows are the mask token itself
    const auto model = HyperMaeModel<double>::init(cfg, 6);
    const auto cubes = synth_dataset<double>(cfg, 1, 6);
    const auto hcs = hcs_sample(4, HcsRange{0.9, 1.0}, 2);
    const auto plan = make_mask_plan(16, hcs, 0.75, 0.75, 2);

    Graph<double> g;
    const auto encoded = encode_visible(g, model, cubes[0], plan);
    const auto pred = decode_reconstruct(g, model, encoded, plan, cubes[0]);
    const int64_t c_hcs = static_cast<int64_t>(plan.hcs_channels.size());
    CHECK(g.value(pred).shape() == std::vector<int64_t>{16 * c_hcs, 4});

    // every fully-masked position carries head(mask_token)
    Tensor<double> mt({1, 8});
    for (int64_t j = 0; j < 8; ++j) mt.at2(0, j) = model.mask_token[j];
    auto head_out = matmul(mt, model.head_w);
    for (int64_t j = 0; j < 4; ++j) head_out.at2(0, j) += model.head_b[j];

    const auto mask = masked_token_rows(plan);
    const auto vis_pos = plan.spectral_visible_positions();
    for (int64_t n = 0; n < 16; ++n) {
        const bool spatial_masked =
            !std::binary_search(plan.spatial_visible.begin(), plan.spatial_visible.end(), n);
        if (!spatial_masked) continue;
        for (int64_t c = 0; c < c_hcs; ++c)
            for (int64_t j = 0; j < 4; ++j)
                CHECK(g.value(pred).at2(n * c_hcs + c, j) == doctest::Approx(head_out.at2(0, j)).epsilon(1e-12));
    }
    (void)mask;
    (void)vis_pos;
}

TEST_CASE("mask token receives gradient whenever positions are masked") {
    const auto cfg = tiny_config();
    auto model = HyperMaeModel<double>::init(cfg, 7);
    const auto cubes = synth_dataset<double>(cfg, 1, 7);
    const auto plan = make_mask_plan(16, {0, 1, 2, 3}, 0.75, 0.75, 3);

    Graph<double> g;
    auto loss = hypermae_forward(g, model, cubes[0], plan);
    g.backward(loss);
    const auto grad = g.grad_of(&model.mask_token);
    double norm = 0;
    for (int64_t j = 0; j < grad.size(); ++j) norm += grad[j] * grad[j];
    CHECK(norm > 0.0);
}

TEST_CASE("loss semantics") {
    const auto cfg = tiny_config();
    const auto model = HyperMaeModel<double>::init(cfg, 8);
    const auto cubes = synth_dataset<double>(cfg, 1, 8);
    const auto plan = make_mask_plan(16, {0, 1, 2, 3}, 0.75, 0.75, 4);
    const auto targets = normalized_targets(cubes[0], plan, cfg.patch);
    const auto mask = masked_token_rows(plan);

    // perfect prediction -> zero loss
    {
        Graph<double> g;
        auto pred = g.constant(targets);
        auto loss = g.masked_mse(pred, std::make_shared<const Tensor<double>>(targets),
                                 std::make_shared<const std::vector<uint8_t>>(mask));
        CHECK(g.value(loss)[0] == 0.0);
    }
    // predictions at visible positions are ignored
    {
        Tensor<double> corrupted = targets;
        for (size_t r = 0; r < mask.size(); ++r)
            if (!mask[r])
                for (int64_t j = 0; j < 4; ++j) corrupted.at2(static_cast<int64_t>(r), j) = 1e6;
        Graph<double> g;
        auto pred = g.constant(corrupted);
        auto loss = g.masked_mse(pred, std::make_shared<const Tensor<double>>(targets),
                                 std::make_shared<const std::vector<uint8_t>>(mask));
        CHECK(g.value(loss)[0] == 0.0);
    }
    // two-row hand-computed case
    {
        Tensor<double> pred({2, 2}, {1.0, 2.0, 3.0, 5.0});
        Tensor<double> target({2, 2}, {0.0, 0.0, 1.0, 1.0});
        Graph<double> g;
        auto loss = g.masked_mse(g.constant(pred), std::make_shared<const Tensor<double>>(target),
                                 std::make_shared<const std::vector<uint8_t>>(std::vector<uint8_t>{0, 1}));
        CHECK(g.value(loss)[0] == doctest::Approx((4.0 + 16.0) / 2.0));
    }
    // no masked tokens -> degenerate input
    {
        Graph<double> g;
        auto pred = g.constant(targets);
        CHECK_THROWS_AS(g.masked_mse(pred, std::make_shared<const Tensor<double>>(targets),
                                     std::make_shared<const std::vector<uint8_t>>(
                                         std::vector<uint8_t>(mask.size(), 0))),
                        DegenerateInputError);
    }
    // targets are normalized per patch
    for (int64_t r = 0; r < targets.dim(0); ++r) {
        double mean = 0, var = 0;
        for (int64_t j = 0; j < 4; ++j) mean += targets.at2(r, j);
        mean /= 4;
        for (int64_t j = 0; j < 4; ++j) var += (targets.at2(r, j) - mean) * (targets.at2(r, j) - mean);
        CHECK(std::abs(mean) < 1e-9);
        CHECK(var / 4 <= 1.0 + 1e-9);
    }
}

TEST_CASE("train steps are deterministic and lr 0 freezes parameters") {
    const auto cfg = tiny_config();
    auto m1 = HyperMaeModel<double>::init(cfg, 9);
    auto m2 = HyperMaeModel<double>::init(cfg, 9);
    const auto cubes = synth_dataset<double>(cfg, 2, 9);

    Optimizer<double> o1, o2;
    for (int step = 0; step < 3; ++step) {
        const double l1 = train_step(m1, cubes, cfg.hcs, 100 + step, o1);
        const double l2 = train_step(m2, cubes, cfg.hcs, 100 + step, o2);
        CHECK(l1 == l2);
    }
    auto p1 = m1.named_params();
    auto p2 = m2.named_params();
    for (size_t i = 0; i < p1.size(); ++i) CHECK(max_abs_diff(*p1[i].second, *p2[i].second) == 0.0);

    auto m3 = HyperMaeModel<double>::init(cfg, 9);
    const auto before = *m3.named_params()[0].second;
    Optimizer<double> frozen;
    frozen.lr = 0.0;
    train_step(m3, cubes, cfg.hcs, 55, frozen);
    for (auto& [name, t] : m3.named_params()) CHECK(t->all_finite());
    CHECK(max_abs_diff(*m3.named_params()[0].second, before) == 0.0);
}

TEST_CASE("encoder-only model accepts full-channel input without decoder state") {
    const auto cfg = tiny_config();
    auto model = HyperMaeModel<double>::init_encoder_only(cfg, 10);
    CHECK_FALSE(model.has_decoder);
    CHECK(model.mask_token.size() == 0);
    CHECK(model.decoder.empty());
    for (auto& [name, t] : model.named_params()) CHECK(name.rfind("dec", 0) != 0);

    // full-channel forward, no HCS
    const auto grid = make_reference_grid();
    const auto cube = synth_cube<double>(grid.wavelengths, 8, 8, 0);
    std::vector<int64_t> all;
    for (int64_t c = 0; c < 202; ++c) all.push_back(c);
    Graph<double> g;
    const auto out = encode_visible(g, model, cube, full_visibility_plan(16, all));
    CHECK(g.value(out.tokens).shape() == std::vector<int64_t>{17 * 203, 8});
    CHECK(g.value(out.tokens).all_finite());
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    const auto cfg = tiny_config();
    auto model = HyperMaeModel<float>::init(cfg, 11);
    const auto path = (std::filesystem::temp_directory_path() / "lrss_ckpt_test.bin").string();
    save_checkpoint<float>(path, "{\"preset\":\"tiny\",\"seed\":11}", model.named_params());

    auto restored = HyperMaeModel<float>::init(cfg, 99);  // different weights
    const auto manifest = load_checkpoint<float>(path, restored.named_params());
    CHECK(manifest == "{\"preset\":\"tiny\",\"seed\":11}");
    auto a = model.named_params();
    auto b = restored.named_params();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].first == b[i].first);
        CHECK(max_abs_diff(*a[i].second, *b[i].second) == 0.0f);
    }
    std::filesystem::remove(path);

    CHECK_THROWS_AS(load_checkpoint<float>("/nonexistent/ckpt.bin", model.named_params()), IoError);
}

TEST_CASE("toy preset satisfies the structural constraints") {
    const auto cfg = toy_preset();
    CHECK(cfg.enc_d1 * cfg.enc_d2 * cfg.enc_heads == cfg.enc_width);
    CHECK(cfg.dec_d1 * cfg.dec_d2 * cfg.dec_heads == cfg.dec_width);
    CHECK(cfg.enc_d1 % 4 == 0);
    CHECK(cfg.enc_d2 % 2 == 0);
    auto model = HyperMaeModel<float>::init(cfg, 0);
    CHECK(model.encoder.size() == 2);
    CHECK(model.decoder.size() == 1);
}
