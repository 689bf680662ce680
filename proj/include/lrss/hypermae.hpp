#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "lrss/attention.hpp"
#include "lrss/embed.hpp"
#include "lrss/rng.hpp"
#include "lrss/rope.hpp"
#include "lrss/spectral.hpp"

namespace lrss {

// ---------------------------------------------------------------------------
// Channel sampling and masking
// ---------------------------------------------------------------------------

struct HcsRange {
    double r_lo = 0.2;
    double r_hi = 0.3;

    void validate() const {
        if (!(r_lo > 0.0) || !(r_lo <= r_hi) || !(r_hi <= 1.0))
            throw ConfigError("HcsRange: need 0 < r_lo <= r_hi <= 1");
    }
};

// Per-iteration channel subset: draw a ratio uniformly from the range, keep
// max(1, round(ratio * C)) channels chosen uniformly without replacement.
inline std::vector<int64_t> hcs_sample(int64_t channels, const HcsRange& range, uint64_t seed) {
    range.validate();
    if (channels < 1) throw ConfigError("hcs_sample: need at least one channel");
    Rng rng(mix_seed(seed, 0x4c5));
    const double rho = rng.uniform(range.r_lo, range.r_hi);
    const int64_t k = std::max<int64_t>(1, llround(rho * static_cast<double>(channels)));
    return rng.sample_without_replacement(channels, std::min(k, channels));
}

// Decoupled spatial/spectral masking for one pretraining step. One spatial
// mask set applies identically to every channel. Channel entries are the
// original grid ids of the HCS-sampled subset.
struct MaskPlan {
    int64_t n_spatial = 0;
    std::vector<int64_t> hcs_channels;      // sorted original channel ids
    std::vector<int64_t> spatial_visible;   // sorted patch indices
    std::vector<int64_t> spatial_masked;
    std::vector<int64_t> spectral_visible;  // sorted original channel ids
    std::vector<int64_t> spectral_masked;
    uint64_t seed = 0;

    // Position of each visible channel inside hcs_channels.
    std::vector<int64_t> spectral_visible_positions() const {
        std::vector<int64_t> pos;
        for (int64_t id : spectral_visible) {
            const auto it = std::lower_bound(hcs_channels.begin(), hcs_channels.end(), id);
            pos.push_back(static_cast<int64_t>(it - hcs_channels.begin()));
        }
        return pos;
    }
};

inline MaskPlan make_mask_plan(int64_t n_spatial, const std::vector<int64_t>& channels,
                               double ratio_spatial, double ratio_spectral, uint64_t seed) {
    if (ratio_spatial < 0.0 || ratio_spatial >= 1.0 || ratio_spectral < 0.0 || ratio_spectral >= 1.0)
        throw ConfigError("make_mask_plan: ratios must lie in [0, 1)");
    if (n_spatial < 1 || channels.empty()) throw ConfigError("make_mask_plan: empty axis");
    MaskPlan plan;
    plan.n_spatial = n_spatial;
    plan.hcs_channels = channels;
    plan.seed = seed;

    const int64_t c = static_cast<int64_t>(channels.size());
    const int64_t n_mask_sp = static_cast<int64_t>(ratio_spatial * static_cast<double>(n_spatial));
    const int64_t n_mask_ch = static_cast<int64_t>(ratio_spectral * static_cast<double>(c));

    Rng rng_sp(mix_seed(seed, 0x5a));
    plan.spatial_masked = rng_sp.sample_without_replacement(n_spatial, n_mask_sp);
    for (int64_t i = 0; i < n_spatial; ++i)
        if (!std::binary_search(plan.spatial_masked.begin(), plan.spatial_masked.end(), i))
            plan.spatial_visible.push_back(i);

    Rng rng_ch(mix_seed(seed, 0xc4));
    const auto masked_pos = rng_ch.sample_without_replacement(c, n_mask_ch);
    for (int64_t p = 0, m = 0; p < c; ++p) {
        if (m < static_cast<int64_t>(masked_pos.size()) && masked_pos[static_cast<size_t>(m)] == p) {
            plan.spectral_masked.push_back(channels[static_cast<size_t>(p)]);
            ++m;
        } else {
            plan.spectral_visible.push_back(channels[static_cast<size_t>(p)]);
        }
    }
    return plan;
}

// Everything-visible plan; encode_visible then reduces to a plain forward.
inline MaskPlan full_visibility_plan(int64_t n_spatial, const std::vector<int64_t>& channels) {
    MaskPlan plan;
    plan.n_spatial = n_spatial;
    plan.hcs_channels = channels;
    plan.spectral_visible = channels;
    for (int64_t i = 0; i < n_spatial; ++i) plan.spatial_visible.push_back(i);
    return plan;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct ModelConfig {
    std::string name;
    int64_t patch = 4;
    int64_t rank = 1;

    int64_t enc_width = 64, enc_heads = 4, enc_depth = 2, enc_d1 = 8, enc_d2 = 2;
    int64_t dec_width = 32, dec_heads = 2, dec_depth = 1, dec_d1 = 8, dec_d2 = 2;

    HcsRange hcs;
    double mask_ratio_spatial = 0.75;
    double mask_ratio_spectral = 0.75;

    double rope_base_spatial = 10000.0;
    double rope_base_spectral = 100.0;
    double rope_lambda_scale = 1e-3;

    // Synthetic-data shape used by the pretraining driver.
    int64_t cube_channels = 8, cube_height = 16, cube_width = 16;

    RopeConfig encoder_rope() const {
        return RopeConfig{rope_base_spatial, rope_base_spectral, rope_lambda_scale, enc_d1, enc_d2};
    }
    RopeConfig decoder_rope() const {
        return RopeConfig{rope_base_spatial, rope_base_spectral, rope_lambda_scale, dec_d1, dec_d2};
    }
};

// Desk-scale default. All per-head splits are integral and every run fits in
// seconds.
inline ModelConfig toy_preset() {
    ModelConfig c;
    c.name = "toy";
    c.patch = 4;
    c.rank = 1;
    c.enc_width = 64;
    c.enc_heads = 4;
    c.enc_depth = 2;
    c.enc_d1 = 8;
    c.enc_d2 = 2;
    c.dec_width = 32;
    c.dec_heads = 2;
    c.dec_depth = 1;
    c.dec_d1 = 8;
    c.dec_d2 = 2;
    c.hcs = HcsRange{0.5, 1.0};
    c.cube_channels = 8;
    c.cube_height = 16;
    c.cube_width = 16;
    return c;
}

// Base-sized shape: 12 encoder blocks at width 768 with 12 heads and 8
// decoder blocks at width 512 with 8 heads, per-head split (32, 2), rank 1,
// patch 16. Used for shape validation only, never as a training target.
// Reference training metadata (recorded, not executed here): AdamW, base lr
// 1.5e-4, weight decay 5e-2, 5% warmup + cosine schedule, batch 1024,
// bfloat16, 200 epochs.
inline ModelConfig reference_preset() {
    ModelConfig c;
    c.name = "reference";
    c.patch = 16;
    c.rank = 1;
    c.enc_width = 768;
    c.enc_heads = 12;
    c.enc_depth = 12;
    c.enc_d1 = 32;
    c.enc_d2 = 2;
    c.dec_width = 512;
    c.dec_heads = 8;  // 512/12 is not integral; 8 heads keep the (32, 2) split
    c.dec_depth = 8;
    c.dec_d1 = 32;
    c.dec_d2 = 2;
    c.hcs = HcsRange{0.2, 0.3};
    c.cube_channels = 120;
    c.cube_height = 32;
    c.cube_width = 32;
    return c;
}

template <typename T>
struct HyperMaeModel {
    ModelConfig config;
    EmbedParams<T> embed;
    std::vector<LessBlockParams<T>> encoder;
    bool has_decoder = true;
    Tensor<T> enc_to_dec_w, enc_to_dec_b;
    std::vector<LessBlockParams<T>> decoder;
    Tensor<T> mask_token;        // dec_width
    Tensor<T> head_w, head_b;    // dec_width x P^2

    static HyperMaeModel init(const ModelConfig& cfg, uint64_t seed, bool with_decoder = true) {
        Rng rng(mix_seed(seed, 0x30de1));
        HyperMaeModel m;
        m.config = cfg;
        m.embed = EmbedParams<T>::init(cfg.patch, cfg.enc_width, rng);
        for (int64_t i = 0; i < cfg.enc_depth; ++i)
            m.encoder.push_back(
                LessBlockParams<T>::init(cfg.enc_width, cfg.enc_heads, cfg.rank, cfg.enc_d1, cfg.enc_d2, rng));
        m.has_decoder = with_decoder;
        if (with_decoder) {
            m.enc_to_dec_w = Tensor<T>::randn({cfg.enc_width, cfg.dec_width}, rng,
                                              T(1) / std::sqrt(static_cast<T>(cfg.enc_width)));
            m.enc_to_dec_b = Tensor<T>::zeros({cfg.dec_width});
            for (int64_t i = 0; i < cfg.dec_depth; ++i)
                m.decoder.push_back(LessBlockParams<T>::init(cfg.dec_width, cfg.dec_heads, cfg.rank,
                                                             cfg.dec_d1, cfg.dec_d2, rng));
            m.mask_token = Tensor<T>::randn({cfg.dec_width}, rng, T(0.5));
            m.head_w = Tensor<T>::randn({cfg.dec_width, cfg.patch * cfg.patch}, rng,
                                        T(1) / std::sqrt(static_cast<T>(cfg.dec_width)));
            m.head_b = Tensor<T>::zeros({cfg.patch * cfg.patch});
        }
        return m;
    }

    // Fine-tune/inference construction: no decoder-side parameters exist.
    static HyperMaeModel init_encoder_only(const ModelConfig& cfg, uint64_t seed) {
        return init(cfg, seed, false);
    }

    std::vector<std::pair<std::string, Tensor<T>*>> named_params() {
        std::vector<std::pair<std::string, Tensor<T>*>> out = embed.named_params("embed");
        for (size_t i = 0; i < encoder.size(); ++i) {
            auto block = encoder[i].named_params("enc" + std::to_string(i));
            out.insert(out.end(), block.begin(), block.end());
        }
        if (has_decoder) {
            out.emplace_back("enc_to_dec.w", &enc_to_dec_w);
            out.emplace_back("enc_to_dec.b", &enc_to_dec_b);
            for (size_t i = 0; i < decoder.size(); ++i) {
                auto block = decoder[i].named_params("dec" + std::to_string(i));
                out.insert(out.end(), block.begin(), block.end());
            }
            out.emplace_back("mask_token", &mask_token);
            out.emplace_back("head.w", &head_w);
            out.emplace_back("head.b", &head_b);
        }
        return out;
    }

    int64_t param_count() {
        int64_t n = 0;
        for (auto& [name, t] : named_params()) n += t->size();
        return n;
    }
};

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

// Embeds the axis-aligned visible sub-grid (visible spatial positions x
// visible channels), augments CLS and runs the encoder. Rotary phases use
// the original patch coordinates and physical wavelengths of the surviving
// tokens.
template <typename T>
GridVar<T> encode_visible(Graph<T>& g, const HyperMaeModel<T>& model, const HyperCube<T>& cube,
                          const MaskPlan& plan) {
    const ModelConfig& cfg = model.config;
    if (plan.spatial_visible.empty() || plan.spectral_visible.empty())
        throw DegenerateInputError("encode_visible: an axis has no visible entries");
    const HyperCube<T> cube_hcs = cube.restricted(plan.hcs_channels);
    const Tensor<T> patches = patchify(cube_hcs, cfg.patch);
    if (patches.dim(0) != plan.n_spatial) throw ShapeError("encode_visible: plan does not match cube");

    const auto vis_pos = plan.spectral_visible_positions();
    const int64_t nv = static_cast<int64_t>(plan.spatial_visible.size());
    const int64_t cv = static_cast<int64_t>(vis_pos.size());
    Tensor<T> vis({nv * cv, cfg.patch * cfg.patch});
    for (int64_t i = 0; i < nv; ++i)
        for (int64_t j = 0; j < cv; ++j)
            for (int64_t p = 0; p < cfg.patch * cfg.patch; ++p)
                vis.at2(i * cv + j, p) =
                    patches.at3(plan.spatial_visible[static_cast<size_t>(i)], vis_pos[static_cast<size_t>(j)], p);

    const auto all_coords = patch_coords(cube.height(), cube.width(), cfg.patch);
    std::vector<std::pair<int64_t, int64_t>> coords;
    for (int64_t i : plan.spatial_visible) coords.push_back(all_coords[static_cast<size_t>(i)]);
    std::vector<double> wavelengths;
    for (int64_t j : vis_pos) wavelengths.push_back(cube_hcs.wavelengths[static_cast<size_t>(j)]);

    auto tokens = embed_rows(g, g.constant(std::move(vis)), model.embed);
    GridVar<T> grid = augment_cls_rows(g, tokens, model.embed, std::move(coords), std::move(wavelengths));
    const auto rope = make_rope_context<T>(grid.meta.coords, grid.meta.wavelengths, cfg.encoder_rope());
    for (const auto& block : model.encoder) grid = less_block(g, grid, block, rope);
    return grid;
}

// Projects encoded tokens to decoder width, scatters them into the full
// (N+1) x (C_hcs+1) grid with the mask token filling masked positions, runs
// the decoder and applies the reconstruction head to every non-CLS token.
// Returns (N * C_hcs) x P^2 prediction rows in n-major order.
template <typename T>
typename Graph<T>::Var decode_reconstruct(Graph<T>& g, const HyperMaeModel<T>& model,
                                          const GridVar<T>& encoded, const MaskPlan& plan,
                                          const HyperCube<T>& cube) {
    if (!model.has_decoder) throw ConfigError("decode_reconstruct: model has no decoder");
    const ModelConfig& cfg = model.config;
    auto proj = g.add_rowvec(g.matmul(encoded.tokens, g.param(&model.enc_to_dec_w), FlopLabel::kHead),
                             g.param(&model.enc_to_dec_b));

    const int64_t c_hcs = static_cast<int64_t>(plan.hcs_channels.size());
    const int64_t full_cols = c_hcs + 1;
    const int64_t full_rows = (plan.n_spatial + 1) * full_cols;

    // Destination rows of the encoded grid entries inside the full grid.
    const auto vis_pos = plan.spectral_visible_positions();
    auto dest = std::make_shared<std::vector<int64_t>>();
    for (int64_t i = 0; i <= encoded.meta.n_spatial; ++i) {
        const int64_t n_full = (i == 0) ? 0 : plan.spatial_visible[static_cast<size_t>(i - 1)] + 1;
        for (int64_t j = 0; j <= encoded.meta.n_spectral; ++j) {
            const int64_t c_full = (j == 0) ? 0 : vis_pos[static_cast<size_t>(j - 1)] + 1;
            dest->push_back(n_full * full_cols + c_full);
        }
    }

    auto base = g.broadcast_row(g.param(&model.mask_token), full_rows);
    auto grid_rows = g.overwrite_rows(base, proj, dest);

    GridVar<T> grid;
    grid.tokens = grid_rows;
    grid.meta.n_spatial = plan.n_spatial;
    grid.meta.n_spectral = c_hcs;
    grid.meta.width = cfg.dec_width;
    grid.meta.coords = patch_coords(cube.height(), cube.width(), cfg.patch);
    for (int64_t c : plan.hcs_channels)
        grid.meta.wavelengths.push_back(cube.wavelengths[static_cast<size_t>(c)]);

    const auto rope = make_rope_context<T>(grid.meta.coords, grid.meta.wavelengths, cfg.decoder_rope());
    for (const auto& block : model.decoder) grid = less_block(g, grid, block, rope);

    auto body = std::make_shared<std::vector<int64_t>>();
    for (int64_t n = 1; n <= plan.n_spatial; ++n)
        for (int64_t c = 1; c <= c_hcs; ++c) body->push_back(n * full_cols + c);
    auto tokens = g.gather_rows(grid.tokens, body);
    return g.add_rowvec(g.matmul(tokens, g.param(&model.head_w), FlopLabel::kHead),
                        g.param(&model.head_b));
}

// Per-patch normalized reconstruction targets: each row of (N * C_hcs) x P^2
// is shifted/scaled to zero mean, unit variance (eps 1e-6).
template <typename T>
Tensor<T> normalized_targets(const HyperCube<T>& cube, const MaskPlan& plan, int64_t patch) {
    const HyperCube<T> cube_hcs = cube.restricted(plan.hcs_channels);
    const Tensor<T> patches = patchify(cube_hcs, patch);
    const int64_t rows = patches.dim(0) * patches.dim(1), pp = patches.dim(2);
    Tensor<T> out = patches.reshaped({rows, pp});
    for (int64_t r = 0; r < rows; ++r) {
        T* p = out.data() + r * pp;
        T mean = T(0);
        for (int64_t j = 0; j < pp; ++j) mean += p[j];
        mean /= static_cast<T>(pp);
        T var = T(0);
        for (int64_t j = 0; j < pp; ++j) var += (p[j] - mean) * (p[j] - mean);
        var /= static_cast<T>(pp);
        const T inv = T(1) / std::sqrt(var + T(1e-6));
        for (int64_t j = 0; j < pp; ++j) p[j] = (p[j] - mean) * inv;
    }
    return out;
}

// A token is reconstructed iff it was not part of the visible sub-grid
// (masked on either axis).
inline std::vector<uint8_t> masked_token_rows(const MaskPlan& plan) {
    const int64_t c_hcs = static_cast<int64_t>(plan.hcs_channels.size());
    std::vector<uint8_t> mask(static_cast<size_t>(plan.n_spatial * c_hcs), 1);
    const auto vis_pos = plan.spectral_visible_positions();
    for (int64_t n : plan.spatial_visible)
        for (int64_t c : vis_pos) mask[static_cast<size_t>(n * c_hcs + c)] = 0;
    return mask;
}

// MSE over masked tokens against per-patch-normalized targets.
template <typename T>
typename Graph<T>::Var mae_loss(Graph<T>& g, typename Graph<T>::Var pred_rows, const HyperCube<T>& cube,
                                const MaskPlan& plan, int64_t patch) {
    auto target = std::make_shared<const Tensor<T>>(normalized_targets(cube, plan, patch));
    auto mask = std::make_shared<const std::vector<uint8_t>>(masked_token_rows(plan));
    return g.masked_mse(pred_rows, target, mask);
}

// Full forward for one cube under one plan.
template <typename T>
typename Graph<T>::Var hypermae_forward(Graph<T>& g, const HyperMaeModel<T>& model,
                                        const HyperCube<T>& cube, const MaskPlan& plan) {
    auto encoded = encode_visible(g, model, cube, plan);
    auto pred = decode_reconstruct(g, model, encoded, plan, cube);
    return mae_loss(g, pred, cube, plan, model.config.patch);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

// Gradient-descent-with-momentum state, aligned with named_params order.
template <typename T>
struct Optimizer {
    T lr = T(1e-2);
    T momentum = T(0.9);
    std::vector<Tensor<T>> velocity;

    void step(std::vector<std::pair<std::string, Tensor<T>*>> params, const std::vector<Tensor<T>>& grads) {
        if (velocity.empty())
            for (auto& [name, t] : params) velocity.push_back(Tensor<T>::zeros(t->shape()));
        for (size_t i = 0; i < params.size(); ++i) {
            Tensor<T>& p = *params[i].second;
            for (int64_t j = 0; j < p.size(); ++j) {
                velocity[i][j] = momentum * velocity[i][j] + grads[i][j];
                p[j] -= lr * velocity[i][j];
            }
        }
    }
};

// One pretraining step: fresh HCS samples and mask plans drawn per sample,
// per-cube forwards in fixed order with gradients averaged over the batch,
// then one optimizer update. Returns the mean loss.
template <typename T>
T train_step(HyperMaeModel<T>& model, const std::vector<HyperCube<T>>& batch, const HcsRange& range,
             uint64_t step_seed, Optimizer<T>& opt) {
    if (batch.empty()) throw ConfigError("train_step: empty batch");
    const ModelConfig& cfg = model.config;
    const int64_t channels = batch[0].channels();
    const int64_t n_spatial =
        (batch[0].height() / cfg.patch) * (batch[0].width() / cfg.patch);

    auto params = model.named_params();
    std::vector<Tensor<T>> grads;
    for (auto& [name, t] : params) grads.push_back(Tensor<T>::zeros(t->shape()));

    T total_loss = T(0);
    for (size_t b = 0; b < batch.size(); ++b) {
        const auto hcs = hcs_sample(channels, range, mix_seed(step_seed, 1 + 2 * b));
        const MaskPlan plan = make_mask_plan(n_spatial, hcs, cfg.mask_ratio_spatial,
                                             cfg.mask_ratio_spectral, mix_seed(step_seed, 2 + 2 * b));
        Graph<T> g;
        auto loss = hypermae_forward(g, model, batch[b], plan);
        const T value = g.value(loss)[0];
        if (!std::isfinite(value))
            throw NumericError("train_step: non-finite loss at seed " + std::to_string(step_seed));
        total_loss += value;
        g.backward(loss);
        for (size_t i = 0; i < params.size(); ++i) {
            const Tensor<T> pg = g.grad_of(params[i].second);
            for (int64_t j = 0; j < pg.size(); ++j) grads[i][j] += pg[j];
        }
    }
    const T inv = T(1) / static_cast<T>(batch.size());
    for (auto& gt : grads)
        for (int64_t j = 0; j < gt.size(); ++j) gt[j] *= inv;
    opt.step(params, grads);
    return total_loss * inv;
}

// Deterministic synthetic dataset for the pretraining driver: band centers
// are an evenly spaced subset of the reference grid.
template <typename T>
std::vector<HyperCube<T>> synth_dataset(const ModelConfig& cfg, int64_t count, uint64_t seed) {
    const WavelengthGrid grid = make_reference_grid();
    std::vector<double> wavelengths;
    if (cfg.cube_channels == grid.size()) {
        wavelengths = grid.wavelengths;
    } else {
        for (int64_t j = 0; j < cfg.cube_channels; ++j) {
            const int64_t idx = llround(static_cast<double>(j) * static_cast<double>(grid.size() - 1) /
                                        static_cast<double>(std::max<int64_t>(cfg.cube_channels - 1, 1)));
            wavelengths.push_back(grid.wavelengths[static_cast<size_t>(idx)]);
        }
    }
    std::vector<HyperCube<T>> cubes;
    for (int64_t i = 0; i < count; ++i)
        cubes.push_back(synth_cube<T>(wavelengths, cfg.cube_height, cfg.cube_width, mix_seed(seed, 0xda7a + static_cast<uint64_t>(i))));
    return cubes;
}

struct TrainConfig {
    int64_t steps = 200;
    uint64_t seed = 0;
    double lr = 1e-2;
    double momentum = 0.9;
    int64_t batch_size = 4;
    int64_t dataset_size = 8;
};

// Round-robin pretraining loop over a fixed synthetic dataset; returns the
// per-step loss sequence.
template <typename T>
std::vector<T> run_pretrain(HyperMaeModel<T>& model, const TrainConfig& tc) {
    const auto dataset = synth_dataset<T>(model.config, tc.dataset_size, tc.seed);
    Optimizer<T> opt;
    opt.lr = static_cast<T>(tc.lr);
    opt.momentum = static_cast<T>(tc.momentum);
    std::vector<T> losses;
    for (int64_t step = 0; step < tc.steps; ++step) {
        std::vector<HyperCube<T>> batch;
        for (int64_t b = 0; b < tc.batch_size; ++b)
            batch.push_back(dataset[static_cast<size_t>((step * tc.batch_size + b) %
                                                        static_cast<int64_t>(dataset.size()))]);
        losses.push_back(train_step(model, batch, model.config.hcs, mix_seed(tc.seed, 0x57e9 + static_cast<uint64_t>(step)), opt));
    }
    return losses;
}

}  // namespace lrss
