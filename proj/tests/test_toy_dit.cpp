#include "dcv/toy_dit.hpp"

#include "dcv/checkpoint.hpp"
#include "dcv/ops.hpp"
#include "support.hpp"

#include <doctest.h>

#include <filesystem>

using namespace dcv;

namespace {

DiTConfig tiny_config(Index channels = 4, Index patch = 1) {
    DiTConfig cfg;
    cfg.latent_channels = channels;
    cfg.patch_size = patch;
    cfg.embed_dim = 24;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    cfg.time_freq_dim = 8;
    return cfg;
}

// Small random values everywhere so every block contributes.
template <typename S>
void jitter(DiTModel<S>& model, std::uint64_t seed, double scale = 0.2) {
    Rng rng(seed);
    for (auto& [name, v] : model.weights)
        for (Index i = 0; i < v.numel(); ++i) v.mutable_value().data[i] += S(rng.normal(0, scale));
}

}  // namespace

TEST_CASE("config validation") {
    DiTConfig cfg = tiny_config();
    cfg.heads = 5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.embed_dim = 7;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("patchify orders tokens (t, i, j) and features (channel, dy, dx)") {
    Tensor<float> latent({2, 2, 4, 6});
    for (Index i = 0; i < latent.numel(); ++i) latent.data[i] = float(i);
    const Var<float> x(latent);
    const Var<float> tokens = patchify(x, 2);
    const TokenGrid grid{2, 2, 3};
    REQUIRE(tokens.shape() == Shape{12, 8});
    bool ordered = true;
    for (Index t = 0; t < 2; ++t)
        for (Index i = 0; i < 2; ++i)
            for (Index j = 0; j < 3; ++j)
                for (Index c = 0; c < 2; ++c)
                    for (Index dy = 0; dy < 2; ++dy)
                        for (Index dx = 0; dx < 2; ++dx) {
                            const Index token = (t * 2 + i) * 3 + j, feature = (c * 2 + dy) * 2 + dx;
                            const float expected = latent.data[((c * 2 + t) * 4 + i * 2 + dy) * 6 + j * 2 + dx];
                            ordered = ordered && tokens.value().data[token * 8 + feature] == expected;
                        }
    CHECK(ordered);
    CHECK(bitwise_equal(unpatchify(tokens, 2, grid, 2).value(), latent));
    CHECK_THROWS_AS(token_grid({2, 2, 5, 6}, 2), ShapeError);
}

TEST_CASE("the embedding grid size equals token_count for random valid shapes") {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        AEConfig ae;
        ae.f = Index(1) << rng.integer(1, 4);
        ae.t = Index(1) << rng.integer(0, 2);
        ae.c = rng.integer(1, 6);
        ae.chunk_size = ae.t;
        const Index p = rng.integer(1, 2);
        const Index T = ae.t * rng.integer(1, 3), H = ae.f * p * rng.integer(1, 3), W = ae.f * p * rng.integer(1, 3);
        DiTConfig cfg = tiny_config(ae.c, p);
        cfg.depth = 0;
        const auto model = build_dit<float>(cfg, 1);
        const Var<float> latent(Tensor<float>({ae.c, T / ae.t, H / ae.f, W / ae.f}));
        CAPTURE(trial);
        CHECK(embed(latent, model).dim(0) == token_count(ae, p, T, H, W));
    }
}

TEST_CASE("embedding respects max_tokens") {
    DiTConfig cfg = tiny_config();
    cfg.max_tokens = 8;
    const auto model = build_dit<float>(cfg, 1);
    CHECK_THROWS_AS(embed(Var<float>(Tensor<float>({4, 1, 3, 3})), model), ShapeError);
}

TEST_CASE("positional signal is fixed and distinguishes positions") {
    const TokenGrid grid{2, 3, 3};
    const auto a = positional_signal<double>(grid, 24);
    const auto b = positional_signal<double>(grid, 24);
    CHECK(a.shape == Shape{18, 24});
    CHECK(bitwise_equal(a, b));
    for (Index r = 1; r < 18; ++r) {
        double diff = 0;
        for (Index d = 0; d < 24; ++d) diff += std::abs(a.data[r * 24 + d] - a.data[d]);
        CHECK(diff > 1e-6);
    }
}

TEST_CASE("a zero-output model has flow-matching loss near 2 on unit-variance data") {
    auto model = build_dit<float>(tiny_config(), 3);
    model.weights.at("head.linear.weight").mutable_value().data.setZero();
    model.weights.at("head.linear.bias").mutable_value().data.setZero();
    Rng rng(4);
    double total = 0;
    const int draws = 400;
    for (int i = 0; i < draws; ++i) {
        const Tensor<float> clean = rng.normal_tensor<float>({4, 2, 4, 4});
        NoGradGuard guard;
        total += flow_matching_loss(model, clean, i % 3, rng).value().data[0];
    }
    CHECK(total / draws == doctest::Approx(2.0).epsilon(0.02));
}

TEST_CASE("diffusion transformer gradients match central differences in double precision") {
    auto model = build_dit<float>(tiny_config(), 5).cast<double>();
    jitter(model, 6);
    Rng rng(7);
    const Tensor<double> clean = rng.normal_tensor<double>({4, 2, 2, 2});
    const Tensor<double> noise = rng.normal_tensor<double>({4, 2, 2, 2});
    const auto result = dcv::testing::check_gradients<double>(
        model.weights, [&] { return flow_matching_loss_at(model, clean, 1, 0.3, noise); }, 2, 1e-5, 1e-6);
    CAPTURE(result.worst_name);
    CHECK(result.worst_rel < 1e-4);
    CHECK(result.checked > 40);
}

TEST_CASE("sampling and training are deterministic") {
    auto model = build_dit<float>(tiny_config(), 8);
    jitter(model, 9, 0.05);
    const Shape shape{4, 2, 2, 2};
    const auto a = sample_latent(model, shape, 1, 4, 77);
    CHECK(a.shape == shape);
    CHECK(bitwise_equal(a, sample_latent(model, shape, 1, 4, 77)));
    CHECK_FALSE(bitwise_equal(a, sample_latent(model, shape, 1, 4, 78)));

    Rng rng(10);
    std::vector<Tensor<float>> latents;
    std::vector<Index> labels;
    for (int i = 0; i < 6; ++i) {
        latents.push_back(rng.normal_tensor<float>(shape));
        labels.push_back(i % 3);
    }
    DiTTrainConfig cfg;
    cfg.steps = 4;
    cfg.batch_size = 2;
    cfg.seed = 11;
    auto m1 = build_dit<float>(tiny_config(), 12);
    auto m2 = build_dit<float>(tiny_config(), 12);
    const auto r1 = train_base_model(m1, latents, labels, cfg);
    const auto r2 = train_base_model(m2, latents, labels, cfg);
    CHECK(r1.losses == r2.losses);
    CHECK(r1.losses.size() == 4);
    CHECK(validation_diffusion_loss(m1, latents, labels, 2, 5) == validation_diffusion_loss(m2, latents, labels, 2, 5));

    // A stop rule ends training early.
    auto m3 = build_dit<float>(tiny_config(), 12);
    const auto r3 = train_flow_matching(m3, latents, labels, cfg, [](long step, double) { return step >= 2; });
    CHECK(r3.losses.size() == 2);
}

TEST_CASE("divergence is thrown or recorded") {
    auto model = build_dit<float>(tiny_config(), 13);
    model.weights.at("embedder.weight").mutable_value().data.setConstant(std::numeric_limits<float>::infinity());
    Rng rng(1);
    const std::vector<Tensor<float>> latents{rng.normal_tensor<float>({4, 1, 2, 2})};
    DiTTrainConfig cfg;
    cfg.steps = 3;
    cfg.batch_size = 1;
    CHECK_THROWS_AS(train_base_model(model, latents, {0}, cfg), DivergenceError);
    cfg.stop_on_divergence = true;
    const auto report = train_base_model(model, latents, {0}, cfg);
    CHECK(report.diverged_at == 1);
}

TEST_CASE("diffusion transformer checkpoints round-trip") {
    const auto dir = std::filesystem::temp_directory_path() / "dcv_test_dit";
    std::filesystem::create_directories(dir);
    auto model = build_dit<float>(tiny_config(), 14);
    jitter(model, 15);
    save_dit(dir / "dit.safetensors", model);
    const auto back = load_dit(dir / "dit.safetensors");
    CHECK(back.config == model.config);
    Rng rng(2);
    const Var<float> x(rng.normal_tensor<float>({4, 2, 2, 2}));
    NoGradGuard guard;
    CHECK(bitwise_equal(dit_forward(x, 0.4f, 2, model).value(), dit_forward(x, 0.4f, 2, back).value()));
}
