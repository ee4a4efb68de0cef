#include "dcv/dc_ae_v.hpp"

#include "dcv/ae_training.hpp"
#include "support.hpp"

#include <doctest.h>

using namespace dcv;
using dcv::testing::random_clip;

namespace {

const WidthSpec kSmall{8, 16, 1, 4};

AEParams<float> small_ae(TemporalMode mode, Index chunk, std::uint64_t seed, const char* name = "f4t2c8") {
    AEConfig cfg = AEConfig::parse(name);
    cfg.temporal_mode = mode;
    cfg.chunk_size = chunk;
    return build_autoencoder<float>(cfg, kSmall, seed);
}

// Perturbs every frame from `from` on; true when the earlier latents and reconstructions are bitwise unchanged.
bool prefix_invariant(const AEParams<float>& ae, const VideoClip& clip, Index from, Rng& rng) {
    VideoClip changed = clip;
    for (Index t = from; t < clip.frames_count(); ++t) {
        float* p = changed.frame_ptr(t);
        for (Index i = 0; i < clip.height() * clip.width() * 3; ++i) p[i] = float(rng.uniform(-1, 1));
    }
    const LatentVideo a = encode(clip, ae), b = encode(changed, ae);
    const Index lf = from / ae.config.t;
    if (!bitwise_equal(a.slice(0, lf).values, b.slice(0, lf).values)) return false;
    return bitwise_equal(decode(a, ae).slice(0, from).frames, decode(b, ae).slice(0, from).frames);
}

}  // namespace

TEST_CASE("stage plan realizes f and t") {
    const AEConfig cfg = AEConfig::parse("f8t4c16");
    const auto stages = plan_stages(cfg, WidthSpec{});
    Index f = 1, t = 1;
    for (const auto& s : stages) {
        f *= s.spatial_factor;
        t *= s.temporal_factor;
    }
    CHECK(f == 8);
    CHECK(t == 4);
}

TEST_CASE("latent shape is c x T/t x H/f x W/f") {
    const auto ae = small_ae(TemporalMode::chunk_causal, 4, 1);
    const LatentVideo z = encode(random_clip(1, 8, 16, 16), ae);
    CHECK(z.values.shape == Shape{8, 4, 4, 4});
    CHECK(z.source_frames == 8);
    CHECK(reconstruct(random_clip(1, 7, 16, 16), ae).frames_count() == 7);
    CHECK(encode(random_clip(1, 7, 16, 16), ae).frames() == 4);
}

TEST_CASE("identical seeds give identical weights") {
    const auto a = small_ae(TemporalMode::chunk_causal, 4, 9);
    const auto b = small_ae(TemporalMode::chunk_causal, 4, 9);
    const auto c = small_ae(TemporalMode::chunk_causal, 4, 10);
    bool same = true, differs = false;
    for (const auto& [name, v] : a.weights) {
        same = same && bitwise_equal(v.value(), b.weights.at(name).value());
        differs = differs || !bitwise_equal(v.value(), c.weights.at(name).value());
    }
    CHECK(same);
    CHECK(differs);
}

TEST_CASE("causal modes keep earlier chunks independent of later frames") {
    Rng rng(11);
    const VideoClip clip = random_clip(rng, 16, 8, 8);
    for (auto [mode, chunk] : {std::pair{TemporalMode::causal, Index(2)}, std::pair{TemporalMode::grouped_causal, Index(2)},
                               std::pair{TemporalMode::chunk_causal, Index(4)}}) {
        CAPTURE(to_string(mode));
        const auto ae = small_ae(mode, chunk, 5);
        for (int trial = 0; trial < 3; ++trial) {
            const Index k = rng.integer(1, 16 / chunk - 1);
            CHECK(prefix_invariant(ae, clip, k * chunk, rng));
        }
    }
    const auto nc = small_ae(TemporalMode::non_causal, 2, 5);
    CHECK_FALSE(prefix_invariant(nc, clip, 8, rng));
}

TEST_CASE("causal mode is causal inside a chunk too") {
    Rng rng(12);
    const VideoClip clip = random_clip(rng, 8, 8, 8);
    AEConfig cfg = AEConfig::parse("f4t2c8");
    cfg.temporal_mode = TemporalMode::causal;
    cfg.chunk_size = 4;
    const auto ae = build_autoencoder<float>(cfg, kSmall, 2);
    CHECK(prefix_invariant(ae, clip, 2, rng));
    CHECK(prefix_invariant(ae, clip, 6, rng));
}

TEST_CASE("grouped causal equals chunk causal with chunk t") {
    const auto grouped = small_ae(TemporalMode::grouped_causal, 2, 4);
    AEParams<float> chunked = grouped;
    chunked.config.temporal_mode = TemporalMode::chunk_causal;
    const VideoClip clip = random_clip(3, 10, 8, 8);
    const LatentVideo a = encode(clip, grouped), b = encode(clip, chunked);
    CHECK(bitwise_equal(a.values, b.values));
    CHECK(bitwise_equal(decode(a, grouped).frames, decode(b, chunked).frames));
}

TEST_CASE("streaming encode and decode equal one-shot inference") {
    for (auto mode : {TemporalMode::causal, TemporalMode::grouped_causal, TemporalMode::chunk_causal}) {
        CAPTURE(to_string(mode));
        const auto ae = small_ae(mode, mode == TemporalMode::chunk_causal ? 4 : 2, 6);
        const Index chunk = ae.config.effective_chunk(0);
        const VideoClip clip = random_clip(8, 6 * chunk, 8, 8);
        const LatentVideo whole = encode(clip, ae);
        StreamingEncoder enc(ae);
        StreamingDecoder dec(ae);
        const Index lf = chunk / ae.config.t;
        bool latents_equal = true, frames_equal = true;
        const VideoClip recon = decode(whole, ae);
        for (Index i = 0; i < 6; ++i) {
            const LatentVideo part = enc.push(clip.slice(i * chunk, chunk));
            latents_equal = latents_equal && bitwise_equal(part.values, whole.slice(i * lf, lf).values);
            frames_equal = frames_equal && bitwise_equal(dec.push(part).frames, recon.slice(i * chunk, chunk).frames);
        }
        CHECK(latents_equal);
        CHECK(frames_equal);
        CHECK(enc.cache().bytes() > 0);
    }
    const auto nc = small_ae(TemporalMode::non_causal, 2, 6);
    CHECK_THROWS_AS(StreamingEncoder(nc).push(random_clip(1, 2, 8, 8)), UnsupportedModeError);
}

TEST_CASE("streaming rejects a chunk of the wrong length") {
    const auto ae = small_ae(TemporalMode::chunk_causal, 4, 6);
    StreamingEncoder enc(ae);
    CHECK_THROWS(enc.push(random_clip(1, 3, 8, 8)));
}

TEST_CASE("autoencoder gradients match central differences in double precision") {
    for (auto mode : {TemporalMode::chunk_causal, TemporalMode::causal, TemporalMode::non_causal}) {
        CAPTURE(to_string(mode));
        AEConfig cfg = AEConfig::parse("f4t2c8");
        cfg.temporal_mode = mode;
        cfg.chunk_size = 4;
        auto ae = build_autoencoder<double>(cfg, kSmall, 3);
        Rng rng(5);
        const Var<double> x(rng.uniform_tensor<double>({3, 8, 8, 8}, -1, 1));
        const auto result = dcv::testing::check_gradients<double>(
            ae.weights, [&] { return reconstruction_loss(decode_frames(encode_frames(x, ae), ae), x, 0.1); }, 2);
        CAPTURE(result.worst_name);
        CHECK(result.worst_rel < 1e-4);
        CHECK(result.checked > 20);
    }
}

TEST_CASE("tiled blending covers the clip and is restricted to non-causal models") {
    CHECK(tile_starts(64, 16, 4) == std::vector<Index>{0, 12, 24, 36, 48});
    CHECK(tile_starts(10, 16, 4) == std::vector<Index>{0});
    CHECK(tile_seams(28, 16, 4) == std::vector<Index>{12, 16});
    CHECK(chunk_seams(20, 8) == std::vector<Index>{8, 16});
    CHECK_THROWS_AS(tile_starts(64, 4, 4), ConfigError);

    const auto nc = small_ae(TemporalMode::non_causal, 2, 7);
    const VideoClip clip = random_clip(2, 20, 8, 8);
    const LatentVideo z = encode_tiled_blended(clip, nc, 8, 2);
    CHECK(z.values.shape == Shape{8, 10, 2, 2});
    CHECK(decode_tiled_blended(z, nc, 8, 2).frames_count() == 20);
    // A single tile reduces to plain inference.
    CHECK(bitwise_equal(encode_tiled_blended(clip.slice(0, 8), nc, 8, 2).values, encode(clip.slice(0, 8), nc).values));
    CHECK_THROWS_AS(encode_tiled_blended(clip, small_ae(TemporalMode::chunk_causal, 4, 7), 8, 2), UnsupportedModeError);
}

TEST_CASE("latent normalization round-trips") {
    auto ae = small_ae(TemporalMode::chunk_causal, 4, 1);
    ae.latent_mean.assign(8, 0.5);
    ae.latent_std.assign(8, 2.0);
    Rng rng(1);
    const Tensor<float> z = rng.normal_tensor<float>({8, 2, 2, 2});
    const Tensor<float> back = denormalize_latent(normalize_latent(z, ae), ae);
    for (Index i = 0; i < z.numel(); ++i) CHECK(back.data[i] == doctest::Approx(z.data[i]).epsilon(1e-6));
}
