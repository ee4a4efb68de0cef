#include "dcv/video_core.hpp"

#include "dcv/rng.hpp"

#include <doctest.h>

using namespace dcv;

TEST_CASE("compression ratio is 3 f^2 t / c for the reference configurations") {
    const std::vector<std::pair<const char*, double>> table{
        {"f8t4c16", 48},    {"f16t4c48", 64},   {"f16t8c64", 96},  {"f32t4c128", 96}, {"f32t8c128", 192},
        {"f32t4c256", 48},  {"f32t4c64", 192},  {"f32t4c32", 384}, {"f64t4c128", 384}};
    for (const auto& [name, ratio] : table) {
        CAPTURE(name);
        CHECK(compression_ratio(AEConfig::parse(name)) == ratio);
    }
    CHECK(compression_ratio(AEConfig::parse("f4t2c8")) == 12);
}

TEST_CASE("config names round-trip and invalid configs are rejected") {
    const AEConfig cfg = AEConfig::parse("f32t4c128");
    CHECK(cfg.f == 32);
    CHECK(cfg.t == 4);
    CHECK(cfg.c == 128);
    CHECK(cfg.chunk_size == 4);
    CHECK(cfg.name() == "f32t4c128");
    CHECK_THROWS_AS(AEConfig::parse("f3t4c16"), ConfigError);
    CHECK_THROWS_AS(AEConfig::parse("f8t4"), ConfigError);
    AEConfig bad = cfg;
    bad.chunk_size = 6;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.temporal_mode = TemporalMode::grouped_causal;
    bad.chunk_size = 8;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    for (auto mode : {TemporalMode::causal, TemporalMode::grouped_causal, TemporalMode::non_causal,
                      TemporalMode::chunk_causal})
        CHECK(temporal_mode_from_string(to_string(mode)) == mode);
}

TEST_CASE("token count and speedup estimate") {
    const AEConfig f8 = AEConfig::parse("f8t4c16");
    CHECK(token_count(f8, 2, 16, 512, 512) == 4 * 32 * 32);
    CHECK(speedup_estimate(f8, 2, AEConfig::parse("f64t4c128"), 1, 16, 512, 512).token_ratio == 16.0);
    CHECK(speedup_estimate(f8, 2, AEConfig::parse("f32t4c32"), 1, 16, 512, 512).token_ratio == 4.0);
    CHECK(speedup_estimate(f8, 2, AEConfig::parse("f32t4c32"), 1, 16, 512, 512).attention_flop_ratio == 16.0);
    try {
        token_count(f8, 2, 16, 500, 512);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("H") != std::string::npos);
    }
}

TEST_CASE("chunk plans pad to whole chunks") {
    AEConfig cfg = AEConfig::parse("f4t2c8");
    cfg.chunk_size = 8;
    const ChunkPlan plan = plan_chunks(19, cfg);
    CHECK(plan.boundaries.size() == 3);
    CHECK(plan.pad_frames == 5);
    CHECK(plan.padded_length() == 24);
    CHECK(plan.boundaries[1] == FrameInterval{8, 16});
    cfg.temporal_mode = TemporalMode::non_causal;
    CHECK(plan_chunks(19, cfg).boundaries.size() == 1);
    CHECK(plan_chunks(19, cfg).padded_length() == 20);
}

TEST_CASE("clip validation, slicing and padding") {
    CHECK_THROWS_AS(VideoClip(Tensor<float>({2, 4, 4}), 8), ShapeError);
    CHECK_THROWS(VideoClip(Tensor<float>::constant({1, 2, 2, 3}, 1.5f), 8));
    Rng rng(3);
    VideoClip clip(rng.uniform_tensor<float>({5, 4, 4, 3}, -1, 1), 8);
    const VideoClip padded = clip.padded_to(8);
    CHECK(padded.frames_count() == 8);
    CHECK(bitwise_equal(padded.slice(7, 1).frames, clip.slice(4, 1).frames));
    CHECK(bitwise_equal(concat_clips({clip.slice(0, 2), clip.slice(2, 3)}).frames, clip.frames));
    CHECK(pixel_to_u8(pixel_from_u8(200)) == 200);
}
