#include "dcv/metrics.hpp"

#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace dcv;
using dcv::testing::random_clip;

namespace {

double rel(double a, double b) { return std::abs(a - b) / std::max(1e-300, std::abs(b)); }

}  // namespace

TEST_CASE("psnr of a constant offset of 1 is 10 log10(4)") {
    const VideoClip zeros = VideoClip::zeros(3, 8, 8);
    const VideoClip ones(Tensor<float>::constant({3, 8, 8, 3}, 1.0f), 8);
    CHECK(metrics::psnr(zeros, ones) == doctest::Approx(6.0206).epsilon(1e-6 / 6.0206));
    CHECK(std::abs(metrics::psnr(zeros, ones) - 10.0 * std::log10(4.0)) < 1e-12);
}

TEST_CASE("psnr and ssim agree with the brute-force oracles") {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const VideoClip x = random_clip(s, 2, 12, 11);
        const VideoClip y = random_clip(s + 100, 2, 12, 11);
        CHECK(rel(metrics::psnr(x, y), dcv::testing::oracle_psnr(x, y)) < 1e-9);
        CHECK(rel(metrics::ssim(x, y), dcv::testing::oracle_ssim(x, y)) < 1e-9);
    }
}

TEST_CASE("metric invariants") {
    const VideoClip x = random_clip(1, 3, 10, 10);
    const VideoClip y = random_clip(2, 3, 10, 10);
    CHECK(metrics::psnr(x, x) == metrics::kPsnrCap);
    CHECK(metrics::ssim(x, x) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(metrics::psnr(x, y) == metrics::psnr(y, x));
    CHECK(metrics::ssim(x, y) == doctest::Approx(metrics::ssim(y, x)).epsilon(1e-12));


    // A common shift leaves psnr untouched.
    Tensor<float> xs = x.frames, ys = y.frames;
    xs.data = xs.data * 0.5f + 0.25f;
    ys.data = ys.data * 0.5f + 0.25f;
    Tensor<float> xh = x.frames, yh = y.frames;
    xh.data = xh.data * 0.5f;
    yh.data = yh.data * 0.5f;
    CHECK(metrics::psnr(VideoClip(xs, 8), VideoClip(ys, 8)) ==
          doctest::Approx(metrics::psnr(VideoClip(xh, 8), VideoClip(yh, 8))).epsilon(1e-6));
}

TEST_CASE("ssim of a checkerboard against its negation is negative") {
    Tensor<float> board({1, 8, 8, 3});
    for (Index y = 0; y < 8; ++y)
        for (Index x = 0; x < 8; ++x)
            for (Index c = 0; c < 3; ++c) board.data[(y * 8 + x) * 3 + c] = (x + y) % 2 ? 0.5f : -0.5f;
    Tensor<float> neg = board;
    neg.data = -neg.data;
    const VideoClip a(board, 8), b(neg, 8);
    const double value = metrics::ssim(a, b);
    CHECK(value < 0.0);
    CHECK(value >= -1.0);
    CHECK(rel(value, dcv::testing::oracle_ssim(a, b)) < 1e-9);
}

TEST_CASE("equal constant clips score ssim 1 and a flat capped profile") {
    const VideoClip c(Tensor<float>::constant({2, 8, 8, 3}, 0.3f), 8);
    CHECK(metrics::ssim(c, c) == doctest::Approx(1.0).epsilon(1e-12));
    const auto profile = metrics::per_frame_psnr_profile(c, c, {1});
    CHECK(profile.per_frame == std::vector<double>{metrics::kPsnrCap, metrics::kPsnrCap});
    CHECK(profile.boundary_dip == 0.0);
    const VideoClip one = random_clip(3, 1, 8, 8);
    CHECK(metrics::per_frame_psnr(one, random_clip(4, 1, 8, 8)).size() == 1);
}

TEST_CASE("metric errors") {
    const VideoClip x = random_clip(1, 2, 8, 8);
    CHECK_THROWS_AS(metrics::psnr(x, random_clip(1, 2, 8, 9)), ShapeError);
    CHECK_THROWS_AS(metrics::ssim(random_clip(1, 1, 5, 5), random_clip(2, 1, 5, 5)), ShapeError);
    CHECK_THROWS_AS(metrics::psnr(x, x, {true, true}), std::invalid_argument);
    CHECK_THROWS_AS(metrics::evaluate({}, {}), std::invalid_argument);
}

TEST_CASE("padding frames are excluded") {
    const VideoClip ref = random_clip(4, 4, 8, 8);
    VideoClip rec = ref;
    float* last = rec.frame_ptr(3);
    for (Index i = 0; i < 8 * 8 * 3; ++i) last[i] = -last[i];
    CHECK(metrics::psnr(ref, rec, metrics::padding_mask(4, 3)) == metrics::kPsnrCap);
    CHECK(metrics::psnr(ref, rec) < metrics::kPsnrCap);
    const auto report = metrics::evaluate({ref}, {rec}, {3}, {"a"});
    CHECK(report.clips[0].name == "a");
    CHECK(report.mean_psnr == metrics::kPsnrCap);
    CHECK(report.to_csv().rfind("clip,psnr_db,ssim\n", 0) == 0);
}

TEST_CASE("boundary dip is mean minus the lowest frame near a boundary") {
    const std::vector<double> profile{10, 10, 10, 7, 10, 10, 10, 10};
    CHECK(metrics::boundary_dip(profile, {4}) == doctest::Approx(9.625 - 7.0));
    CHECK(metrics::boundary_dip(profile, {7}) == doctest::Approx(9.625 - 10.0));
    CHECK(metrics::boundary_dip(profile, {}) == 0.0);
}
