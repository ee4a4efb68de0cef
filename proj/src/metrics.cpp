#include "dcv/metrics.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace dcv::metrics {

namespace {

void check_pair(const VideoClip& x, const VideoClip& y) {
    if (x.frames.shape != y.frames.shape)
        throw ShapeError("metric inputs differ in shape: " + shape_str(x.frames.shape) + " vs " +
                         shape_str(y.frames.shape));
}

bool included(const FrameMask& exclude, Index t) { return exclude.empty() || !exclude[std::size_t(t)]; }

double psnr_from_mse(double mse) {
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(kPeak * kPeak / mse));
}

double frame_sq_error(const VideoClip& x, const VideoClip& y, Index t) {
    const Index per = x.height() * x.width() * 3;
    const float* a = x.frame_ptr(t);
    const float* b = y.frame_ptr(t);
    double s = 0.0;
    for (Index i = 0; i < per; ++i) {
        const double d = double(a[i]) - double(b[i]);
        s += d * d;
    }
    return s;
}

std::vector<double> gaussian_kernel(int window, double sigma) {
    std::vector<double> k(static_cast<std::size_t>(window));
    const double mid = (window - 1) / 2.0;
    double total = 0.0;
    for (int i = 0; i < window; ++i) {
        k[std::size_t(i)] = std::exp(-(i - mid) * (i - mid) / (2.0 * sigma * sigma));
        total += k[std::size_t(i)];
    }
    for (auto& v : k) v /= total;
    return k;
}

// Valid-mode separable filter of an H x W plane.
std::vector<double> filter_valid(const std::vector<double>& img, Index H, Index W, const std::vector<double>& k) {
    const Index n = Index(k.size()), Ho = H - n + 1, Wo = W - n + 1;
    std::vector<double> rows(std::size_t(H * Wo), 0.0);
    for (Index y = 0; y < H; ++y)
        for (Index x = 0; x < Wo; ++x) {
            double s = 0.0;
            for (Index i = 0; i < n; ++i) s += k[std::size_t(i)] * img[std::size_t(y * W + x + i)];
            rows[std::size_t(y * Wo + x)] = s;
        }
    std::vector<double> out(std::size_t(Ho * Wo), 0.0);
    for (Index y = 0; y < Ho; ++y)
        for (Index x = 0; x < Wo; ++x) {
            double s = 0.0;
            for (Index i = 0; i < n; ++i) s += k[std::size_t(i)] * rows[std::size_t((y + i) * Wo + x)];
            out[std::size_t(y * Wo + x)] = s;
        }
    return out;
}

}  // namespace

FrameMask padding_mask(Index total_frames, Index valid_frames) {
    FrameMask mask(std::size_t(total_frames), false);
    for (Index t = valid_frames; t < total_frames; ++t) mask[std::size_t(t)] = true;
    return mask;
}

double psnr(const VideoClip& x, const VideoClip& y, const FrameMask& exclude) {
    check_pair(x, y);
    if (!exclude.empty() && Index(exclude.size()) != x.frames_count())
        throw ShapeError("frame mask length does not match clip");
    double total = 0.0;
    Index frames = 0;
    for (Index t = 0; t < x.frames_count(); ++t) {
        if (!included(exclude, t)) continue;
        total += frame_sq_error(x, y, t);
        ++frames;
    }
    if (frames == 0) throw std::invalid_argument("empty evaluation set");
    return psnr_from_mse(total / double(frames * x.height() * x.width() * 3));
}

std::vector<double> luma(const VideoClip& clip, Index frame) {
    const Index plane = clip.height() * clip.width();
    const float* p = clip.frame_ptr(frame);
    std::vector<double> out(static_cast<std::size_t>(plane));
    for (Index i = 0; i < plane; ++i)
        out[std::size_t(i)] = 0.299 * double(p[3 * i]) + 0.587 * double(p[3 * i + 1]) + 0.114 * double(p[3 * i + 2]);
    return out;
}

double ssim_plane(const std::vector<double>& x, const std::vector<double>& y, Index H, Index W, int window,
                  double sigma) {
    if (H < window || W < window)
        throw ShapeError("ssim: frames of " + std::to_string(H) + "x" + std::to_string(W) + " smaller than window " +
                         std::to_string(window));
    const double c1 = (0.01 * kPeak) * (0.01 * kPeak);
    const double c2 = (0.03 * kPeak) * (0.03 * kPeak);
    const auto k = gaussian_kernel(window, sigma);
    std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, H, W, k), my = filter_valid(y, H, W, k);
    const auto sxx = filter_valid(xx, H, W, k), syy = filter_valid(yy, H, W, k), sxy = filter_valid(xy, H, W, k);
    double total = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
        const double vx = sxx[i] - mx[i] * mx[i];
        const double vy = syy[i] - my[i] * my[i];
        const double cov = sxy[i] - mx[i] * my[i];
        total += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
                 ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    return total / double(mx.size());
}

double ssim(const VideoClip& x, const VideoClip& y, int window, double sigma, const FrameMask& exclude) {
    check_pair(x, y);
    double total = 0.0;
    Index frames = 0;
    for (Index t = 0; t < x.frames_count(); ++t) {
        if (!included(exclude, t)) continue;
        total += ssim_plane(luma(x, t), luma(y, t), x.height(), x.width(), window, sigma);
        ++frames;
    }
    if (frames == 0) throw std::invalid_argument("empty evaluation set");
    return total / double(frames);
}

std::vector<double> per_frame_psnr(const VideoClip& x, const VideoClip& y) {
    check_pair(x, y);
    std::vector<double> out;
    const double per = double(x.height() * x.width() * 3);
    for (Index t = 0; t < x.frames_count(); ++t) out.push_back(psnr_from_mse(frame_sq_error(x, y, t) / per));
    return out;
}

double boundary_dip(const std::vector<double>& profile, const std::vector<Index>& boundaries) {
    if (profile.empty()) return 0.0;
    const Index n = Index(profile.size());
    double lowest = std::numeric_limits<double>::infinity();
    for (Index b : boundaries)
        for (Index t = b - 1; t <= b + 1; ++t)
            if (t >= 0 && t < n) lowest = std::min(lowest, profile[std::size_t(t)]);
    if (!std::isfinite(lowest)) return 0.0;
    double mean = 0.0;
    for (double v : profile) mean += v;
    mean /= double(n);
    return mean - lowest;
}

PsnrProfile per_frame_psnr_profile(const VideoClip& x, const VideoClip& y, const std::vector<Index>& boundaries) {
    PsnrProfile out;
    out.per_frame = per_frame_psnr(x, y);
    out.boundary_dip = boundary_dip(out.per_frame, boundaries);
    return out;
}

std::string MetricReport::to_csv() const {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "clip,psnr_db,ssim\n";
    for (const auto& c : clips) os << c.name << ',' << c.psnr << ',' << c.ssim << '\n';
    return os.str();
}

std::string MetricReport::to_json() const {
    nlohmann::json j;
    j["n_clips"] = clips.size();
    j["mean_psnr_db"] = mean_psnr;
    j["mean_ssim"] = mean_ssim;
    return j.dump(2);
}

MetricReport evaluate(const std::vector<VideoClip>& refs, const std::vector<VideoClip>& recons,
                      const std::vector<Index>& valid_frames, const std::vector<std::string>& names) {
    if (refs.size() != recons.size()) throw ShapeError("evaluate: reference/reconstruction count mismatch");
    if (refs.empty()) throw std::invalid_argument("empty evaluation set");
    MetricReport report;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const Index valid = valid_frames.empty() ? refs[i].frames_count() : valid_frames[i];
        const FrameMask mask = padding_mask(refs[i].frames_count(), valid);
        ClipMetrics m;
        m.name = names.empty() ? "clip_" + std::to_string(i) : names[i];
        m.psnr = psnr(refs[i], recons[i], mask);
        m.ssim = ssim(refs[i], recons[i], 7, 1.5, mask);
        auto profile = per_frame_psnr(refs[i], recons[i]);
        profile.resize(std::size_t(valid));
        m.per_frame_psnr = std::move(profile);
        report.mean_psnr += m.psnr;
        report.mean_ssim += m.ssim;
        report.clips.push_back(std::move(m));
    }
    report.mean_psnr /= double(refs.size());
    report.mean_ssim /= double(refs.size());
    return report;
}

}  // namespace dcv::metrics
