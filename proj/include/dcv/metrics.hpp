#ifndef DCV_METRICS_HPP
#define DCV_METRICS_HPP

// Reconstruction metrics over [-1, 1] clips. PSNR uses the range width 2.0
// as peak; SSIM runs on Rec. 601 luma with a 7x7 Gaussian window (sigma 1.5)
// over valid positions only.

#include "dcv/video_core.hpp"

#include <string>
#include <vector>

namespace dcv::metrics {

inline constexpr double kPeak = 2.0;
inline constexpr double kPsnrCap = 100.0;

/// Per-frame exclusion flags; an empty mask excludes nothing.
using FrameMask = std::vector<bool>;

/// Mask excluding frames at index >= valid_frames (replicated padding).
FrameMask padding_mask(Index total_frames, Index valid_frames);

double psnr(const VideoClip& x, const VideoClip& y, const FrameMask& exclude = {});

/// Mean SSIM over included frames.
double ssim(const VideoClip& x, const VideoClip& y, int window = 7, double sigma = 1.5, const FrameMask& exclude = {});

/// SSIM map mean for a single pair of luma planes (row-major H x W).
double ssim_plane(const std::vector<double>& x, const std::vector<double>& y, Index H, Index W, int window = 7,
                  double sigma = 1.5);

std::vector<double> luma(const VideoClip& clip, Index frame);

std::vector<double> per_frame_psnr(const VideoClip& x, const VideoClip& y);

/// mean(profile) - min(profile over frames within +-1 of any boundary).
/// A boundary b sits between frames b-1 and b. Zero when no boundary frame exists.
double boundary_dip(const std::vector<double>& profile, const std::vector<Index>& boundaries);

struct PsnrProfile {
    std::vector<double> per_frame;
    double boundary_dip = 0.0;
};

PsnrProfile per_frame_psnr_profile(const VideoClip& x, const VideoClip& y, const std::vector<Index>& boundaries);

struct ClipMetrics {
    std::string name;
    double psnr = 0.0;
    double ssim = 0.0;
    std::vector<double> per_frame_psnr;
};

struct MetricReport {
    std::vector<ClipMetrics> clips;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;

    std::string to_csv() const;
    std::string to_json() const;
};

/// Scores each reconstruction against its reference over the first
/// `valid_frames[i]` frames (all frames when the vector is empty).
MetricReport evaluate(const std::vector<VideoClip>& references, const std::vector<VideoClip>& reconstructions,
                      const std::vector<Index>& valid_frames = {}, const std::vector<std::string>& names = {});

}  // namespace dcv::metrics

#endif  // DCV_METRICS_HPP
