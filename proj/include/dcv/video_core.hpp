#ifndef DCV_VIDEO_CORE_HPP
#define DCV_VIDEO_CORE_HPP

#include "dcv/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace dcv {

/// RGB frames [T, H, W, 3] with values in [-1, 1].
struct VideoClip {
    Tensor<float> frames;
    int frame_rate = 8;

    VideoClip() = default;
    /// Validates shape, finiteness and range.
    VideoClip(Tensor<float> frames, int frame_rate);

    /// Zero-filled (mid-gray) clip.
    static VideoClip zeros(Index T, Index H, Index W, int frame_rate = 8);

    Index frames_count() const { return frames.dim(0); }
    Index height() const { return frames.dim(1); }
    Index width() const { return frames.dim(2); }
    float* frame_ptr(Index t) { return frames.ptr() + t * height() * width() * 3; }
    const float* frame_ptr(Index t) const { return frames.ptr() + t * height() * width() * 3; }

    /// Frames [start, start + count).
    VideoClip slice(Index start, Index count) const;
    /// Extends to `length` frames by replicating the final frame.
    VideoClip padded_to(Index length) const;
};

/// 8-bit sample to the [-1, 1] working range.
inline float pixel_from_u8(unsigned v) { return float(v) / 127.5f - 1.0f; }
unsigned char pixel_to_u8(float v);

/// Temporal-concatenation of clips with equal spatial size.
VideoClip concat_clips(const std::vector<VideoClip>& clips);

enum class TemporalMode { causal, grouped_causal, non_causal, chunk_causal };

std::string to_string(TemporalMode mode);
TemporalMode temporal_mode_from_string(const std::string& name);

/// fx ty cz autoencoder descriptor plus its chunking/causality structure.
struct AEConfig {
    Index f = 8;
    Index t = 4;
    Index c = 16;
    Index chunk_size = 4;
    TemporalMode temporal_mode = TemporalMode::chunk_causal;

    /// Throws ConfigError on any invariant violation.
    void validate() const;

    /// "f8t4c16".
    std::string name() const;

    /// Parses "f8t4c16"; chunk_size defaults to t, mode to chunk_causal.
    static AEConfig parse(const std::string& name);

    /// Chunk length used to partition a clip of `frames` frames.
    Index effective_chunk(Index frames) const;

    friend bool operator==(const AEConfig&, const AEConfig&) = default;
};

/// c x T' x H' x W' latent produced by an encoder.
struct LatentVideo {
    Tensor<float> values;
    AEConfig source_config;
    Index source_frames = 0;  // unpadded clip length

    Index channels() const { return values.dim(0); }
    Index frames() const { return values.dim(1); }
    Index height() const { return values.dim(2); }
    Index width() const { return values.dim(3); }

    /// Latent frames [start, start + count).
    LatentVideo slice(Index start, Index count) const;
};

struct FrameInterval {
    Index start = 0;
    Index end = 0;  // exclusive
    friend bool operator==(const FrameInterval&, const FrameInterval&) = default;
};

struct ChunkPlan {
    std::vector<FrameInterval> boundaries;
    Index pad_frames = 0;
    Index padded_length() const { return boundaries.empty() ? 0 : boundaries.back().end; }
};

/// 3 f^2 t / c.
double compression_ratio(const AEConfig& config);

/// (T/t) * (H/(f p)) * (W/(f p)); throws ShapeError naming the failing axis.
Index token_count(const AEConfig& config, Index patch_size, Index T, Index H, Index W);

struct SpeedupEstimate {
    double token_ratio = 1.0;
    double attention_flop_ratio = 1.0;
};

/// Token and quadratic-attention cost ratios of base over new. Estimates only.
SpeedupEstimate speedup_estimate(const AEConfig& base, Index base_patch, const AEConfig& next, Index next_patch,
                                 Index T, Index H, Index W);

/// Pads T up to a multiple of the effective chunk length and splits it.
ChunkPlan plan_chunks(Index T, const AEConfig& config);

}  // namespace dcv

#endif  // DCV_VIDEO_CORE_HPP
