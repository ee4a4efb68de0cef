#ifndef DCV_DC_AE_V_HPP
#define DCV_DC_AE_V_HPP

// Deep-compression video autoencoder with pluggable temporal modeling.
//
// Every clip is processed chunk by chunk. Temporal convolutions read their
// left context from a per-layer CausalCache filled by earlier chunks, so the
// output of chunk k never depends on chunks after k. Within a chunk the
// padding is symmetric (cache on the left, replicated last frame on the
// right) except in causal mode, where each layer sees only past frames.
// Normalization statistics are computed per chunk.

#include "dcv/params.hpp"
#include "dcv/video_core.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

namespace dcv {

struct WidthSpec {
    Index base_width = 8;
    Index max_width = 32;
    Index blocks_per_stage = 1;
    Index norm_group_size = 4;
    friend bool operator==(const WidthSpec&, const WidthSpec&) = default;
};

struct StageSpec {
    Index blocks = 1;
    Index width = 16;
    Index spatial_factor = 1;
    Index temporal_factor = 1;
    friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

/// Spatial stages (factor 2 each) followed by one temporal stage carrying t.
std::vector<StageSpec> plan_stages(const AEConfig& config, const WidthSpec& widths);

/// Per-layer trailing input frames carried from one chunk to the next.
template <typename S>
struct CausalCache {
    std::vector<Var<S>> slots;

    bool empty() const { return slots.empty(); }
    std::size_t bytes() const {
        std::size_t n = 0;
        for (const auto& s : slots) n += std::size_t(s.numel()) * sizeof(S);
        return n;
    }
};

template <typename S>
struct AEParams {
    AEConfig config;
    WidthSpec widths;
    Index stem_width = 8;
    std::vector<StageSpec> stages;
    ParamStore<S> weights;
    // Per-channel affine applied before handing latents to a diffusion model.
    std::vector<double> latent_mean;
    std::vector<double> latent_std;

    template <typename T>
    AEParams<T> cast() const {
        AEParams<T> out;
        out.config = config;
        out.widths = widths;
        out.stem_width = stem_width;
        out.stages = stages;
        out.weights = weights.template cast<T>();
        out.latent_mean = latent_mean;
        out.latent_std = latent_std;
        return out;
    }
};

/// Deterministic weights for (config, widths, seed). Throws ConfigError if
/// the stage plan cannot realize (f, t) with the requested widths.
template <typename S>
AEParams<S> build_autoencoder(const AEConfig& config, const WidthSpec& widths, std::uint64_t seed);

// ---- graph-level forward ([C, T, H, W] Vars, differentiable) ----------------

template <typename S>
Var<S> encode_chunk(const Var<S>& frames, const AEParams<S>& params, CausalCache<S>& cache);
template <typename S>
Var<S> decode_chunk(const Var<S>& latent, const AEParams<S>& params, CausalCache<S>& cache);

/// Encodes [3, T, H, W] frames, T a multiple of the effective chunk length.
template <typename S>
Var<S> encode_frames(const Var<S>& frames, const AEParams<S>& params);
template <typename S>
Var<S> decode_frames(const Var<S>& latent, const AEParams<S>& params);

template <typename S>
Tensor<S> clip_to_channels_first(const VideoClip& clip);
/// [3, T, H, W] -> clip, clamping to [-1, 1].
template <typename S>
VideoClip channels_first_to_clip(const Tensor<S>& frames, int frame_rate = 8);

// ---- clip-level inference ----------------------------------------------------------

/// Latent of shape c x ceil(T/chunk)*(chunk/t) x H/f x W/f.
LatentVideo encode(const VideoClip& clip, const AEParams<float>& params);
/// Clip of the padded length, clamped to [-1, 1].
VideoClip decode(const LatentVideo& latent, const AEParams<float>& params);
/// decode(encode(clip)) trimmed back to the clip length.
VideoClip reconstruct(const VideoClip& clip, const AEParams<float>& params);

/// Thrown when an operation is not defined for the configured temporal mode.
class UnsupportedModeError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Chunk-at-a-time encoder. Concatenated outputs equal one-shot encode bitwise.
class StreamingEncoder {
public:
    explicit StreamingEncoder(const AEParams<float>& params, CausalCache<float> cache = {});
    /// `chunk` must hold exactly one effective chunk of frames.
    LatentVideo push(const VideoClip& chunk);
    const CausalCache<float>& cache() const { return cache_; }
    CausalCache<float> release_cache() { return std::move(cache_); }

private:
    const AEParams<float>& params_;
    CausalCache<float> cache_;
};

class StreamingDecoder {
public:
    explicit StreamingDecoder(const AEParams<float>& params, CausalCache<float> cache = {});
    VideoClip push(const LatentVideo& chunk);
    const CausalCache<float>& cache() const { return cache_; }

private:
    const AEParams<float>& params_;
    CausalCache<float> cache_;
};

/// Pulls chunks until the source returns nullopt; `cache` is updated in place.
std::vector<LatentVideo> encode_streaming(const std::function<std::optional<VideoClip>()>& next_chunk,
                                          const AEParams<float>& params, CausalCache<float>& cache);
std::vector<LatentVideo> encode_streaming(const std::vector<VideoClip>& chunks, const AEParams<float>& params,
                                          CausalCache<float>& cache);

/// Start frames of overlapping tiles covering [0, length).
std::vector<Index> tile_starts(Index length, Index tile_len, Index overlap);

/// Frames where a seam can appear: each tile start after the first and the
/// end of the tile before it.
std::vector<Index> tile_seams(Index length, Index tile_len, Index overlap);
/// First frame of every chunk after the first.
std::vector<Index> chunk_seams(Index length, Index chunk);

/// Non-causal long-video baseline: independent overlapping temporal tiles,
/// linearly cross-faded in latent space.
LatentVideo encode_tiled_blended(const VideoClip& clip, const AEParams<float>& params, Index tile_len, Index overlap);
/// Decodes overlapping latent tiles and cross-fades the pixel overlaps.
/// tile_len and overlap are in frames.
VideoClip decode_tiled_blended(const LatentVideo& latent, const AEParams<float>& params, Index tile_len,
                               Index overlap);

/// Per-channel standardization with the stored statistics.
Tensor<float> normalize_latent(const Tensor<float>& latent, const AEParams<float>& params);
Tensor<float> denormalize_latent(const Tensor<float>& latent, const AEParams<float>& params);

}  // namespace dcv

#endif  // DCV_DC_AE_V_HPP
