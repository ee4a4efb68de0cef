#include "dcv/video_core.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <regex>

namespace dcv {

VideoClip::VideoClip(Tensor<float> f, int rate) : frames(std::move(f)), frame_rate(rate) {
    if (frames.rank() != 4 || frames.dim(3) != 3)
        throw ShapeError("VideoClip: expected [T, H, W, 3], got " + shape_str(frames.shape));
    if (frames.dim(0) < 1 || frames.dim(1) < 1 || frames.dim(2) < 1) throw ShapeError("VideoClip: empty dimension");
    if (frame_rate < 1) throw ConfigError("VideoClip: frame rate must be positive");
    for (Index i = 0; i < frames.numel(); ++i) {
        const float v = frames.data[i];
        if (!std::isfinite(v) || v < -1.0f || v > 1.0f)
            throw std::invalid_argument("VideoClip: value " + std::to_string(v) + " outside [-1, 1]");
    }
}

VideoClip VideoClip::zeros(Index T, Index H, Index W, int rate) {
    return VideoClip(Tensor<float>(Shape{T, H, W, 3}), rate);
}

VideoClip VideoClip::slice(Index start, Index count) const {
    if (start < 0 || count < 1 || start + count > frames_count()) throw ShapeError("VideoClip::slice out of range");
    const Index per = height() * width() * 3;
    Tensor<float> out(Shape{count, height(), width(), 3}, frames.data.segment(start * per, count * per));
    VideoClip clip;
    clip.frames = std::move(out);
    clip.frame_rate = frame_rate;
    return clip;
}

VideoClip VideoClip::padded_to(Index length) const {
    if (length < frames_count()) throw ShapeError("VideoClip::padded_to shorter than clip");
    if (length == frames_count()) return *this;
    const Index per = height() * width() * 3;
    Tensor<float> out(Shape{length, height(), width(), 3});
    out.data.head(frames.numel()) = frames.data;
    for (Index t = frames_count(); t < length; ++t)
        out.data.segment(t * per, per) = frames.data.segment((frames_count() - 1) * per, per);
    VideoClip clip;
    clip.frames = std::move(out);
    clip.frame_rate = frame_rate;
    return clip;
}

unsigned char pixel_to_u8(float v) {
    const float q = std::round((std::clamp(v, -1.0f, 1.0f) + 1.0f) * 127.5f);
    return static_cast<unsigned char>(std::clamp(q, 0.0f, 255.0f));
}

VideoClip concat_clips(const std::vector<VideoClip>& clips) {
    if (clips.empty()) throw ShapeError("concat_clips: no clips");
    Index T = 0;
    for (const auto& c : clips) {
        if (c.height() != clips[0].height() || c.width() != clips[0].width())
            throw ShapeError("concat_clips: spatial size mismatch");
        T += c.frames_count();
    }
    Tensor<float> out(Shape{T, clips[0].height(), clips[0].width(), 3});
    Index offset = 0;
    for (const auto& c : clips) {
        out.data.segment(offset, c.frames.numel()) = c.frames.data;
        offset += c.frames.numel();
    }
    VideoClip clip;
    clip.frames = std::move(out);
    clip.frame_rate = clips[0].frame_rate;
    return clip;
}

std::string to_string(TemporalMode mode) {
    switch (mode) {
        case TemporalMode::causal: return "causal";
        case TemporalMode::grouped_causal: return "grouped_causal";
        case TemporalMode::non_causal: return "non_causal";
        case TemporalMode::chunk_causal: return "chunk_causal";
    }
    return "unknown";
}

TemporalMode temporal_mode_from_string(const std::string& name) {
    if (name == "causal") return TemporalMode::causal;
    if (name == "grouped_causal") return TemporalMode::grouped_causal;
    if (name == "non_causal") return TemporalMode::non_causal;
    if (name == "chunk_causal") return TemporalMode::chunk_causal;
    throw ConfigError("unknown temporal mode: " + name);
}

void AEConfig::validate() const {
    if (f < 1 || (f & (f - 1)) != 0) throw ConfigError("f must be a positive power of two, got " + std::to_string(f));
    if (t < 1) throw ConfigError("t must be positive");
    if (c < 1) throw ConfigError("c must be positive");
    if (chunk_size < 1) throw ConfigError("chunk_size must be positive");
    if (temporal_mode != TemporalMode::causal && chunk_size % t != 0)
        throw ConfigError("chunk_size " + std::to_string(chunk_size) + " is not a multiple of t=" + std::to_string(t));
    if (temporal_mode == TemporalMode::grouped_causal && chunk_size != t)
        throw ConfigError("grouped_causal requires chunk_size == t");
}

std::string AEConfig::name() const {
    return "f" + std::to_string(f) + "t" + std::to_string(t) + "c" + std::to_string(c);
}

AEConfig AEConfig::parse(const std::string& name) {
    static const std::regex pattern(R"(f(\d+)t(\d+)c(\d+))");
    std::smatch m;
    if (!std::regex_match(name, m, pattern)) throw ConfigError("malformed autoencoder name: " + name);
    AEConfig cfg;
    cfg.f = std::stoll(m[1]);
    cfg.t = std::stoll(m[2]);
    cfg.c = std::stoll(m[3]);
    cfg.chunk_size = cfg.t;
    cfg.validate();
    return cfg;
}

Index AEConfig::effective_chunk(Index frames) const {
    switch (temporal_mode) {
        case TemporalMode::causal:
        case TemporalMode::grouped_causal: return t;
        case TemporalMode::chunk_causal: return chunk_size;
        case TemporalMode::non_causal: return std::max<Index>(t, (frames + t - 1) / t * t);
    }
    return chunk_size;
}

LatentVideo LatentVideo::slice(Index start, Index count) const {
    if (start < 0 || count < 1 || start + count > frames()) throw ShapeError("LatentVideo::slice out of range");
    const Index plane = height() * width();
    Tensor<float> out(Shape{channels(), count, height(), width()});
    for (Index c = 0; c < channels(); ++c)
        out.data.segment(c * count * plane, count * plane) =
            values.data.segment((c * frames() + start) * plane, count * plane);
    LatentVideo l;
    l.values = std::move(out);
    l.source_config = source_config;
    l.source_frames = count * source_config.t;
    return l;
}

double compression_ratio(const AEConfig& config) {
    config.validate();
    return 3.0 * double(config.f) * double(config.f) * double(config.t) / double(config.c);
}

Index token_count(const AEConfig& config, Index patch_size, Index T, Index H, Index W) {
    config.validate();
    if (patch_size < 1) throw ConfigError("patch size must be positive");
    if (T < 1 || H < 1 || W < 1) throw ShapeError("video dimensions must be positive");
    const Index spatial = config.f * patch_size;
    if (T % config.t) throw ShapeError("T=" + std::to_string(T) + " not divisible by t=" + std::to_string(config.t));
    if (H % spatial) throw ShapeError("H=" + std::to_string(H) + " not divisible by f*p=" + std::to_string(spatial));
    if (W % spatial) throw ShapeError("W=" + std::to_string(W) + " not divisible by f*p=" + std::to_string(spatial));
    return (T / config.t) * (H / spatial) * (W / spatial);
}

SpeedupEstimate speedup_estimate(const AEConfig& base, Index base_patch, const AEConfig& next, Index next_patch,
                                 Index T, Index H, Index W) {
    const double base_tokens = double(token_count(base, base_patch, T, H, W));
    const double next_tokens = double(token_count(next, next_patch, T, H, W));
    SpeedupEstimate e;
    e.token_ratio = base_tokens / next_tokens;
    e.attention_flop_ratio = e.token_ratio * e.token_ratio;
    return e;
}

ChunkPlan plan_chunks(Index T, const AEConfig& config) {
    config.validate();
    if (T < 1) throw ShapeError("plan_chunks: T must be positive");
    const Index chunk = config.effective_chunk(T);
    const Index n = (T + chunk - 1) / chunk;
    ChunkPlan plan;
    plan.pad_frames = n * chunk - T;
    for (Index i = 0; i < n; ++i) plan.boundaries.push_back({i * chunk, (i + 1) * chunk});
    return plan;
}

}  // namespace dcv
