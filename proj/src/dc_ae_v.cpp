#include "dcv/dc_ae_v.hpp"

#include "dcv/ops.hpp"
#include "dcv/rng.hpp"

#include <algorithm>
#include <cmath>

namespace dcv {

namespace {

std::string stage_prefix(const char* side, std::size_t i) { return std::string(side) + ".stage" + std::to_string(i); }

bool is_causal_padding(TemporalMode mode) { return mode == TemporalMode::causal; }

template <typename S>
class ParamFactory {
public:
    ParamFactory(ParamStore<S>& store, std::uint64_t seed) : store_(store), rng_(seed) {}

    void conv(const std::string& name, Index cout, Index cin, Index kt, Index kh, Index kw) {
        const double stddev = 1.0 / std::sqrt(double(cin * kt * kh * kw));
        store_.add(name + ".weight", rng_.normal_tensor<S>(Shape{cout, cin, kt, kh, kw}, stddev));
        store_.add(name + ".bias", Tensor<S>(Shape{cout}));
    }
    void norm(const std::string& name, Index channels) {
        store_.add(name + ".weight", Tensor<S>::constant(Shape{channels}, S(1)));
        store_.add(name + ".bias", Tensor<S>(Shape{channels}));
    }
    void resblock(const std::string& name, Index width) {
        norm(name + ".norm1", width);
        conv(name + ".conv1", width, width, 3, 3, 3);
        norm(name + ".norm2", width);
        conv(name + ".conv2", width, width, 3, 3, 3);
    }

private:
    ParamStore<S>& store_;
    Rng rng_;
};

// Runs one chunk through encoder or decoder layers, threading the cache.
template <typename S>
class ChunkRunner {
public:
    ChunkRunner(const AEParams<S>& params, CausalCache<S>& cache)
        : p_(params), cache_(cache), causal_(is_causal_padding(params.config.temporal_mode)) {}

    const Var<S>& w(const std::string& name) const { return p_.weights.at(name); }

    Var<S> conv(const std::string& name, const Var<S>& x) {
        const Var<S>& weight = w(name + ".weight");
        const Var<S>& bias = w(name + ".bias");
        const Index kt = weight.dim(2);
        if (kt == 1) return conv3d(x, weight, bias);

        const Index ctx = kt - 1, L = x.dim(1);
        if (cache_.slots.size() <= slot_)
            cache_.slots.emplace_back(Tensor<S>(Shape{x.dim(0), ctx, x.dim(2), x.dim(3)}));
        const Var<S> prev = cache_.slots[slot_];
        if (prev.dim(0) != x.dim(0) || prev.dim(2) != x.dim(2) || prev.dim(3) != x.dim(3))
            throw ShapeError("causal cache slot " + std::to_string(slot_) + " does not match layer input " +
                             shape_str(x.shape()));

        Var<S> padded;
        if (causal_) {
            padded = concat_time<S>({prev, x});
        } else {
            const Index half = ctx / 2;
            padded = concat_time<S>({slice_time(prev, ctx - half, half), x, repeat_frame(x, L - 1, half)});
        }
        Var<S> y = conv3d(padded, weight, bias);

        cache_.slots[slot_++] = L >= ctx ? slice_time(x, L - ctx, ctx) : slice_time(concat_time<S>({prev, x}), L, ctx);
        return y;
    }

    Var<S> norm(const std::string& name, const Var<S>& x) const {
        const Index groups = std::max<Index>(1, x.dim(0) / p_.widths.norm_group_size);
        return group_norm(x, w(name + ".weight"), w(name + ".bias"), groups);
    }

    Var<S> resblock(const std::string& name, const Var<S>& x) {
        Var<S> h = conv(name + ".conv1", silu(norm(name + ".norm1", x)));
        h = conv(name + ".conv2", silu(norm(name + ".norm2", h)));
        return add(x, h);
    }

    std::size_t slots_used() const { return slot_; }

private:
    const AEParams<S>& p_;
    CausalCache<S>& cache_;
    bool causal_;
    std::size_t slot_ = 0;
};

Index norm_check(Index width, const WidthSpec& ws) {
    if (width % ws.norm_group_size != 0 && width >= ws.norm_group_size)
        throw ConfigError("width " + std::to_string(width) + " not a multiple of the norm group size");
    return width;
}

}  // namespace

std::vector<StageSpec> plan_stages(const AEConfig& config, const WidthSpec& ws) {
    config.validate();
    if (ws.base_width < 4 || ws.max_width < ws.base_width || ws.blocks_per_stage < 0 || ws.norm_group_size < 1)
        throw ConfigError("invalid width spec");
    std::vector<StageSpec> stages;
    Index prev = norm_check(ws.base_width, ws);
    for (Index f = config.f; f > 1; f /= 2) {
        const Index width = norm_check(std::min(prev * 2, ws.max_width), ws);
        if (width % 4 || (4 * prev) % width)
            throw ConfigError("widths " + std::to_string(prev) + " -> " + std::to_string(width) +
                              " cannot be realized by space-to-channel shortcuts");
        stages.push_back({ws.blocks_per_stage, width, 2, 1});
        prev = width;
    }
    if (prev % config.t) throw ConfigError("final width must be divisible by t");
    stages.push_back({ws.blocks_per_stage, prev, 1, config.t});
    return stages;
}

template <typename S>
AEParams<S> build_autoencoder(const AEConfig& config, const WidthSpec& ws, std::uint64_t seed) {
    AEParams<S> p;
    p.config = config;
    p.widths = ws;
    p.stem_width = ws.base_width;
    p.stages = plan_stages(config, ws);
    p.latent_mean.assign(std::size_t(config.c), 0.0);
    p.latent_std.assign(std::size_t(config.c), 1.0);

    ParamFactory<S> make(p.weights, seed);
    // encoder
    make.conv("encoder.stem", p.stem_width, 3, 3, 3, 3);
    Index prev = p.stem_width;
    for (std::size_t i = 0; i < p.stages.size(); ++i) {
        const StageSpec& st = p.stages[i];
        const std::string pre = stage_prefix("encoder", i);
        if (st.spatial_factor > 1) make.conv(pre + ".down", st.width / 4, prev, 1, 3, 3);
        if (st.temporal_factor > 1) make.conv(pre + ".down", st.width / st.temporal_factor, prev, 1, 3, 3);
        for (Index b = 0; b < st.blocks; ++b) make.resblock(pre + ".block" + std::to_string(b), st.width);
        prev = st.width;
    }
    make.norm("encoder.out_norm", prev);
    make.conv("encoder.out_conv", config.c, prev, 3, 3, 3);
    // decoder
    make.conv("decoder.in_conv", prev, config.c, 3, 3, 3);
    for (std::size_t i = p.stages.size(); i-- > 0;) {
        const StageSpec& st = p.stages[i];
        const Index below = i == 0 ? p.stem_width : p.stages[i - 1].width;
        const std::string pre = stage_prefix("decoder", i);
        for (Index b = 0; b < st.blocks; ++b) make.resblock(pre + ".block" + std::to_string(b), st.width);
        if (st.temporal_factor > 1) make.conv(pre + ".up", st.width * st.temporal_factor, st.width, 1, 3, 3);
        if (st.spatial_factor > 1) make.conv(pre + ".up", below * 4, st.width, 1, 3, 3);
    }
    make.norm("decoder.out_norm", p.stem_width);
    make.conv("decoder.out_conv", 3, p.stem_width, 3, 3, 3);
    return p;
}

template <typename S>
Var<S> encode_chunk(const Var<S>& frames, const AEParams<S>& p, CausalCache<S>& cache) {
    if (frames.shape().size() != 4 || frames.dim(0) != 3) throw ShapeError("encode_chunk: expected [3, T, H, W]");
    const Index f = p.config.f;
    if (frames.dim(2) % f || frames.dim(3) % f)
        throw ShapeError("encode: H=" + std::to_string(frames.dim(2)) + ", W=" + std::to_string(frames.dim(3)) +
                         " must be divisible by f=" + std::to_string(f));
    if (frames.dim(1) % p.config.t) throw ShapeError("encode: chunk length must be a multiple of t");

    ChunkRunner<S> run(p, cache);
    Var<S> x = run.conv("encoder.stem", frames);
    for (std::size_t i = 0; i < p.stages.size(); ++i) {
        const StageSpec& st = p.stages[i];
        const std::string pre = stage_prefix("encoder", i);
        if (st.spatial_factor > 1) {
            Var<S> shortcut = channel_group_mean(space_to_channel(x, 2), st.width);
            x = add(space_to_channel(run.conv(pre + ".down", x), 2), shortcut);
        }
        if (st.temporal_factor > 1) {
            const Index r = st.temporal_factor;
            Var<S> shortcut = channel_group_mean(time_to_channel(x, r), st.width);
            x = add(time_to_channel(run.conv(pre + ".down", x), r), shortcut);
        }
        for (Index b = 0; b < st.blocks; ++b) x = run.resblock(pre + ".block" + std::to_string(b), x);
    }
    Var<S> z = run.conv("encoder.out_conv", silu(run.norm("encoder.out_norm", x)));
    if (x.dim(0) % p.config.c == 0) z = add(z, channel_group_mean(x, p.config.c));
    return z;
}

template <typename S>
Var<S> decode_chunk(const Var<S>& latent, const AEParams<S>& p, CausalCache<S>& cache) {
    if (latent.shape().size() != 4 || latent.dim(0) != p.config.c)
        throw ShapeError("decode: latent " + shape_str(latent.shape()) + " does not have c=" +
                         std::to_string(p.config.c) + " channels");
    ChunkRunner<S> run(p, cache);
    Var<S> x = run.conv("decoder.in_conv", latent);
    if (x.dim(0) % p.config.c == 0) x = add(x, channel_repeat(latent, x.dim(0) / p.config.c));
    for (std::size_t i = p.stages.size(); i-- > 0;) {
        const StageSpec& st = p.stages[i];
        const Index below = i == 0 ? p.stem_width : p.stages[i - 1].width;
        const std::string pre = stage_prefix("decoder", i);
        for (Index b = 0; b < st.blocks; ++b) x = run.resblock(pre + ".block" + std::to_string(b), x);
        if (st.temporal_factor > 1) {
            const Index r = st.temporal_factor;
            Var<S> shortcut = channel_to_time(channel_repeat(x, r), r);
            x = add(channel_to_time(run.conv(pre + ".up", x), r), shortcut);
        }
        if (st.spatial_factor > 1) {
            Var<S> shortcut = channel_to_space(channel_repeat(x, below * 4 / st.width), 2);
            x = add(channel_to_space(run.conv(pre + ".up", x), 2), shortcut);
        }
    }
    return run.conv("decoder.out_conv", silu(run.norm("decoder.out_norm", x)));
}

template <typename S>
Var<S> encode_frames(const Var<S>& frames, const AEParams<S>& p) {
    const Index T = frames.dim(1);
    const Index chunk = p.config.effective_chunk(T);
    if (T % chunk) throw ShapeError("encode_frames: T=" + std::to_string(T) + " is not a multiple of the chunk length");
    CausalCache<S> cache;
    std::vector<Var<S>> parts;
    for (Index s = 0; s < T; s += chunk) parts.push_back(encode_chunk(slice_time(frames, s, chunk), p, cache));
    return concat_time(parts);
}

template <typename S>
Var<S> decode_frames(const Var<S>& latent, const AEParams<S>& p) {
    const Index t = p.config.t;
    const Index Tl = latent.dim(1);
    const Index chunk = p.config.effective_chunk(Tl * t) / t;
    if (Tl % chunk) throw ShapeError("decode_frames: latent length is not a multiple of the latent chunk length");
    CausalCache<S> cache;
    std::vector<Var<S>> parts;
    for (Index s = 0; s < Tl; s += chunk) parts.push_back(decode_chunk(slice_time(latent, s, chunk), p, cache));
    return concat_time(parts);
}

template <typename S>
Tensor<S> clip_to_channels_first(const VideoClip& clip) {
    const Index T = clip.frames_count(), H = clip.height(), W = clip.width(), plane = H * W;
    Tensor<S> out(Shape{3, T, H, W});
    const float* src = clip.frames.ptr();
    for (Index t = 0; t < T; ++t)
        for (Index i = 0; i < plane; ++i)
            for (Index c = 0; c < 3; ++c) out.data[(c * T + t) * plane + i] = S(src[(t * plane + i) * 3 + c]);
    return out;
}

template <typename S>
VideoClip channels_first_to_clip(const Tensor<S>& x, int frame_rate) {
    if (x.rank() != 4 || x.dim(0) != 3) throw ShapeError("expected [3, T, H, W]");
    const Index T = x.dim(1), H = x.dim(2), W = x.dim(3), plane = H * W;
    Tensor<float> out(Shape{T, H, W, 3});
    for (Index t = 0; t < T; ++t)
        for (Index i = 0; i < plane; ++i)
            for (Index c = 0; c < 3; ++c) {
                const float v = float(x.data[(c * T + t) * plane + i]);
                out.data[(t * plane + i) * 3 + c] = std::isfinite(v) ? std::clamp(v, -1.0f, 1.0f) : 0.0f;
            }
    return VideoClip(std::move(out), frame_rate);
}

LatentVideo encode(const VideoClip& clip, const AEParams<float>& params) {
    NoGradGuard guard;
    const ChunkPlan plan = plan_chunks(clip.frames_count(), params.config);
    const VideoClip padded = clip.padded_to(plan.padded_length());
    Var<float> z = encode_frames(Var<float>(clip_to_channels_first<float>(padded)), params);
    LatentVideo out;
    out.values = z.value();
    out.source_config = params.config;
    out.source_frames = clip.frames_count();
    return out;
}

VideoClip decode(const LatentVideo& latent, const AEParams<float>& params) {
    NoGradGuard guard;
    Var<float> x = decode_frames(Var<float>(latent.values), params);
    return channels_first_to_clip(x.value());
}

VideoClip reconstruct(const VideoClip& clip, const AEParams<float>& params) {
    VideoClip out = decode(encode(clip, params), params);
    out.frame_rate = clip.frame_rate;
    return out.frames_count() == clip.frames_count() ? out : out.slice(0, clip.frames_count());
}

StreamingEncoder::StreamingEncoder(const AEParams<float>& params, CausalCache<float> cache)
    : params_(params), cache_(std::move(cache)) {
    if (params.config.temporal_mode == TemporalMode::non_causal)
        throw UnsupportedModeError("streaming encode is undefined for non_causal autoencoders");
}

LatentVideo StreamingEncoder::push(const VideoClip& chunk) {
    const Index expected = params_.config.effective_chunk(chunk.frames_count());
    if (chunk.frames_count() != expected)
        throw ShapeError("streaming chunk has " + std::to_string(chunk.frames_count()) + " frames, expected " +
                         std::to_string(expected));
    NoGradGuard guard;
    Var<float> z = encode_chunk(Var<float>(clip_to_channels_first<float>(chunk)), params_, cache_);
    LatentVideo out;
    out.values = z.value();
    out.source_config = params_.config;
    out.source_frames = chunk.frames_count();
    return out;
}

StreamingDecoder::StreamingDecoder(const AEParams<float>& params, CausalCache<float> cache)
    : params_(params), cache_(std::move(cache)) {
    if (params.config.temporal_mode == TemporalMode::non_causal)
        throw UnsupportedModeError("streaming decode is undefined for non_causal autoencoders");
}

VideoClip StreamingDecoder::push(const LatentVideo& chunk) {
    NoGradGuard guard;
    Var<float> x = decode_chunk(Var<float>(chunk.values), params_, cache_);
    return channels_first_to_clip(x.value());
}

std::vector<LatentVideo> encode_streaming(const std::function<std::optional<VideoClip>()>& next_chunk,
                                          const AEParams<float>& params, CausalCache<float>& cache) {
    StreamingEncoder enc(params, std::move(cache));
    std::vector<LatentVideo> out;
    while (auto chunk = next_chunk()) out.push_back(enc.push(*chunk));
    cache = enc.release_cache();
    return out;
}

std::vector<LatentVideo> encode_streaming(const std::vector<VideoClip>& chunks, const AEParams<float>& params,
                                          CausalCache<float>& cache) {
    std::size_t i = 0;
    return encode_streaming(
        [&]() -> std::optional<VideoClip> {
            if (i == chunks.size()) return std::nullopt;
            return chunks[i++];
        },
        params, cache);
}

std::vector<Index> tile_starts(Index length, Index tile_len, Index overlap) {
    if (tile_len <= overlap || overlap < 0) throw ConfigError("tiling requires tile_len > overlap >= 0");
    std::vector<Index> starts{0};
    if (tile_len >= length) return starts;
    const Index stride = tile_len - overlap;
    while (starts.back() + tile_len < length) starts.push_back(std::min(starts.back() + stride, length - tile_len));
    return starts;
}

std::vector<Index> tile_seams(Index length, Index tile_len, Index overlap) {
    const auto starts = tile_starts(length, tile_len, overlap);
    std::vector<Index> seams;
    for (std::size_t i = 1; i < starts.size(); ++i) {
        seams.push_back(starts[i]);
        seams.push_back(starts[i - 1] + tile_len);
    }
    return seams;
}

std::vector<Index> chunk_seams(Index length, Index chunk) {
    if (chunk < 1) throw ConfigError("chunk must be positive");
    std::vector<Index> seams;
    for (Index b = chunk; b < length; b += chunk) seams.push_back(b);
    return seams;
}

namespace {

// Linear cross-fade weights for tile j (length len) within the tile layout.
std::vector<double> tile_weights(const std::vector<Index>& starts, std::size_t j, Index len) {
    std::vector<double> w(std::size_t(len), 1.0);
    if (j > 0) {
        const Index ov = starts[j - 1] + len - starts[j];
        for (Index i = 0; i < ov; ++i) w[std::size_t(i)] = std::min(w[std::size_t(i)], double(i + 1) / double(ov + 1));
    }
    if (j + 1 < starts.size()) {
        const Index ov = starts[j] + len - starts[j + 1];
        for (Index i = 0; i < ov; ++i) {
            const std::size_t k = std::size_t(len - 1 - i);
            w[k] = std::min(w[k], double(i + 1) / double(ov + 1));
        }
    }
    return w;
}

void check_tiling(const AEParams<float>& params, Index tile_len, Index overlap) {
    if (params.config.temporal_mode != TemporalMode::non_causal)
        throw UnsupportedModeError("tiling and blending applies to non_causal autoencoders only");
    if (tile_len <= overlap || overlap < 0) throw ConfigError("tiling requires tile_len > overlap >= 0");
    if (tile_len % params.config.t || overlap % params.config.t)
        throw ConfigError("tile_len and overlap must be multiples of t");
}

}  // namespace

LatentVideo encode_tiled_blended(const VideoClip& clip, const AEParams<float>& params, Index tile_len, Index overlap) {
    check_tiling(params, tile_len, overlap);
    const Index t = params.config.t;
    const Index Tp = (clip.frames_count() + t - 1) / t * t;
    const VideoClip padded = clip.padded_to(Tp);
    const auto starts = tile_starts(Tp, tile_len, overlap);
    if (starts.size() == 1) {
        LatentVideo out = encode(padded, params);
        out.source_frames = clip.frames_count();
        return out;
    }
    const Index lt = tile_len / t;
    Tensor<float> acc;
    std::vector<double> norm(std::size_t(Tp / t), 0.0);
    for (std::size_t j = 0; j < starts.size(); ++j) {
        const LatentVideo z = encode(padded.slice(starts[j], tile_len), params);
        if (acc.numel() == 0) acc = Tensor<float>(Shape{z.channels(), Tp / t, z.height(), z.width()});
        const auto w = tile_weights(starts, j, lt);
        const Index plane = z.height() * z.width(), l0 = starts[j] / t;
        for (Index c = 0; c < z.channels(); ++c)
            for (Index i = 0; i < lt; ++i)
                acc.data.segment((c * (Tp / t) + l0 + i) * plane, plane) +=
                    z.values.data.segment((c * lt + i) * plane, plane) * float(w[std::size_t(i)]);
        for (Index i = 0; i < lt; ++i) norm[std::size_t(l0 + i)] += w[std::size_t(i)];
    }
    const Index plane = acc.dim(2) * acc.dim(3);
    for (Index c = 0; c < acc.dim(0); ++c)
        for (Index i = 0; i < Tp / t; ++i) acc.data.segment((c * (Tp / t) + i) * plane, plane) /= float(norm[std::size_t(i)]);
    LatentVideo out;
    out.values = std::move(acc);
    out.source_config = params.config;
    out.source_frames = clip.frames_count();
    return out;
}

VideoClip decode_tiled_blended(const LatentVideo& latent, const AEParams<float>& params, Index tile_len,
                               Index overlap) {
    check_tiling(params, tile_len, overlap);
    const Index t = params.config.t;
    const Index Tp = latent.frames() * t;
    const auto starts = tile_starts(Tp, tile_len, overlap);
    if (starts.size() == 1) return decode(latent, params);
    Tensor<float> acc;
    std::vector<double> norm(std::size_t(Tp), 0.0);
    for (std::size_t j = 0; j < starts.size(); ++j) {
        const VideoClip x = decode(latent.slice(starts[j] / t, tile_len / t), params);
        if (acc.numel() == 0) acc = Tensor<float>(Shape{Tp, x.height(), x.width(), 3});
        const auto w = tile_weights(starts, j, tile_len);
        const Index per = x.height() * x.width() * 3;
        for (Index i = 0; i < tile_len; ++i)
            acc.data.segment((starts[j] + i) * per, per) += x.frames.data.segment(i * per, per) * float(w[std::size_t(i)]);
        for (Index i = 0; i < tile_len; ++i) norm[std::size_t(starts[j] + i)] += w[std::size_t(i)];
    }
    const Index per = acc.dim(1) * acc.dim(2) * 3;
    for (Index i = 0; i < Tp; ++i) acc.data.segment(i * per, per) /= float(norm[std::size_t(i)]);
    acc.data = acc.data.cwiseMax(-1.0f).cwiseMin(1.0f);
    return VideoClip(std::move(acc), 8);
}

Tensor<float> normalize_latent(const Tensor<float>& latent, const AEParams<float>& params) {
    Tensor<float> out = latent;
    const Index C = latent.dim(0), inner = latent.numel() / C;
    for (Index c = 0; c < C; ++c)
        out.data.segment(c * inner, inner) =
            (out.data.segment(c * inner, inner) - float(params.latent_mean[std::size_t(c)])) /
            float(params.latent_std[std::size_t(c)]);
    return out;
}

Tensor<float> denormalize_latent(const Tensor<float>& latent, const AEParams<float>& params) {
    Tensor<float> out = latent;
    const Index C = latent.dim(0), inner = latent.numel() / C;
    for (Index c = 0; c < C; ++c)
        out.data.segment(c * inner, inner) =
            out.data.segment(c * inner, inner) * float(params.latent_std[std::size_t(c)]) +
            float(params.latent_mean[std::size_t(c)]);
    return out;
}

#define DCV_INSTANTIATE_AE(S)                                                                  \
    template AEParams<S> build_autoencoder<S>(const AEConfig&, const WidthSpec&, std::uint64_t); \
    template Var<S> encode_chunk(const Var<S>&, const AEParams<S>&, CausalCache<S>&);          \
    template Var<S> decode_chunk(const Var<S>&, const AEParams<S>&, CausalCache<S>&);          \
    template Var<S> encode_frames(const Var<S>&, const AEParams<S>&);                          \
    template Var<S> decode_frames(const Var<S>&, const AEParams<S>&);                          \
    template Tensor<S> clip_to_channels_first<S>(const VideoClip&);                            \
    template VideoClip channels_first_to_clip(const Tensor<S>&, int);

DCV_INSTANTIATE_AE(float)
DCV_INSTANTIATE_AE(double)

#undef DCV_INSTANTIATE_AE

}  // namespace dcv
