#include "dcv/toy_dit.hpp"

#include "dcv/ops.hpp"

#include <chrono>
#include <cmath>

namespace dcv {

void DiTConfig::validate() const {
    if (latent_channels < 1) throw ConfigError("DiT latent_channels must be >= 1");
    if (patch_size < 1) throw ConfigError("DiT patch_size must be >= 1");
    if (embed_dim < 6 || embed_dim % 2) throw ConfigError("DiT embed_dim must be even and >= 6");
    if (heads < 1 || embed_dim % heads) throw ConfigError("DiT embed_dim must be divisible by heads");
    if (depth < 0) throw ConfigError("DiT depth must be >= 0");
    if (num_classes < 1) throw ConfigError("DiT num_classes must be >= 1");
    if (max_tokens < 1 || mlp_ratio < 1) throw ConfigError("DiT max_tokens and mlp_ratio must be >= 1");
    if (time_freq_dim < 2 || time_freq_dim % 2) throw ConfigError("DiT time_freq_dim must be even");
}

std::vector<std::string> block_linear_names(const DiTConfig& config) {
    std::vector<std::string> out;
    for (Index b = 0; b < config.depth; ++b)
        for (const char* leaf : {"qkv", "proj", "fc1", "fc2"})
            out.push_back("blocks." + std::to_string(b) + "." + leaf);
    return out;
}

namespace {

template <typename S>
void add_dense(ParamStore<S>& store, Rng& rng, const std::string& name, Index out, Index in, bool zero = false) {
    store.add(name + ".weight", zero ? Tensor<S>(Shape{out, in}) : rng.normal_tensor<S>(Shape{out, in}, 1.0 / std::sqrt(double(in))));
    store.add(name + ".bias", Tensor<S>(Shape{out}));
}

template <typename S>
void replace_dense(ParamStore<S>& store, Rng& rng, const std::string& name, Index out, Index in) {
    store.erase(name + ".weight");
    store.erase(name + ".bias");
    add_dense(store, rng, name, out, in);
}

void sincos_1d(double pos, Index dim, double* out) {
    const Index half = dim / 2;
    for (Index i = 0; i < half; ++i) {
        const double omega = std::pow(10000.0, -double(i) / double(half));
        out[i] = std::sin(pos * omega);
        out[half + i] = std::cos(pos * omega);
    }
}

template <typename S>
Tensor<S> time_features(S time, Index dim) {
    Tensor<S> out(Shape{1, dim});
    const Index half = dim / 2;
    for (Index i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
        const double arg = 1000.0 * double(time) * freq;
        out.data[i] = S(std::cos(arg));
        out.data[half + i] = S(std::sin(arg));
    }
    return out;
}

}  // namespace

template <typename S>
DiTModel<S> build_dit(const DiTConfig& config, std::uint64_t seed) {
    config.validate();
    DiTModel<S> m;
    m.config = config;
    Rng rng(seed);
    const Index D = config.embed_dim;
    add_dense(m.weights, rng, "embedder", D, config.patch_dim());
    add_dense(m.weights, rng, "time.fc1", D, config.time_freq_dim);
    add_dense(m.weights, rng, "time.fc2", D, D);
    m.weights.add("class_embed.weight", rng.normal_tensor<S>(Shape{config.num_classes, D}, 1.0));
    for (Index b = 0; b < config.depth; ++b) {
        const std::string pre = "blocks." + std::to_string(b);
        add_dense(m.weights, rng, pre + ".adaln", 6 * D, D, true);
        add_dense(m.weights, rng, pre + ".qkv", 3 * D, D);
        add_dense(m.weights, rng, pre + ".proj", D, D);
        add_dense(m.weights, rng, pre + ".fc1", config.mlp_ratio * D, D);
        add_dense(m.weights, rng, pre + ".fc2", D, config.mlp_ratio * D);
    }
    add_dense(m.weights, rng, "head.adaln", 2 * D, D, true);
    add_dense(m.weights, rng, "head.linear", config.patch_dim(), D);
    return m;
}

template <typename S>
void reinit_embedder(DiTModel<S>& model, Index latent_channels, Index patch_size, std::uint64_t seed) {
    DiTConfig cfg = model.config;
    cfg.latent_channels = latent_channels;
    cfg.patch_size = patch_size;
    cfg.validate();
    Rng rng(seed);
    model.config = cfg;
    replace_dense(model.weights, rng, "embedder", cfg.embed_dim, cfg.patch_dim());
}

template <typename S>
void reinit_head(DiTModel<S>& model, std::uint64_t seed) {
    Rng rng(seed);
    replace_dense(model.weights, rng, "head.linear", model.config.patch_dim(), model.config.embed_dim);
    model.weights.erase("head.adaln.weight");
    model.weights.erase("head.adaln.bias");
    add_dense(model.weights, rng, "head.adaln", 2 * model.config.embed_dim, model.config.embed_dim, true);
}

TokenGrid token_grid(const Shape& s, Index p) {
    if (s.size() != 4) throw ShapeError("expected a [c, T, H, W] latent, got " + shape_str(s));
    if (s[2] % p) throw ShapeError("latent H=" + std::to_string(s[2]) + " not divisible by patch size " + std::to_string(p));
    if (s[3] % p) throw ShapeError("latent W=" + std::to_string(s[3]) + " not divisible by patch size " + std::to_string(p));
    return {s[1], s[2] / p, s[3] / p};
}

template <typename S>
Tensor<S> positional_signal(const TokenGrid& g, Index dim) {
    const Index dh = 2 * (dim / 6), dt = dim - 2 * dh;
    Tensor<S> out(Shape{g.count(), dim});
    std::vector<double> row(static_cast<std::size_t>(dim));
    for (Index t = 0; t < g.frames; ++t)
        for (Index i = 0; i < g.height; ++i)
            for (Index j = 0; j < g.width; ++j) {
                sincos_1d(double(t), dt, row.data());
                sincos_1d(double(i), dh, row.data() + dt);
                sincos_1d(double(j), dh, row.data() + dt + dh);
                const Index n = (t * g.height + i) * g.width + j;
                for (Index k = 0; k < dim; ++k) out.data[n * dim + k] = S(row[std::size_t(k)]);
            }
    return out;
}

namespace {

// Flat latent offset for every (token, feature) slot.
std::vector<Index> patch_index(Index C, const TokenGrid& g, Index p) {
    const Index H = g.height * p, W = g.width * p, T = g.frames, K = C * p * p;
    std::vector<Index> idx(std::size_t(g.count() * K));
    for (Index t = 0; t < T; ++t)
        for (Index i = 0; i < g.height; ++i)
            for (Index j = 0; j < g.width; ++j) {
                const Index n = (t * g.height + i) * g.width + j;
                for (Index c = 0; c < C; ++c)
                    for (Index dy = 0; dy < p; ++dy)
                        for (Index dx = 0; dx < p; ++dx) {
                            const Index k = (c * p + dy) * p + dx;
                            idx[std::size_t(n * K + k)] = ((c * T + t) * H + i * p + dy) * W + j * p + dx;
                        }
            }
    return idx;
}

}  // namespace

template <typename S>
Var<S> patchify(const Var<S>& latent, Index p) {
    const TokenGrid g = token_grid(latent.shape(), p);
    const Index C = latent.dim(0);
    return gather(latent, patch_index(C, g, p), Shape{g.count(), C * p * p});
}

template <typename S>
Var<S> unpatchify(const Var<S>& tokens, Index C, const TokenGrid& g, Index p) {
    if (tokens.shape() != Shape{g.count(), C * p * p})
        throw ShapeError("unpatchify: tokens " + shape_str(tokens.shape()) + " do not match the grid");
    const std::vector<Index> fwd = patch_index(C, g, p);
    std::vector<Index> inv(fwd.size());
    for (std::size_t s = 0; s < fwd.size(); ++s) inv[std::size_t(fwd[s])] = Index(s);
    return gather(tokens, inv, Shape{C, g.frames, g.height * p, g.width * p});
}

template <typename S>
Var<S> patch_embed(const Var<S>& latent, const DiTModel<S>& model) {
    const auto& cfg = model.config;
    if (latent.shape().size() != 4 || latent.dim(0) != cfg.latent_channels)
        throw ShapeError("embed: latent " + shape_str(latent.shape()) + " does not have " +
                         std::to_string(cfg.latent_channels) + " channels");
    const TokenGrid g = token_grid(latent.shape(), cfg.patch_size);
    if (g.count() > cfg.max_tokens)
        throw ShapeError("embed: " + std::to_string(g.count()) + " tokens exceed max_tokens " + std::to_string(cfg.max_tokens));
    return apply_linear(model, "embedder", patchify(latent, cfg.patch_size));
}

template <typename S>
Var<S> embed(const Var<S>& latent, const DiTModel<S>& model) {
    const TokenGrid g = token_grid(latent.shape(), model.config.patch_size);
    return add(patch_embed(latent, model), Var<S>(positional_signal<S>(g, model.config.embed_dim)));
}

template <typename S>
Var<S> apply_linear(const DiTModel<S>& model, const std::string& name, const Var<S>& x) {
    const auto& w = model.weights;
    Var<S> y = linear(x, w.at(name + ".weight"), w.at(name + ".bias"));
    auto it = model.lora.find(name);
    if (it == model.lora.end()) return y;
    Var<S> low = linear(linear(x, w.at(name + ".lora_A"), Var<S>()), w.at(name + ".lora_B"), Var<S>());
    return add(y, scale(low, S(it->second.scale())));
}

template <typename S>
Var<S> dit_forward(const Var<S>& noisy, S time, Index label, const DiTModel<S>& model) {
    const auto& cfg = model.config;
    const auto& w = model.weights;
    if (label < 0 || label >= cfg.num_classes)
        throw ShapeError("class label " + std::to_string(label) + " outside [0, " + std::to_string(cfg.num_classes) + ")");
    const Index D = cfg.embed_dim;
    const TokenGrid g = token_grid(noisy.shape(), cfg.patch_size);

    Var<S> temb = linear(Var<S>(time_features(time, cfg.time_freq_dim)), w.at("time.fc1.weight"), w.at("time.fc1.bias"));
    temb = linear(silu(temb), w.at("time.fc2.weight"), w.at("time.fc2.bias"));
    Var<S> cond = add(reshape(temb, Shape{D}), select_row(w.at("class_embed.weight"), label));
    const Var<S> act = reshape(silu(cond), Shape{1, D});

    Var<S> x = embed(noisy, model);
    auto piece = [&](const Var<S>& mod, Index k) { return slice_flat(mod, k * D, Shape{D}); };
    for (Index b = 0; b < cfg.depth; ++b) {
        const std::string pre = "blocks." + std::to_string(b);
        const Var<S> mod = apply_linear(model, pre + ".adaln", act);
        Var<S> h = modulate(layer_norm(x), piece(mod, 0), piece(mod, 1));
        h = apply_linear(model, pre + ".proj", attention(apply_linear(model, pre + ".qkv", h), cfg.heads));
        x = add(x, mul_rows(h, piece(mod, 2)));
        h = modulate(layer_norm(x), piece(mod, 3), piece(mod, 4));
        h = apply_linear(model, pre + ".fc2", gelu(apply_linear(model, pre + ".fc1", h)));
        x = add(x, mul_rows(h, piece(mod, 5)));
    }
    const Var<S> mod = apply_linear(model, "head.adaln", act);
    Var<S> out = apply_linear(model, "head.linear", modulate(layer_norm(x), piece(mod, 0), piece(mod, 1)));
    return unpatchify(out, cfg.latent_channels, g, cfg.patch_size);
}

template <typename S>
Var<S> flow_matching_loss_at(const DiTModel<S>& model, const Tensor<S>& clean, Index label, S time,
                             const Tensor<S>& noise) {
    if (clean.shape != noise.shape) throw ShapeError("flow matching: noise and latent shapes differ");
    Tensor<S> mixed(clean.shape), target(clean.shape);
    mixed.data = (S(1) - time) * noise.data + time * clean.data;
    target.data = clean.data - noise.data;
    return mse_loss(dit_forward(Var<S>(std::move(mixed)), time, label, model), Var<S>(std::move(target)));
}

template <typename S>
Var<S> flow_matching_loss(const DiTModel<S>& model, const Tensor<S>& clean, Index label, Rng& rng) {
    const S time = S(rng.uniform());
    const Tensor<S> noise = rng.normal_tensor<S>(clean.shape);
    return flow_matching_loss_at(model, clean, label, time, noise);
}

Tensor<float> sample_latent(const DiTModel<float>& model, const Shape& shape, Index label, int steps,
                            std::uint64_t seed) {
    if (steps < 1) throw ConfigError("sample: steps must be >= 1");
    NoGradGuard guard;
    Rng rng(seed);
    Tensor<float> x = rng.normal_tensor<float>(shape);
    const float dt = 1.0f / float(steps);
    for (int k = 0; k < steps; ++k) {
        const Var<float> v = dit_forward(Var<float>(x), float(k) * dt, label, model);
        x.data += dt * v.value().data;
    }
    return x;
}

VideoClip sample(const DiTModel<float>& model, const AEParams<float>& ae, const Shape& shape, Index label, int steps,
                 std::uint64_t seed) {
    LatentVideo z;
    z.values = denormalize_latent(sample_latent(model, shape, label, steps, seed), ae);
    z.source_config = ae.config;
    z.source_frames = shape.at(1) * ae.config.t;
    return decode(z, ae);
}

std::vector<Tensor<float>> encode_latents(const std::vector<VideoClip>& clips, const AEParams<float>& ae) {
    std::vector<Tensor<float>> out;
    out.reserve(clips.size());
    for (const auto& clip : clips) out.push_back(normalize_latent(encode(clip, ae).values, ae));
    return out;
}

DiTTrainReport train_flow_matching(DiTModel<float>& model, const std::vector<Tensor<float>>& latents,
                                   const std::vector<Index>& labels, const DiTTrainConfig& cfg,
                                   const StopRule& stop) {
    if (latents.empty()) throw ConfigError("flow matching: no training latents");
    if (labels.size() != latents.size()) throw ConfigError("flow matching: one label per latent required");
    if (cfg.steps < 0 || cfg.batch_size < 1) throw ConfigError("flow matching: invalid steps or batch size");
    const auto start = std::chrono::steady_clock::now();
    std::vector<Var<float>> trainable;
    for (auto& [name, v] : model.weights)
        if (v.requires_grad()) trainable.push_back(v);
    AdamW<float> opt(trainable, cfg.optim);
    Rng picker = Rng::derive(cfg.seed, 0xd17);
    Rng noise = Rng::derive(cfg.seed, 0xf10);

    DiTTrainReport report;
    for (long step = 1; step <= cfg.steps; ++step) {
        opt.zero_grad();
        Var<float> total;
        for (Index b = 0; b < cfg.batch_size; ++b) {
            const auto i = std::size_t(picker.integer(0, Index(latents.size()) - 1));
            Var<float> loss = flow_matching_loss(model, latents[i], labels[i], noise);
            total = total.defined() ? add(total, loss) : loss;
        }
        if (cfg.batch_size > 1) total = scale(total, 1.0f / float(cfg.batch_size));
        const double value = double(total.value().data[0]);
        if (!std::isfinite(value)) {
            if (!cfg.stop_on_divergence)
                throw DivergenceError("diffusion training diverged: non-finite loss at step " + std::to_string(step), step);
            report.diverged_at = step;
            break;
        }
        backward(total);
        opt.step();
        report.losses.push_back(value);
        if (stop && stop(step, value)) break;
    }
    opt.zero_grad();
    report.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

DiTTrainReport train_base_model(DiTModel<float>& model, const std::vector<Tensor<float>>& latents,
                                const std::vector<Index>& labels, const DiTTrainConfig& cfg) {
    model.weights.set_trainable(true);
    return train_flow_matching(model, latents, labels, cfg);
}

double validation_diffusion_loss(const DiTModel<float>& model, const std::vector<Tensor<float>>& latents,
                                 const std::vector<Index>& labels, int draws, std::uint64_t seed) {
    if (latents.empty() || draws < 1) throw ConfigError("validation loss: no latents or draws");
    NoGradGuard guard;
    double total = 0.0;
    for (std::size_t i = 0; i < latents.size(); ++i) {
        Rng rng = Rng::derive(seed, i);
        for (int d = 0; d < draws; ++d) total += double(flow_matching_loss(model, latents[i], labels[i], rng).value().data[0]);
    }
    return total / double(latents.size() * std::size_t(draws));
}

#define DCV_INSTANTIATE(S)                                                                                         \
    template DiTModel<S> build_dit<S>(const DiTConfig&, std::uint64_t);                                           \
    template void reinit_embedder<S>(DiTModel<S>&, Index, Index, std::uint64_t);                                  \
    template void reinit_head<S>(DiTModel<S>&, std::uint64_t);                                                    \
    template Tensor<S> positional_signal<S>(const TokenGrid&, Index);                                             \
    template Var<S> patchify<S>(const Var<S>&, Index);                                                            \
    template Var<S> unpatchify<S>(const Var<S>&, Index, const TokenGrid&, Index);                                 \
    template Var<S> patch_embed<S>(const Var<S>&, const DiTModel<S>&);                                            \
    template Var<S> embed<S>(const Var<S>&, const DiTModel<S>&);                                                  \
    template Var<S> apply_linear<S>(const DiTModel<S>&, const std::string&, const Var<S>&);                       \
    template Var<S> dit_forward<S>(const Var<S>&, S, Index, const DiTModel<S>&);                                  \
    template Var<S> flow_matching_loss_at<S>(const DiTModel<S>&, const Tensor<S>&, Index, S, const Tensor<S>&);   \
    template Var<S> flow_matching_loss<S>(const DiTModel<S>&, const Tensor<S>&, Index, Rng&);

DCV_INSTANTIATE(float)
DCV_INSTANTIATE(double)
#undef DCV_INSTANTIATE

}  // namespace dcv
