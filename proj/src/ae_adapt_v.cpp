#include "dcv/ae_adapt_v.hpp"

#include "dcv/hash.hpp"
#include "dcv/ops.hpp"

#include <nlohmann/json.hpp>

#include <fstream>

namespace dcv {

template <typename S>
Tensor<S> tokens_to_grid(const Tensor<S>& tokens, const TokenGrid& g) {
    if (tokens.rank() != 2 || tokens.dim(0) != g.count())
        throw ShapeError("tokens " + shape_str(tokens.shape) + " do not fill a " + std::to_string(g.frames) + "x" +
                         std::to_string(g.height) + "x" + std::to_string(g.width) + " grid");
    return Tensor<S>(Shape{g.frames, g.height, g.width, tokens.dim(1)}, tokens.data);
}

template <typename S>
Tensor<S> avg_pool_embeddings(const Tensor<S>& grid, Index frames, Index height, Index width) {
    if (grid.rank() != 4) throw ShapeError("avg_pool_embeddings: expected [T, H, W, D], got " + shape_str(grid.shape));
    const Index T = grid.dim(0), H = grid.dim(1), W = grid.dim(2), D = grid.dim(3);
    if (frames < 1 || height < 1 || width < 1 || T % frames || H % height || W % width)
        throw ConfigError("embedding grid " + std::to_string(T) + "x" + std::to_string(H) + "x" + std::to_string(W) +
                          " cannot be average-pooled to " + std::to_string(frames) + "x" + std::to_string(height) + "x" +
                          std::to_string(width) +
                          "; choose (f, p) for both autoencoders so the base token grid is an integer multiple of the new one");
    const Index kt = T / frames, kh = H / height, kw = W / width;
    Tensor<S> out(Shape{frames, height, width, D});
    const S inv = S(1) / S(kt * kh * kw);
    for (Index t = 0; t < frames; ++t)
        for (Index i = 0; i < height; ++i)
            for (Index j = 0; j < width; ++j) {
                auto dst = out.data.segment(((t * height + i) * width + j) * D, D);
                for (Index a = 0; a < kt; ++a)
                    for (Index b = 0; b < kh; ++b)
                        for (Index c = 0; c < kw; ++c)
                            dst += grid.data.segment((((t * kt + a) * H + i * kh + b) * W + j * kw + c) * D, D);
                dst *= inv;
            }
    return out;
}

template <typename S>
Tensor<S> alignment_target(const DiTModel<S>& base, const Tensor<S>& base_latent, const TokenGrid& new_grid) {
    NoGradGuard guard;
    const TokenGrid g = token_grid(base_latent.shape, base.config.patch_size);
    const Tensor<S> grid = tokens_to_grid(patch_embed(Var<S>(base_latent), base).value(), g);
    const Tensor<S> pooled = avg_pool_embeddings(grid, new_grid.frames, new_grid.height, new_grid.width);
    return Tensor<S>(Shape{new_grid.count(), pooled.dim(3)}, pooled.data);
}

template <typename S>
Var<S> alignment_loss(const DiTModel<S>& model, const Tensor<S>& new_latent, const Tensor<S>& target) {
    return mse_loss(patch_embed(Var<S>(new_latent), model), Var<S>(target));
}

// ---- LoRA ---------------------------------------------------------------------------------

template <typename S>
std::vector<std::string> attach_lora(DiTModel<S>& model, const std::vector<std::string>& targets, const LoRASpec& spec,
                                     std::uint64_t seed) {
    if (spec.rank < 1) throw ConfigError("LoRA rank must be >= 1");
    for (const auto& t : targets) {
        if (!model.weights.contains(t + ".weight") || model.weights.at(t + ".weight").value().rank() != 2)
            throw ConfigError("unknown LoRA target: " + t);
        if (model.lora.count(t)) throw ConfigError("LoRA already attached to " + t);
    }
    Rng rng(seed);
    std::vector<std::string> names;
    for (const auto& t : targets) {
        const Var<S>& w = model.weights.at(t + ".weight");
        const Index d_out = w.dim(0), d_in = w.dim(1);
        model.weights.add(t + ".lora_A", rng.normal_tensor<S>(Shape{spec.rank, d_in}, 1.0 / std::sqrt(double(d_in))));
        model.weights.add(t + ".lora_B", Tensor<S>(Shape{d_out, spec.rank}));
        model.lora[t] = spec;
        names.push_back(t + ".lora_A");
        names.push_back(t + ".lora_B");
    }
    return names;
}

template <typename S>
void merge_lora(DiTModel<S>& model) {
    for (const auto& [t, spec] : model.lora) {
        const Tensor<S>& a = model.weights.at(t + ".lora_A").value();
        const Tensor<S>& b = model.weights.at(t + ".lora_B").value();
        Tensor<S>& w = model.weights.at(t + ".weight").mutable_value();
        MatrixMap<S> wm(w.ptr(), w.dim(0), w.dim(1));
        ConstMatrixMap<S> am(a.ptr(), a.dim(0), a.dim(1));
        ConstMatrixMap<S> bm(b.ptr(), b.dim(0), b.dim(1));
        wm.noalias() += S(spec.scale()) * (bm * am);
        model.weights.erase(t + ".lora_A");
        model.weights.erase(t + ".lora_B");
    }
    model.lora.clear();
}

template <typename S>
Index lora_parameter_count(const DiTModel<S>& model) {
    Index n = 0;
    for (const auto& [t, spec] : model.lora) {
        const Var<S>& w = model.weights.at(t + ".weight");
        n += spec.rank * (w.dim(0) + w.dim(1));
    }
    return n;
}

// ---- trainable sets ------------------------------------------------------------------------

namespace {
bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }
bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}
}  // namespace

bool is_embedder_param(const std::string& name) { return starts_with(name, "embedder."); }
bool is_head_param(const std::string& name) { return starts_with(name, "head."); }
bool is_lora_param(const std::string& name) { return ends_with(name, ".lora_A") || ends_with(name, ".lora_B"); }

std::vector<std::string> set_trainable_where(DiTModel<float>& model, const std::function<bool(const std::string&)>& keep) {
    std::vector<std::string> names;
    for (auto& [name, v] : model.weights) {
        const bool on = keep(name);
        v.set_requires_grad(on);
        if (on) names.push_back(name);
    }
    return names;
}

Index count_trainable(const DiTModel<float>& model) {
    Index n = 0;
    for (const auto& [name, v] : model.weights)
        if (v.requires_grad()) n += v.numel();
    return n;
}

std::string frozen_hash(const DiTModel<float>& model) {
    Sha256 h;
    for (const auto& [name, v] : model.weights) {
        if (v.requires_grad()) continue;
        h.update(name);
        h.update(shape_str(v.shape()));
        h.update(v.ptr(), std::size_t(v.numel()) * sizeof(float));
    }
    return h.hex_digest();
}

// ---- stages ---------------------------------------------------------------------------------

DiTModel<float> make_adapted_model(const DiTModel<float>& base, Index new_channels, Index new_patch, std::uint64_t seed) {
    DiTModel<float> m{base.config, base.weights.clone(), base.lora};
    reinit_embedder(m, new_channels, new_patch, Rng::mix(seed ^ 0xe1));
    reinit_head(m, Rng::mix(seed ^ 0x4ead));
    return m;
}

namespace {

StageReport begin_stage(DiTModel<float>& model, const char* tag, const std::function<bool(const std::string&)>& keep) {
    StageReport r;
    r.stage = tag;
    r.trainable = set_trainable_where(model, keep);
    r.trainable_count = count_trainable(model);
    r.frozen_hash_before = frozen_hash(model);
    return r;
}

void end_stage(DiTModel<float>& model, StageReport& r) {
    model.weights.zero_grad();
    r.frozen_hash_after = frozen_hash(model);
    if (r.frozen_hash_after != r.frozen_hash_before)
        throw std::logic_error("stage " + r.stage + " modified frozen parameters");
}

}  // namespace

StageReport align_patch_embedder(DiTModel<float>& model, const DiTModel<float>& base,
                                 const std::vector<Tensor<float>>& base_latents,
                                 const std::vector<Tensor<float>>& new_latents, const AlignConfig& cfg) {
    if (base_latents.empty() || base_latents.size() != new_latents.size())
        throw ConfigError("stage 1a needs one base latent per new latent");
    if (base.config.embed_dim != model.config.embed_dim) throw ConfigError("stage 1a: embedding widths differ");
    std::vector<Tensor<float>> targets;
    for (std::size_t i = 0; i < base_latents.size(); ++i)
        targets.push_back(alignment_target(base, base_latents[i], token_grid(new_latents[i].shape, model.config.patch_size)));

    StageReport r = begin_stage(model, "1a", is_embedder_param);
    std::vector<Var<float>> params;
    for (const auto& name : r.trainable) params.push_back(model.weights.at(name));
    AdamW<float> opt(params, cfg.optim);
    Rng picker = Rng::derive(cfg.seed, 0x1a);
    for (long step = 1; step <= cfg.steps; ++step) {
        opt.zero_grad();
        Var<float> total;
        for (Index b = 0; b < cfg.batch_size; ++b) {
            const auto i = std::size_t(picker.integer(0, Index(new_latents.size()) - 1));
            Var<float> loss = alignment_loss(model, new_latents[i], targets[i]);
            total = total.defined() ? add(total, loss) : loss;
        }
        total = scale(total, 1.0f / float(cfg.batch_size));
        const double value = double(total.value().data[0]);
        if (!std::isfinite(value)) throw DivergenceError("stage 1a diverged at step " + std::to_string(step), step);
        backward(total);
        opt.step();
        r.losses.push_back(value);
        r.steps_run = step;
    }
    end_stage(model, r);
    return r;
}

bool plateau_reached(const std::vector<double>& losses, long window, double min_rel_improvement) {
    const auto n = long(losses.size());
    if (window < 1 || n < 2 * window) return false;
    double prev = 0, cur = 0;
    for (long i = n - 2 * window; i < n - window; ++i) prev += losses[std::size_t(i)];
    for (long i = n - window; i < n; ++i) cur += losses[std::size_t(i)];
    if (prev <= 0) return true;
    return (prev - cur) / prev < min_rel_improvement;
}

StageReport align_output_head(DiTModel<float>& model, const std::vector<Tensor<float>>& latents,
                              const std::vector<Index>& labels, const HeadAlignConfig& cfg) {
    StageReport r = begin_stage(model, "1b", [](const std::string& n) { return is_embedder_param(n) || is_head_param(n); });
    std::vector<double> seen;
    auto stop = [&](long, double loss) {
        seen.push_back(loss);
        // checked once per window so the rule sees disjoint windows
        if (long(seen.size()) % cfg.window != 0) return false;
        return plateau_reached(seen, cfg.window, cfg.min_rel_improvement);
    };
    DiTTrainReport tr = train_flow_matching(model, latents, labels, cfg.train, stop);
    r.losses = tr.losses;
    r.steps_run = long(tr.losses.size());
    r.plateau_stop = r.steps_run < cfg.train.steps;
    end_stage(model, r);
    return r;
}

StageReport finetune_end_to_end(DiTModel<float>& model, const std::vector<Tensor<float>>& latents,
                                const std::vector<Index>& labels, const FinetuneConfig& cfg) {
    std::function<bool(const std::string&)> keep;
    if (cfg.mode == FinetuneMode::lora) {
        if (model.lora.empty()) attach_lora(model, block_linear_names(model.config), cfg.lora, Rng::mix(cfg.train.seed ^ 0x10a));
        keep = [](const std::string& n) { return is_lora_param(n) || is_embedder_param(n) || is_head_param(n); };
    } else {
        keep = [](const std::string&) { return true; };
    }
    StageReport r = begin_stage(model, cfg.mode == FinetuneMode::lora ? "2-lora" : "2-full", keep);
    DiTTrainReport tr = train_flow_matching(model, latents, labels, cfg.train);
    r.losses = tr.losses;
    r.steps_run = long(tr.losses.size());
    r.diverged_at = tr.diverged_at;
    end_stage(model, r);
    return r;
}

StageReport naive_baseline(DiTModel<float>& model, const DiTModel<float>& base, Index new_channels, Index new_patch,
                           const std::vector<Tensor<float>>& latents, const std::vector<Index>& labels,
                           FinetuneConfig cfg, std::uint64_t seed) {
    model = make_adapted_model(base, new_channels, new_patch, seed);
    cfg.train.stop_on_divergence = true;
    StageReport r = finetune_end_to_end(model, latents, labels, cfg);
    r.stage = "naive";
    return r;
}

// ---- I2V -------------------------------------------------------------------------------------

LatentVideo i2v_encode_condition(const VideoClip& image, const AEParams<float>& ae, Index video_height,
                                 Index video_width) {
    if (image.frames_count() != 1) throw ShapeError("i2v condition must be a single frame");
    if (image.height() != video_height || image.width() != video_width)
        throw ShapeError("i2v image is " + std::to_string(image.height()) + "x" + std::to_string(image.width()) +
                         ", video is " + std::to_string(video_height) + "x" + std::to_string(video_width));
    constexpr Index kRepeats = 4;
    const Index chunk = ae.config.effective_chunk(kRepeats);
    const Index length = std::max(chunk, (kRepeats + chunk - 1) / chunk * chunk);
    Tensor<float> frames = Tensor<float>::constant(Shape{length, image.height(), image.width(), 3}, -1.0f);
    const Index per = image.height() * image.width() * 3;
    for (Index k = 0; k < kRepeats; ++k) std::copy(image.frame_ptr(0), image.frame_ptr(0) + per, frames.ptr() + k * per);
    return encode(VideoClip(std::move(frames), image.frame_rate), ae);
}

Tensor<float> concat_condition_channels(const Tensor<float>& video, const LatentVideo& cond) {
    if (video.rank() != 4 || video.dim(2) != cond.height() || video.dim(3) != cond.width())
        throw ShapeError("condition latent " + shape_str(cond.values.shape) + " does not match video latent " +
                         shape_str(video.shape));
    const Index C = video.dim(0), Cc = cond.channels(), T = video.dim(1), plane = video.dim(2) * video.dim(3);
    Tensor<float> out(Shape{C + Cc, T, video.dim(2), video.dim(3)});
    out.data.head(video.numel()) = video.data;
    const Index Tc = std::min(T, cond.frames());
    for (Index c = 0; c < Cc; ++c)
        for (Index t = 0; t < Tc; ++t)
            out.data.segment(((C + c) * T + t) * plane, plane) = cond.values.data.segment((c * cond.frames() + t) * plane, plane);
    return out;
}

// ---- run state --------------------------------------------------------------------------------

std::string stage_tag(AdaptStage s) {
    switch (s) {
        case AdaptStage::align_embedder: return "1a";
        case AdaptStage::align_head: return "1b";
        case AdaptStage::finetune: return "2";
        case AdaptStage::naive: return "naive";
    }
    return "?";
}

AdaptStage stage_from_tag(const std::string& tag) {
    if (tag == "1a") return AdaptStage::align_embedder;
    if (tag == "1b") return AdaptStage::align_head;
    if (tag == "2") return AdaptStage::finetune;
    if (tag == "naive") return AdaptStage::naive;
    throw ConfigError("unknown adaptation stage '" + tag + "' (expected 1a, 1b, 2, all or naive)");
}

AdaptationRun::AdaptationRun(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::ifstream in(dir_ / "stages.json");
    if (!in) return;
    const auto j = nlohmann::json::parse(in);
    for (const auto& tag : j.at("completed")) done_.insert(stage_from_tag(tag.get<std::string>()));
}

void AdaptationRun::require_ready(AdaptStage stage) const {
    auto need = [&](AdaptStage prior) {
        if (!completed(prior))
            throw OrderingError("stage " + stage_tag(stage) + " requires stage " + stage_tag(prior) + " to be completed first");
    };
    if (stage == AdaptStage::align_head) need(AdaptStage::align_embedder);
    if (stage == AdaptStage::finetune) {
        need(AdaptStage::align_embedder);
        need(AdaptStage::align_head);
    }
}

void AdaptationRun::mark_completed(AdaptStage stage) {
    require_ready(stage);
    done_.insert(stage);
    save();
}

void AdaptationRun::save() const {
    if (dir_.empty()) return;
    nlohmann::json j;
    j["completed"] = nlohmann::json::array();
    for (AdaptStage s : done_) j["completed"].push_back(stage_tag(s));
    std::filesystem::create_directories(dir_);
    std::ofstream(dir_ / "stages.json") << j.dump(2) << '\n';
}

#define DCV_INSTANTIATE(S)                                                                                       \
    template Tensor<S> tokens_to_grid<S>(const Tensor<S>&, const TokenGrid&);                                   \
    template Tensor<S> avg_pool_embeddings<S>(const Tensor<S>&, Index, Index, Index);                          \
    template Tensor<S> alignment_target<S>(const DiTModel<S>&, const Tensor<S>&, const TokenGrid&);             \
    template Var<S> alignment_loss<S>(const DiTModel<S>&, const Tensor<S>&, const Tensor<S>&);                  \
    template std::vector<std::string> attach_lora<S>(DiTModel<S>&, const std::vector<std::string>&,             \
                                                     const LoRASpec&, std::uint64_t);                           \
    template void merge_lora<S>(DiTModel<S>&);                                                                  \
    template Index lora_parameter_count<S>(const DiTModel<S>&);

DCV_INSTANTIATE(float)
DCV_INSTANTIATE(double)
#undef DCV_INSTANTIATE

}  // namespace dcv
