// Acceptance gate. Runs every criterion (or those named on the command line,
// e.g. `acceptance 1 6 9`) and prints one PASS/FAIL line per criterion.
// Exit status is nonzero when any selected criterion fails.

#include "dcv/ae_adapt_v.hpp"
#include "dcv/ae_training.hpp"
#include "dcv/dataset.hpp"
#include "dcv/harness.hpp"
#include "dcv/metrics.hpp"
#include "support.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace dcv;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1e-300, std::abs(b)); }

// ---- 1 -----------------------------------------------------------------------------------

Outcome compression_ratios() {
    const std::vector<std::pair<const char*, double>> table{
        {"f8t4c16", 48},   {"f16t4c48", 64},  {"f16t8c64", 96},   {"f32t4c128", 96}, {"f32t8c128", 192},
        {"f32t4c256", 48}, {"f32t4c64", 192}, {"f32t4c32", 384}, {"f64t4c128", 384}};
    int exact = 0;
    std::string bad;
    for (const auto& [name, want] : table) {
        const double got = compression_ratio(AEConfig::parse(name));
        if (got == want)
            ++exact;
        else
            bad += std::string(" ") + name + "=" + fmt("%.17g", got);
    }
    return {exact == int(table.size()), std::to_string(exact) + "/" + std::to_string(table.size()) + " exact" + bad};
}

// ---- 2 -----------------------------------------------------------------------------------

AEParams<float> causality_ae(TemporalMode mode, Index chunk, std::uint64_t seed) {
    AEConfig cfg = AEConfig::parse("f4t2c8");
    cfg.temporal_mode = mode;
    cfg.chunk_size = chunk;
    return build_autoencoder<float>(cfg, WidthSpec{}, seed);
}

// Perturbs frames at or after `from`: the whole suffix on even trials, one pixel of one frame on odd ones.
bool prefix_survives(const AEParams<float>& ae, const VideoClip& clip, Index from, int trial, Rng& rng) {
    VideoClip changed = clip;
    const Index plane = clip.height() * clip.width() * 3;
    if (trial % 2 == 0) {
        for (Index t = from; t < clip.frames_count(); ++t)
            for (Index i = 0; i < plane; ++i) changed.frame_ptr(t)[i] = float(rng.uniform(-1, 1));
    } else {
        const Index t = rng.integer(from, clip.frames_count() - 1);
        float& px = changed.frame_ptr(t)[rng.integer(0, plane - 1)];
        px = px > 0 ? px - 0.5f : px + 0.5f;
    }
    const LatentVideo a = encode(clip, ae), b = encode(changed, ae);
    const Index lf = from / ae.config.t;
    if (!bitwise_equal(a.slice(0, lf).values, b.slice(0, lf).values)) return false;
    return bitwise_equal(decode(a, ae).slice(0, from).frames, decode(b, ae).slice(0, from).frames);
}

Outcome causality_suite() {
    const Index T = 16;
    struct Case {
        TemporalMode mode;
        Index chunk;
        Index granularity;  // perturbation start is a multiple of this
    };
    const std::vector<Case> cases{{TemporalMode::causal, 4, 2},
                                  {TemporalMode::grouped_causal, 2, 2},
                                  {TemporalMode::chunk_causal, 8, 8}};
    bool ok = true;
    std::string detail;
    for (const Case& c : cases) {
        int held = 0, trials = 0;
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            const auto ae = causality_ae(c.mode, c.chunk, 100 + seed);
            Rng rng(200 + seed);
            const VideoClip clip = testing::random_clip(rng, T, 16, 16);
            for (int trial = 0; trial < 20; ++trial, ++trials) {
                const Index from = c.granularity * rng.integer(1, T / c.granularity - 1);
                held += prefix_survives(ae, clip, from, trial, rng) ? 1 : 0;
            }
        }
        ok = ok && held == trials;
        detail += to_string(c.mode) + " " + std::to_string(held) + "/" + std::to_string(trials) + "; ";
    }
    int leaked = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto ae = causality_ae(TemporalMode::non_causal, 2, 300 + seed);
        Rng rng(400 + seed);
        const VideoClip clip = testing::random_clip(rng, T, 16, 16);
        bool all_held = true;
        for (int trial = 0; trial < 20 && all_held; ++trial)
            all_held = prefix_survives(ae, clip, 2 * rng.integer(1, T / 2 - 1), trial, rng);
        leaked += all_held ? 0 : 1;
    }
    ok = ok && leaked >= 4;
    detail += "non_causal leaks in " + std::to_string(leaked) + "/5 seeds";
    return {ok, detail};
}

// ---- 3 -----------------------------------------------------------------------------------

Outcome streaming_equivalence() {
    bool ok = true;
    std::string detail;
    for (auto [mode, chunk] : {std::pair{TemporalMode::causal, Index(4)}, std::pair{TemporalMode::grouped_causal, Index(2)},
                               std::pair{TemporalMode::chunk_causal, Index(8)}}) {
        const auto ae = causality_ae(mode, chunk, 7);
        const Index step = ae.config.effective_chunk(0);
        const VideoClip clip = testing::random_clip(11, 10 * step, 16, 16);
        const LatentVideo whole = encode(clip, ae);
        const VideoClip recon = decode(whole, ae);
        StreamingEncoder enc(ae);
        StreamingDecoder dec(ae);
        const Index lf = step / ae.config.t;
        bool latents = true, frames = true;
        for (Index i = 0; i < 10; ++i) {
            const LatentVideo part = enc.push(clip.slice(i * step, step));
            latents = latents && bitwise_equal(part.values, whole.slice(i * lf, lf).values);
            frames = frames && bitwise_equal(dec.push(part).frames, recon.slice(i * step, step).frames);
        }
        ok = ok && latents && frames;
        if (!detail.empty()) detail += "; ";
        detail += to_string(mode) + (latents ? " latents equal" : " latents DIFFER") +
                  (frames ? ", frames equal" : ", frames DIFFER");
    }
    return {ok, detail};
}

// ---- 4 & 5 -------------------------------------------------------------------------------

struct DefaultData {
    Dataset data;
    std::vector<VideoClip> train, val;
};

const DefaultData& default_data() {
    static const DefaultData d = [] {
        DefaultData out;
        out.data = generate_synthetic_dataset(SyntheticVideoSpec{});
        out.train = clips_of(out.data.train);
        out.val = clips_of(out.data.val);
        return out;
    }();
    return d;
}

Outcome chunk_size_trend() {
    const auto& d = default_data();
    const std::vector<Index> chunks{2, 4, 8, 16};
    const AblationResult r =
        ablate_chunk_size(d.train, d.val, AEConfig::parse("f4t2c8"), WidthSpec{}, chunks, AETrainConfig{}, {0, 1, 2});
    bool monotone = true;
    std::string detail = "median PSNR";
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        detail += " c" + std::to_string(chunks[i]) + "=" + fmt("%.3f", r.median_psnr[i]);
        if (i > 0 && r.median_psnr[i] < r.median_psnr[i - 1] - 0.2) monotone = false;
    }
    const double gain = r.median_psnr.back() - r.median_psnr.front();
    detail += "; c16-c2=" + fmt("%.3f", gain) + " dB; per seed:";
    for (const auto& row : r.rows)
        detail += " (" + std::to_string(row.chunk_size) + "," + std::to_string(row.seed) + ")=" + fmt("%.2f", row.val_psnr);
    return {monotone && gain >= 0.3, detail};
}

Outcome long_video() {
    const auto& d = default_data();
    AEConfig cfg = AEConfig::parse("f4t2c8");
    cfg.chunk_size = 16;
    AEParams<float> model = build_autoencoder<float>(cfg, WidthSpec{}, 0);
    train_autoencoder(d.train, d.val, model, AETrainConfig{});

    SyntheticVideoSpec long_spec;
    long_spec.frames = 64;
    long_spec.n_clips = 1;
    long_spec.seed = 77;
    const auto long_clips = clips_of(generate_synthetic_dataset(long_spec).val);
    const LongVideoResult r = evaluate_long_video(model, long_clips, 16, 16, 4);
    const bool within = std::abs(r.long_psnr - r.short_psnr) <= 1.0;
    const bool smaller_dip = r.boundary_dip < r.tiled_boundary_dip;
    return {within && smaller_dip,
            std::to_string(long_clips.size()) + " clips of 64 frames; 16-frame PSNR " + fmt("%.3f", r.short_psnr) +
                ", 64-frame PSNR " + fmt("%.3f", r.long_psnr) + "; dip chunk_causal " + fmt("%.3f", r.boundary_dip) +
                " vs tiled " + fmt("%.3f", r.tiled_boundary_dip) + " (tiled mean " + fmt("%.3f", r.tiled_long_psnr) +
                ")"};
}

// ---- 6 -----------------------------------------------------------------------------------

DiTConfig tiny_dit(Index channels, Index patch = 1, Index dim = 24, Index depth = 2) {
    DiTConfig cfg;
    cfg.latent_channels = channels;
    cfg.patch_size = patch;
    cfg.embed_dim = dim;
    cfg.depth = depth;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    cfg.time_freq_dim = 8;
    return cfg;
}

Outcome alignment_machinery() {
    Rng rng(61);
    double worst_pool = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const Index kt = rng.integer(1, 2), kh = rng.integer(1, 4), kw = rng.integer(1, 4);
        const Index To = rng.integer(1, 3), Ho = rng.integer(1, 3), Wo = rng.integer(1, 3), D = rng.integer(1, 8);
        const Tensor<double> grid = rng.normal_tensor<double>({To * kt, Ho * kh, Wo * kw, D});
        const Tensor<double> pooled = avg_pool_embeddings(grid, To, Ho, Wo);
        const auto oracle = testing::oracle_avg_pool(grid, To, Ho, Wo);
        if (pooled.numel() != Index(oracle.size())) return {false, "pooled size mismatch"};
        for (Index i = 0; i < pooled.numel(); ++i)
            worst_pool = std::max(worst_pool, std::abs(pooled.data[i] - oracle[std::size_t(i)]));
    }

    const auto base = build_dit<float>(tiny_dit(4), 62).cast<double>();
    auto model = make_adapted_model(build_dit<float>(tiny_dit(4), 62), 8, 1, 63).cast<double>();
    const Tensor<double> base_latent = rng.normal_tensor<double>({4, 2, 4, 4});
    const Tensor<double> new_latent = rng.normal_tensor<double>({8, 2, 2, 2});
    const Tensor<double> target = alignment_target(base, base_latent, token_grid(new_latent.shape, 1));
    const auto grad = testing::check_gradients<double>(
        model.weights, [&] { return alignment_loss(model, new_latent, target); }, 8, 1e-6, 1e-8, is_embedder_param);
    return {worst_pool < 1e-12 && grad.worst_rel < 1e-4 && grad.checked > 0,
            "avg_pool max abs err " + fmt("%.2e", worst_pool) + "; alignment grad worst rel err " +
                fmt("%.2e", grad.worst_rel) + " over " + std::to_string(grad.checked) + " entries"};
}

// ---- 7 -----------------------------------------------------------------------------------

Outcome alignment_efficacy() {
    const auto& d = default_data();
    std::vector<Index> labels, val_labels;
    for (const auto& c : d.data.train) labels.push_back(c.label);
    for (const auto& c : d.data.val) val_labels.push_back(c.label);

    AEConfig base_cfg = AEConfig::parse("f4t2c8"), new_cfg = AEConfig::parse("f8t2c16");
    base_cfg.chunk_size = new_cfg.chunk_size = 16;
    AEParams<float> base_ae = build_autoencoder<float>(base_cfg, WidthSpec{}, 1);
    AEParams<float> new_ae = build_autoencoder<float>(new_cfg, WidthSpec{}, 2);
    train_autoencoder(d.train, d.val, base_ae, AETrainConfig{});
    fit_latent_statistics(base_ae, d.train);
    train_autoencoder(d.train, d.val, new_ae, AETrainConfig{});
    fit_latent_statistics(new_ae, d.train);

    const auto base_latents = encode_latents(d.train, base_ae);
    const auto new_latents = encode_latents(d.train, new_ae);
    const auto new_val = encode_latents(d.val, new_ae);

    DiTModel<float> base = build_dit<float>(DiTConfig{}, 7);
    DiTTrainConfig base_train;
    base_train.seed = 7;
    train_base_model(base, base_latents, labels, base_train);

    std::vector<double> aligned, naive;
    std::string detail;
    for (std::uint64_t s = 0; s < 3; ++s) {
        DiTModel<float> model = make_adapted_model(base, new_cfg.c, 1, s);
        AlignConfig a;
        a.seed = s;
        HeadAlignConfig h;
        h.train.seed = s + 100;
        FinetuneConfig f;
        f.train.seed = s + 200;
        const long steps = align_patch_embedder(model, base, base_latents, new_latents, a).steps_run +
                           align_output_head(model, new_latents, labels, h).steps_run +
                           finetune_end_to_end(model, new_latents, labels, f).steps_run;
        aligned.push_back(validation_diffusion_loss(model, new_val, val_labels, 4, 99));

        DiTModel<float> random_init;
        FinetuneConfig budget = f;
        budget.train.steps = steps;
        budget.train.seed = s + 300;
        naive_baseline(random_init, base, new_cfg.c, 1, new_latents, labels, budget, s);
        naive.push_back(validation_diffusion_loss(random_init, new_val, val_labels, 4, 99));
        detail += "seed " + std::to_string(s) + ": aligned " + fmt("%.4f", aligned.back()) + " vs naive " +
                  fmt("%.4f", naive.back()) + " at " + std::to_string(steps) + " steps; ";
    }
    const double ma = median(aligned), mn = median(naive);
    detail += "median " + fmt("%.4f", ma) + " vs " + fmt("%.4f", mn);
    return {ma < mn, detail};
}

// ---- 8 -----------------------------------------------------------------------------------

Outcome lora_suite() {
    auto model = build_dit<float>(tiny_dit(4, 1, 32, 2), 81);
    {
        Rng jitter(82);
        for (auto& [name, v] : model.weights)
            for (Index i = 0; i < v.numel(); ++i) v.mutable_value().data[i] += float(jitter.normal(0, 0.2));
    }
    const DiTModel<float> plain{model.config, model.weights.clone(), model.lora};
    const auto targets = block_linear_names(model.config);
    const LoRASpec spec{4, 8.0};
    attach_lora(model, targets, spec, 83);

    Index expected = 0;
    for (const auto& t : targets) {
        const Shape& w = plain.weights.at(t + ".weight").shape();
        expected += spec.rank * (w[0] + w[1]);
    }
    const Index attached = lora_parameter_count(model);
    const bool count_ok = attached == expected;

    Rng rng(84);
    int transparent = 0;
    for (int i = 0; i < 20; ++i) {
        const Var<float> x(rng.normal_tensor<float>({4, 2, 2, 2}));
        const float u = float(rng.uniform());
        NoGradGuard guard;
        transparent += bitwise_equal(dit_forward(x, u, i % 3, model).value(), dit_forward(x, u, i % 3, plain).value());
    }

    for (auto& [name, v] : model.weights)
        if (name.find("lora_B") != std::string::npos) v.mutable_value() = rng.normal_tensor<float>(v.shape(), 0.1);
    std::vector<Var<float>> inputs;
    std::vector<Tensor<float>> before;
    for (int i = 0; i < 20; ++i) {
        inputs.emplace_back(rng.normal_tensor<float>({4, 2, 2, 2}));
        NoGradGuard guard;
        before.push_back(dit_forward(inputs.back(), 0.3f, i % 3, model).value());
    }
    merge_lora(model);
    double worst_merge = 0;
    for (int i = 0; i < 20; ++i) {
        NoGradGuard guard;
        const auto after = dit_forward(inputs[std::size_t(i)], 0.3f, i % 3, model).value();
        const auto& ref = before[std::size_t(i)];
        worst_merge = std::max(worst_merge, double((after.data - ref.data).matrix().norm() / ref.data.matrix().norm()));
    }

    const auto latents = [&] {
        std::vector<Tensor<float>> out;
        for (int i = 0; i < 4; ++i) out.push_back(rng.normal_tensor<float>({4, 2, 2, 2}));
        return out;
    }();
    const std::vector<Index> labels{0, 1, 2, 0};
    DiTModel<float> lora_model{plain.config, plain.weights.clone(), plain.lora};
    DiTModel<float> full_model{plain.config, plain.weights.clone(), plain.lora};
    FinetuneConfig f;
    f.train.steps = 2;
    f.lora = spec;
    const Index lora_trained = finetune_end_to_end(lora_model, latents, labels, f).trainable_count;
    f.mode = FinetuneMode::full;
    const Index full_trained = finetune_end_to_end(full_model, latents, labels, f).trainable_count;

    return {transparent == 20 && worst_merge < 1e-5 && count_ok && lora_trained < full_trained,
            "transparent " + std::to_string(transparent) + "/20; merge rel err " + fmt("%.2e", worst_merge) +
                "; adapter params " + std::to_string(attached) + " (formula " +
                std::to_string(expected) + (count_ok ? ", exact" : ", MISMATCH") + "); stage-2 trainable lora " +
                std::to_string(lora_trained) + " vs full " + std::to_string(full_trained)};
}

// ---- 9 -----------------------------------------------------------------------------------

Outcome metric_oracles() {
    Rng rng(91);
    double worst_psnr = 0, worst_ssim = 0;
    for (int i = 0; i < 50; ++i) {
        const Index T = rng.integer(1, 3), H = rng.integer(7, 20), W = rng.integer(7, 20);
        const VideoClip x = testing::random_clip(rng, T, H, W);
        // Mix of unrelated pairs and noisy copies so PSNR spans a useful range.
        VideoClip y = testing::random_clip(rng, T, H, W);
        if (i % 2) {
            const double sigma = rng.uniform(0.01, 0.3);
            Tensor<float> f = x.frames;
            for (Index k = 0; k < f.numel(); ++k)
                f.data[k] = std::clamp(f.data[k] + float(rng.normal(0, sigma)), -1.0f, 1.0f);
            y = VideoClip(f, 8);
        }
        worst_psnr = std::max(worst_psnr, rel_err(metrics::psnr(x, y), testing::oracle_psnr(x, y)));
        worst_ssim = std::max(worst_ssim, rel_err(metrics::ssim(x, y), testing::oracle_ssim(x, y)));
    }
    const double closed = metrics::psnr(VideoClip::zeros(2, 8, 8), VideoClip(Tensor<float>::constant({2, 8, 8, 3}, 1.0f), 8));
    return {worst_psnr < 1e-9 && worst_ssim < 1e-9 && std::abs(closed - 6.0206) <= 1e-6,
            "50 pairs: psnr worst rel " + fmt("%.2e", worst_psnr) + ", ssim worst rel " + fmt("%.2e", worst_ssim) +
                "; constant offset case " + fmt("%.6f", closed) + " dB"};
}

// ---- 10 & 11: the CLI, in-process ----------------------------------------------------------

struct Workdir {
    fs::path root;
    explicit Workdir(const std::string& name) : root(fs::temp_directory_path() / ("dcv_acceptance_" + name)) {
        fs::remove_all(root);
        fs::create_directories(root);
    }
    fs::path write(const std::string& name, const std::string& text) const {
        const fs::path p = root / name;
        std::ofstream(p) << text;
        return p;
    }
    std::string path(const std::string& rel) const { return (root / rel).string(); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int cli(std::vector<std::string> args, std::string* err_text = nullptr) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    if (err_text) *err_text = err.str();
    return code;
}

Outcome token_accounting() {
    const Workdir w("speedup");
    const auto c16 = w.write("a.json", R"({"base": {"config": "f8t4c16", "patch_size": 2},
                                         "new": {"config": "f64t4c128", "patch_size": 1}})");
    const auto c4 = w.write("b.json", R"({"base": {"config": "f8t4c16", "patch_size": 2},
                                        "new": {"config": "f32t4c128", "patch_size": 1}})");
    if (cli({"speedup", "--config", c16.string(), "--out", w.path("a")}) != 0 ||
        cli({"speedup", "--config", c4.string(), "--out", w.path("b")}) != 0)
        return {false, "speedup command failed"};
    const double r16 = json::parse(slurp(w.root / "a" / "summary.json")).at("token_ratio").get<double>();
    const double r4 = json::parse(slurp(w.root / "b" / "summary.json")).at("token_ratio").get<double>();

    Rng rng(101);
    int agree = 0;
    for (int trial = 0; trial < 20; ++trial) {
        AEConfig ae;
        ae.f = Index(1) << rng.integer(1, 5);
        ae.t = Index(1) << rng.integer(0, 2);
        ae.c = rng.integer(1, 8);
        ae.chunk_size = ae.t;
        const Index p = rng.integer(1, 2);
        const Index T = ae.t * rng.integer(1, 4), H = ae.f * p * rng.integer(1, 3), W = ae.f * p * rng.integer(1, 3);
        const auto model = build_dit<float>(tiny_dit(ae.c, p, 16, 0), 1);
        const Var<float> latent(Tensor<float>({ae.c, T / ae.t, H / ae.f, W / ae.f}));
        agree += embed(latent, model).dim(0) == token_count(ae, p, T, H, W);
    }
    return {r16 == 16.0 && r4 == 4.0 && agree == 20, "token_ratio " + fmt("%g", r16) + " and " + fmt("%g", r4) +
                                                       "; embed grid equals token_count on " + std::to_string(agree) +
                                                       "/20 shapes"};
}

// Runs a command, then replays it from the archived config and seed into a fresh directory.
struct Audit {
    const Workdir& w;
    std::vector<std::string> failures;
    int replayed = 0;

    bool run(const std::string& name, const std::vector<std::string>& args) {
        std::string err;
        const int code = cli(args, &err);
        if (code != 0) failures.push_back(name + " exited " + std::to_string(code) + ": " + err);
        return code == 0;
    }

    void replay(const std::string& name, const std::string& command, const std::string& dir,
                const std::vector<std::vector<std::string>>& stage_args = {{}}) {
        const fs::path original = w.root / dir;
        const std::string seed = json::parse(slurp(original / "summary.json")).at("seed").dump();
        const fs::path archived = w.root / (dir + "_config.json");
        fs::copy_file(original / "config.json", archived, fs::copy_options::overwrite_existing);
        for (const auto& extra : stage_args) {
            std::vector<std::string> args{command, "--config", archived.string(), "--out", w.path(dir + "_replay"),
                                          "--seed", seed};
            args.insert(args.end(), extra.begin(), extra.end());
            if (!run(name + " replay", args)) return;
        }
        ++replayed;
        if (slurp(original / "summary.json") != slurp(w.root / (dir + "_replay") / "summary.json"))
            failures.push_back(name + " summary differs on replay");
    }
};

Outcome determinism_audit() {
    const Workdir w("audit");
    Audit a{w};
    const std::string data = w.path("data/dataset");
    const auto cfg = [&](const std::string& name, const std::string& text) { return w.write(name, text).string(); };

    const auto gd = cfg("gd.json", R"({"dataset": {"n_clips": 8, "n_val": 2, "frames": 8, "height": 16, "width": 16}})");
    const auto ae1 = cfg("ae1.json", R"({"dataset_dir": ")" + data +
                                         R"(", "autoencoder": {"config": "f4t2c8", "chunk_size": 8},
                                            "train": {"steps": 5, "batch_size": 2}})");
    const auto ae2 = cfg("ae2.json", R"({"dataset_dir": ")" + data +
                                         R"(", "autoencoder": {"config": "f8t2c16", "chunk_size": 8},
                                            "train": {"steps": 5, "batch_size": 2}})");
    const auto ab = cfg("ab.json", R"({"dataset_dir": ")" + data +
                                       R"(", "train": {"steps": 2, "batch_size": 2}, "chunk_sizes": [2, 4], "seeds": [0]})");
    const std::string ae1_ckpt = w.path("ae1/autoencoder.safetensors");
    const auto er = cfg("er.json", R"({"dataset_dir": ")" + data + R"(", "autoencoders": [{"name": "a", "checkpoint": ")" +
                                       ae1_ckpt +
                                       R"("}], "long_video": {"frames": 32, "clips": 1, "short_frames": 8,
                                            "tile_len": 8, "overlap": 2}})");
    const auto tb = cfg("tb.json", R"({"dataset_dir": ")" + data + R"(", "autoencoder_checkpoint": ")" + ae1_ckpt +
                                       R"(", "dit": {"embed_dim": 48, "depth": 2, "heads": 4},
                                            "train": {"steps": 10, "batch_size": 2}})");
    const std::string dit_ckpt = w.path("base/dit.safetensors");
    const auto ad = cfg("ad.json", R"({"dataset_dir": ")" + data + R"(", "base_autoencoder": ")" + ae1_ckpt +
                                       R"(", "new_autoencoder": ")" + w.path("ae2/autoencoder.safetensors") +
                                       R"(", "base_dit": ")" + dit_ckpt +
                                       R"(", "new_patch_size": 1, "stage1a": {"steps": 5},
                                            "stage1b": {"max_steps": 5, "window": 2}, "stage2": {"steps": 5, "rank": 2}})");
    const auto eg = cfg("eg.json", R"({"dataset_dir": ")" + data + R"(", "autoencoder_checkpoint": ")" + ae1_ckpt +
                                       R"(", "dit_checkpoint": ")" + dit_ckpt +
                                       R"(", "samples_per_class": 2, "sample_steps": 3})");
    const auto sp = cfg("sp.json", "{}");

    const auto go = [&](const std::string& command, const std::string& config, const std::string& dir,
                        const std::string& seed) {
        return a.run(command, {command, "--config", config, "--out", w.path(dir), "--seed", seed});
    };
    // Each command runs once; its replay reads only the archived config and seed.
    if (go("gen-data", gd, "data", "3")) a.replay("gen-data", "gen-data", "data");
    if (go("train-ae", ae1, "ae1", "0")) a.replay("train-ae", "train-ae", "ae1");
    go("train-ae", ae2, "ae2", "1");
    if (go("ablate-chunks", ab, "ab", "0")) a.replay("ablate-chunks", "ablate-chunks", "ab");
    if (go("eval-recon", er, "er", "0")) a.replay("eval-recon", "eval-recon", "er");
    if (go("train-base", tb, "base", "2")) a.replay("train-base", "train-base", "base");
    if (a.run("adapt", {"adapt", "--stage", "all", "--config", ad, "--out", w.path("ad"), "--seed", "4"}) &&
        a.run("adapt naive", {"adapt", "--stage", "naive", "--config", ad, "--out", w.path("ad"), "--seed", "4"}))
        a.replay("adapt", "adapt", "ad", {{"--stage", "all"}, {"--stage", "naive"}});
    if (go("eval-gen", eg, "eg", "5")) a.replay("eval-gen", "eval-gen", "eg");
    if (go("speedup", sp, "sp", "0")) a.replay("speedup", "speedup", "sp");

    std::string detail = std::to_string(a.replayed) + "/8 commands reproduced their summary bitwise";
    for (const auto& f : a.failures) detail += "; " + f;
    return {a.failures.empty() && a.replayed == 8, detail};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"compression-ratio exactness", compression_ratios},
        {"causality suite", causality_suite},
        {"streaming equivalence", streaming_equivalence},
        {"chunk-size trend", chunk_size_trend},
        {"long-video generalization", long_video},
        {"alignment machinery", alignment_machinery},
        {"alignment efficacy", alignment_efficacy},
        {"LoRA suite", lora_suite},
        {"metric oracles", metric_oracles},
        {"token accounting", token_accounting},
        {"determinism audit", determinism_audit},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));

    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = int(i) + 1;
        if (!selected.empty() && !selected.count(id)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        failed += o.pass ? 0 : 1;
        std::printf("criterion %2d %s  %s (%.1fs): %s\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(), secs,
                    o.detail.c_str());
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
