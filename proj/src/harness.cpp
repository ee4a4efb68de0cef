#include "dcv/harness.hpp"

#include "dcv/ae_adapt_v.hpp"
#include "dcv/ae_training.hpp"
#include "dcv/checkpoint.hpp"
#include "dcv/dataset.hpp"
#include "dcv/hash.hpp"
#include "dcv/metrics.hpp"
#include "dcv/toy_dit.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

namespace dcv::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// ---- config plumbing ----------------------------------------------------------------------

// A JSON object with a closed key set. Unknown keys are config errors.
class Section {
public:
    Section(const json& j, std::string where, std::initializer_list<const char*> allowed)
        : j_(j), where_(std::move(where)) {
        if (!j.is_object()) throw ConfigError(where_ + ": expected a JSON object");
        const std::set<std::string> keys(allowed.begin(), allowed.end());
        for (const auto& item : j.items())
            if (!keys.count(item.key())) throw ConfigError("unknown key '" + path(item.key()) + "'");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    template <typename T>
    T get(const std::string& key, T fallback) const {
        return has(key) ? convert<T>(key) : fallback;
    }

    template <typename T>
    T require(const std::string& key) const {
        if (!has(key)) throw ConfigError("missing key '" + path(key) + "'");
        return convert<T>(key);
    }

    const json& at(const std::string& key) const { return j_.at(key); }
    std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

private:
    template <typename T>
    T convert(const std::string& key) const {
        const json& v = j_.at(key);
        if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) throw ConfigError("'" + path(key) + "' must be an integer");
            if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)
                throw ConfigError("'" + path(key) + "' must be non-negative");
        }
        try {
            return v.get<T>();
        } catch (const json::exception&) {
            throw ConfigError("'" + path(key) + "' has the wrong type");
        }
    }

    json j_;
    std::string where_;
};

struct Context {
    std::string command;
    std::string config_text;
    json config;
    std::uint64_t seed = 0;
    fs::path out;
    bool force = false;
    std::string stage = "all";
};

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string file_sha256(const fs::path& path) {
    const std::string bytes = read_text(path);
    return sha256_hex(bytes.data(), bytes.size());
}

// Refuses a completed run unless forced, then archives the config verbatim.
void prepare_run_dir(const Context& ctx, bool resumable) {
    if (!resumable && fs::exists(ctx.out / "summary.json") && !ctx.force)
        throw ConfigError("run directory " + ctx.out.string() + " holds a completed run; pass --force to overwrite");
    fs::create_directories(ctx.out);
    write_text(ctx.out / "config.json", ctx.config_text);
}

json spec_json(const SyntheticVideoSpec& s) {
    return json{{"n_clips", s.n_clips},   {"n_val", s.n_val},
                {"frames", s.frames},     {"height", s.height},
                {"width", s.width},       {"max_velocity", s.max_velocity},
                {"max_objects", s.max_objects}, {"frame_rate", s.frame_rate},
                {"seed", s.seed}};
}

SyntheticVideoSpec parse_spec(const json& j, std::uint64_t seed) {
    const Section s(j, "dataset",
                    {"n_clips", "n_val", "frames", "height", "width", "max_velocity", "max_objects", "frame_rate",
                     "seed"});
    SyntheticVideoSpec spec;
    spec.n_clips = s.get<Index>("n_clips", spec.n_clips);
    spec.n_val = s.get<Index>("n_val", spec.n_val);
    spec.frames = s.get<Index>("frames", spec.frames);
    spec.height = s.get<Index>("height", spec.height);
    spec.width = s.get<Index>("width", spec.width);
    spec.max_velocity = s.get<double>("max_velocity", spec.max_velocity);
    spec.max_objects = s.get<Index>("max_objects", spec.max_objects);
    spec.frame_rate = s.get<int>("frame_rate", spec.frame_rate);
    spec.seed = s.get<std::uint64_t>("seed", seed);
    spec.validate();
    return spec;
}

// Either "dataset_dir" (a gen-data output) or an inline "dataset" spec.
Dataset load_data(const Section& root, std::uint64_t seed) {
    if (root.has("dataset_dir") && root.has("dataset"))
        throw ConfigError("give either 'dataset' or 'dataset_dir', not both");
    if (root.has("dataset_dir")) return load_dataset(root.require<std::string>("dataset_dir"));
    const json inline_spec = root.has("dataset") ? root.at("dataset") : json::object();
    return generate_synthetic_dataset(parse_spec(inline_spec, seed));
}

struct AESetup {
    AEConfig config;
    WidthSpec widths;
};

AESetup parse_autoencoder(const json& j) {
    const Section s(j, "autoencoder",
                    {"config", "chunk_size", "temporal_mode", "base_width", "max_width", "blocks_per_stage",
                     "norm_group_size"});
    AESetup setup;
    setup.config = AEConfig::parse(s.get<std::string>("config", "f4t2c8"));
    setup.config.chunk_size = s.get<Index>("chunk_size", setup.config.chunk_size);
    if (s.has("temporal_mode"))
        setup.config.temporal_mode = temporal_mode_from_string(s.require<std::string>("temporal_mode"));
    setup.widths.base_width = s.get<Index>("base_width", setup.widths.base_width);
    setup.widths.max_width = s.get<Index>("max_width", setup.widths.max_width);
    setup.widths.blocks_per_stage = s.get<Index>("blocks_per_stage", setup.widths.blocks_per_stage);
    setup.widths.norm_group_size = s.get<Index>("norm_group_size", setup.widths.norm_group_size);
    setup.config.validate();
    return setup;
}

AdamWConfig parse_optim(const Section& s, double lr) {
    AdamWConfig o;
    o.lr = s.get<double>("lr", lr);
    o.weight_decay = s.get<double>("weight_decay", o.weight_decay);
    o.warmup_steps = s.get<long>("warmup_steps", o.warmup_steps);
    o.max_grad_norm = s.get<double>("max_grad_norm", o.max_grad_norm);
    if (!(o.lr > 0)) throw ConfigError("'" + s.path("lr") + "' must be positive");
    return o;
}

void check_steps(long steps, Index batch, const std::string& where) {
    if (steps < 1) throw ConfigError(where + ".steps must be positive");
    if (batch < 1) throw ConfigError(where + ".batch_size must be positive");
}

AETrainConfig parse_ae_train(const json& j, std::uint64_t seed) {
    const Section s(j, "train",
                    {"steps", "batch_size", "lr", "weight_decay", "warmup_steps", "max_grad_norm", "lambda_grad",
                     "eval_every"});
    AETrainConfig cfg;
    cfg.steps = s.get<long>("steps", cfg.steps);
    cfg.batch_size = s.get<Index>("batch_size", cfg.batch_size);
    cfg.optim = parse_optim(s, cfg.optim.lr);
    cfg.lambda_grad = s.get<double>("lambda_grad", cfg.lambda_grad);
    cfg.eval_every = s.get<long>("eval_every", cfg.eval_every);
    cfg.seed = seed;
    check_steps(cfg.steps, cfg.batch_size, "train");
    return cfg;
}

DiTTrainConfig parse_dit_train(const json& j, const std::string& where, std::uint64_t seed, DiTTrainConfig cfg,
                               const char* steps_key = "steps") {
    const Section s(j, where, {steps_key, "batch_size", "lr", "weight_decay", "warmup_steps", "max_grad_norm"});
    cfg.steps = s.get<long>(steps_key, cfg.steps);
    cfg.batch_size = s.get<Index>("batch_size", cfg.batch_size);
    cfg.optim = parse_optim(s, cfg.optim.lr);
    cfg.seed = seed;
    check_steps(cfg.steps, cfg.batch_size, where);
    return cfg;
}

json object_or_empty(const Section& root, const std::string& key) {
    return root.has(key) ? root.at(key) : json::object();
}

// Strips a leading JSON key set from a nested section before a Section check.
json without(json j, std::initializer_list<const char*> keys) {
    for (const char* k : keys) j.erase(k);
    return j;
}

json validation_json(const std::vector<ValRecord>& records) {
    json arr = json::array();
    for (const auto& r : records) arr.push_back({{"step", r.step}, {"psnr_db", r.psnr}, {"ssim", r.ssim}});
    return arr;
}

double mean_of(const std::vector<double>& v, std::size_t from, std::size_t to) {
    if (to <= from) return 0.0;
    return std::accumulate(v.begin() + long(from), v.begin() + long(to), 0.0) / double(to - from);
}

double head_mean(const std::vector<double>& v, std::size_t n = 10) { return mean_of(v, 0, std::min(n, v.size())); }
double tail_mean(const std::vector<double>& v, std::size_t n = 10) {
    return mean_of(v, v.size() - std::min(n, v.size()), v.size());
}

void write_losses(const fs::path& path, const std::vector<double>& losses) {
    std::ofstream out(path);
    for (std::size_t i = 0; i < losses.size(); ++i) out << json{{"step", i + 1}, {"loss", losses[i]}}.dump() << "\n";
}

std::vector<Index> labels_of(const std::vector<LabeledClip>& clips) {
    std::vector<Index> out;
    for (const auto& c : clips) out.push_back(c.label);
    return out;
}

json shape_json(const Shape& s) {
    json arr = json::array();
    for (Index d : s) arr.push_back(d);
    return arr;
}

// ---- commands -----------------------------------------------------------------------------

json cmd_gen_data(const Context& ctx) {
    const Section root(ctx.config, "", {"command", "seed", "dataset"});
    prepare_run_dir(ctx, false);
    const Dataset data = load_data(root, ctx.seed);
    const fs::path dir = ctx.out / "dataset";
    if (fs::exists(dir)) fs::remove_all(dir);
    save_dataset(data, dir);
    std::vector<Index> per_class(kNumMotifClasses, 0);
    for (const auto& c : data.train) ++per_class[std::size_t(c.label)];
    return {{"dataset", spec_json(data.spec)},
            {"dataset_dir", "dataset"},
            {"checksum", dataset_checksum(data)},
            {"n_train", data.train.size()},
            {"n_val", data.val.size()},
            {"train_clips_per_class", per_class}};
}

json cmd_train_ae(const Context& ctx) {
    const Section root(ctx.config, "", {"command", "seed", "dataset", "dataset_dir", "autoencoder", "train"});
    const AESetup setup = parse_autoencoder(object_or_empty(root, "autoencoder"));
    const AETrainConfig cfg = parse_ae_train(object_or_empty(root, "train"), ctx.seed);
    prepare_run_dir(ctx, false);
    const Dataset data = load_data(root, ctx.seed);
    const auto train = clips_of(data.train);
    const auto val = clips_of(data.val);

    AEParams<float> params = build_autoencoder<float>(setup.config, setup.widths, ctx.seed);
    TrainReport report = train_autoencoder(train, val, params, cfg);
    fit_latent_statistics(params, train);
    const fs::path ckpt = ctx.out / "autoencoder.safetensors";
    save_autoencoder(ckpt, params);
    report.write_jsonl(ctx.out / "train_log.jsonl");
    write_json(ctx.out / "timing.json", {{"wall_clock_s", report.wall_clock_s}});

    std::vector<double> losses;
    for (const auto& s : report.steps) losses.push_back(s.loss);
    return {{"autoencoder", setup.config.name()},
            {"chunk_size", setup.config.chunk_size},
            {"temporal_mode", to_string(setup.config.temporal_mode)},
            {"compression_ratio", compression_ratio(setup.config)},
            {"parameters", params.weights.total_elements()},
            {"dataset_checksum", dataset_checksum(data)},
            {"steps", cfg.steps},
            {"initial_loss", head_mean(losses)},
            {"final_loss", tail_mean(losses)},
            {"validation", validation_json(report.validation)},
            {"latent_mean", params.latent_mean},
            {"latent_std", params.latent_std},
            {"checkpoint", "autoencoder.safetensors"},
            {"checkpoint_sha256", file_sha256(ckpt)}};
}

json cmd_ablate_chunks(const Context& ctx) {
    const Section root(ctx.config, "",
                       {"command", "seed", "dataset", "dataset_dir", "autoencoder", "train", "chunk_sizes", "seeds",
                        "tolerance_db"});
    const AESetup setup = parse_autoencoder(without(object_or_empty(root, "autoencoder"), {"chunk_size"}));
    const AETrainConfig budget = parse_ae_train(object_or_empty(root, "train"), ctx.seed);
    const Index t = setup.config.t;
    const auto chunk_sizes = root.get<std::vector<Index>>("chunk_sizes", {t, 2 * t, 4 * t, 8 * t});
    const auto seeds = root.get<std::vector<std::uint64_t>>("seeds", {ctx.seed, ctx.seed + 1, ctx.seed + 2});
    const double tolerance = root.get<double>("tolerance_db", 0.2);
    if (seeds.empty()) throw ConfigError("'seeds' must not be empty");
    prepare_run_dir(ctx, false);
    const Dataset data = load_data(root, ctx.seed);

    const auto start = std::chrono::steady_clock::now();
    const AblationResult result =
        ablate_chunk_size(clips_of(data.train), clips_of(data.val), setup.config, setup.widths, chunk_sizes, budget,
                          seeds);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    std::ostringstream rows_csv;
    rows_csv << "chunk_size,seed,val_psnr_db,val_ssim\n";
    json rows = json::array();
    for (const auto& r : result.rows) {
        rows_csv << r.chunk_size << "," << r.seed << "," << json(r.val_psnr).dump() << "," << json(r.val_ssim).dump()
                 << "\n";
        rows.push_back({{"chunk_size", r.chunk_size}, {"seed", r.seed}, {"val_psnr_db", r.val_psnr},
                        {"val_ssim", r.val_ssim}});
    }
    std::ostringstream median_csv;
    median_csv << "chunk_size,median_val_psnr_db\n";
    json medians = json::array();
    bool non_decreasing = true;
    for (std::size_t i = 0; i < result.chunk_sizes.size(); ++i) {
        median_csv << result.chunk_sizes[i] << "," << json(result.median_psnr[i]).dump() << "\n";
        medians.push_back({{"chunk_size", result.chunk_sizes[i]}, {"median_val_psnr_db", result.median_psnr[i]}});
        if (i > 0 && result.median_psnr[i] < result.median_psnr[i - 1] - tolerance) non_decreasing = false;
    }
    write_text(ctx.out / "ablation.csv", rows_csv.str());
    write_text(ctx.out / "ablation_median.csv", median_csv.str());
    write_text(ctx.out / "ablation.svg", result.svg);
    write_json(ctx.out / "timing.json", {{"wall_clock_s", wall}});

    return {{"autoencoder", setup.config.name()},
            {"temporal_mode", to_string(setup.config.temporal_mode)},
            {"dataset_checksum", dataset_checksum(data)},
            {"steps", budget.steps},
            {"rows", rows},
            {"median", medians},
            {"tolerance_db", tolerance},
            {"non_decreasing", non_decreasing},
            {"gain_largest_over_smallest_db", result.median_psnr.back() - result.median_psnr.front()},
            {"table", "ablation.csv"},
            {"plot", "ablation.svg"}};
}

std::string safe_name(std::string s) {
    for (char& c : s)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
    return s;
}

json cmd_eval_recon(const Context& ctx) {
    const Section root(ctx.config, "",
                       {"command", "seed", "dataset", "dataset_dir", "autoencoders", "split", "long_video"});
    if (!root.has("autoencoders") || !root.at("autoencoders").is_array() || root.at("autoencoders").empty())
        throw ConfigError("'autoencoders' must be a non-empty array of {name, checkpoint}");
    struct Entry {
        std::string name;
        fs::path checkpoint;
    };
    std::vector<Entry> entries;
    for (std::size_t i = 0; i < root.at("autoencoders").size(); ++i) {
        const Section e(root.at("autoencoders")[i], "autoencoders[" + std::to_string(i) + "]", {"name", "checkpoint"});
        entries.push_back({e.require<std::string>("name"), e.require<std::string>("checkpoint")});
    }
    const std::string split = root.get<std::string>("split", "val");
    if (split != "val" && split != "train") throw ConfigError("'split' must be \"train\" or \"val\"");
    std::optional<Section> lv;
    if (root.has("long_video"))
        lv.emplace(root.at("long_video"), "long_video",
                   std::initializer_list<const char*>{"frames", "clips", "short_frames", "tile_len", "overlap"});
    prepare_run_dir(ctx, false);
    const Dataset data = load_data(root, ctx.seed);
    const auto& labeled = split == "val" ? data.val : data.train;
    const auto refs = clips_of(labeled);
    std::vector<std::string> names;
    for (const auto& c : labeled) names.push_back(c.name);

    std::vector<VideoClip> long_clips;
    if (lv) {
        SyntheticVideoSpec ls = data.spec;
        ls.frames = lv->get<Index>("frames", 64);
        ls.n_clips = 1;
        ls.n_val = lv->get<Index>("clips", 2);
        ls.seed = Rng::mix(data.spec.seed ^ 0x10e6);
        long_clips = clips_of(generate_synthetic_dataset(ls).val);
    }

    std::ostringstream table;
    table << "name,config,compression_ratio,temporal_mode,chunk_size,psnr_db,ssim\n";
    json rows = json::array();
    for (const auto& entry : entries) {
        const AEParams<float> ae = load_autoencoder(entry.checkpoint);
        std::vector<VideoClip> recons;
        for (const auto& c : refs) recons.push_back(reconstruct(c, ae));
        const metrics::MetricReport report = metrics::evaluate(refs, recons, {}, names);
        const std::string tag = safe_name(entry.name);
        write_text(ctx.out / ("metrics_" + tag + ".csv"), report.to_csv());
        std::ostringstream frames_csv;
        frames_csv << "clip,frame,psnr_db\n";
        for (const auto& cm : report.clips)
            for (std::size_t f = 0; f < cm.per_frame_psnr.size(); ++f)
                frames_csv << cm.name << "," << f << "," << json(cm.per_frame_psnr[f]).dump() << "\n";
        write_text(ctx.out / ("per_frame_" + tag + ".csv"), frames_csv.str());

        const double ratio = compression_ratio(ae.config);
        table << entry.name << "," << ae.config.name() << "," << json(ratio).dump() << ","
              << to_string(ae.config.temporal_mode) << "," << ae.config.chunk_size << ","
              << json(report.mean_psnr).dump() << "," << json(report.mean_ssim).dump() << "\n";
        json row{{"name", entry.name},
                 {"config", ae.config.name()},
                 {"compression_ratio", ratio},
                 {"temporal_mode", to_string(ae.config.temporal_mode)},
                 {"chunk_size", ae.config.chunk_size},
                 {"psnr_db", report.mean_psnr},
                 {"ssim", report.mean_ssim}};
        if (lv) {
            const Index tile = lv->get<Index>("tile_len", 16);
            const LongVideoResult r = evaluate_long_video(ae, long_clips, lv->get<Index>("short_frames", 16), tile,
                                                          lv->get<Index>("overlap", 4));
            std::ostringstream prof;
            prof << "frame,chunked_psnr_db,tiled_psnr_db\n";
            for (std::size_t f = 0; f < r.profile.size(); ++f)
                prof << f << "," << json(r.profile[f]).dump() << "," << json(r.tiled_profile[f]).dump() << "\n";
            write_text(ctx.out / ("long_video_" + tag + ".csv"), prof.str());
            row["long_video"] = {{"short_psnr_db", r.short_psnr},          {"long_psnr_db", r.long_psnr},
                                 {"boundary_dip_db", r.boundary_dip},      {"tiled_long_psnr_db", r.tiled_long_psnr},
                                 {"tiled_boundary_dip_db", r.tiled_boundary_dip}};
        }
        rows.push_back(row);
    }
    write_text(ctx.out / "recon_table.csv", table.str());
    return {{"split", split}, {"dataset_checksum", dataset_checksum(data)}, {"rows", rows}, {"table", "recon_table.csv"}};
}

DiTConfig parse_dit(const json& j, Index latent_channels) {
    const Section s(j, "dit", {"patch_size", "embed_dim", "depth", "heads", "mlp_ratio", "time_freq_dim", "max_tokens"});
    DiTConfig cfg;
    cfg.latent_channels = latent_channels;
    cfg.num_classes = kNumMotifClasses;
    cfg.patch_size = s.get<Index>("patch_size", cfg.patch_size);
    cfg.embed_dim = s.get<Index>("embed_dim", cfg.embed_dim);
    cfg.depth = s.get<Index>("depth", cfg.depth);
    cfg.heads = s.get<Index>("heads", cfg.heads);
    cfg.mlp_ratio = s.get<Index>("mlp_ratio", cfg.mlp_ratio);
    cfg.time_freq_dim = s.get<Index>("time_freq_dim", cfg.time_freq_dim);
    cfg.max_tokens = s.get<Index>("max_tokens", cfg.max_tokens);
    cfg.validate();
    return cfg;
}

json cmd_train_base(const Context& ctx) {
    const Section root(ctx.config, "",
                       {"command", "seed", "dataset", "dataset_dir", "autoencoder_checkpoint", "dit", "train",
                        "val_draws"});
    const fs::path ae_path = root.require<std::string>("autoencoder_checkpoint");
    const DiTTrainConfig cfg = parse_dit_train(object_or_empty(root, "train"), "train", ctx.seed, DiTTrainConfig{});
    const int draws = root.get<int>("val_draws", 4);
    const AEParams<float> ae = load_autoencoder(ae_path);
    const DiTConfig dit_cfg = parse_dit(object_or_empty(root, "dit"), ae.config.c);
    prepare_run_dir(ctx, false);
    const Dataset data = load_data(root, ctx.seed);

    const auto latents = encode_latents(clips_of(data.train), ae);
    const auto val_latents = encode_latents(clips_of(data.val), ae);
    token_grid(latents.front().shape, dit_cfg.patch_size);
    DiTModel<float> model = build_dit<float>(dit_cfg, ctx.seed);
    const DiTTrainReport report = train_base_model(model, latents, labels_of(data.train), cfg);
    const double val_loss = validation_diffusion_loss(model, val_latents, labels_of(data.val), draws, ctx.seed);
    const fs::path ckpt = ctx.out / "dit.safetensors";
    save_dit(ckpt, model);
    write_losses(ctx.out / "losses.jsonl", report.losses);
    write_json(ctx.out / "timing.json", {{"wall_clock_s", report.wall_clock_s}});

    const TokenGrid grid = token_grid(latents.front().shape, dit_cfg.patch_size);
    return {{"autoencoder", ae.config.name()},
            {"latent_shape", shape_json(latents.front().shape)},
            {"tokens", grid.count()},
            {"patch_size", dit_cfg.patch_size},
            {"parameters", model.weights.total_elements()},
            {"steps", cfg.steps},
            {"initial_loss", head_mean(report.losses)},
            {"final_loss", tail_mean(report.losses)},
            {"val_loss", val_loss},
            {"checkpoint", "dit.safetensors"},
            {"checkpoint_sha256", file_sha256(ckpt)}};
}

// ---- adapt ----------------------------------------------------------------------------------

struct AdaptPlan {
    fs::path base_ae, new_ae, base_dit;
    Index new_patch = 1;
    AlignConfig stage1a;
    HeadAlignConfig stage1b;
    FinetuneConfig stage2;
    long naive_steps = 0;
    int val_draws = 4;
};

AdaptPlan parse_adapt(const Section& root, std::uint64_t seed) {
    AdaptPlan plan;
    plan.base_ae = root.require<std::string>("base_autoencoder");
    plan.new_ae = root.require<std::string>("new_autoencoder");
    plan.base_dit = root.require<std::string>("base_dit");
    plan.new_patch = root.get<Index>("new_patch_size", 1);
    plan.val_draws = root.get<int>("val_draws", 4);

    const DiTTrainConfig a = parse_dit_train(object_or_empty(root, "stage1a"), "stage1a", Rng::mix(seed ^ 0x1a),
                                             DiTTrainConfig{150, 4, AdamWConfig{3e-3}, 0, false});
    plan.stage1a = AlignConfig{a.steps, a.batch_size, a.optim, a.seed};

    const json b_json = object_or_empty(root, "stage1b");
    const Section b(b_json, "stage1b",
                    {"max_steps", "batch_size", "lr", "weight_decay", "warmup_steps", "max_grad_norm", "window",
                     "min_rel_improvement"});
    plan.stage1b.train = parse_dit_train(without(b_json, {"window", "min_rel_improvement"}), "stage1b",
                                         Rng::mix(seed ^ 0x1b), plan.stage1b.train, "max_steps");
    plan.stage1b.window = b.get<long>("window", plan.stage1b.window);
    plan.stage1b.min_rel_improvement = b.get<double>("min_rel_improvement", plan.stage1b.min_rel_improvement);
    if (plan.stage1b.window < 1) throw ConfigError("stage1b.window must be positive");

    const json c_json = object_or_empty(root, "stage2");
    const Section c(c_json, "stage2",
                    {"steps", "batch_size", "lr", "weight_decay", "warmup_steps", "max_grad_norm", "mode", "rank",
                     "alpha"});
    plan.stage2.train =
        parse_dit_train(without(c_json, {"mode", "rank", "alpha"}), "stage2", Rng::mix(seed ^ 0x2), plan.stage2.train);
    const std::string mode = c.get<std::string>("mode", "lora");
    if (mode == "lora")
        plan.stage2.mode = FinetuneMode::lora;
    else if (mode == "full")
        plan.stage2.mode = FinetuneMode::full;
    else
        throw ConfigError("stage2.mode must be \"lora\" or \"full\"");
    plan.stage2.lora.rank = c.get<Index>("rank", plan.stage2.lora.rank);
    plan.stage2.lora.alpha = c.get<double>("alpha", plan.stage2.lora.alpha);
    if (plan.stage2.lora.rank < 1) throw ConfigError("stage2.rank must be positive");

    const Section n(object_or_empty(root, "naive"), "naive", {"steps"});
    // 0: match the aligned pipeline's steps (as run, else as planned).
    plan.naive_steps = n.get<long>("steps", 0);
    if (n.has("steps") && plan.naive_steps < 1) throw ConfigError("naive.steps must be positive");
    return plan;
}

struct AdaptData {
    DiTModel<float> base;
    Index new_channels = 0;
    std::vector<Tensor<float>> base_latents, new_latents, val_latents;
    std::vector<Index> labels, val_labels;
};

AdaptData prepare_adapt_data(const AdaptPlan& plan, const Dataset& data) {
    AdaptData d;
    const AEParams<float> base_ae = load_autoencoder(plan.base_ae);
    const AEParams<float> new_ae = load_autoencoder(plan.new_ae);
    d.base = load_dit(plan.base_dit);
    if (d.base.config.latent_channels != base_ae.config.c)
        throw ConfigError("base_dit was trained on " + std::to_string(d.base.config.latent_channels) +
                          " latent channels but base_autoencoder has " + std::to_string(base_ae.config.c));
    d.new_channels = new_ae.config.c;
    const auto train = clips_of(data.train);
    d.base_latents = encode_latents(train, base_ae);
    d.new_latents = encode_latents(train, new_ae);
    d.val_latents = encode_latents(clips_of(data.val), new_ae);
    d.labels = labels_of(data.train);
    d.val_labels = labels_of(data.val);
    token_grid(d.new_latents.front().shape, plan.new_patch);
    return d;
}

std::string stage_file(AdaptStage stage, const char* suffix) {
    return "stage_" + stage_tag(stage) + suffix;
}

json stage_manifest(const StageReport& r, const DiTModel<float>& model, const AdaptData& d, const AdaptPlan& plan,
                    const fs::path& ckpt) {
    return {{"stage", r.stage},
            {"steps_run", r.steps_run},
            {"plateau_stop", r.plateau_stop},
            {"diverged_at", r.diverged_at},
            {"trainable_count", r.trainable_count},
            {"trainable", r.trainable},
            {"frozen_hash_before", r.frozen_hash_before},
            {"frozen_hash_after", r.frozen_hash_after},
            {"initial_loss", head_mean(r.losses)},
            {"final_loss", tail_mean(r.losses)},
            {"val_loss", r.diverged_at ? json(nullptr)
                                       : json(validation_diffusion_loss(model, d.val_latents, d.val_labels,
                                                                        plan.val_draws, 0x5eed))},
            {"checkpoint", ckpt.filename().string()},
            {"checkpoint_sha256", file_sha256(ckpt)}};
}

void run_stage(AdaptStage stage, const AdaptPlan& plan, const AdaptData& d, const fs::path& dir,
               std::uint64_t seed) {
    DiTModel<float> model;
    StageReport report;
    switch (stage) {
        case AdaptStage::align_embedder:
            model = make_adapted_model(d.base, d.new_channels, plan.new_patch, seed);
            report = align_patch_embedder(model, d.base, d.base_latents, d.new_latents, plan.stage1a);
            break;
        case AdaptStage::align_head:
            model = load_dit(dir / stage_file(AdaptStage::align_embedder, ".safetensors"));
            report = align_output_head(model, d.new_latents, d.labels, plan.stage1b);
            break;
        case AdaptStage::finetune:
            model = load_dit(dir / stage_file(AdaptStage::align_head, ".safetensors"));
            report = finetune_end_to_end(model, d.new_latents, d.labels, plan.stage2);
            break;
        case AdaptStage::naive: {
            FinetuneConfig cfg = plan.stage2;
            cfg.train.steps = plan.naive_steps;
            cfg.train.seed = Rng::mix(seed ^ 0x9a17e);
            report = naive_baseline(model, d.base, d.new_channels, plan.new_patch, d.new_latents, d.labels, cfg, seed);
            break;
        }
    }
    // A diverging aligned stage is an error; the baseline records it instead.
    if (report.diverged_at && stage != AdaptStage::naive)
        throw DivergenceError("stage " + stage_tag(stage) + " diverged", report.diverged_at);
    const fs::path ckpt = dir / stage_file(stage, ".safetensors");
    save_dit(ckpt, model);
    write_losses(dir / stage_file(stage, "_loss.jsonl"), report.losses);
    write_json(dir / stage_file(stage, ".json"), stage_manifest(report, model, d, plan, ckpt));
}

json cmd_adapt(const Context& ctx) {
    const Section root(ctx.config, "",
                       {"command", "seed", "dataset", "dataset_dir", "base_autoencoder", "new_autoencoder", "base_dit",
                        "new_patch_size", "stage1a", "stage1b", "stage2", "naive", "val_draws"});
    const AdaptPlan plan = parse_adapt(root, ctx.seed);

    std::vector<AdaptStage> requested;
    if (ctx.stage == "all")
        requested = {AdaptStage::align_embedder, AdaptStage::align_head, AdaptStage::finetune};
    else
        requested = {stage_from_tag(ctx.stage)};

    // A resumed run must keep its config and seed.
    const fs::path run_file = ctx.out / "run.json";
    if (fs::exists(run_file) && !ctx.force) {
        const json prev = json::parse(read_text(run_file));
        if (prev.at("seed").get<std::uint64_t>() != ctx.seed)
            throw ConfigError("run directory was started with seed " + prev.at("seed").dump() + "; pass --force");
        if (read_text(ctx.out / "config.json") != ctx.config_text)
            throw ConfigError("run directory was started with a different config; pass --force");
    }
    if (ctx.force && fs::exists(ctx.out)) {
        for (const AdaptStage s : requested) fs::remove(ctx.out / stage_file(s, ".json"));
        if (ctx.stage == "all") fs::remove(ctx.out / "stages.json");
    }
    fs::create_directories(ctx.out);
    AdaptationRun run(ctx.out);
    std::vector<AdaptStage> todo;
    for (const AdaptStage s : requested) {
        if (run.completed(s)) {
            if (ctx.stage != "all" && !ctx.force)
                throw ConfigError("stage " + stage_tag(s) + " already completed in " + ctx.out.string() +
                                  "; pass --force to rerun it");
            if (!ctx.force) continue;
        }
        todo.push_back(s);
    }
    if (todo.empty()) throw ConfigError("all stages already completed in " + ctx.out.string() + "; pass --force");
    run.require_ready(todo.front());

    write_text(ctx.out / "config.json", ctx.config_text);
    write_json(run_file, {{"seed", ctx.seed}});
    const Dataset data = load_data(root, ctx.seed);
    const AdaptData d = prepare_adapt_data(plan, data);

    AdaptPlan resolved = plan;
    if (resolved.naive_steps == 0) {
        resolved.naive_steps = plan.stage1a.steps + plan.stage1b.train.steps + plan.stage2.train.steps;
        if (run.completed(AdaptStage::align_embedder) && run.completed(AdaptStage::align_head) &&
            run.completed(AdaptStage::finetune)) {
            resolved.naive_steps = 0;
            for (const AdaptStage s : {AdaptStage::align_embedder, AdaptStage::align_head, AdaptStage::finetune})
                resolved.naive_steps +=
                    json::parse(read_text(ctx.out / stage_file(s, ".json"))).at("steps_run").get<long>();
        }
    }

    const auto start = std::chrono::steady_clock::now();
    for (const AdaptStage s : todo) {
        run.require_ready(s);
        run_stage(s, resolved, d, ctx.out, ctx.seed);
        run.mark_completed(s);
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_json(ctx.out / "timing.json", {{"wall_clock_s", wall}});

    json stages = json::object();
    long aligned_steps = 0;
    for (const AdaptStage s :
         {AdaptStage::align_embedder, AdaptStage::align_head, AdaptStage::finetune, AdaptStage::naive}) {
        if (!run.completed(s)) continue;
        const json m = json::parse(read_text(ctx.out / stage_file(s, ".json")));
        if (s != AdaptStage::naive) aligned_steps += m.at("steps_run").get<long>();
        stages[stage_tag(s)] = m;
    }
    json summary{{"dataset_checksum", dataset_checksum(data)},
                 {"new_patch_size", plan.new_patch},
                 {"new_latent_shape", shape_json(d.new_latents.front().shape)},
                 {"stages", stages},
                 {"aligned_steps", aligned_steps}};
    if (run.completed(AdaptStage::finetune) && run.completed(AdaptStage::naive)) {
        const json& aligned = stages["2"]["val_loss"];
        const json& naive = stages["naive"]["val_loss"];
        summary["aligned_beats_naive"] =
            !aligned.is_null() && (naive.is_null() || aligned.get<double>() < naive.get<double>());
    }
    return summary;
}

// ---- eval-gen -------------------------------------------------------------------------------

struct PixelStats {
    double mean = 0.0;
    double stddev = 0.0;
    double motion = 0.0;  // mean |frame difference|
};

PixelStats pixel_stats(const std::vector<VideoClip>& clips) {
    double sum = 0, sq = 0, n = 0, motion = 0, mn = 0;
    for (const auto& c : clips) {
        const Index frame = c.height() * c.width() * 3;
        for (Index i = 0; i < c.frames.numel(); ++i) {
            const double v = c.frames.data[i];
            sum += v;
            sq += v * v;
            n += 1;
            if (i >= frame) {
                motion += std::abs(v - double(c.frames.data[i - frame]));
                mn += 1;
            }
        }
    }
    PixelStats s;
    if (n == 0) return s;
    s.mean = sum / n;
    s.stddev = std::sqrt(std::max(0.0, sq / n - s.mean * s.mean));
    s.motion = mn > 0 ? motion / mn : 0.0;
    return s;
}

// Rows are samples, columns are frames.
VideoClip sample_grid(const std::vector<VideoClip>& samples) {
    const Index T = samples.front().frames_count(), H = samples.front().height(), W = samples.front().width();
    Tensor<float> grid({1, Index(samples.size()) * H, T * W, 3});
    for (std::size_t s = 0; s < samples.size(); ++s)
        for (Index t = 0; t < T; ++t)
            for (Index y = 0; y < H; ++y)
                for (Index x = 0; x < W; ++x)
                    for (Index ch = 0; ch < 3; ++ch)
                        grid.data[((Index(s) * H + y) * T * W + t * W + x) * 3 + ch] =
                            samples[s].frames.data[((t * H + y) * W + x) * 3 + ch];
    return VideoClip(std::move(grid), samples.front().frame_rate);
}

json cmd_eval_gen(const Context& ctx) {
    const Section root(ctx.config, "",
                       {"command", "seed", "dataset", "dataset_dir", "autoencoder_checkpoint", "dit_checkpoint",
                        "samples_per_class", "sample_steps"});
    const fs::path ae_path = root.require<std::string>("autoencoder_checkpoint");
    const fs::path dit_path = root.require<std::string>("dit_checkpoint");
    const Index per_class = root.get<Index>("samples_per_class", 4);
    const int steps = root.get<int>("sample_steps", 20);
    if (per_class < 1 || steps < 1) throw ConfigError("samples_per_class and sample_steps must be positive");
    const AEParams<float> ae = load_autoencoder(ae_path);
    const DiTModel<float> model = load_dit(dit_path);
    if (model.config.latent_channels != ae.config.c)
        throw ConfigError("dit_checkpoint expects " + std::to_string(model.config.latent_channels) +
                          " latent channels but the autoencoder has " + std::to_string(ae.config.c));
    prepare_run_dir(ctx, false);
    const Dataset data = load_data(root, ctx.seed);
    const Shape latent_shape = encode(data.val.front().clip, ae).values.shape;
    const Index T = data.spec.frames;

    std::ostringstream csv;
    csv << "class,sample_mean,data_mean,sample_std,data_std,sample_motion,data_motion\n";
    json classes = json::array();
    for (Index k = 0; k < model.config.num_classes; ++k) {
        std::vector<VideoClip> samples;
        const fs::path dir = ctx.out / "samples" / ("class_" + std::to_string(k));
        for (Index j = 0; j < per_class; ++j) {
            const std::uint64_t s = Rng::mix(ctx.seed ^ Rng::mix(std::uint64_t(k * 100003 + j)));
            VideoClip clip = sample(model, ae, latent_shape, k, steps, s).slice(0, T);
            const fs::path clip_dir = dir / ("sample_" + std::to_string(j));
            fs::create_directories(clip_dir);
            for (Index f = 0; f < clip.frames_count(); ++f) {
                char name[32];
                std::snprintf(name, sizeof name, "frame_%04ld.png", long(f));
                write_png(clip_dir / name, clip, f);
            }
            samples.push_back(std::move(clip));
        }
        write_png(ctx.out / "samples" / ("class_" + std::to_string(k) + "_grid.png"), sample_grid(samples), 0);
        std::vector<VideoClip> refs;
        for (const auto& c : data.train)
            if (c.label == k) refs.push_back(c.clip);
        const PixelStats ss = pixel_stats(samples), ds = pixel_stats(refs);
        csv << k << "," << json(ss.mean).dump() << "," << json(ds.mean).dump() << "," << json(ss.stddev).dump() << ","
            << json(ds.stddev).dump() << "," << json(ss.motion).dump() << "," << json(ds.motion).dump() << "\n";
        classes.push_back({{"class", k},
                           {"samples", per_class},
                           {"data_clips", refs.size()},
                           {"sample_mean", ss.mean},
                           {"data_mean", ds.mean},
                           {"sample_std", ss.stddev},
                           {"data_std", ds.stddev},
                           {"sample_motion", ss.motion},
                           {"data_motion", ds.motion}});
    }
    write_text(ctx.out / "class_stats.csv", csv.str());
    return {{"latent_shape", shape_json(latent_shape)},
            {"sample_steps", steps},
            {"classes", classes},
            {"report", "class_stats.csv"},
            {"samples_dir", "samples"}};
}

// ---- speedup --------------------------------------------------------------------------------

json cmd_speedup(const Context& ctx) {
    const Section root(ctx.config, "", {"command", "seed", "base", "new", "frames", "height", "width"});
    auto side = [&](const char* key, const char* config, Index patch) {
        const Section s(object_or_empty(root, key), key, {"config", "patch_size"});
        AEConfig c = AEConfig::parse(s.get<std::string>("config", config));
        return std::pair{c, s.get<Index>("patch_size", patch)};
    };
    const auto [base, base_p] = side("base", "f8t4c16", 2);
    const auto [next, next_p] = side("new", "f64t4c128", 1);
    const Index T = root.get<Index>("frames", 16), H = root.get<Index>("height", 512), W = root.get<Index>("width", 512);
    prepare_run_dir(ctx, false);
    const SpeedupEstimate e = speedup_estimate(base, base_p, next, next_p, T, H, W);
    const Index bt = token_count(base, base_p, T, H, W), nt = token_count(next, next_p, T, H, W);
    std::ostringstream csv;
    csv << "model,config,patch_size,tokens\nbase," << base.name() << "," << base_p << "," << bt << "\nnew,"
        << next.name() << "," << next_p << "," << nt << "\n";
    write_text(ctx.out / "speedup.csv", csv.str());
    return {{"frames", T},
            {"height", H},
            {"width", W},
            {"base", {{"config", base.name()}, {"patch_size", base_p}, {"tokens", bt}}},
            {"new", {{"config", next.name()}, {"patch_size", next_p}, {"tokens", nt}}},
            {"token_ratio", e.token_ratio},
            {"attention_flop_ratio", e.attention_flop_ratio}};
}

// ---- dispatch -------------------------------------------------------------------------------

json dispatch(const Context& ctx) {
    if (ctx.command == "gen-data") return cmd_gen_data(ctx);
    if (ctx.command == "train-ae") return cmd_train_ae(ctx);
    if (ctx.command == "ablate-chunks") return cmd_ablate_chunks(ctx);
    if (ctx.command == "eval-recon") return cmd_eval_recon(ctx);
    if (ctx.command == "train-base") return cmd_train_base(ctx);
    if (ctx.command == "adapt") return cmd_adapt(ctx);
    if (ctx.command == "eval-gen") return cmd_eval_gen(ctx);
    return cmd_speedup(ctx);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"dcvlab: video autoencoder and latent-diffusion adaptation lab"};
    app.require_subcommand(1);
    Context ctx;
    std::string config_path;
    std::optional<std::uint64_t> seed;
    const std::vector<std::pair<const char*, const char*>> commands{
        {"gen-data", "generate the synthetic moving-shapes dataset"},
        {"train-ae", "train one video autoencoder"},
        {"ablate-chunks", "chunk-size ablation table and plot"},
        {"eval-recon", "reconstruction metrics for autoencoder checkpoints"},
        {"train-base", "train the base diffusion transformer"},
        {"adapt", "move a base diffusion transformer onto a new autoencoder"},
        {"eval-gen", "class-conditional samples and per-class statistics"},
        {"speedup", "token and attention cost ratios of two configurations"}};
    for (const auto& [name, help] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_path, "run config (JSON)")->required();
        sub->add_option("--seed", seed, "run seed (overrides the config's \"seed\")");
        sub->add_option("--out", ctx.out, "output run directory")->required();
        sub->add_flag("--force", ctx.force, "overwrite a completed run");
        if (std::string(name) == "adapt")
            sub->add_option("--stage", ctx.stage, "stage to run")
                ->check(CLI::IsMember({"1a", "1b", "2", "all", "naive"}));
        sub->final_callback([&ctx, sub] { ctx.command = sub->get_name(); });
    }

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "dcvlab: " << e.what() << "\n";
        return kExitConfig;
    }

    try {
        ctx.config_text = read_text(config_path);
        try {
            ctx.config = json::parse(ctx.config_text);
        } catch (const json::parse_error& e) {
            throw ConfigError(config_path + ": " + e.what());
        }
        if (!ctx.config.is_object()) throw ConfigError(config_path + ": expected a JSON object");
        if (ctx.config.contains("command") && ctx.config.at("command") != ctx.command)
            throw ConfigError("config is for command " + ctx.config.at("command").dump() + ", not \"" + ctx.command +
                              "\"");
        if (ctx.config.contains("seed") && !ctx.config.at("seed").is_number_unsigned())
            throw ConfigError("'seed' must be a non-negative integer");
        if (seed)
            ctx.seed = *seed;
        else if (ctx.config.contains("seed"))
            ctx.seed = ctx.config.at("seed").get<std::uint64_t>();

        json summary{{"command", ctx.command}, {"seed", ctx.seed}};
        if (ctx.command == "adapt") summary["stage"] = ctx.stage;
        summary.update(dispatch(ctx));
        write_json(ctx.out / "summary.json", summary);
        out << "dcvlab " << ctx.command << ": wrote " << (ctx.out / "summary.json").string() << "\n";
        return kExitOk;
    } catch (const DivergenceError& e) {
        err << "dcvlab: numeric divergence at step " << e.step() << ": " << e.what() << "\n";
        return kExitDivergence;
    } catch (const OrderingError& e) {
        err << "dcvlab: " << e.what() << "\n";
        return kExitOrdering;
    } catch (const ConfigError& e) {
        err << "dcvlab: config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ShapeError& e) {
        err << "dcvlab: shape error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const json::exception& e) {
        err << "dcvlab: malformed JSON: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::invalid_argument& e) {
        err << "dcvlab: invalid input: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        err << "dcvlab: " << e.what() << "\n";
        return kExitFailure;
    }
}

int run(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run(args, std::cout, std::cerr);
}

}  // namespace dcv::cli
