#include "dcv/ae_training.hpp"

#include "dcv/hash.hpp"
#include "dcv/metrics.hpp"
#include "dcv/ops.hpp"
#include "dcv/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

namespace dcv {

template <typename S>
Var<S> reconstruction_loss(const Var<S>& recon, const Var<S>& target, double lambda_grad) {
    Var<S> loss = l1_loss(recon, target);
    if (lambda_grad != 0.0) loss = add(loss, scale(spatial_gradient_l1(recon, target), S(lambda_grad)));
    return loss;
}

template Var<float> reconstruction_loss(const Var<float>&, const Var<float>&, double);
template Var<double> reconstruction_loss(const Var<double>&, const Var<double>&, double);

std::string clip_hash(const VideoClip& clip) {
    return sha256_hex(clip.frames.ptr(), std::size_t(clip.frames.numel()) * sizeof(float));
}

void TrainReport::write_jsonl(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& s : steps) out << nlohmann::json{{"step", s.step}, {"loss", s.loss}}.dump() << '\n';
    for (const auto& v : validation)
        out << nlohmann::json{{"step", v.step}, {"val_psnr", v.psnr}, {"val_ssim", v.ssim}}.dump() << '\n';
}

ValRecord validate_autoencoder(const AEParams<float>& params, const std::vector<VideoClip>& val, long step) {
    std::vector<VideoClip> recons;
    recons.reserve(val.size());
    for (const auto& clip : val) recons.push_back(reconstruct(clip, params));
    const auto report = metrics::evaluate(val, recons);
    return {step, report.mean_psnr, report.mean_ssim};
}

TrainReport train_autoencoder(const std::vector<VideoClip>& train, const std::vector<VideoClip>& val,
                              AEParams<float>& params, const AETrainConfig& cfg) {
    if (train.empty()) throw ConfigError("train_autoencoder: empty training set");
    if (cfg.steps < 0 || cfg.batch_size < 1) throw ConfigError("train_autoencoder: invalid steps or batch size");
    params.config.validate();
    const auto start = std::chrono::steady_clock::now();

    // Channels-first padded tensors prepared once.
    std::vector<Tensor<float>> inputs;
    std::vector<Index> lengths;
    std::vector<std::string> hashes;
    for (const auto& clip : train) {
        const ChunkPlan plan = plan_chunks(clip.frames_count(), params.config);
        inputs.push_back(clip_to_channels_first<float>(clip.padded_to(plan.padded_length())));
        lengths.push_back(clip.frames_count());
        hashes.push_back(clip_hash(clip));
    }

    std::vector<Var<float>> trainable;
    for (auto& [name, v] : params.weights)
        if (v.requires_grad()) trainable.push_back(v);
    AdamW<float> opt(trainable, cfg.optim);
    Rng sampler = Rng::derive(cfg.seed, 0x5a17);

    TrainReport report;
    for (long step = 1; step <= cfg.steps; ++step) {
        opt.zero_grad();
        Var<float> total;
        for (Index b = 0; b < cfg.batch_size; ++b) {
            const auto i = std::size_t(sampler.integer(0, Index(train.size()) - 1));
            report.batch_hashes.push_back(hashes[i]);
            Var<float> x(inputs[i]);
            Var<float> recon = decode_frames(encode_frames(x, params), params);
            Var<float> target = x;
            if (recon.dim(1) != lengths[i]) {
                recon = slice_time(recon, 0, lengths[i]);
                target = Var<float>(slice_time(x, 0, lengths[i]).value());
            }
            Var<float> loss = reconstruction_loss(recon, target, cfg.lambda_grad);
            total = total.defined() ? add(total, loss) : loss;
        }
        if (cfg.batch_size > 1) total = scale(total, 1.0f / float(cfg.batch_size));
        const double value = double(total.value().data[0]);
        if (!std::isfinite(value))
            throw DivergenceError("training diverged: non-finite loss at step " + std::to_string(step), step);
        backward(total);
        opt.step();
        report.steps.push_back({step, value});
        if (!val.empty() && cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != cfg.steps)
            report.validation.push_back(validate_autoencoder(params, val, step));
    }
    opt.zero_grad();
    if (!val.empty()) report.validation.push_back(validate_autoencoder(params, val, cfg.steps));
    report.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

void fit_latent_statistics(AEParams<float>& params, const std::vector<VideoClip>& clips) {
    if (clips.empty()) throw ConfigError("fit_latent_statistics: no clips");
    const Index c = params.config.c;
    std::vector<double> sum(std::size_t(c), 0.0), sq(std::size_t(c), 0.0);
    double count = 0;
    for (const auto& clip : clips) {
        const LatentVideo z = encode(clip, params);
        const Index per = z.frames() * z.height() * z.width();
        for (Index ch = 0; ch < c; ++ch)
            for (Index i = 0; i < per; ++i) {
                const double v = z.values.data[ch * per + i];
                sum[std::size_t(ch)] += v;
                sq[std::size_t(ch)] += v * v;
            }
        count += double(per);
    }
    params.latent_mean.assign(std::size_t(c), 0.0);
    params.latent_std.assign(std::size_t(c), 1.0);
    for (std::size_t ch = 0; ch < std::size_t(c); ++ch) {
        const double m = sum[ch] / count;
        params.latent_mean[ch] = m;
        params.latent_std[ch] = std::sqrt(std::max(sq[ch] / count - m * m, 1e-12));
    }
}

double median(std::vector<double> values) {
    if (values.empty()) throw std::invalid_argument("median of empty set");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

AblationResult ablate_chunk_size(const std::vector<VideoClip>& train, const std::vector<VideoClip>& val,
                                 const AEConfig& base, const WidthSpec& widths, const std::vector<Index>& chunk_sizes,
                                 const AETrainConfig& budget, const std::vector<std::uint64_t>& seeds) {
    if (chunk_sizes.empty()) throw ConfigError("ablate_chunk_size: empty chunk size list");
    if (seeds.empty()) throw ConfigError("ablate_chunk_size: no seeds");
    for (Index cs : chunk_sizes)
        if (cs < base.t || cs % base.t != 0)
            throw ConfigError("chunk size " + std::to_string(cs) + " is not a multiple of t=" + std::to_string(base.t));
    AblationResult result;
    result.chunk_sizes = chunk_sizes;
    for (Index cs : chunk_sizes) {
        AEConfig cfg = base;
        cfg.chunk_size = cs;
        cfg.temporal_mode = TemporalMode::chunk_causal;
        std::vector<double> psnrs;
        for (std::uint64_t seed : seeds) {
            AEParams<float> params = build_autoencoder<float>(cfg, widths, seed);
            AETrainConfig run = budget;
            run.seed = seed;
            run.eval_every = 0;
            const TrainReport report = train_autoencoder(train, val, params, run);
            const ValRecord& last = report.validation.back();
            result.rows.push_back({cs, seed, last.psnr, last.ssim});
            psnrs.push_back(last.psnr);
        }
        result.median_psnr.push_back(median(psnrs));
    }
    result.svg = render_ablation_svg(result);
    return result;
}

std::string render_ablation_svg(const AblationResult& result) {
    const double width = 480, height = 320, left = 60, right = 20, top = 30, bottom = 50;
    const auto& ys = result.median_psnr;
    double lo = *std::min_element(ys.begin(), ys.end()), hi = *std::max_element(ys.begin(), ys.end());
    for (const auto& r : result.rows) {
        lo = std::min(lo, r.val_psnr);
        hi = std::max(hi, r.val_psnr);
    }
    if (hi - lo < 0.5) {
        const double mid = 0.5 * (hi + lo);
        lo = mid - 0.25;
        hi = mid + 0.25;
    }
    const std::size_t n = result.chunk_sizes.size();
    auto px = [&](std::size_t i) { return left + (n == 1 ? 0.5 : double(i) / double(n - 1)) * (width - left - right); };
    auto py = [&](double v) { return top + (hi - v) / (hi - lo) * (height - top - bottom); };

    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(2);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << width / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">"
       << "Validation PSNR vs chunk size</text>\n";
    os << "<line x1=\"" << left << "\" y1=\"" << height - bottom << "\" x2=\"" << width - right << "\" y2=\""
       << height - bottom << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << height - bottom
       << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double v = lo + (hi - lo) * k / 4.0;
        os << "<text x=\"" << left - 6 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << v
           << "</text>\n";
    }
    os << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < n; ++i) os << px(i) << ',' << py(ys[i]) << ' ';
    os << "\"/>\n";
    for (std::size_t i = 0; i < n; ++i) {
        os << "<circle cx=\"" << px(i) << "\" cy=\"" << py(ys[i]) << "\" r=\"4\" fill=\"steelblue\"/>\n";
        os << "<text x=\"" << px(i) << "\" y=\"" << height - bottom + 18 << "\" text-anchor=\"middle\" font-size=\"11\">"
           << result.chunk_sizes[i] << "</text>\n";
    }
    for (const auto& r : result.rows) {
        const auto it = std::find(result.chunk_sizes.begin(), result.chunk_sizes.end(), r.chunk_size);
        const auto i = std::size_t(it - result.chunk_sizes.begin());
        os << "<circle cx=\"" << px(i) << "\" cy=\"" << py(r.val_psnr) << "\" r=\"2\" fill=\"gray\"/>\n";
    }
    os << "<text x=\"" << (left + width - right) / 2 << "\" y=\"" << height - 12
       << "\" text-anchor=\"middle\" font-size=\"12\">chunk size (frames)</text>\n";
    os << "<text x=\"16\" y=\"" << (top + height - bottom) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 16 "
       << (top + height - bottom) / 2 << ")\" text-anchor=\"middle\">PSNR (dB)</text>\n";
    os << "</svg>\n";
    return os.str();
}

LongVideoResult evaluate_long_video(const AEParams<float>& model, const std::vector<VideoClip>& long_clips,
                                    Index short_len, Index tile_len, Index overlap) {
    if (long_clips.empty()) throw std::invalid_argument("empty evaluation set");
    const Index T = long_clips.front().frames_count();
    if (short_len < 1 || short_len > T) throw ConfigError("short_len must lie in [1, clip length]");
    AEParams<float> tiled = model;
    tiled.config.temporal_mode = TemporalMode::non_causal;
    tiled.config.chunk_size = tile_len;
    const auto seams = chunk_seams(T, model.config.effective_chunk(T));
    const auto tseams = tile_seams(T, tile_len, overlap);

    LongVideoResult out;
    out.profile.assign(std::size_t(T), 0.0);
    out.tiled_profile.assign(std::size_t(T), 0.0);
    const double n = double(long_clips.size());
    for (const auto& clip : long_clips) {
        if (clip.frames_count() != T) throw ShapeError("long clips must share one length");
        const VideoClip head = clip.slice(0, short_len);
        out.short_psnr += metrics::psnr(head, reconstruct(head, model)) / n;
        const auto causal = metrics::per_frame_psnr_profile(clip, reconstruct(clip, model), seams);
        const VideoClip blended =
            decode_tiled_blended(encode_tiled_blended(clip, tiled, tile_len, overlap), tiled, tile_len, overlap);
        const auto base = metrics::per_frame_psnr_profile(clip, blended, tseams);
        out.boundary_dip += causal.boundary_dip / n;
        out.tiled_boundary_dip += base.boundary_dip / n;
        for (std::size_t i = 0; i < std::size_t(T); ++i) {
            out.profile[i] += causal.per_frame[i] / n;
            out.tiled_profile[i] += base.per_frame[i] / n;
        }
    }
    for (double v : out.profile) out.long_psnr += v / double(T);
    for (double v : out.tiled_profile) out.tiled_long_psnr += v / double(T);
    return out;
}

std::vector<VideoClip> clips_of(const std::vector<LabeledClip>& labeled) {
    std::vector<VideoClip> out;
    out.reserve(labeled.size());
    for (const auto& c : labeled) out.push_back(c.clip);
    return out;
}

}  // namespace dcv
