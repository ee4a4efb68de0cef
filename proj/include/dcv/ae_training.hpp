#ifndef DCV_AE_TRAINING_HPP
#define DCV_AE_TRAINING_HPP

#include "dcv/dataset.hpp"
#include "dcv/dc_ae_v.hpp"
#include "dcv/optim.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcv {

struct AETrainConfig {
    long steps = 100;
    Index batch_size = 8;
    AdamWConfig optim{1e-3};
    double lambda_grad = 0.1;
    std::uint64_t seed = 0;
    long eval_every = 0;  // 0: evaluate once at the end
};

struct StepRecord {
    long step = 0;
    double loss = 0.0;
};

struct ValRecord {
    long step = 0;
    double psnr = 0.0;
    double ssim = 0.0;
};

struct TrainReport {
    std::vector<StepRecord> steps;
    std::vector<ValRecord> validation;
    double wall_clock_s = 0.0;
    std::string checkpoint;
    // Content hash of every clip drawn into a batch, in draw order.
    std::vector<std::string> batch_hashes;

    /// One JSON object per line: step records, then validation records.
    void write_jsonl(const std::filesystem::path& path) const;
};

/// L1(recon, target) + lambda_grad * L1 of finite-difference spatial gradients.
template <typename S>
Var<S> reconstruction_loss(const Var<S>& recon, const Var<S>& target, double lambda_grad);

/// Hash of a clip's pixel data.
std::string clip_hash(const VideoClip& clip);

ValRecord validate_autoencoder(const AEParams<float>& params, const std::vector<VideoClip>& val, long step = 0);

/// Single-writer AdamW loop. Deterministic for a given seed; throws DivergenceError on NaN loss.
TrainReport train_autoencoder(const std::vector<VideoClip>& train, const std::vector<VideoClip>& val,
                              AEParams<float>& params, const AETrainConfig& cfg);

/// Per-channel latent mean/std over the given clips, stored into params.
void fit_latent_statistics(AEParams<float>& params, const std::vector<VideoClip>& clips);

struct AblationRow {
    Index chunk_size = 0;
    std::uint64_t seed = 0;
    double val_psnr = 0.0;
    double val_ssim = 0.0;
};

struct AblationResult {
    std::vector<AblationRow> rows;
    std::vector<Index> chunk_sizes;
    std::vector<double> median_psnr;  // per chunk size, over seeds
    std::string svg;
};

/// One model per (chunk size, seed) with identical budgets. Chunk sizes equal to t run in
/// chunk_causal mode, which is the grouped-causal structure.
AblationResult ablate_chunk_size(const std::vector<VideoClip>& train, const std::vector<VideoClip>& val,
                                 const AEConfig& base, const WidthSpec& widths, const std::vector<Index>& chunk_sizes,
                                 const AETrainConfig& budget, const std::vector<std::uint64_t>& seeds);

double median(std::vector<double> values);

/// Line plot of median validation PSNR against chunk size.
std::string render_ablation_svg(const AblationResult& result);

struct LongVideoResult {
    double short_psnr = 0.0;        // first short_len frames, encoded on their own
    double long_psnr = 0.0;         // mean per-frame PSNR over the whole clip
    double boundary_dip = 0.0;      // at chunk seams
    double tiled_long_psnr = 0.0;   // non-causal weights, tiled and blended
    double tiled_boundary_dip = 0.0;  // at tile seams
    std::vector<double> profile;        // per frame, averaged over clips
    std::vector<double> tiled_profile;
};

/// Compares chunk-wise causal inference of `model` on long clips with the same weights run
/// non-causally over overlapping tiles of tile_len frames.
LongVideoResult evaluate_long_video(const AEParams<float>& model, const std::vector<VideoClip>& long_clips,
                                    Index short_len, Index tile_len, Index overlap);

std::vector<VideoClip> clips_of(const std::vector<LabeledClip>& labeled);

}  // namespace dcv

#endif  // DCV_AE_TRAINING_HPP
