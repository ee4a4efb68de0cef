#ifndef DCV_AE_ADAPT_V_HPP
#define DCV_AE_ADAPT_V_HPP

// Moving a pretrained diffusion transformer onto a new autoencoder:
// embedder alignment (1a), head alignment under frozen blocks (1b) and
// low-rank end-to-end finetuning (2), plus the random-init baseline.

#include "dcv/toy_dit.hpp"

#include <filesystem>
#include <functional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcv {

// ---- embedding grids -----------------------------------------------------------------

/// [N, D] tokens viewed as a [T, H, W, D] grid.
template <typename S>
Tensor<S> tokens_to_grid(const Tensor<S>& tokens, const TokenGrid& grid);

/// Non-overlapping window mean from a [T, H, W, D] grid down to (frames, height, width).
/// Throws ConfigError unless every ratio is an integer.
template <typename S>
Tensor<S> avg_pool_embeddings(const Tensor<S>& grid, Index frames, Index height, Index width);

/// Pooled base patch embedding (positional signal excluded), flattened to [N_new, D].
template <typename S>
Tensor<S> alignment_target(const DiTModel<S>& base, const Tensor<S>& base_latent, const TokenGrid& new_grid);

/// MSE between the new patch embedding of `new_latent` and `target`.
template <typename S>
Var<S> alignment_loss(const DiTModel<S>& model, const Tensor<S>& new_latent, const Tensor<S>& target);

// ---- LoRA ------------------------------------------------------------------------------------

/// Attaches zero-initialized adapters; returns the names of the new factors.
template <typename S>
std::vector<std::string> attach_lora(DiTModel<S>& model, const std::vector<std::string>& targets, const LoRASpec& spec,
                                     std::uint64_t seed);

/// Folds every adapter into its weight and removes the factors.
template <typename S>
void merge_lora(DiTModel<S>& model);

/// sum over adapters of rank * (d_in + d_out).
template <typename S>
Index lora_parameter_count(const DiTModel<S>& model);

// ---- trainable sets & hashing ---------------------------------------------------------------

bool is_embedder_param(const std::string& name);
bool is_head_param(const std::string& name);
bool is_lora_param(const std::string& name);

/// Marks exactly the matching parameters trainable; returns their names.
std::vector<std::string> set_trainable_where(DiTModel<float>& model, const std::function<bool(const std::string&)>& keep);

Index count_trainable(const DiTModel<float>& model);

/// SHA-256 over all parameters that are not trainable.
std::string frozen_hash(const DiTModel<float>& model);

// ---- stages -----------------------------------------------------------------------------------

struct AlignConfig {
    long steps = 150;
    Index batch_size = 4;
    AdamWConfig optim{3e-3};
    std::uint64_t seed = 0;
};

struct StageReport {
    std::string stage;
    std::vector<double> losses;
    std::vector<std::string> trainable;
    Index trainable_count = 0;
    std::string frozen_hash_before;
    std::string frozen_hash_after;
    long steps_run = 0;
    bool plateau_stop = false;
    long diverged_at = 0;
};

/// Copy of `base` with a fresh embedder and head sized for the new latent space.
DiTModel<float> make_adapted_model(const DiTModel<float>& base, Index new_channels, Index new_patch, std::uint64_t seed);

/// Stage 1a: regress the new patch embedding onto pooled base embeddings. Only the embedder trains.
StageReport align_patch_embedder(DiTModel<float>& model, const DiTModel<float>& base,
                                 const std::vector<Tensor<float>>& base_latents,
                                 const std::vector<Tensor<float>>& new_latents, const AlignConfig& cfg);

struct HeadAlignConfig {
    DiTTrainConfig train{150, 4, AdamWConfig{1e-2}, 0, false};
    long window = 50;
    double min_rel_improvement = 0.01;
};

/// True once the mean loss of the last window improved by less than the threshold over the window before it.
bool plateau_reached(const std::vector<double>& losses, long window, double min_rel_improvement);

/// Stage 1b: flow-matching loss on embedder and head with frozen blocks; stops at plateau or train.steps.
StageReport align_output_head(DiTModel<float>& model, const std::vector<Tensor<float>>& latents,
                              const std::vector<Index>& labels, const HeadAlignConfig& cfg);

enum class FinetuneMode { lora, full };

struct FinetuneConfig {
    DiTTrainConfig train{150, 4, AdamWConfig{3e-3}, 0, false};
    FinetuneMode mode = FinetuneMode::lora;
    LoRASpec lora{};
};

/// Stage 2. lora: adapters + embedder + head train; full: every base parameter trains.
StageReport finetune_end_to_end(DiTModel<float>& model, const std::vector<Tensor<float>>& latents,
                                const std::vector<Index>& labels, const FinetuneConfig& cfg);

/// Random embedder/head and stage-2 training for the whole budget; divergence is recorded, not thrown.
StageReport naive_baseline(DiTModel<float>& model, const DiTModel<float>& base, Index new_channels, Index new_patch,
                           const std::vector<Tensor<float>>& latents, const std::vector<Index>& labels,
                           FinetuneConfig cfg, std::uint64_t seed);

// ---- image-to-video conditioning -------------------------------------------------------------

/// [image x 4, blank frames] padded to whole chunks and encoded. The image must be a
/// single frame of the video's size.
LatentVideo i2v_encode_condition(const VideoClip& image, const AEParams<float>& ae, Index video_height,
                                 Index video_width);

/// Channel-concatenates the condition (zero-extended in time) onto a video latent.
Tensor<float> concat_condition_channels(const Tensor<float>& video_latent, const LatentVideo& condition);

// ---- run state -------------------------------------------------------------------------------

class OrderingError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

enum class AdaptStage { align_embedder, align_head, finetune, naive };

std::string stage_tag(AdaptStage stage);
AdaptStage stage_from_tag(const std::string& tag);

/// Completed-stage bookkeeping for one adaptation run directory.
class AdaptationRun {
public:
    AdaptationRun() = default;
    explicit AdaptationRun(std::filesystem::path dir);

    bool completed(AdaptStage stage) const { return done_.count(stage) != 0; }
    /// Throws OrderingError when the prerequisites of `stage` are missing.
    void require_ready(AdaptStage stage) const;
    void mark_completed(AdaptStage stage);
    const std::filesystem::path& dir() const { return dir_; }

private:
    void save() const;
    std::filesystem::path dir_;
    std::set<AdaptStage> done_;
};

}  // namespace dcv

#endif  // DCV_AE_ADAPT_V_HPP
