#ifndef DCV_TOY_DIT_HPP
#define DCV_TOY_DIT_HPP

// Class-conditioned diffusion transformer over autoencoder latents, trained
// with a flow-matching velocity objective.

#include "dcv/dc_ae_v.hpp"
#include "dcv/optim.hpp"
#include "dcv/rng.hpp"

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace dcv {

struct DiTConfig {
    Index latent_channels = 8;
    Index patch_size = 1;
    Index embed_dim = 64;
    Index depth = 4;
    Index heads = 4;
    Index num_classes = 3;
    Index max_tokens = 4096;
    Index mlp_ratio = 4;
    Index time_freq_dim = 64;

    void validate() const;
    Index patch_dim() const { return latent_channels * patch_size * patch_size; }
    friend bool operator==(const DiTConfig&, const DiTConfig&) = default;
};

/// Low-rank delta (alpha / rank) * B * A attached to `<target>.weight`.
struct LoRASpec {
    Index rank = 8;
    double alpha = 16.0;
    double scale() const { return alpha / double(rank); }
    friend bool operator==(const LoRASpec&, const LoRASpec&) = default;
};

template <typename S>
struct DiTModel {
    DiTConfig config;
    ParamStore<S> weights;
    std::map<std::string, LoRASpec> lora;  // target -> adapter; factors live in weights as <target>.lora_A/B

    template <typename T>
    DiTModel<T> cast() const {
        return {config, weights.template cast<T>(), lora};
    }
};

/// Names of the per-block projection matrices (without ".weight").
std::vector<std::string> block_linear_names(const DiTConfig& config);

/// Embedder and head "dense" init; adaLN modulations start at zero.
template <typename S>
DiTModel<S> build_dit(const DiTConfig& config, std::uint64_t seed);

/// Fresh random patch embedder / output head for a new latent space (other weights untouched).
template <typename S>
void reinit_embedder(DiTModel<S>& model, Index latent_channels, Index patch_size, std::uint64_t seed);
template <typename S>
void reinit_head(DiTModel<S>& model, std::uint64_t seed);

struct TokenGrid {
    Index frames = 0;
    Index height = 0;
    Index width = 0;
    Index count() const { return frames * height * width; }
    friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

/// Grid of a [c, T, H, W] latent under patch size p; ShapeError if H or W is not divisible.
TokenGrid token_grid(const Shape& latent_shape, Index patch_size);

/// Fixed sinusoidal signal, factorized over (T, H, W): [N, D].
template <typename S>
Tensor<S> positional_signal(const TokenGrid& grid, Index dim);

/// [c, T, H, W] -> [N, c p p]; token order (t, i, j), feature order (channel, dy, dx).
template <typename S>
Var<S> patchify(const Var<S>& latent, Index p);
template <typename S>
Var<S> unpatchify(const Var<S>& tokens, Index channels, const TokenGrid& grid, Index p);

/// Linear patch embedding without the positional signal: [N, D].
template <typename S>
Var<S> patch_embed(const Var<S>& latent, const DiTModel<S>& model);
/// Patch embedding plus positional signal: [N, D].
template <typename S>
Var<S> embed(const Var<S>& latent, const DiTModel<S>& model);

/// x W^T + b, plus the attached low-rank delta if any.
template <typename S>
Var<S> apply_linear(const DiTModel<S>& model, const std::string& name, const Var<S>& x);

/// Predicted velocity, same shape as `noisy`.
template <typename S>
Var<S> dit_forward(const Var<S>& noisy, S time, Index label, const DiTModel<S>& model);

/// MSE between dit_forward(x_u, u) and x1 - eps for x_u = (1 - u) eps + u x1.
template <typename S>
Var<S> flow_matching_loss_at(const DiTModel<S>& model, const Tensor<S>& clean, Index label, S time,
                             const Tensor<S>& noise);
/// Draws u ~ U(0, 1) and eps ~ N(0, I) from rng.
template <typename S>
Var<S> flow_matching_loss(const DiTModel<S>& model, const Tensor<S>& clean, Index label, Rng& rng);

/// Euler integration from noise (u = 0) to data (u = 1); normalized latent space.
Tensor<float> sample_latent(const DiTModel<float>& model, const Shape& latent_shape, Index label, int steps,
                            std::uint64_t seed);
/// sample_latent, de-normalized and decoded.
VideoClip sample(const DiTModel<float>& model, const AEParams<float>& ae, const Shape& latent_shape, Index label,
                 int steps, std::uint64_t seed);

/// Normalized latents of each clip.
std::vector<Tensor<float>> encode_latents(const std::vector<VideoClip>& clips, const AEParams<float>& ae);

struct DiTTrainConfig {
    long steps = 2000;
    Index batch_size = 4;
    AdamWConfig optim{1e-3};
    std::uint64_t seed = 0;
    // Record a non-finite loss in the report and stop instead of throwing.
    bool stop_on_divergence = false;
};

struct DiTTrainReport {
    std::vector<double> losses;  // per step
    long diverged_at = 0;        // 0 when training completed
    double wall_clock_s = 0.0;
};

/// Called after each step with (step, loss); returning true ends training.
using StopRule = std::function<bool(long, double)>;

/// Minimizes flow_matching_loss over the model's trainable parameters.
/// Throws DivergenceError on a non-finite loss unless cfg.stop_on_divergence is set.
DiTTrainReport train_flow_matching(DiTModel<float>& model, const std::vector<Tensor<float>>& latents,
                                   const std::vector<Index>& labels, const DiTTrainConfig& cfg,
                                   const StopRule& stop = {});

/// Base-model training: every parameter trainable.
DiTTrainReport train_base_model(DiTModel<float>& model, const std::vector<Tensor<float>>& latents,
                                const std::vector<Index>& labels, const DiTTrainConfig& cfg);

/// Mean flow-matching loss over fixed (seeded) draws per latent; identical draws for any model.
double validation_diffusion_loss(const DiTModel<float>& model, const std::vector<Tensor<float>>& latents,
                                 const std::vector<Index>& labels, int draws_per_latent, std::uint64_t seed);

}  // namespace dcv

#endif  // DCV_TOY_DIT_HPP
