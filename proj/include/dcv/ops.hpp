#ifndef DCV_OPS_HPP
#define DCV_OPS_HPP

// Differentiable operations over Var<S>. Video activations use the layout
// [C, T, H, W]; token matrices use [N, D]. All ops are instantiated for
// float and double.

#include "dcv/autograd.hpp"

#include <vector>

namespace dcv {

// ---- elementwise ---------------------------------------------------------
template <typename S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> sub(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> mul(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> scale(const Var<S>& a, S factor);
template <typename S> Var<S> silu(const Var<S>& a);
/// tanh approximation.
template <typename S> Var<S> gelu(const Var<S>& a);
template <typename S> Var<S> reshape(const Var<S>& a, Shape shape);

// ---- reductions and losses -------------------------------------------------
template <typename S> Var<S> sum(const Var<S>& a);
template <typename S> Var<S> mean(const Var<S>& a);
template <typename S> Var<S> mse_loss(const Var<S>& pred, const Var<S>& target);
template <typename S> Var<S> l1_loss(const Var<S>& pred, const Var<S>& target);
/// Mean absolute difference of forward finite differences along H and W,
/// for [C, T, H, W] inputs.
template <typename S> Var<S> spatial_gradient_l1(const Var<S>& pred, const Var<S>& target);

// ---- indexing ----------------------------------------------------------------
/// out[i] = a[index[i]]; backward scatter-adds.
template <typename S> Var<S> gather(const Var<S>& a, const std::vector<Index>& index, Shape out_shape);
/// Contiguous flat slice [offset, offset + count) reshaped to `out_shape`.
template <typename S> Var<S> slice_flat(const Var<S>& a, Index offset, Shape out_shape);

// ---- video ---------------------------------------------------------------------
/// Concatenation along T of [C, T_i, H, W] tensors.
template <typename S> Var<S> concat_time(const std::vector<Var<S>>& parts);
template <typename S> Var<S> slice_time(const Var<S>& x, Index start, Index length);
/// Repeats frame `frame` of x `count` times.
template <typename S> Var<S> repeat_frame(const Var<S>& x, Index frame, Index count);

/// 3D convolution, stride 1. Valid along T, zero "same" padding along H, W.
/// x: [Cin, T, H, W], weight: [Cout, Cin, kt, kh, kw], bias: [Cout].
template <typename S> Var<S> conv3d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias);

/// [C, T, H, W] -> [C*r*r, T, H/r, W/r]; channel index c*r*r + dy*r + dx.
template <typename S> Var<S> space_to_channel(const Var<S>& x, Index r);
template <typename S> Var<S> channel_to_space(const Var<S>& x, Index r);
/// [C, T, H, W] -> [C*r, T/r, H, W]; channel index c*r + dt.
template <typename S> Var<S> time_to_channel(const Var<S>& x, Index r);
template <typename S> Var<S> channel_to_time(const Var<S>& x, Index r);
/// Averages consecutive channel groups: [C, ...] -> [C_out, ...].
template <typename S> Var<S> channel_group_mean(const Var<S>& x, Index out_channels);
/// Repeats each channel `repeats` times consecutively (repeat-interleave).
template <typename S> Var<S> channel_repeat(const Var<S>& x, Index repeats);

/// Group normalization over (channels-in-group, T, H, W) with per-channel affine.
template <typename S>
Var<S> group_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, Index groups, S eps = S(1e-5));

// ---- token matrices -------------------------------------------------------
/// x [N, K] * W^T [K, M] + b; b may be undefined.
template <typename S> Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias);
/// a [N, K] * b [K, M].
template <typename S> Var<S> matmul(const Var<S>& a, const Var<S>& b);
/// Per-row normalization without affine parameters.
template <typename S> Var<S> layer_norm(const Var<S>& x, S eps = S(1e-6));
/// x * (1 + scale) + shift with shift, scale of shape [D] broadcast over rows.
template <typename S> Var<S> modulate(const Var<S>& x, const Var<S>& shift, const Var<S>& scale);
/// x * gate with gate [D] broadcast over rows.
template <typename S> Var<S> mul_rows(const Var<S>& x, const Var<S>& gate);
/// x + v with v [D] broadcast over rows.
template <typename S> Var<S> add_rows(const Var<S>& x, const Var<S>& v);
/// Multi-head softmax self-attention. qkv: [N, 3D] laid out as (q | k | v).
template <typename S> Var<S> attention(const Var<S>& qkv, Index heads);
/// Row `row` of a [R, D] table as a [D] vector.
template <typename S> Var<S> select_row(const Var<S>& table, Index row);

}  // namespace dcv

#endif  // DCV_OPS_HPP
