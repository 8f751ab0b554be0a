#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "guidedseg/tensor.hpp"

namespace guidedseg::autodiff {

inline constexpr std::uint8_t kIgnoreLabel = 255;

/// 2-D cross-correlation with zero padding.
///
/// input [C_in, H, W], kernels [C_out, C_in, kh, kw], bias [C_out] or an
/// undefined Tensor for no bias. Each output element is accumulated as
/// bias first, then channel-major, then kernel row, then kernel column, in
/// float32. Input rows that are entirely zero are skipped, which leaves the
/// result unchanged.
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias,
              int stride, int pad, Tape* tape = nullptr);

/// conv2d applied to a vector tiled over an out_h x out_w map; equal to
/// conv2d(tile(vec), kernels, {}, 1, pad) without materializing the tile.
/// Requires kh, kw <= 2 * pad + 1 so the output keeps the tiled size.
Tensor conv2d_tiled(const Tensor& vec, const Tensor& kernels, int out_h,
                    int out_w, int pad, Tape* tape = nullptr);

Tensor relu(const Tensor& x, Tape* tape = nullptr);

/// Same-shape sum.
Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);

/// Elementwise product. b may also be [1, H, W] against a's [C, H, W].
Tensor elementwise_mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);

Tensor concat_channels(const std::vector<Tensor>& parts, Tape* tape = nullptr);

/// Concatenation of rank-1 tensors.
Tensor concat_vectors(const std::vector<Tensor>& parts, Tape* tape = nullptr);

/// Half-pixel-center bilinear resampling with edge clamping.
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w,
                       Tape* tape = nullptr);

struct MaskedAverage {
  Tensor mean;  // [C]
  float count = 0.0f;
};

/// Mask-weighted spatial mean of features. A zero mask yields a zero vector
/// and count 0. Differentiable with respect to features only.
MaskedAverage masked_average(const Tensor& features, const Tensor& mask,
                             Tape* tape = nullptr);

/// Mean over non-ignored pixels of -log softmax(logits)[target].
/// logits [K, H, W]; target holds H*W labels in {0..K-1, kIgnoreLabel}.
Tensor softmax_cross_entropy(const Tensor& logits,
                             std::span<const std::uint8_t> target,
                             Tape* tape = nullptr);

Tensor sum(const Tensor& x, Tape* tape = nullptr);

/// sum_i weights[i] * parts[i] / sum_i weights[i] over same-shape parts; all
/// zeros when the weights sum to zero. Weights are constants.
Tensor weighted_mean(const std::vector<Tensor>& parts,
                     std::span<const float> weights, Tape* tape = nullptr);

/// y = W x + b for x [N], W [M, N], b [M].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias,
              Tape* tape = nullptr);

/// Contiguous flat range [offset, offset + numel(shape)) viewed as `shape`.
Tensor slice(const Tensor& x, std::size_t offset, Shape shape,
             Tape* tape = nullptr);

/// logits[k, i] = -||features[:, i] - prototypes[k]||^2 / temperature for
/// features [C, h, w] and prototypes [K, C].
Tensor prototype_logits(const Tensor& features, const Tensor& prototypes,
                        float temperature, Tape* tape = nullptr);

}  // namespace guidedseg::autodiff
