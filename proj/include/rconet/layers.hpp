#pragma once

#include <cstdint>
#include <vector>

#include "rconet/rng.hpp"
#include "rconet/tensor.hpp"

namespace rconet {

enum class Mode { Train, Eval };

// 2-D convolution parameters. Kernels are odd-sized so the tap grid is
// centered; padding must stay below the kernel extent.
struct ConvParams {
  Tensor weight;  // (out_ch, in_ch, kh, kw)
  Tensor bias;    // (out_ch)
  int stride = 1;
  int padding = 0;

  std::size_t out_ch() const { return weight.extent(0); }
  std::size_t in_ch() const { return weight.extent(1); }
  std::size_t kh() const { return weight.extent(2); }
  std::size_t kw() const { return weight.extent(3); }

  void validate() const;

  // Fan-in-scaled normal init, zero bias.
  static ConvParams he(std::size_t out_ch, std::size_t in_ch, std::size_t kh, std::size_t kw,
                       int stride, int padding, Rng& rng);
  // All-zero weights and bias; offset predictors start here so deformable
  // taps begin on the regular grid.
  static ConvParams zeros(std::size_t out_ch, std::size_t in_ch, std::size_t kh, std::size_t kw,
                          int stride, int padding);
};

// Per-tap fractional displacements: channel 2t holds dy and 2t+1 holds dx for
// tap t, laid out over the output grid. Rank 3 for a single sample,
// rank 4 when batched.
struct OffsetField {
  Tensor offsets;  // (2*kh*kw, H_out, W_out) or (N, 2*kh*kw, H_out, W_out)
};

// Cross-correlation with zero padding. x is (C,H,W) or (N,C,H,W); the output
// keeps the input's rank.
Tensor conv2d(const Tensor& x, const ConvParams& p);

// Convolution whose taps are displaced by `off` and sampled bilinearly;
// samples that land outside the image read as zero. Gradients flow to the
// input, the weights, and the offsets.
Tensor deform_conv2d(const Tensor& x, const ConvParams& p, const OffsetField& off);

// Companion-convolution offset prediction; `offset_conv` must emit 2*kh*kw
// channels for its own kernel size.
OffsetField predict_offsets(const Tensor& x, const ConvParams& offset_conv);

struct RunningStats {
  std::vector<double> mean;
  std::vector<double> var;
  double momentum = 0.9;
  double eps = 1e-5;

  explicit RunningStats(std::size_t channels = 0)
      : mean(channels, 0.0), var(channels, 1.0) {}
};

// Per-channel normalization of (N,C) or (N,C,H,W). Train mode uses batch
// statistics (N >= 2) and folds them into the running estimates; eval mode is
// a fixed affine map of x.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Mode mode,
                  RunningStats& stats);

struct DropoutMask {
  Tensor keep;  // binary, matches the feature extent
  double rate = 0.0;

  static DropoutMask sample(const Shape& extent, double rate, Rng& rng);
  static DropoutMask keep_all(const Shape& extent);
};

// Inverted-scale dropout: x ⊙ keep / (1 - rate). The same formula applies in
// both modes; train/eval only differ in who resamples the mask.
Tensor dropout(const Tensor& x, const DropoutMask& mask, Mode mode);

// Fully connected layer over row-major batches.
struct Dense {
  Tensor weight;  // (in, out)
  Tensor bias;    // (out)

  static Dense he(std::size_t in, std::size_t out, Rng& rng);
  Tensor forward(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }
};

// Mean pooling with square non-overlapping windows; plain value computation
// used for input summaries (not recorded on any tape).
Tensor avg_pool2d(const Tensor& x, std::size_t window);

}  // namespace rconet
