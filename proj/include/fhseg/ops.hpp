#pragma once

#include <vector>

#include "fhseg/tensor.hpp"

namespace fhseg {

// Per-layer batch-norm running statistics. Sized lazily on first use; updated
// only in BnMode::train.
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
};

// train:        normalize by batch statistics and update running stats.
// train_frozen: normalize by batch statistics, leave running stats untouched
//               (keeps repeated forwards pure, e.g. for finite differences).
// eval:         normalize by running stats.
enum class BnMode { train, train_frozen, eval };

enum class UpsampleMethod { bilinear, nearest };

namespace ops {

// 2-D cross-correlation. input [B,Cin,H,W], kernel [Cout,Cin,K,K] with K odd,
// bias [Cout]. Output extent (H + 2*padding - K)/stride + 1 must divide
// exactly. Gradients flow to input, kernel, and bias.
TensorPtr conv2d(Graph& g, const TensorPtr& input, const TensorPtr& kernel,
                 const TensorPtr& bias, int stride = 1, int padding = 0);

// Per-channel batch normalization with affine parameters gamma/beta [C].
TensorPtr batch_norm(Graph& g, const TensorPtr& input, const TensorPtr& gamma,
                     const TensorPtr& beta, BatchNormState& state, double eps,
                     BnMode mode);

TensorPtr relu(Graph& g, const TensorPtr& x);     // subgradient at 0 is 0
TensorPtr sigmoid(Graph& g, const TensorPtr& x);

// Integer-factor spatial upsampling. Bilinear uses half-pixel centers (the
// align-corners-false convention); its backward is the exact adjoint scatter.
TensorPtr upsample(Graph& g, const TensorPtr& x, int factor,
                   UpsampleMethod method = UpsampleMethod::bilinear);

// Max pooling with window == stride == factor; extents must divide. On ties
// the gradient routes to the first maximum in row-major window order.
TensorPtr downsample(Graph& g, const TensorPtr& x, int factor);

// Channel concatenation; all inputs share B, H, W.
TensorPtr concat(Graph& g, const std::vector<TensorPtr>& inputs);

// Channels [c0, c1) of a [B,C,H,W] tensor.
TensorPtr slice_channels(Graph& g, const TensorPtr& x, int c0, int c1);

// Elementwise product. Either both shapes are equal, or a is [B,C,H,W] and b
// is a broadcast attention map [B,1,H,W].
TensorPtr mul(Graph& g, const TensorPtr& a, const TensorPtr& b);

// Elementwise sum of equal shapes.
TensorPtr add(Graph& g, const TensorPtr& a, const TensorPtr& b);

// Reduction of all elements to a scalar of shape [1].
TensorPtr sum(Graph& g, const TensorPtr& x);

// Value copy with no graph history and requires_grad = false.
TensorPtr detach(const TensorPtr& x);

}  // namespace ops
}  // namespace fhseg
