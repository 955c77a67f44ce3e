#pragma once

#include <span>
#include <vector>

#include "fna/tensor.hpp"

namespace fna {

// Grouped 2-D convolution weights and geometry. weight is [C_out, C_in/groups, k, k].
struct ConvParams {
  Tensor weight;
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;

  int out_channels() const { return static_cast<int>(weight.dim(0)); }
  int in_channels() const { return static_cast<int>(weight.dim(1)) * groups; }
  int kernel_size() const { return static_cast<int>(weight.dim(2)); }
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Per-channel batch normalization state. The four tensors are handles, so
// running statistics updated in training mode are written back to the owner.
struct BNParams {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double eps = kBatchNormEps;
  double momentum = kBatchNormMomentum;
  bool identity_mode = false;

  std::size_t channels() const { return gamma.numel(); }
};

enum class BNMode {
  kTrain,       // batch statistics, running statistics updated
  kBatchStats,  // batch statistics, running statistics untouched
  kEval,        // running statistics
  kFrozen,      // running statistics, gamma/beta treated as constants
};

// Output extent of a convolution along one spatial axis.
int conv_out_extent(int in, int kernel, int stride, int padding, int dilation);

Tensor conv2d(const Tensor& input, const ConvParams& params);
Tensor depthwise_conv2d(const Tensor& input, const ConvParams& params);
Tensor batch_norm(const Tensor& input, BNParams& params, BNMode mode);
Tensor batch_norm(const Tensor& input, BNParams& params, bool training);

Tensor relu6(const Tensor& input);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& input, double factor);
Tensor add_scalar(const Tensor& input, double shift);
Tensor sum(const Tensor& input);
Tensor log10(const Tensor& input);

// input [N, in] x weight [out, in] + bias [out]; bias may be undefined.
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);
// Adds bias[C] to every position of an [N, C, H, W] tensor.
Tensor add_channel_bias(const Tensor& input, const Tensor& bias);
Tensor global_avg_pool(const Tensor& input);
Tensor upsample_nearest(const Tensor& input, int factor);

// Mean cross-entropy. logits [N, K] with N labels, or [N, K, H, W] with N*H*W
// labels laid out as [N, H, W].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

// Softmax over a rank-1 tensor.
Tensor softmax(const Tensor& logits);
// Sum_k weights[k] * inputs[k]; all inputs share one shape, weights is [K].
Tensor weighted_sum(std::span<const Tensor> inputs, const Tensor& weights);
// Sum_k input[k] * constants[k] for a rank-1 input, as a scalar tensor.
Tensor dot_const(const Tensor& input, std::span<const double> constants);

// Argmax over the class axis of [N, K] or [N, K, H, W] logits.
std::vector<int> argmax_classes(const Tensor& logits);

// While alive, accumulates the nominal multiply-adds of every conv2d and
// linear forward call on this thread (padding taps included). Nests.
class MaddsCounter {
 public:
  MaddsCounter();
  ~MaddsCounter();
  MaddsCounter(const MaddsCounter&) = delete;
  MaddsCounter& operator=(const MaddsCounter&) = delete;

  long long total() const { return total_; }
  void add(long long madds);

 private:
  long long total_ = 0;
  MaddsCounter* outer_;
};

}  // namespace fna
