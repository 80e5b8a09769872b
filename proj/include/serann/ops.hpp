#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "serann/tensor.hpp"

namespace serann {

/// Explicit per-edge zero padding (conv2d) or per-edge cropping
/// (conv2d_transpose).
struct Padding {
  std::size_t top = 0;
  std::size_t bottom = 0;
  std::size_t left = 0;
  std::size_t right = 0;

  static Padding uniform(std::size_t p) { return {p, p, p, p}; }
  bool operator==(const Padding&) const = default;
};

struct ConvGeometry {
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  Padding padding;
};

/// Output spatial size of conv2d: floor((in + pads - k) / stride) + 1.
std::size_t conv_output_size(std::size_t in, std::size_t pad_a, std::size_t pad_b,
                             std::size_t kernel, std::size_t stride);

/// Output spatial size of conv2d_transpose: (in - 1) * stride + k - crops.
std::size_t conv_transpose_output_size(std::size_t in, std::size_t crop_a, std::size_t crop_b,
                                       std::size_t kernel, std::size_t stride);

/// Cropping that makes conv2d_transpose map a conv2d output back onto the
/// conv2d input size (`in_h` x `in_w`). Throws if the pair cannot be inverted.
Padding inverse_padding(std::size_t in_h, std::size_t in_w, std::size_t kh, std::size_t kw,
                        const ConvGeometry& conv);

struct ConvGrads {
  Tensor input;
  Tensor kernels;
  Tensor bias;
};

/// input [N,C,H,W], kernels [F,C,kh,kw], bias [F] or empty -> [N,F,H',W'].
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias,
              const ConvGeometry& geom);
ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernels, const ConvGeometry& geom,
                          const Tensor& grad_output);

/// input [N,Cin,H,W], kernels [Cin,Cout,kh,kw], bias [Cout] or empty ->
/// [N,Cout,H',W']. Adjoint of conv2d in its input argument.
Tensor conv2d_transpose(const Tensor& input, const Tensor& kernels, const Tensor& bias,
                        const ConvGeometry& geom);
ConvGrads conv2d_transpose_backward(const Tensor& input, const Tensor& kernels,
                                    const ConvGeometry& geom, const Tensor& grad_output);

enum class Activation { kNone, kRelu };

struct DenseGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

/// input [..,D], weights [D,K], bias [K] -> [..,K].
Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias,
             Activation activation);
/// `output` is the forward result; it carries the ReLU mask.
DenseGrads dense_backward(const Tensor& input, const Tensor& weights, const Tensor& output,
                          Activation activation, const Tensor& grad_output);

Tensor relu(const Tensor& x);
/// Derivative at exactly 0 is 0.
Tensor relu_backward(const Tensor& x, const Tensor& grad_output);

/// One LSTM direction. Gate layout along the 4U axis is input, forget,
/// cell candidate, output.
struct LstmParams {
  Tensor w_input;      // [D, 4U]
  Tensor w_recurrent;  // [U, 4U]
  Tensor bias;         // [4U]

  std::size_t units() const { return w_recurrent.dim(0); }
};

struct LstmCache {
  Tensor gates;   // [T, 4U] post-activation
  Tensor cells;   // [T, U]
  Tensor hidden;  // [T, U], in processing order
  bool reverse = false;
};

struct BiLstmCache {
  Tensor input;
  LstmCache forward;
  LstmCache backward;
};

struct LstmGrads {
  Tensor w_input;
  Tensor w_recurrent;
  Tensor bias;
};

struct BiLstmGrads {
  Tensor input;
  LstmGrads forward;
  LstmGrads backward;
};

/// sequence [T,D] -> [T, 2U]; forward-direction features first.
Tensor bilstm(const Tensor& sequence, const LstmParams& fwd, const LstmParams& bwd,
              BiLstmCache* cache = nullptr);
BiLstmGrads bilstm_backward(const BiLstmCache& cache, const LstmParams& fwd,
                            const LstmParams& bwd, const Tensor& grad_output);

/// Row-wise softmax of a [N,K] tensor, max-stabilised.
Tensor softmax_rows(const Tensor& logits);

struct CrossEntropy {
  double loss = 0.0;
  Tensor grad;  // d loss / d logits, [N,K]
};

/// Mean over the batch of -log softmax(logits)[label].
CrossEntropy softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// alpha_i = exp(w.h_i) / sum_j exp(w.h_j) for H [T,D], w [D].
Tensor attention_weights(const Tensor& hidden, const Tensor& w);
/// R = sum_i alpha_i h_i.
Tensor attention_pool(const Tensor& hidden, const Tensor& alpha);

struct AttentionGrads {
  Tensor hidden;
  Tensor w;
};

/// Gradient of R = attention_pool(H, attention_weights(H, w)).
AttentionGrads attention_backward(const Tensor& hidden, const Tensor& w, const Tensor& alpha,
                                  const Tensor& grad_pooled);

}  // namespace serann
