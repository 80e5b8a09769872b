#include "serann/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "serann/error.hpp"

namespace serann {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

/// Patch layout shared by conv2d and its transpose. The "image" is the
/// larger spatial map, the "grid" the strided output positions over it.
struct PatchGrid {
  std::size_t channels, image_h, image_w;
  std::size_t kh, kw, sh, sw;
  std::size_t pad_top, pad_left;
  std::size_t grid_h, grid_w;

  std::size_t rows() const { return channels * kh * kw; }
  std::size_t cols() const { return grid_h * grid_w; }
};

void im2col(const double* image, const PatchGrid& g, double* col) {
  const std::size_t n_cols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = col + ((c * g.kh + ky) * g.kw + kx) * n_cols;
        for (std::size_t oy = 0; oy < g.grid_h; ++oy) {
          const long iy = static_cast<long>(oy * g.sh + ky) - static_cast<long>(g.pad_top);
          double* dst = row + oy * g.grid_w;
          if (iy < 0 || iy >= static_cast<long>(g.image_h)) {
            std::fill(dst, dst + g.grid_w, 0.0);
            continue;
          }
          const double* src = image + (c * g.image_h + static_cast<std::size_t>(iy)) * g.image_w;
          for (std::size_t ox = 0; ox < g.grid_w; ++ox) {
            const long ix = static_cast<long>(ox * g.sw + kx) - static_cast<long>(g.pad_left);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.image_w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const PatchGrid& g, double* image) {
  const std::size_t n_cols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = col + ((c * g.kh + ky) * g.kw + kx) * n_cols;
        for (std::size_t oy = 0; oy < g.grid_h; ++oy) {
          const long iy = static_cast<long>(oy * g.sh + ky) - static_cast<long>(g.pad_top);
          if (iy < 0 || iy >= static_cast<long>(g.image_h)) continue;
          const double* src = row + oy * g.grid_w;
          double* dst = image + (c * g.image_h + static_cast<std::size_t>(iy)) * g.image_w;
          for (std::size_t ox = 0; ox < g.grid_w; ++ox) {
            const long ix = static_cast<long>(ox * g.sw + kx) - static_cast<long>(g.pad_left);
            if (ix >= 0 && ix < static_cast<long>(g.image_w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

void check_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_to_string(t.shape()));
  }
}

void check_geometry(const ConvGeometry& geom) {
  if (geom.stride_h == 0 || geom.stride_w == 0) {
    throw PreconditionError("convolution stride components must be >= 1");
  }
}

bool has_bias(const Tensor& bias, std::size_t channels, const char* what) {
  if (bias.empty()) return false;
  if (bias.rank() != 1 || bias.dim(0) != channels) {
    throw DimensionError(std::string(what) + ": bias shape " + shape_to_string(bias.shape()) +
                         " does not match " + std::to_string(channels) + " output channels");
  }
  return true;
}

/// Grid over the conv2d input for a forward convolution.
PatchGrid conv_grid(const Tensor& input, const Tensor& kernels, const ConvGeometry& geom) {
  check_rank(input, 4, "conv2d input");
  check_rank(kernels, 4, "conv2d kernels");
  check_geometry(geom);
  const std::size_t C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (kernels.dim(1) != C) {
    throw DimensionError("conv2d: input channel axis (axis 1) is " + std::to_string(C) +
                         " but kernel channel axis (axis 1) is " + std::to_string(kernels.dim(1)));
  }
  const std::size_t kh = kernels.dim(2), kw = kernels.dim(3);
  const auto& p = geom.padding;
  if (kh > H + p.top + p.bottom) {
    throw DimensionError("conv2d: kernel height (axis 2) " + std::to_string(kh) +
                         " exceeds padded input height " + std::to_string(H + p.top + p.bottom));
  }
  if (kw > W + p.left + p.right) {
    throw DimensionError("conv2d: kernel width (axis 3) " + std::to_string(kw) +
                         " exceeds padded input width " + std::to_string(W + p.left + p.right));
  }
  return PatchGrid{C,
                   H,
                   W,
                   kh,
                   kw,
                   geom.stride_h,
                   geom.stride_w,
                   p.top,
                   p.left,
                   conv_output_size(H, p.top, p.bottom, kh, geom.stride_h),
                   conv_output_size(W, p.left, p.right, kw, geom.stride_w)};
}

/// Grid over the conv2d_transpose output; the grid is the transpose input.
PatchGrid transpose_grid(const Tensor& input, const Tensor& kernels, const ConvGeometry& geom) {
  check_rank(input, 4, "conv2d_transpose input");
  check_rank(kernels, 4, "conv2d_transpose kernels");
  check_geometry(geom);
  const std::size_t Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (kernels.dim(0) != Cin) {
    throw DimensionError("conv2d_transpose: input channel axis (axis 1) is " +
                         std::to_string(Cin) + " but kernel input axis (axis 0) is " +
                         std::to_string(kernels.dim(0)));
  }
  const std::size_t kh = kernels.dim(2), kw = kernels.dim(3);
  const auto& p = geom.padding;
  const std::size_t full_h = (H - 1) * geom.stride_h + kh;
  const std::size_t full_w = (W - 1) * geom.stride_w + kw;
  if (p.top + p.bottom >= full_h) {
    throw DimensionError("conv2d_transpose: height cropping " +
                         std::to_string(p.top + p.bottom) + " leaves no output rows (axis 2)");
  }
  if (p.left + p.right >= full_w) {
    throw DimensionError("conv2d_transpose: width cropping " +
                         std::to_string(p.left + p.right) + " leaves no output columns (axis 3)");
  }
  return PatchGrid{kernels.dim(1),
                   full_h - p.top - p.bottom,
                   full_w - p.left - p.right,
                   kh,
                   kw,
                   geom.stride_h,
                   geom.stride_w,
                   p.top,
                   p.left,
                   H,
                   W};
}

void add_channel_bias(double* out, const Tensor& bias, std::size_t plane) {
  for (std::size_t f = 0; f < bias.size(); ++f) {
    double* dst = out + f * plane;
    const double b = bias[f];
    for (std::size_t i = 0; i < plane; ++i) dst[i] += b;
  }
}

void sum_channel_planes(const double* grad, std::size_t channels, std::size_t plane, Tensor& out) {
  for (std::size_t f = 0; f < channels; ++f) {
    const double* src = grad + f * plane;
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += src[i];
    out[f] += s;
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void lstm_forward(const Tensor& seq, const LstmParams& p, bool reverse, LstmCache& cache) {
  const std::size_t T = seq.dim(0), D = seq.dim(1), U = p.units();
  if (p.w_input.rank() != 2 || p.w_input.dim(0) != D || p.w_input.dim(1) != 4 * U) {
    throw DimensionError("lstm: input weights " + shape_to_string(p.w_input.shape()) +
                         " do not match input dim " + std::to_string(D) + " and units " +
                         std::to_string(U));
  }
  if (p.w_recurrent.dim(1) != 4 * U || p.bias.size() != 4 * U) {
    throw DimensionError("lstm: recurrent weights or bias do not match units " + std::to_string(U));
  }
  cache.reverse = reverse;
  cache.gates = Tensor({T, 4 * U});
  cache.cells = Tensor({T, U});
  cache.hidden = Tensor({T, U});

  // Input projections for every step in one product.
  RowMat pre = ConstMatMap(seq.data(), T, D) * ConstMatMap(p.w_input.data(), D, 4 * U);
  const ConstMatMap w_rec(p.w_recurrent.data(), U, 4 * U);

  std::vector<double> h_prev(U, 0.0), c_prev(U, 0.0);
  for (std::size_t s = 0; s < T; ++s) {
    const std::size_t t = reverse ? T - 1 - s : s;
    Eigen::Map<Eigen::RowVectorXd> z(pre.row(t).data(), 4 * U);
    if (s > 0) z.noalias() += Eigen::Map<const Eigen::RowVectorXd>(h_prev.data(), U) * w_rec;
    double* gates = cache.gates.data() + s * 4 * U;
    double* cell = cache.cells.data() + s * U;
    double* hid = cache.hidden.data() + s * U;
    for (std::size_t u = 0; u < U; ++u) {
      const double i = sigmoid(z[u] + p.bias[u]);
      const double f = sigmoid(z[U + u] + p.bias[U + u]);
      const double g = std::tanh(z[2 * U + u] + p.bias[2 * U + u]);
      const double o = sigmoid(z[3 * U + u] + p.bias[3 * U + u]);
      gates[u] = i;
      gates[U + u] = f;
      gates[2 * U + u] = g;
      gates[3 * U + u] = o;
      cell[u] = f * c_prev[u] + i * g;
      hid[u] = o * std::tanh(cell[u]);
    }
    std::copy(hid, hid + U, h_prev.begin());
    std::copy(cell, cell + U, c_prev.begin());
  }
}

/// `grad_hidden` is indexed by time step (not processing order), [T, U].
LstmGrads lstm_backward(const Tensor& seq, const LstmParams& p, const LstmCache& cache,
                        const double* grad_hidden, std::size_t grad_stride, Tensor& grad_seq) {
  const std::size_t T = seq.dim(0), D = seq.dim(1), U = p.units();
  RowMat dz(T, 4 * U);  // pre-activation gradients, in processing order
  const ConstMatMap w_rec(p.w_recurrent.data(), U, 4 * U);
  std::vector<double> dh_next(U, 0.0), dc_next(U, 0.0);

  for (std::size_t s = T; s-- > 0;) {
    const std::size_t t = cache.reverse ? T - 1 - s : s;
    const double* gates = cache.gates.data() + s * 4 * U;
    const double* cell = cache.cells.data() + s * U;
    const double* gh = grad_hidden + t * grad_stride;
    for (std::size_t u = 0; u < U; ++u) {
      const double i = gates[u], f = gates[U + u], g = gates[2 * U + u], o = gates[3 * U + u];
      const double c_prev = s > 0 ? cache.cells.data()[(s - 1) * U + u] : 0.0;
      const double tc = std::tanh(cell[u]);
      const double dh = gh[u] + dh_next[u];
      const double d_o = dh * tc;
      const double dc = dh * o * (1.0 - tc * tc) + dc_next[u];
      dz(s, u) = dc * g * i * (1.0 - i);
      dz(s, U + u) = dc * c_prev * f * (1.0 - f);
      dz(s, 2 * U + u) = dc * i * (1.0 - g * g);
      dz(s, 3 * U + u) = d_o * o * (1.0 - o);
      dc_next[u] = dc * f;
    }
    Eigen::Map<Eigen::RowVectorXd>(dh_next.data(), U).noalias() = dz.row(s) * w_rec.transpose();
  }

  // Reorder input rows to processing order for the weight products.
  RowMat x(T, D);
  const ConstMatMap seq_m(seq.data(), T, D);
  for (std::size_t s = 0; s < T; ++s) x.row(s) = seq_m.row(cache.reverse ? T - 1 - s : s);

  LstmGrads grads{Tensor({D, 4 * U}), Tensor({U, 4 * U}), Tensor({4 * U})};
  MatMap(grads.w_input.data(), D, 4 * U).noalias() = x.transpose() * dz;
  if (T > 1) {
    const ConstMatMap h(cache.hidden.data(), T, U);
    MatMap(grads.w_recurrent.data(), U, 4 * U).noalias() =
        h.topRows(T - 1).transpose() * dz.bottomRows(T - 1);
  }
  Eigen::Map<Eigen::RowVectorXd>(grads.bias.data(), 4 * U) = dz.colwise().sum();

  const RowMat dx = dz * ConstMatMap(p.w_input.data(), D, 4 * U).transpose();
  MatMap gs(grad_seq.data(), T, D);
  for (std::size_t s = 0; s < T; ++s) gs.row(cache.reverse ? T - 1 - s : s) += dx.row(s);
  return grads;
}

}  // namespace

std::size_t conv_output_size(std::size_t in, std::size_t pad_a, std::size_t pad_b,
                             std::size_t kernel, std::size_t stride) {
  return (in + pad_a + pad_b - kernel) / stride + 1;
}

std::size_t conv_transpose_output_size(std::size_t in, std::size_t crop_a, std::size_t crop_b,
                                       std::size_t kernel, std::size_t stride) {
  return (in - 1) * stride + kernel - crop_a - crop_b;
}

Padding inverse_padding(std::size_t in_h, std::size_t in_w, std::size_t kh, std::size_t kw,
                        const ConvGeometry& conv) {
  const auto& p = conv.padding;
  const std::size_t out_h = conv_output_size(in_h, p.top, p.bottom, kh, conv.stride_h);
  const std::size_t out_w = conv_output_size(in_w, p.left, p.right, kw, conv.stride_w);
  const long full_h = static_cast<long>((out_h - 1) * conv.stride_h + kh);
  const long full_w = static_cast<long>((out_w - 1) * conv.stride_w + kw);
  const long total_h = full_h - static_cast<long>(in_h);
  const long total_w = full_w - static_cast<long>(in_w);
  if (total_h < 0 || total_w < 0) {
    throw DimensionError("conv2d shape map " + std::to_string(in_h) + "x" + std::to_string(in_w) +
                         " cannot be inverted by a transpose convolution with the same kernel");
  }
  const auto top = std::min(static_cast<long>(p.top), total_h);
  const auto left = std::min(static_cast<long>(p.left), total_w);
  return Padding{static_cast<std::size_t>(top), static_cast<std::size_t>(total_h - top),
                 static_cast<std::size_t>(left), static_cast<std::size_t>(total_w - left)};
}

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias,
              const ConvGeometry& geom) {
  const PatchGrid g = conv_grid(input, kernels, geom);
  const std::size_t N = input.dim(0), F = kernels.dim(0);
  const bool with_bias = has_bias(bias, F, "conv2d");
  Tensor out({N, F, g.grid_h, g.grid_w});
  std::vector<double> col(g.rows() * g.cols());
  const ConstMatMap k(kernels.data(), F, g.rows());
  const std::size_t in_plane = g.channels * g.image_h * g.image_w;
  for (std::size_t n = 0; n < N; ++n) {
    im2col(input.data() + n * in_plane, g, col.data());
    double* dst = out.data() + n * F * g.cols();
    MatMap(dst, F, g.cols()).noalias() = k * ConstMatMap(col.data(), g.rows(), g.cols());
    if (with_bias) add_channel_bias(dst, bias, g.cols());
  }
  return out;
}

ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernels, const ConvGeometry& geom,
                          const Tensor& grad_output) {
  const PatchGrid g = conv_grid(input, kernels, geom);
  const std::size_t N = input.dim(0), F = kernels.dim(0);
  expect_shape(grad_output, {N, F, g.grid_h, g.grid_w}, "conv2d grad_output");
  ConvGrads grads{Tensor(input.shape()), Tensor(kernels.shape()), Tensor({F})};
  std::vector<double> col(g.rows() * g.cols());
  RowMat dcol(g.rows(), g.cols());
  const ConstMatMap k(kernels.data(), F, g.rows());
  MatMap dk(grads.kernels.data(), F, g.rows());
  const std::size_t in_plane = g.channels * g.image_h * g.image_w;
  for (std::size_t n = 0; n < N; ++n) {
    im2col(input.data() + n * in_plane, g, col.data());
    const ConstMatMap go(grad_output.data() + n * F * g.cols(), F, g.cols());
    dk.noalias() += go * ConstMatMap(col.data(), g.rows(), g.cols()).transpose();
    dcol.noalias() = k.transpose() * go;
    col2im_add(dcol.data(), g, grads.input.data() + n * in_plane);
    sum_channel_planes(go.data(), F, g.cols(), grads.bias);
  }
  return grads;
}

Tensor conv2d_transpose(const Tensor& input, const Tensor& kernels, const Tensor& bias,
                        const ConvGeometry& geom) {
  const PatchGrid g = transpose_grid(input, kernels, geom);
  const std::size_t N = input.dim(0), Cin = input.dim(1), Cout = g.channels;
  const bool with_bias = has_bias(bias, Cout, "conv2d_transpose");
  Tensor out({N, Cout, g.image_h, g.image_w});
  RowMat col(g.rows(), g.cols());
  const ConstMatMap k(kernels.data(), Cin, g.rows());
  const std::size_t out_plane = Cout * g.image_h * g.image_w;
  for (std::size_t n = 0; n < N; ++n) {
    col.noalias() = k.transpose() * ConstMatMap(input.data() + n * Cin * g.cols(), Cin, g.cols());
    double* dst = out.data() + n * out_plane;
    col2im_add(col.data(), g, dst);
    if (with_bias) add_channel_bias(dst, bias, g.image_h * g.image_w);
  }
  return out;
}

ConvGrads conv2d_transpose_backward(const Tensor& input, const Tensor& kernels,
                                    const ConvGeometry& geom, const Tensor& grad_output) {
  const PatchGrid g = transpose_grid(input, kernels, geom);
  const std::size_t N = input.dim(0), Cin = input.dim(1), Cout = g.channels;
  expect_shape(grad_output, {N, Cout, g.image_h, g.image_w}, "conv2d_transpose grad_output");
  ConvGrads grads{Tensor(input.shape()), Tensor(kernels.shape()), Tensor({Cout})};
  std::vector<double> col(g.rows() * g.cols());
  const ConstMatMap k(kernels.data(), Cin, g.rows());
  MatMap dk(grads.kernels.data(), Cin, g.rows());
  const std::size_t out_plane = Cout * g.image_h * g.image_w;
  for (std::size_t n = 0; n < N; ++n) {
    const double* go = grad_output.data() + n * out_plane;
    im2col(go, g, col.data());
    const ConstMatMap c(col.data(), g.rows(), g.cols());
    const ConstMatMap in(input.data() + n * Cin * g.cols(), Cin, g.cols());
    MatMap(grads.input.data() + n * Cin * g.cols(), Cin, g.cols()).noalias() = k * c;
    dk.noalias() += in * c.transpose();
    sum_channel_planes(go, Cout, g.image_h * g.image_w, grads.bias);
  }
  return grads;
}

Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias,
             Activation activation) {
  if (input.rank() < 1 || weights.rank() != 2) {
    throw DimensionError("dense: input must have rank >= 1 and weights rank 2");
  }
  const std::size_t D = weights.dim(0), K = weights.dim(1);
  if (input.shape().back() != D) {
    throw DimensionError("dense: input inner axis is " + std::to_string(input.shape().back()) +
                         " but weights axis 0 is " + std::to_string(D));
  }
  if (bias.size() != K) {
    throw DimensionError("dense: bias has " + std::to_string(bias.size()) + " entries, expected " +
                         std::to_string(K));
  }
  const std::size_t rows = input.size() / D;
  Shape out_shape = input.shape();
  out_shape.back() = K;
  Tensor out(out_shape);
  MatMap o(out.data(), rows, K);
  o.noalias() = ConstMatMap(input.data(), rows, D) * ConstMatMap(weights.data(), D, K);
  o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data(), K);
  if (activation == Activation::kRelu) {
    for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  }
  return out;
}

DenseGrads dense_backward(const Tensor& input, const Tensor& weights, const Tensor& output,
                          Activation activation, const Tensor& grad_output) {
  const std::size_t D = weights.dim(0), K = weights.dim(1);
  const std::size_t rows = input.size() / D;
  expect_shape(grad_output, output.shape(), "dense grad_output");
  RowMat g = ConstMatMap(grad_output.data(), rows, K);
  if (activation == Activation::kRelu) {
    const ConstMatMap o(output.data(), rows, K);
    g = (o.array() > 0.0).select(g, 0.0);
  }
  DenseGrads grads{Tensor(input.shape()), Tensor({D, K}), Tensor({K})};
  MatMap(grads.input.data(), rows, D).noalias() =
      g * ConstMatMap(weights.data(), D, K).transpose();
  MatMap(grads.weights.data(), D, K).noalias() =
      ConstMatMap(input.data(), rows, D).transpose() * g;
  Eigen::Map<Eigen::RowVectorXd>(grads.bias.data(), K) = g.colwise().sum();
  return grads;
}

Tensor relu(const Tensor& x) {
  Tensor out = x;
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& x, const Tensor& grad_output) {
  expect_shape(grad_output, x.shape(), "relu grad_output");
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > 0.0 ? grad_output[i] : 0.0;
  return g;
}

Tensor bilstm(const Tensor& sequence, const LstmParams& fwd, const LstmParams& bwd,
              BiLstmCache* cache) {
  check_rank(sequence, 2, "bilstm sequence");
  const std::size_t T = sequence.dim(0);
  if (T == 0) throw PreconditionError("bilstm: empty sequence (T = 0)");
  if (fwd.units() != bwd.units()) throw DimensionError("bilstm: direction unit counts differ");
  const std::size_t U = fwd.units();

  BiLstmCache local;
  BiLstmCache& c = cache ? *cache : local;
  c.input = sequence;
  lstm_forward(sequence, fwd, false, c.forward);
  lstm_forward(sequence, bwd, true, c.backward);

  Tensor out({T, 2 * U});
  for (std::size_t t = 0; t < T; ++t) {
    const double* hf = c.forward.hidden.data() + t * U;
    const double* hb = c.backward.hidden.data() + (T - 1 - t) * U;
    std::copy(hf, hf + U, out.data() + t * 2 * U);
    std::copy(hb, hb + U, out.data() + t * 2 * U + U);
  }
  return out;
}

BiLstmGrads bilstm_backward(const BiLstmCache& cache, const LstmParams& fwd,
                            const LstmParams& bwd, const Tensor& grad_output) {
  const std::size_t T = cache.input.dim(0), U = fwd.units();
  expect_shape(grad_output, {T, 2 * U}, "bilstm grad_output");
  BiLstmGrads grads;
  grads.input = Tensor(cache.input.shape());
  grads.forward = lstm_backward(cache.input, fwd, cache.forward, grad_output.data(), 2 * U,
                                grads.input);
  grads.backward = lstm_backward(cache.input, bwd, cache.backward, grad_output.data() + U, 2 * U,
                                 grads.input);
  return grads;
}

Tensor softmax_rows(const Tensor& logits) {
  check_rank(logits, 2, "softmax logits");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  Tensor out(logits.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const double* z = logits.data() + n * K;
    double* p = out.data() + n * K;
    const double m = *std::max_element(z, z + K);
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) sum += (p[k] = std::exp(z[k] - m));
    for (std::size_t k = 0; k < K; ++k) p[k] /= sum;
  }
  return out;
}

CrossEntropy softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  check_rank(logits, 2, "softmax_cross_entropy logits");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != N) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(N));
  }
  CrossEntropy ce;
  ce.grad = Tensor(logits.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= K) {
      throw PreconditionError("softmax_cross_entropy: label " + std::to_string(y) +
                              " outside [0," + std::to_string(K) + ")");
    }
    const double* z = logits.data() + n * K;
    double* g = ce.grad.data() + n * K;
    const double m = *std::max_element(z, z + K);
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) sum += std::exp(z[k] - m);
    const double log_sum = m + std::log(sum);
    ce.loss += log_sum - z[y];
    for (std::size_t k = 0; k < K; ++k) {
      g[k] = (std::exp(z[k] - log_sum) - (static_cast<int>(k) == y ? 1.0 : 0.0)) /
             static_cast<double>(N);
    }
  }
  ce.loss /= static_cast<double>(N);
  return ce;
}

Tensor attention_weights(const Tensor& hidden, const Tensor& w) {
  check_rank(hidden, 2, "attention hidden");
  const std::size_t T = hidden.dim(0), D = hidden.dim(1);
  if (T == 0) throw PreconditionError("attention: empty sequence");
  if (w.size() != D) {
    throw DimensionError("attention: weight vector has " + std::to_string(w.size()) +
                         " entries, hidden axis 1 is " + std::to_string(D));
  }
  Tensor scores({1, T});
  MatMap(scores.data(), 1, T).noalias() =
      (ConstMatMap(hidden.data(), T, D) * Eigen::Map<const Eigen::VectorXd>(w.data(), D))
          .transpose();
  return softmax_rows(scores).reshaped({T});
}

Tensor attention_pool(const Tensor& hidden, const Tensor& alpha) {
  check_rank(hidden, 2, "attention_pool hidden");
  const std::size_t T = hidden.dim(0), D = hidden.dim(1);
  if (alpha.size() != T) {
    throw DimensionError("attention_pool: " + std::to_string(alpha.size()) +
                         " weights for sequence length " + std::to_string(T));
  }
  Tensor out({D});
  Eigen::Map<Eigen::RowVectorXd>(out.data(), D).noalias() =
      Eigen::Map<const Eigen::RowVectorXd>(alpha.data(), T) * ConstMatMap(hidden.data(), T, D);
  return out;
}

AttentionGrads attention_backward(const Tensor& hidden, const Tensor& w, const Tensor& alpha,
                                  const Tensor& grad_pooled) {
  const std::size_t T = hidden.dim(0), D = hidden.dim(1);
  const ConstMatMap h(hidden.data(), T, D);
  const Eigen::Map<const Eigen::VectorXd> a(alpha.data(), T);
  const Eigen::Map<const Eigen::VectorXd> gr(grad_pooled.data(), D);
  const Eigen::VectorXd w_vec = Eigen::Map<const Eigen::VectorXd>(w.data(), D);

  const Eigen::VectorXd d_alpha = h * gr;
  const double mean = a.dot(d_alpha);
  const Eigen::VectorXd d_score = a.array() * (d_alpha.array() - mean);

  AttentionGrads grads{Tensor({T, D}), Tensor({D})};
  MatMap(grads.hidden.data(), T, D).noalias() = a * gr.transpose() + d_score * w_vec.transpose();
  Eigen::Map<Eigen::VectorXd>(grads.w.data(), D).noalias() = h.transpose() * d_score;
  return grads;
}

}  // namespace serann
