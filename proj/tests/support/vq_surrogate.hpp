#pragma once

// Differentiable stand-in for the VQ-VAE objective with the code assignment
// frozen at the current parameters. Its true gradient is what the
// straight-through estimator should produce at that point.

#include <cstdint>
#include <vector>

#include "serann/vqvae.hpp"

namespace serann::test {

class FrozenCodeSurrogate {
 public:
  FrozenCodeSurrogate(vqvae::VqVae& model, const Tensor& x) : model_(model), x_(x) {
    z0_ = model.encode(x);
    const vqvae::Quantized q = vqvae::quantize(z0_, model.codebook());
    codes_ = q.codes;
    e0_ = q.z_q;
  }

  double operator()() const {
    const std::size_t d = model_.config().code_dim;
    const auto positions = static_cast<double>(codes_.size());
    const Tensor z = model_.encode(x_);
    Tensor shifted(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) shifted[i] = z[i] + (e0_[i] - z0_[i]);
    const Tensor x_hat = model_.decode(shifted);
    long double recon = 0.0;
    for (std::size_t i = 0; i < x_.size(); ++i) recon += (x_[i] - x_hat[i]) * (x_[i] - x_hat[i]);
    recon /= static_cast<long double>(x_.size());

    const Tensor& book = model_.codebook();
    long double codebook = 0.0, commit = 0.0;
    for (std::size_t p = 0; p < codes_.size(); ++p) {
      for (std::size_t c = 0; c < d; ++c) {
        const double e = book[static_cast<std::size_t>(codes_[p]) * d + c];
        codebook += (z0_[p * d + c] - e) * (z0_[p * d + c] - e);
        commit += (z[p * d + c] - e0_[p * d + c]) * (z[p * d + c] - e0_[p * d + c]);
      }
    }
    return static_cast<double>(recon + codebook / positions + model_.config().beta * commit / positions);
  }

 private:
  vqvae::VqVae& model_;
  Tensor x_;
  Tensor z0_, e0_;
  std::vector<std::int32_t> codes_;
};

inline vqvae::VqVaeConfig toy_vqvae_config() {
  vqvae::VqVaeConfig c = vqvae::VqVaeConfig::desk();
  c.codebook_size = 6;
  c.code_dim = 3;
  c.channels = {1, 2, 2, 2};
  c.batch_size = 2;
  return c;
}

}  // namespace serann::test
