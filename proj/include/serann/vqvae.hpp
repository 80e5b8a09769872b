#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "serann/adam.hpp"
#include "serann/dsp.hpp"
#include "serann/ops.hpp"
#include "serann/tensor.hpp"

namespace serann::vqvae {

/// Number of latent positions per utterance (one per downsampled frame).
inline constexpr std::size_t kNumPositions = 64;

struct VqVaeConfig {
  std::size_t codebook_size = 8192;
  std::size_t code_dim = 512;
  /// Output channels of encoder layers 1-4; layer 5 outputs code_dim.
  std::array<std::size_t, 4> channels = {64, 128, 256, 512};
  std::size_t batch_size = 256;
  std::size_t epochs = 1000;
  double learning_rate = 1e-4;
  double beta = 0.25;

  /// Throws PreconditionError on any non-positive size or beta.
  void validate() const;

  static VqVaeConfig full();
  /// k=256, d=64, channels 4-32, 50 epochs, batch 32, learning rate 2e-3.
  static VqVaeConfig desk();

  std::string to_json() const;
  /// Missing keys keep the values of `base`.
  static VqVaeConfig from_json(const std::string& text, const VqVaeConfig& base = full());
};

/// Encoder geometry for layer i (0-based): kernel 3x3, padding 1.
ConvGeometry encoder_geometry(std::size_t layer);

struct Quantized {
  Tensor z_q;                  ///< same shape as z_e
  std::vector<std::int32_t> codes;  ///< one per position
};

/// Nearest codebook row by squared Euclidean distance for every position
/// (the last axis of z_e is the code dimension). Ties go to the lowest index.
Quantized quantize(const Tensor& z_e, const Tensor& codebook);

struct Losses {
  double recon = 0.0;
  double codebook = 0.0;
  double commitment = 0.0;
  double total = 0.0;
};

/// recon = mean((x - x_hat)^2); codebook = mean over positions of
/// ||z_e - e||^2; commitment = beta times the same quantity. The two latent
/// terms differ only in where their gradient flows.
Losses vqvae_losses(const Tensor& x, const Tensor& x_hat, const Tensor& z_e, const Tensor& e_selected,
                    double beta);

struct EncoderCache {
  std::vector<Tensor> inputs;  ///< input of each conv layer
  std::vector<Tensor> pre;     ///< conv outputs before ReLU
};

struct DecoderCache {
  std::vector<Tensor> inputs;
  std::vector<Tensor> pre;
};

/// Per-term gradients, recorded for inspecting the estimator.
struct GradientRoutes {
  Tensor grad_zq_recon;             ///< d recon / d z_q
  Tensor grad_ze_recon;             ///< what the estimator delivers to z_e
  Tensor grad_ze_codebook;          ///< d codebook_loss / d z_e (stop-gradient: zero)
  Tensor grad_ze_commitment;        ///< d commitment / d z_e
  Tensor grad_embeddings_codebook;  ///< d codebook_loss / d embeddings
  Tensor grad_embeddings_commitment;  ///< d commitment / d embeddings (zero)
  /// Encoder parameter gradients produced by each term alone, flattened.
  std::vector<double> encoder_from_recon;
  std::vector<double> encoder_from_codebook;
  std::vector<double> encoder_from_commitment;
};

class VqVae {
 public:
  VqVae(const VqVaeConfig& config, std::uint64_t seed);

  const VqVaeConfig& config() const { return config_; }
  ParameterList parameters();
  ParameterList encoder_parameters();
  ParameterList decoder_parameters();
  Tensor& codebook() { return codebook_; }
  const Tensor& codebook() const { return codebook_; }

  /// x [N,1,80,256] -> z_e [N,64,d].
  Tensor encode(const Tensor& x, EncoderCache* cache = nullptr) const;
  Tensor encode(const dsp::MelSpec& mel) const;
  /// z_q [N,64,d] -> x_hat [N,1,80,256].
  Tensor decode(const Tensor& z_q, DecoderCache* cache = nullptr) const;

  /// Gradients of the encoder input given d loss / d z_e [N,64,d]; accumulates
  /// parameter gradients.
  void encoder_backward(const EncoderCache& cache, const Tensor& grad_ze);
  /// Returns d loss / d z_q [N,64,d]; accumulates parameter gradients.
  Tensor decoder_backward(const DecoderCache& cache, const Tensor& grad_xhat);

  /// Forward and backward on a batch; parameter gradients are zeroed first
  /// and then hold d total / d theta under the straight-through estimator.
  Losses compute_gradients(const Tensor& x, GradientRoutes* routes = nullptr);
  /// Forward only.
  Losses evaluate(const Tensor& x) const;

  std::vector<std::int32_t> codes(const dsp::MelSpec& mel) const;

  void save(const std::filesystem::path& path) const;
  static VqVae load(const std::filesystem::path& path);

 private:
  VqVaeConfig config_;
  std::vector<Tensor> enc_w_, enc_b_;
  std::vector<Tensor> dec_w_, dec_b_;
  Tensor codebook_;
  std::vector<ConvGeometry> dec_geom_;
};

/// One Adam step on the batch. Throws NumericError if the loss is not finite.
Losses train_step(VqVae& model, const Tensor& x, AdamState& adam);

/// Stacks MelSpecs into [N,1,80,256].
Tensor stack_mels(const std::vector<const dsp::MelSpec*>& mels);

struct EpochStats {
  std::size_t epoch = 0;
  Losses train;       ///< mean over batches
  Losses validation;  ///< evaluated after the epoch; zero if no validation data
};

using EpochObserver = std::function<void(const EpochStats&)>;

/// Shuffled mini-batch training for config().epochs epochs.
std::vector<EpochStats> train(VqVae& model, const std::vector<dsp::MelSpec>& train_set,
                              const std::vector<dsp::MelSpec>& validation_set, std::uint64_t seed,
                              const EpochObserver& observer = {});

struct CodesRecord {
  std::string utterance_id;
  std::vector<std::int32_t> codes;
};

void write_codes(const std::filesystem::path& path, const std::vector<CodesRecord>& records);
std::vector<CodesRecord> read_codes(const std::filesystem::path& path);

}  // namespace serann::vqvae
