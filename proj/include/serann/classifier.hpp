#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "serann/adam.hpp"
#include "serann/dsp.hpp"
#include "serann/ops.hpp"
#include "serann/tensor.hpp"

namespace serann::classifier {

struct ClassifierConfig {
  std::size_t conv1_kernel = 7;
  std::size_t conv1_filters = 32;
  std::size_t conv2_kernel = 3;
  std::size_t conv2_filters = 64;
  std::size_t blstm_units = 128;
  std::size_t dense_units = 128;
  std::size_t classes = 4;
  double lr_init = 1e-4;
  double lr_floor = 1e-5;
  double lr_decay = 0.5;
  std::size_t plateau_patience = 5;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 300;

  /// Throws PreconditionError unless kernels are odd with conv1 > conv2,
  /// classes == 4, sizes are positive and 0 < lr_floor < lr_init, 0 < decay < 1.
  void validate() const;

  static ClassifierConfig full();
  /// Filters 4/8, BLSTM 8, dense 16, batch 8, lr 2e-3 with floor 2e-4.
  static ClassifierConfig desk();

  std::string to_json() const;
  /// Missing keys keep the values of `base`.
  static ClassifierConfig from_json(const std::string& text, const ClassifierConfig& base = full());

  bool operator==(const ClassifierConfig&) const = default;
};

/// Both convolutions: stride 2, padding kernel/2 on every edge.
ConvGeometry conv_geometry(std::size_t kernel);

struct ForwardCache {
  Tensor input;                    ///< [N,1,80,256]
  Tensor conv1_pre, conv1_out;     ///< [N,C1,40,128]
  Tensor conv2_pre, conv2_out;     ///< [N,C2,20,64]
  std::vector<BiLstmCache> blstm;  ///< one per sample
  std::vector<Tensor> hidden;      ///< BLSTM outputs [T,2U] per sample
  std::vector<Tensor> alpha;       ///< attention weights [T] per sample
  Tensor pooled;                   ///< [N,2U]
  Tensor dense_out;                ///< [N,dense_units], post-ReLU
  Tensor logits;                   ///< [N,4]
};

class Classifier {
 public:
  Classifier(const ClassifierConfig& config, std::uint64_t seed);

  const ClassifierConfig& config() const { return config_; }
  ParameterList parameters();

  /// x [N,1,80,256] -> logits [N,4].
  Tensor forward(const Tensor& x, ForwardCache* cache = nullptr) const;
  /// Logits for one utterance, length 4.
  std::vector<double> forward(const dsp::MelSpec& mel) const;

  /// Accumulates parameter gradients from d loss / d logits [N,4].
  void backward(const ForwardCache& cache, const Tensor& grad_logits);

  /// Zeroes the gradients, then mean cross-entropy loss and its gradient.
  double compute_gradients(const Tensor& x, std::span<const int> labels);

  /// Metadata holds {"kind":"classifier","config":...}.
  void save(const std::filesystem::path& path) const;
  static Classifier load(const std::filesystem::path& path);
  /// Throws PreconditionError if the checkpoint was saved under another config.
  static Classifier load(const std::filesystem::path& path, const ClassifierConfig& expected);

 private:
  ClassifierConfig config_;
  Tensor conv1_w_, conv1_b_, conv2_w_, conv2_b_;
  LstmParams fwd_, bwd_;
  Tensor attention_w_;
  Tensor dense_w_, dense_b_, out_w_, out_b_;
};

/// Reduce-on-plateau learning rate with reversion to the best weights.
///
/// Patience is counted within the current learning-rate phase: the first
/// epoch of a phase sets the phase reference, and the phase decays once
/// `plateau_patience` further epochs fail to beat it. The weights restored on
/// a decay are those of the best epoch overall.
class PlateauSchedule {
 public:
  enum class Action { kImproved, kContinue, kDecay, kStop };

  explicit PlateauSchedule(const ClassifierConfig& config);

  /// Feeds one epoch's validation score.
  Action observe(double val_uar);

  double learning_rate() const { return lr_; }
  std::size_t decays() const { return decays_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t epochs_since_improvement() const { return stagnant_; }
  double best_val_uar() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }

 private:
  double lr_init_, lr_floor_, lr_decay_;
  std::size_t patience_;
  double lr_;
  std::size_t decays_ = 0;
  std::size_t epoch_ = 0;
  std::size_t stagnant_ = 0;
  double best_ = 0.0;
  std::size_t best_epoch_ = 0;
  std::optional<double> phase_best_;
};

struct Sample {
  const dsp::MelSpec* mel = nullptr;
  int label = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_uar = 0.0;
  double lr = 0.0;  ///< rate used during the epoch
};

void write_history(std::ostream& out, const std::vector<EpochRecord>& history);
void write_history(const std::filesystem::path& path, const std::vector<EpochRecord>& history);

struct TrainHooks {
  /// Replaces the validation-UAR computation when set.
  std::function<double(const Classifier&, std::size_t epoch)> validate;
  /// Called after the schedule has acted on each epoch.
  std::function<void(const EpochRecord&, const PlateauSchedule&, PlateauSchedule::Action,
                     Classifier&)>
      on_epoch;
  /// Skips the gradient updates; used to exercise the schedule in isolation.
  bool skip_updates = false;
};

enum class StopReason { kLrFloor, kMaxEpochs };

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_uar = 0.0;
  std::size_t decays = 0;
  StopReason stop = StopReason::kMaxEpochs;
};

/// Mini-batch Adam on cross-entropy; validation UAR after every epoch drives
/// the plateau schedule. Leaves `model` at the best checkpoint. Throws
/// PreconditionError on an empty split and DegenerateDataError if the
/// training labels cover a single class.
TrainResult train(Classifier& model, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val_set, std::uint64_t seed,
                  const TrainHooks& hooks = {});

/// Validation UAR, classes absent from `set` skipped.
double evaluate_uar(const Classifier& model, const std::vector<Sample>& set);

struct Prediction {
  int label = 0;
  std::vector<double> logits;
};

std::vector<Prediction> predict(const Classifier& model, const std::vector<const dsp::MelSpec*>& mels);

/// First index of the maximum.
int argmax(std::span<const double> values);

}  // namespace serann::classifier
