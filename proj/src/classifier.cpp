#include "serann/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>

#include "serann/checkpoint.hpp"
#include "serann/corpus.hpp"
#include "serann/error.hpp"
#include "serann/init.hpp"
#include "serann/rng.hpp"

namespace serann::classifier {

using nlohmann::json;

namespace {

constexpr std::size_t kStride = 2;

void accumulate(Tensor& param, const Tensor& grad) {
  auto g = param.grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += grad[i];
}

Tensor param(Shape shape) {
  Tensor t(std::move(shape));
  t.enable_grad();
  return t;
}

LstmParams make_lstm(std::size_t input_dim, std::size_t units, Rng& rng) {
  LstmParams p{param({input_dim, 4 * units}), param({units, 4 * units}), param({4 * units})};
  xavier_uniform(p.w_input, input_dim, 4 * units, rng);
  xavier_uniform(p.w_recurrent, units, 4 * units, rng);
  for (std::size_t u = 0; u < units; ++u) p.bias[units + u] = 1.0;  // forget gate
  return p;
}

// conv2 output [N,C,F,T] -> per-sample time-major sequence [T, C*F].
Tensor to_sequence(const Tensor& a, std::size_t n) {
  const std::size_t C = a.dim(1), F = a.dim(2), T = a.dim(3);
  Tensor seq({T, C * F});
  const double* src = a.data() + n * C * F * T;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t f = 0; f < F; ++f) {
      for (std::size_t t = 0; t < T; ++t) seq[t * C * F + c * F + f] = src[(c * F + f) * T + t];
    }
  }
  return seq;
}

void from_sequence(const Tensor& seq, std::size_t n, Tensor& a) {
  const std::size_t C = a.dim(1), F = a.dim(2), T = a.dim(3);
  double* dst = a.data() + n * C * F * T;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t f = 0; f < F; ++f) {
      for (std::size_t t = 0; t < T; ++t) dst[(c * F + f) * T + t] = seq[t * C * F + c * F + f];
    }
  }
}

Tensor stack(const std::vector<const dsp::MelSpec*>& mels) {
  constexpr std::size_t kCell = dsp::kMelBands * dsp::kMelFrames;
  Tensor out({mels.size(), 1, dsp::kMelBands, dsp::kMelFrames});
  for (std::size_t i = 0; i < mels.size(); ++i) {
    std::copy_n(mels[i]->tensor().data(), kCell, out.data() + i * kCell);
  }
  return out;
}

}  // namespace

void ClassifierConfig::validate() const {
  if (conv1_kernel % 2 == 0 || conv2_kernel % 2 == 0) {
    throw PreconditionError("convolution kernels must be odd");
  }
  if (conv1_kernel <= conv2_kernel) {
    throw PreconditionError("conv1 kernel must be larger than conv2 kernel");
  }
  if (classes != 4) throw PreconditionError("classes must be 4");
  if (conv1_filters == 0 || conv2_filters == 0 || blstm_units == 0 || dense_units == 0) {
    throw PreconditionError("layer widths must be positive");
  }
  if (batch_size == 0 || plateau_patience == 0 || max_epochs == 0) {
    throw PreconditionError("batch_size, plateau_patience and max_epochs must be positive");
  }
  if (!(lr_floor > 0.0) || !(lr_init > lr_floor) || !std::isfinite(lr_init)) {
    throw PreconditionError("learning rates must satisfy 0 < lr_floor < lr_init");
  }
  if (!(lr_decay > 0.0 && lr_decay < 1.0)) throw PreconditionError("lr_decay must be in (0, 1)");
}

ClassifierConfig ClassifierConfig::full() { return ClassifierConfig{}; }

ClassifierConfig ClassifierConfig::desk() {
  ClassifierConfig c;
  c.conv1_filters = 4;
  c.conv2_filters = 8;
  c.blstm_units = 8;
  c.dense_units = 16;
  c.batch_size = 8;
  c.lr_init = 2e-3;
  c.lr_floor = 2e-4;
  return c;
}

std::string ClassifierConfig::to_json() const {
  json j = {{"conv1_kernel", conv1_kernel},   {"conv1_filters", conv1_filters},
            {"conv2_kernel", conv2_kernel},   {"conv2_filters", conv2_filters},
            {"blstm_units", blstm_units},     {"dense_units", dense_units},
            {"classes", classes},             {"lr_init", lr_init},
            {"lr_floor", lr_floor},           {"lr_decay", lr_decay},
            {"plateau_patience", plateau_patience}, {"batch_size", batch_size},
            {"max_epochs", max_epochs}};
  return j.dump();
}

ClassifierConfig ClassifierConfig::from_json(const std::string& text, const ClassifierConfig& base) {
  ClassifierConfig c = base;
  try {
    const json j = json::parse(text);
    c.conv1_kernel = j.value("conv1_kernel", c.conv1_kernel);
    c.conv1_filters = j.value("conv1_filters", c.conv1_filters);
    c.conv2_kernel = j.value("conv2_kernel", c.conv2_kernel);
    c.conv2_filters = j.value("conv2_filters", c.conv2_filters);
    c.blstm_units = j.value("blstm_units", c.blstm_units);
    c.dense_units = j.value("dense_units", c.dense_units);
    c.classes = j.value("classes", c.classes);
    c.lr_init = j.value("lr_init", c.lr_init);
    c.lr_floor = j.value("lr_floor", c.lr_floor);
    c.lr_decay = j.value("lr_decay", c.lr_decay);
    c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
  } catch (const json::exception& e) {
    throw FormatError(std::string("invalid classifier config: ") + e.what());
  }
  c.validate();
  return c;
}

ConvGeometry conv_geometry(std::size_t kernel) {
  return {kStride, kStride, Padding::uniform(kernel / 2)};
}

Classifier::Classifier(const ClassifierConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t k1 = config_.conv1_kernel, k2 = config_.conv2_kernel;
  const std::size_t c1 = config_.conv1_filters, c2 = config_.conv2_filters;
  conv1_w_ = param({c1, 1, k1, k1});
  he_uniform(conv1_w_, k1 * k1, rng);
  conv1_b_ = param({c1});
  conv2_w_ = param({c2, c1, k2, k2});
  he_uniform(conv2_w_, c1 * k2 * k2, rng);
  conv2_b_ = param({c2});

  const std::size_t h1 = conv_output_size(dsp::kMelBands, k1 / 2, k1 / 2, k1, kStride);
  const std::size_t h2 = conv_output_size(h1, k2 / 2, k2 / 2, k2, kStride);
  const std::size_t u = config_.blstm_units;
  fwd_ = make_lstm(c2 * h2, u, rng);
  bwd_ = make_lstm(c2 * h2, u, rng);

  attention_w_ = param({2 * u});
  xavier_uniform(attention_w_, 2 * u, 1, rng);
  dense_w_ = param({2 * u, config_.dense_units});
  he_uniform(dense_w_, 2 * u, rng);
  dense_b_ = param({config_.dense_units});
  out_w_ = param({config_.dense_units, config_.classes});
  xavier_uniform(out_w_, config_.dense_units, config_.classes, rng);
  out_b_ = param({config_.classes});
}

ParameterList Classifier::parameters() {
  return {{"conv1.weight", &conv1_w_},
          {"conv1.bias", &conv1_b_},
          {"conv2.weight", &conv2_w_},
          {"conv2.bias", &conv2_b_},
          {"blstm.forward.w_input", &fwd_.w_input},
          {"blstm.forward.w_recurrent", &fwd_.w_recurrent},
          {"blstm.forward.bias", &fwd_.bias},
          {"blstm.backward.w_input", &bwd_.w_input},
          {"blstm.backward.w_recurrent", &bwd_.w_recurrent},
          {"blstm.backward.bias", &bwd_.bias},
          {"attention.w", &attention_w_},
          {"dense.weight", &dense_w_},
          {"dense.bias", &dense_b_},
          {"output.weight", &out_w_},
          {"output.bias", &out_b_}};
}

Tensor Classifier::forward(const Tensor& x, ForwardCache* cache) const {
  if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != dsp::kMelBands || x.dim(3) != dsp::kMelFrames) {
    throw DimensionError("classifier input must be [N,1,80,256], got " + shape_to_string(x.shape()));
  }
  const std::size_t n = x.dim(0);
  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c.input = x;
  c.conv1_pre = conv2d(x, conv1_w_, conv1_b_, conv_geometry(config_.conv1_kernel));
  c.conv1_out = relu(c.conv1_pre);
  c.conv2_pre = conv2d(c.conv1_out, conv2_w_, conv2_b_, conv_geometry(config_.conv2_kernel));
  c.conv2_out = relu(c.conv2_pre);

  const std::size_t width = 2 * config_.blstm_units;
  c.blstm.assign(n, {});
  c.hidden.assign(n, {});
  c.alpha.assign(n, {});
  c.pooled = Tensor({n, width});
  for (std::size_t i = 0; i < n; ++i) {
    c.hidden[i] = bilstm(to_sequence(c.conv2_out, i), fwd_, bwd_, &c.blstm[i]);
    c.alpha[i] = attention_weights(c.hidden[i], attention_w_);
    const Tensor r = attention_pool(c.hidden[i], c.alpha[i]);
    std::copy_n(r.data(), width, c.pooled.data() + i * width);
  }
  c.dense_out = dense(c.pooled, dense_w_, dense_b_, Activation::kRelu);
  c.logits = dense(c.dense_out, out_w_, out_b_, Activation::kNone);
  return c.logits;
}

std::vector<double> Classifier::forward(const dsp::MelSpec& mel) const {
  const Tensor logits = forward(stack({&mel}));
  return {logits.values().begin(), logits.values().end()};
}

void Classifier::backward(const ForwardCache& c, const Tensor& grad_logits) {
  const std::size_t n = c.input.dim(0);
  expect_shape(grad_logits, {n, config_.classes}, "classifier grad_logits");
  const DenseGrads out_g = dense_backward(c.dense_out, out_w_, c.logits, Activation::kNone, grad_logits);
  accumulate(out_w_, out_g.weights);
  accumulate(out_b_, out_g.bias);
  const DenseGrads dense_g = dense_backward(c.pooled, dense_w_, c.dense_out, Activation::kRelu, out_g.input);
  accumulate(dense_w_, dense_g.weights);
  accumulate(dense_b_, dense_g.bias);

  const std::size_t width = 2 * config_.blstm_units;
  Tensor grad_conv2(c.conv2_out.shape());
  for (std::size_t i = 0; i < n; ++i) {
    Tensor grad_r({width});
    std::copy_n(dense_g.input.data() + i * width, width, grad_r.data());
    const AttentionGrads ag = attention_backward(c.hidden[i], attention_w_, c.alpha[i], grad_r);
    accumulate(attention_w_, ag.w);
    const BiLstmGrads lg = bilstm_backward(c.blstm[i], fwd_, bwd_, ag.hidden);
    accumulate(fwd_.w_input, lg.forward.w_input);
    accumulate(fwd_.w_recurrent, lg.forward.w_recurrent);
    accumulate(fwd_.bias, lg.forward.bias);
    accumulate(bwd_.w_input, lg.backward.w_input);
    accumulate(bwd_.w_recurrent, lg.backward.w_recurrent);
    accumulate(bwd_.bias, lg.backward.bias);
    from_sequence(lg.input, i, grad_conv2);
  }

  const ConvGrads g2 = conv2d_backward(c.conv1_out, conv2_w_, conv_geometry(config_.conv2_kernel),
                                       relu_backward(c.conv2_pre, grad_conv2));
  accumulate(conv2_w_, g2.kernels);
  accumulate(conv2_b_, g2.bias);
  const ConvGrads g1 = conv2d_backward(c.input, conv1_w_, conv_geometry(config_.conv1_kernel),
                                       relu_backward(c.conv1_pre, g2.input));
  accumulate(conv1_w_, g1.kernels);
  accumulate(conv1_b_, g1.bias);
}

double Classifier::compute_gradients(const Tensor& x, std::span<const int> labels) {
  zero_grads(parameters());
  ForwardCache cache;
  const Tensor logits = forward(x, &cache);
  const CrossEntropy ce = softmax_cross_entropy(logits, labels);
  if (!std::isfinite(ce.loss)) throw NumericError("classifier loss is not finite");
  backward(cache, ce.grad);
  return ce.loss;
}

void Classifier::save(const std::filesystem::path& path) const {
  json meta = {{"kind", "classifier"}, {"config", json::parse(config_.to_json())}};
  auto& self = const_cast<Classifier&>(*this);
  write_container(path, parameters_to_container(self.parameters(), meta.dump()));
}

Classifier Classifier::load(const std::filesystem::path& path) {
  const Container c = read_container(path);
  json meta;
  try {
    meta = json::parse(c.metadata);
  } catch (const json::exception&) {
    throw FormatError(path.string() + ": unreadable checkpoint metadata");
  }
  if (meta.value("kind", "") != "classifier" || !meta.contains("config")) {
    throw FormatError(path.string() + " is not a classifier checkpoint");
  }
  Classifier model(ClassifierConfig::from_json(meta.at("config").dump()), 0);
  load_parameters(c, model.parameters());
  return model;
}

Classifier Classifier::load(const std::filesystem::path& path, const ClassifierConfig& expected) {
  Classifier model = load(path);
  if (!(model.config() == expected)) {
    throw PreconditionError(path.string() + ": checkpoint config " + model.config().to_json() +
                            " does not match " + expected.to_json());
  }
  return model;
}

PlateauSchedule::PlateauSchedule(const ClassifierConfig& config)
    : lr_init_(config.lr_init),
      lr_floor_(config.lr_floor),
      lr_decay_(config.lr_decay),
      patience_(config.plateau_patience),
      lr_(config.lr_init) {
  config.validate();
}

PlateauSchedule::Action PlateauSchedule::observe(double val_uar) {
  if (!std::isfinite(val_uar)) throw NumericError("validation UAR is not finite");
  ++epoch_;
  const bool improved = best_epoch_ == 0 || val_uar > best_;
  if (improved) {
    best_ = val_uar;
    best_epoch_ = epoch_;
  }
  if (!phase_best_ || val_uar > *phase_best_) {
    phase_best_ = val_uar;
    stagnant_ = 0;
    return improved ? Action::kImproved : Action::kContinue;
  }
  if (++stagnant_ < patience_) return Action::kContinue;
  lr_ *= lr_decay_;
  ++decays_;
  stagnant_ = 0;
  phase_best_.reset();
  return lr_ < lr_floor_ ? Action::kStop : Action::kDecay;
}

void write_history(std::ostream& out, const std::vector<EpochRecord>& history) {
  for (const EpochRecord& r : history) {
    out << json{{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_uar", r.val_uar}, {"lr", r.lr}}.dump()
        << '\n';
  }
}

void write_history(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  write_history(out, history);
}

int argmax(std::span<const double> values) {
  if (values.empty()) throw PreconditionError("argmax of an empty range");
  return static_cast<int>(std::max_element(values.begin(), values.end()) - values.begin());
}

std::vector<Prediction> predict(const Classifier& model, const std::vector<const dsp::MelSpec*>& mels) {
  std::vector<Prediction> out;
  out.reserve(mels.size());
  const std::size_t bs = model.config().batch_size;
  const std::size_t k = model.config().classes;
  for (std::size_t start = 0; start < mels.size(); start += bs) {
    const std::vector<const dsp::MelSpec*> batch(mels.begin() + static_cast<std::ptrdiff_t>(start),
                                                 mels.begin() + static_cast<std::ptrdiff_t>(std::min(mels.size(), start + bs)));
    const Tensor logits = model.forward(stack(batch));
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Prediction p;
      p.logits.assign(logits.data() + i * k, logits.data() + (i + 1) * k);
      p.label = argmax(p.logits);
      out.push_back(std::move(p));
    }
  }
  return out;
}

double evaluate_uar(const Classifier& model, const std::vector<Sample>& set) {
  std::vector<const dsp::MelSpec*> mels;
  mels.reserve(set.size());
  for (const Sample& s : set) mels.push_back(s.mel);
  const std::vector<Prediction> preds = predict(model, mels);
  corpus::ConfusionMatrix cm(model.config().classes);
  for (std::size_t i = 0; i < set.size(); ++i) cm.add(static_cast<std::size_t>(set[i].label), static_cast<std::size_t>(preds[i].label));
  return corpus::uar(cm, corpus::ZeroSupport::kSkip);
}

TrainResult train(Classifier& model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  std::uint64_t seed, const TrainHooks& hooks) {
  const ClassifierConfig& cfg = model.config();
  if (train_set.empty()) throw PreconditionError("classifier training set is empty");
  if (val_set.empty() && !hooks.validate) throw PreconditionError("classifier validation set is empty");
  std::set<int> classes;
  for (const Sample& s : train_set) {
    if (s.mel == nullptr) throw PreconditionError("training sample without a spectrogram");
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= cfg.classes) {
      throw PreconditionError("training label out of range: " + std::to_string(s.label));
    }
    classes.insert(s.label);
  }
  if (classes.size() < 2) throw DegenerateDataError("training labels cover a single class");

  const ParameterList params = model.parameters();
  AdamState adam;
  PlateauSchedule schedule(cfg);
  ParameterSnapshot best = snapshot(params);
  Rng rng(mix_seed(seed, 0x7261696eULL));
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainResult result;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = schedule.learning_rate();
    adam.learning_rate = rec.lr;
    if (!hooks.skip_updates) {
      rng.shuffle(std::span<std::size_t>(order));
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), start + cfg.batch_size);
        std::vector<const dsp::MelSpec*> mels;
        std::vector<int> labels;
        for (std::size_t i = start; i < end; ++i) {
          mels.push_back(train_set[order[i]].mel);
          labels.push_back(train_set[order[i]].label);
        }
        const double loss = model.compute_gradients(stack(mels), labels);
        adam_step(params, adam);
        rec.train_loss += loss * static_cast<double>(end - start) / static_cast<double>(order.size());
      }
    }
    rec.val_uar = hooks.validate ? hooks.validate(model, epoch) : evaluate_uar(model, val_set);
    const PlateauSchedule::Action action = schedule.observe(rec.val_uar);
    if (action == PlateauSchedule::Action::kImproved) best = snapshot(params);
    if (action == PlateauSchedule::Action::kDecay || action == PlateauSchedule::Action::kStop) {
      restore(params, best);
    }
    result.history.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec, schedule, action, model);
    if (action == PlateauSchedule::Action::kStop) {
      result.stop = StopReason::kLrFloor;
      break;
    }
  }
  restore(params, best);
  result.best_epoch = schedule.best_epoch();
  result.best_val_uar = schedule.best_val_uar();
  result.decays = schedule.decays();
  return result;
}

}  // namespace serann::classifier
