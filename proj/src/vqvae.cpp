#include "serann/vqvae.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <set>

#include "serann/checkpoint.hpp"
#include "serann/error.hpp"
#include "serann/init.hpp"
#include "serann/rng.hpp"

namespace serann::vqvae {

using nlohmann::json;

namespace {

constexpr std::size_t kLayers = 5;
constexpr std::array<std::size_t, kLayers> kStrideH = {2, 2, 2, 2, 5};
constexpr std::array<std::size_t, kLayers> kStrideW = {2, 2, 1, 1, 1};
// Input height/width seen by each encoder layer.
constexpr std::array<std::size_t, kLayers> kInH = {80, 40, 20, 10, 5};
constexpr std::array<std::size_t, kLayers> kInW = {256, 128, 64, 64, 64};

void accumulate(Tensor& param, const Tensor& grad) {
  auto g = param.grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += grad[i];
}

// [N,d,1,64] <-> [N,64,d]
Tensor grid_to_positions(const Tensor& grid) {
  const std::size_t n = grid.dim(0), d = grid.dim(1), w = grid.dim(3);
  Tensor out({n, w, d});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t c = 0; c < d; ++c) {
      for (std::size_t p = 0; p < w; ++p) out[(b * w + p) * d + c] = grid[(b * d + c) * w + p];
    }
  }
  return out;
}

Tensor positions_to_grid(const Tensor& pos) {
  const std::size_t n = pos.dim(0), w = pos.dim(1), d = pos.dim(2);
  Tensor out({n, d, 1, w});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t c = 0; c < d; ++c) {
      for (std::size_t p = 0; p < w; ++p) out[(b * d + c) * w + p] = pos[(b * w + p) * d + c];
    }
  }
  return out;
}

std::vector<double> grads_of(const ParameterList& params) {
  std::vector<double> out;
  for (const auto& p : params) {
    const auto g = p.tensor->grad();
    out.insert(out.end(), g.begin(), g.end());
  }
  return out;
}

}  // namespace

void VqVaeConfig::validate() const {
  if (codebook_size == 0) throw PreconditionError("codebook_size must be positive");
  if (code_dim == 0) throw PreconditionError("code_dim must be positive");
  for (std::size_t c : channels) {
    if (c == 0) throw PreconditionError("encoder channel widths must be positive");
  }
  if (batch_size == 0) throw PreconditionError("batch_size must be positive");
  if (!(beta > 0.0) || !std::isfinite(beta)) throw PreconditionError("beta must be positive");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw PreconditionError("learning_rate must be non-negative");
  }
}

VqVaeConfig VqVaeConfig::full() { return VqVaeConfig{}; }

VqVaeConfig VqVaeConfig::desk() {
  VqVaeConfig c;
  c.codebook_size = 256;
  c.code_dim = 64;
  c.channels = {4, 8, 16, 32};
  c.batch_size = 32;
  c.epochs = 50;
  c.learning_rate = 2e-3;
  return c;
}

std::string VqVaeConfig::to_json() const {
  json j = {{"codebook_size", codebook_size}, {"code_dim", code_dim}, {"channels", channels},
            {"batch_size", batch_size},       {"epochs", epochs},     {"learning_rate", learning_rate},
            {"beta", beta}};
  return j.dump();
}

VqVaeConfig VqVaeConfig::from_json(const std::string& text, const VqVaeConfig& base) {
  VqVaeConfig c = base;
  try {
    const json j = json::parse(text);
    c.codebook_size = j.value("codebook_size", c.codebook_size);
    c.code_dim = j.value("code_dim", c.code_dim);
    if (j.contains("channels")) c.channels = j.at("channels").get<std::array<std::size_t, 4>>();
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.beta = j.value("beta", c.beta);
  } catch (const json::exception& e) {
    throw FormatError(std::string("invalid VQ-VAE config: ") + e.what());
  }
  c.validate();
  return c;
}

ConvGeometry encoder_geometry(std::size_t layer) {
  return {kStrideH.at(layer), kStrideW.at(layer), Padding::uniform(1)};
}

Quantized quantize(const Tensor& z_e, const Tensor& codebook) {
  if (codebook.rank() != 2 || codebook.dim(0) == 0) throw PreconditionError("quantize: empty codebook");
  const std::size_t k = codebook.dim(0), d = codebook.dim(1);
  if (z_e.rank() == 0 || z_e.shape().back() != d) {
    throw DimensionError("quantize: z_e inner dimension " + shape_to_string(z_e.shape()) +
                         " does not match code dimension " + std::to_string(d));
  }
  ensure_finite(z_e, "z_e");
  const std::size_t positions = z_e.size() / d;
  Quantized q{Tensor(z_e.shape()), std::vector<std::int32_t>(positions)};
  for (std::size_t p = 0; p < positions; ++p) {
    const double* z = z_e.data() + p * d;
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const double* e = codebook.data() + j * d;
      double dist = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = z[c] - e[c];
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        arg = j;
      }
    }
    q.codes[p] = static_cast<std::int32_t>(arg);
    std::copy_n(codebook.data() + arg * d, d, q.z_q.data() + p * d);
  }
  return q;
}

Losses vqvae_losses(const Tensor& x, const Tensor& x_hat, const Tensor& z_e, const Tensor& e_selected,
                    double beta) {
  if (x.shape() != x_hat.shape()) {
    throw DimensionError("vqvae_losses: x " + shape_to_string(x.shape()) + " vs x_hat " +
                         shape_to_string(x_hat.shape()));
  }
  if (z_e.shape() != e_selected.shape() || z_e.rank() == 0) {
    throw DimensionError("vqvae_losses: z_e " + shape_to_string(z_e.shape()) + " vs embeddings " +
                         shape_to_string(e_selected.shape()));
  }
  Losses l;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double diff = x[i] - x_hat[i];
    l.recon += diff * diff;
  }
  l.recon /= static_cast<double>(x.size());
  double latent = 0.0;
  for (std::size_t i = 0; i < z_e.size(); ++i) {
    const double diff = z_e[i] - e_selected[i];
    latent += diff * diff;
  }
  latent /= static_cast<double>(z_e.size() / z_e.shape().back());
  l.codebook = latent;
  l.commitment = beta * latent;
  l.total = l.recon + l.codebook + l.commitment;
  if (!std::isfinite(l.total)) {
    throw NumericError("non-finite VQ-VAE loss (recon " + std::to_string(l.recon) + ", latent " +
                       std::to_string(latent) + ")");
  }
  return l;
}

VqVae::VqVae(const VqVaeConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const auto& ch = config_.channels;
  const std::array<std::size_t, kLayers + 1> widths = {1, ch[0], ch[1], ch[2], ch[3], config_.code_dim};

  for (std::size_t l = 0; l < kLayers; ++l) {
    Tensor w({widths[l + 1], widths[l], 3, 3});
    if (l + 1 < kLayers) {
      he_uniform(w, widths[l] * 9, rng);
    } else {
      xavier_uniform(w, widths[l] * 9, widths[l + 1] * 9, rng);
    }
    w.enable_grad();
    Tensor b({widths[l + 1]});
    b.enable_grad();
    enc_w_.push_back(std::move(w));
    enc_b_.push_back(std::move(b));
  }

  // Decoder layer j undoes encoder layer 4 - j. The first one needs a 5-high
  // kernel to grow the single latent row back to 5 rows.
  for (std::size_t j = 0; j < kLayers; ++j) {
    const std::size_t l = kLayers - 1 - j;
    const std::size_t cin = widths[l + 1], cout = widths[l];
    const std::size_t kh = j == 0 ? 5 : 3;
    ConvGeometry g = encoder_geometry(l);
    if (j == 0) g.padding = {0, 0, 1, 1};
    g.padding = inverse_padding(kInH[l], kInW[l], kh, 3, g);
    dec_geom_.push_back(g);
    Tensor w({cin, cout, kh, 3});
    const std::size_t fan_in = std::max<std::size_t>(1, cin * kh * 3 / (g.stride_h * g.stride_w));
    if (j + 1 < kLayers) {
      he_uniform(w, fan_in, rng);
    } else {
      xavier_uniform(w, fan_in, cout * kh * 3, rng);
    }
    w.enable_grad();
    Tensor b({cout});
    b.enable_grad();
    dec_w_.push_back(std::move(w));
    dec_b_.push_back(std::move(b));
  }

  const double bound = 1.0 / static_cast<double>(config_.codebook_size);
  codebook_ = Tensor({config_.codebook_size, config_.code_dim});
  uniform_fill(codebook_, -bound, bound, rng);
  codebook_.enable_grad();
  std::set<std::vector<double>> rows;
  for (std::size_t r = 0; r < config_.codebook_size; ++r) {
    const double* row = codebook_.data() + r * config_.code_dim;
    if (!rows.emplace(row, row + config_.code_dim).second) {
      throw NumericError("codebook initialisation produced duplicate rows");
    }
  }
}

ParameterList VqVae::encoder_parameters() {
  ParameterList p;
  for (std::size_t l = 0; l < kLayers; ++l) {
    p.push_back({"encoder." + std::to_string(l) + ".weight", &enc_w_[l]});
    p.push_back({"encoder." + std::to_string(l) + ".bias", &enc_b_[l]});
  }
  return p;
}

ParameterList VqVae::decoder_parameters() {
  ParameterList p;
  for (std::size_t j = 0; j < kLayers; ++j) {
    p.push_back({"decoder." + std::to_string(j) + ".weight", &dec_w_[j]});
    p.push_back({"decoder." + std::to_string(j) + ".bias", &dec_b_[j]});
  }
  return p;
}

ParameterList VqVae::parameters() {
  ParameterList p = encoder_parameters();
  for (auto& d : decoder_parameters()) p.push_back(d);
  p.push_back({"codebook", &codebook_});
  return p;
}

Tensor VqVae::encode(const Tensor& x, EncoderCache* cache) const {
  if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != dsp::kMelBands || x.dim(3) != dsp::kMelFrames) {
    throw DimensionError("VQ-VAE encoder expects [N,1,80,256], got " + shape_to_string(x.shape()));
  }
  Tensor h = x;
  for (std::size_t l = 0; l < kLayers; ++l) {
    Tensor pre = conv2d(h, enc_w_[l], enc_b_[l], encoder_geometry(l));
    if (cache) {
      cache->inputs.push_back(std::move(h));
      cache->pre.push_back(pre);
    }
    h = l + 1 < kLayers ? relu(pre) : std::move(pre);
  }
  return grid_to_positions(h);
}

Tensor VqVae::encode(const dsp::MelSpec& mel) const {
  return encode(mel.tensor().reshaped({1, 1, dsp::kMelBands, dsp::kMelFrames}));
}

Tensor VqVae::decode(const Tensor& z_q, DecoderCache* cache) const {
  if (z_q.rank() != 3 || z_q.dim(1) != kNumPositions || z_q.dim(2) != config_.code_dim) {
    throw DimensionError("VQ-VAE decoder expects [N,64," + std::to_string(config_.code_dim) + "], got " +
                         shape_to_string(z_q.shape()));
  }
  Tensor h = positions_to_grid(z_q);
  for (std::size_t j = 0; j < kLayers; ++j) {
    Tensor pre = conv2d_transpose(h, dec_w_[j], dec_b_[j], dec_geom_[j]);
    if (cache) {
      cache->inputs.push_back(std::move(h));
      cache->pre.push_back(pre);
    }
    h = j + 1 < kLayers ? relu(pre) : std::move(pre);
  }
  return h;
}

void VqVae::encoder_backward(const EncoderCache& cache, const Tensor& grad_ze) {
  Tensor grad = positions_to_grid(grad_ze);
  for (std::size_t l = kLayers; l-- > 0;) {
    if (l + 1 < kLayers) grad = relu_backward(cache.pre[l], grad);
    ConvGrads g = conv2d_backward(cache.inputs[l], enc_w_[l], encoder_geometry(l), grad);
    accumulate(enc_w_[l], g.kernels);
    accumulate(enc_b_[l], g.bias);
    grad = std::move(g.input);
  }
}

Tensor VqVae::decoder_backward(const DecoderCache& cache, const Tensor& grad_xhat) {
  Tensor grad = grad_xhat;
  for (std::size_t j = kLayers; j-- > 0;) {
    if (j + 1 < kLayers) grad = relu_backward(cache.pre[j], grad);
    ConvGrads g = conv2d_transpose_backward(cache.inputs[j], dec_w_[j], dec_geom_[j], grad);
    accumulate(dec_w_[j], g.kernels);
    accumulate(dec_b_[j], g.bias);
    grad = std::move(g.input);
  }
  return grid_to_positions(grad);
}

Losses VqVae::compute_gradients(const Tensor& x, GradientRoutes* routes) {
  const ParameterList params = parameters();
  zero_grads(params);
  EncoderCache ec;
  const Tensor z_e = encode(x, &ec);
  const Quantized q = quantize(z_e, codebook_);
  DecoderCache dc;
  const Tensor x_hat = decode(q.z_q, &dc);
  const Losses losses = vqvae_losses(x, x_hat, z_e, q.z_q, config_.beta);

  Tensor grad_xhat(x_hat.shape());
  const double scale = 2.0 / static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) grad_xhat[i] = scale * (x_hat[i] - x[i]);
  const Tensor grad_zq = decoder_backward(dc, grad_xhat);

  const std::size_t d = config_.code_dim;
  const double positions = static_cast<double>(q.codes.size());
  Tensor grad_ze_commit(z_e.shape());
  Tensor grad_codebook(codebook_.shape());
  for (std::size_t i = 0; i < z_e.size(); ++i) {
    grad_ze_commit[i] = 2.0 * config_.beta * (z_e[i] - q.z_q[i]) / positions;
  }
  for (std::size_t p = 0; p < q.codes.size(); ++p) {
    double* row = grad_codebook.data() + static_cast<std::size_t>(q.codes[p]) * d;
    for (std::size_t c = 0; c < d; ++c) row[c] += 2.0 * (q.z_q[p * d + c] - z_e[p * d + c]) / positions;
  }

  // Straight-through: the reconstruction gradient at z_q is handed to z_e as is.
  const Tensor& grad_ze_recon = grad_zq;
  Tensor grad_ze(z_e.shape());
  for (std::size_t i = 0; i < z_e.size(); ++i) grad_ze[i] = grad_ze_recon[i] + grad_ze_commit[i];

  if (routes) {
    const ParameterList enc = encoder_parameters();
    const Tensor zero_ze(z_e.shape());
    const auto encoder_grads_for = [&](const Tensor& g) {
      zero_grads(enc);
      encoder_backward(ec, g);
      return grads_of(enc);
    };
    routes->grad_zq_recon = grad_zq;
    routes->grad_ze_recon = grad_ze_recon;
    routes->grad_ze_codebook = zero_ze;
    routes->grad_ze_commitment = grad_ze_commit;
    routes->grad_embeddings_codebook = grad_codebook;
    routes->grad_embeddings_commitment = Tensor(codebook_.shape());
    routes->encoder_from_recon = encoder_grads_for(grad_ze_recon);
    routes->encoder_from_codebook = encoder_grads_for(zero_ze);
    routes->encoder_from_commitment = encoder_grads_for(grad_ze_commit);
    zero_grads(enc);
  }

  encoder_backward(ec, grad_ze);
  accumulate(codebook_, grad_codebook);
  return losses;
}

Losses VqVae::evaluate(const Tensor& x) const {
  const Tensor z_e = encode(x);
  const Quantized q = quantize(z_e, codebook_);
  return vqvae_losses(x, decode(q.z_q), z_e, q.z_q, config_.beta);
}

std::vector<std::int32_t> VqVae::codes(const dsp::MelSpec& mel) const { return quantize(encode(mel), codebook_).codes; }

void VqVae::save(const std::filesystem::path& path) const {
  json meta = {{"kind", "vqvae"}, {"config", json::parse(config_.to_json())}};
  auto& self = const_cast<VqVae&>(*this);
  write_container(path, parameters_to_container(self.parameters(), meta.dump()));
}

VqVae VqVae::load(const std::filesystem::path& path) {
  const Container c = read_container(path);
  json meta;
  try {
    meta = json::parse(c.metadata);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": unreadable checkpoint metadata");
  }
  if (meta.value("kind", "") != "vqvae") throw FormatError(path.string() + " is not a VQ-VAE checkpoint");
  VqVae model(VqVaeConfig::from_json(meta.at("config").dump()), 0);
  load_parameters(c, model.parameters());
  return model;
}

Losses train_step(VqVae& model, const Tensor& x, AdamState& adam) {
  const Losses l = model.compute_gradients(x);
  adam_step(model.parameters(), adam);
  return l;
}

Tensor stack_mels(const std::vector<const dsp::MelSpec*>& mels) {
  constexpr std::size_t kCell = dsp::kMelBands * dsp::kMelFrames;
  Tensor out({mels.size(), 1, dsp::kMelBands, dsp::kMelFrames});
  for (std::size_t i = 0; i < mels.size(); ++i) {
    std::copy_n(mels[i]->tensor().data(), kCell, out.data() + i * kCell);
  }
  return out;
}

namespace {

void add_scaled(Losses& acc, const Losses& l, double w) {
  acc.recon += w * l.recon;
  acc.codebook += w * l.codebook;
  acc.commitment += w * l.commitment;
  acc.total += w * l.total;
}

Losses evaluate_set(const VqVae& model, const std::vector<dsp::MelSpec>& set) {
  Losses acc;
  const std::size_t bs = model.config().batch_size;
  for (std::size_t start = 0; start < set.size(); start += bs) {
    std::vector<const dsp::MelSpec*> batch;
    for (std::size_t i = start; i < std::min(set.size(), start + bs); ++i) batch.push_back(&set[i]);
    add_scaled(acc, model.evaluate(stack_mels(batch)),
               static_cast<double>(batch.size()) / static_cast<double>(set.size()));
  }
  return acc;
}

}  // namespace

std::vector<EpochStats> train(VqVae& model, const std::vector<dsp::MelSpec>& train_set,
                              const std::vector<dsp::MelSpec>& validation_set, std::uint64_t seed,
                              const EpochObserver& observer) {
  if (train_set.empty()) throw PreconditionError("VQ-VAE training set is empty");
  const VqVaeConfig& cfg = model.config();
  AdamState adam;
  adam.learning_rate = cfg.learning_rate;
  Rng rng(seed);
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<EpochStats> history;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    EpochStats stats;
    stats.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<const dsp::MelSpec*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) {
        batch.push_back(&train_set[order[i]]);
      }
      const Losses l = train_step(model, stack_mels(batch), adam);
      add_scaled(stats.train, l, static_cast<double>(batch.size()) / static_cast<double>(order.size()));
    }
    if (!validation_set.empty()) stats.validation = evaluate_set(model, validation_set);
    history.push_back(stats);
    if (observer) observer(stats);
  }
  return history;
}

void write_codes(const std::filesystem::path& path, const std::vector<CodesRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write codes file " + path.string());
  for (const auto& r : records) out << json{{"utterance_id", r.utterance_id}, {"codes", r.codes}}.dump() << '\n';
}

std::vector<CodesRecord> read_codes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open codes file " + path.string());
  std::vector<CodesRecord> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(text);
      CodesRecord r{j.at("utterance_id").get<std::string>(), j.at("codes").get<std::vector<std::int32_t>>()};
      if (r.codes.size() != kNumPositions) {
        throw FormatError("codes file line " + std::to_string(line) + ": expected 64 codes, got " +
                          std::to_string(r.codes.size()));
      }
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw FormatError("codes file line " + std::to_string(line) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace serann::vqvae
