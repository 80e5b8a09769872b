// Acceptance suite: one PASS/FAIL line per criterion; exit status 1 if any fail.
//
//   acceptance [--only N[,M...]] [--work DIR]

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "oracles.hpp"
#include "serann/annotate.hpp"
#include "serann/classifier.hpp"
#include "serann/corpus.hpp"
#include "serann/dsp.hpp"
#include "serann/gradcheck.hpp"
#include "serann/ops.hpp"
#include "serann/pipeline.hpp"
#include "serann/rng.hpp"
#include "serann/vqvae.hpp"
#include "test_util.hpp"
#include "vq_surrogate.hpp"

using namespace serann;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

fs::path g_work;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json read_json(const fs::path& p) { return json::parse(file_bytes(p)); }

fs::path fresh_dir(const std::string& name) {
  const fs::path d = g_work / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// Runs a serann subcommand in-process; throws with its stderr on failure.
void cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int rc = cli::run(args, out, err);
  if (rc != 0) {
    std::string tail = err.str();
    if (tail.size() > 400) tail = tail.substr(tail.size() - 400);
    throw std::runtime_error("serann " + args.front() + " exited " + std::to_string(rc) + ": " + tail);
  }
}

// Schema validation is delegated to the Python jsonschema package.
bool schema_valid(const std::vector<fs::path>& reports, std::string& message) {
  std::string cmd = "python3 \"" SERANN_SOURCE_DIR "/tools/validate_reports.py\"";
  for (const auto& r : reports) cmd += " \"" + r.string() + "\"";
  cmd += " > \"" + (g_work / "schema_check.log").string() + "\" 2>&1";
  const int rc = std::system(cmd.c_str());
  message = file_bytes(g_work / "schema_check.log");
  return rc == 0;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

Outcome gradient_suite() {
  Outcome o;
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_op;
  const auto note = [&](const std::string& op, const GradCheckResult& r) {
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_op = op;
    }
  };
  Rng rng(101);
  using test::dot;
  using test::random_tensor;

  {
    const ConvGeometry g{2, 1, {1, 1, 0, 2}};
    Tensor x = random_tensor({2, 2, 6, 5}, rng), k = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
    const Tensor proj = random_tensor(conv2d(x, k, b, g).shape(), rng);
    const auto loss = [&] { return dot(conv2d(x, k, b, g), proj); };
    const ConvGrads gr = conv2d_backward(x, k, g, proj);
    note("conv2d.input", finite_diff_grad_check(loss, x.values(), gr.input.values()));
    note("conv2d.kernels", finite_diff_grad_check(loss, k.values(), gr.kernels.values()));
    note("conv2d.bias", finite_diff_grad_check(loss, b.values(), gr.bias.values()));
  }
  {
    const ConvGeometry g{2, 2, {1, 0, 1, 0}};
    Tensor x = random_tensor({1, 3, 4, 3}, rng), k = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({2}, rng);
    const Tensor proj = random_tensor(conv2d_transpose(x, k, b, g).shape(), rng);
    const auto loss = [&] { return dot(conv2d_transpose(x, k, b, g), proj); };
    const ConvGrads gr = conv2d_transpose_backward(x, k, g, proj);
    note("conv2d_transpose.input", finite_diff_grad_check(loss, x.values(), gr.input.values()));
    note("conv2d_transpose.kernels", finite_diff_grad_check(loss, k.values(), gr.kernels.values()));
    note("conv2d_transpose.bias", finite_diff_grad_check(loss, b.values(), gr.bias.values()));
  }
  {
    Tensor x = random_tensor({3, 2}, rng);
    LstmParams f{random_tensor({2, 8}, rng, -0.5, 0.5), random_tensor({2, 8}, rng, -0.5, 0.5),
                 random_tensor({8}, rng, -0.5, 0.5)};
    LstmParams b{random_tensor({2, 8}, rng, -0.5, 0.5), random_tensor({2, 8}, rng, -0.5, 0.5),
                 random_tensor({8}, rng, -0.5, 0.5)};
    const Tensor proj = random_tensor({3, 4}, rng);
    BiLstmCache cache;
    bilstm(x, f, b, &cache);
    const BiLstmGrads gr = bilstm_backward(cache, f, b, proj);
    const auto loss = [&] { return dot(bilstm(x, f, b), proj); };
    note("bilstm.input", finite_diff_grad_check(loss, x.values(), gr.input.values()));
    for (auto [p, gp] : {std::pair{&f, &gr.forward}, std::pair{&b, &gr.backward}}) {
      note("bilstm.w_input", finite_diff_grad_check(loss, p->w_input.values(), gp->w_input.values()));
      note("bilstm.w_recurrent", finite_diff_grad_check(loss, p->w_recurrent.values(), gp->w_recurrent.values()));
      note("bilstm.bias", finite_diff_grad_check(loss, p->bias.values(), gp->bias.values()));
    }
  }
  {
    Tensor x, w, b;
    for (bool near_kink = true; near_kink;) {
      x = random_tensor({3, 4}, rng);
      w = random_tensor({4, 5}, rng);
      b = random_tensor({5}, rng);
      near_kink = false;
      const Tensor pre = dense(x, w, b, Activation::kNone);
      for (double v : pre.values()) near_kink |= std::abs(v) < 1e-2;
    }
    for (Activation act : {Activation::kNone, Activation::kRelu}) {
      const Tensor out = dense(x, w, b, act);
      const Tensor proj = random_tensor(out.shape(), rng);
      const auto loss = [&] { return dot(dense(x, w, b, act), proj); };
      const DenseGrads gr = dense_backward(x, w, out, act, proj);
      note("dense.input", finite_diff_grad_check(loss, x.values(), gr.input.values()));
      note("dense.weights", finite_diff_grad_check(loss, w.values(), gr.weights.values()));
      note("dense.bias", finite_diff_grad_check(loss, b.values(), gr.bias.values()));
    }
  }
  {
    Tensor h = random_tensor({6, 4}, rng), w = random_tensor({4}, rng);
    const Tensor probe = random_tensor({4}, rng);
    const auto loss = [&] {
      return dot(attention_pool(h, attention_weights(h, w)), probe);
    };
    const auto gr = attention_backward(h, w, attention_weights(h, w), probe);
    note("attention.hidden", finite_diff_grad_check(loss, h.values(), gr.hidden.values()));
    note("attention.w", finite_diff_grad_check(loss, w.values(), gr.w.values()));
  }
  {
    Tensor z = random_tensor({3, 4}, rng, -3, 3);
    const std::vector<int> y{0, 3, 1};
    const CrossEntropy ce = softmax_cross_entropy(z, y);
    const auto loss = [&] { return softmax_cross_entropy(z, y).loss; };
    note("softmax_cross_entropy", finite_diff_grad_check(loss, z.values(), ce.grad.values()));
  }
  {
    vqvae::VqVae model(test::toy_vqvae_config(), 5);
    for (auto& p : model.parameters()) {
      if (p.name.ends_with(".bias")) {
        for (double& v : p.tensor->values()) v = rng.uniform(-0.1, 0.1);
      }
    }
    const Tensor x = random_tensor({2, 1, 80, 256}, rng);
    model.compute_gradients(x);
    const test::FrozenCodeSurrogate surrogate(model, x);
    note("vqvae (toy width)", test::multi_step_grad_check(surrogate, model.parameters(), 40));
  }
  {
    classifier::ClassifierConfig c = classifier::ClassifierConfig::desk();
    c.conv1_kernel = 5;
    c.conv1_filters = 2;
    c.conv2_filters = 2;
    c.blstm_units = 3;
    c.dense_units = 4;
    classifier::Classifier m(c, 5);
    for (auto& p : m.parameters()) {
      if (p.name.find("bias") != std::string::npos) {
        for (double& v : p.tensor->values()) v += rng.uniform(-0.1, 0.1);
      }
    }
    const Tensor x = random_tensor({2, 1, 80, 256}, rng);
    const std::vector<int> labels = {2, 0};
    m.compute_gradients(x, labels);
    const auto loss = [&] { return softmax_cross_entropy(m.forward(x), labels).loss; };
    note("classifier (toy width)", test::multi_step_grad_check(loss, m.parameters(), 30));
  }

  const double elapsed = seconds_since(t0);
  o.require(worst < 1e-4, "max rel error < 1e-4");
  o.require(elapsed < 60.0, "runtime < 60 s");
  o.detail << "max rel error " << worst << " (" << worst_op << "), " << elapsed << " s";
  return o;
}

// ---------------------------------------------------------------------------
// 2. Quantizer oracle

Outcome quantizer_oracle() {
  Outcome o;
  Rng rng(202);
  for (auto [k, d] : {std::pair<std::size_t, std::size_t>{64, 64}, {8192, 512}}) {
    const Tensor book = test::random_tensor({k, d}, rng);
    const Tensor z = test::random_tensor({1000, d}, rng, -1.5, 1.5);
    const auto got = vqvae::quantize(z, book).codes;
    const auto want = test::brute_force_codes(z, book);
    std::size_t agree = 0;
    for (std::size_t i = 0; i < want.size(); ++i) agree += got[i] == want[i];
    o.require(agree == want.size(), "100% agreement at k=" + std::to_string(k));
    o.detail << "k=" << k << " d=" << d << ": " << agree << "/" << want.size() << " agree; ";
  }
  return o;
}

// ---------------------------------------------------------------------------
// 3. Straight-through

Outcome straight_through() {
  Outcome o;
  vqvae::VqVae model(test::toy_vqvae_config(), 8);
  Rng rng(303);
  const Tensor x = test::random_tensor({2, 1, 80, 256}, rng);
  vqvae::GradientRoutes routes;
  model.compute_gradients(x, &routes);
  const bool identical = bitwise_equal(routes.grad_ze_recon, routes.grad_zq_recon);
  const auto all_zero = [](auto begin, auto end) { return std::all_of(begin, end, [](double v) { return v == 0.0; }); };
  const bool commit_book_zero =
      all_zero(routes.grad_embeddings_commitment.values().begin(), routes.grad_embeddings_commitment.values().end());
  const bool book_encoder_zero = all_zero(routes.encoder_from_codebook.begin(), routes.encoder_from_codebook.end());
  const bool nontrivial =
      !all_zero(routes.grad_zq_recon.values().begin(), routes.grad_zq_recon.values().end()) &&
      !all_zero(routes.encoder_from_commitment.begin(), routes.encoder_from_commitment.end());
  o.require(identical, "dL/dz_e == dL/dz_q bitwise (reconstruction)");
  o.require(commit_book_zero, "codebook gradient from commitment == 0");
  o.require(book_encoder_zero, "encoder gradient from codebook term == 0");
  o.require(nontrivial, "routes carry non-zero gradient");
  o.detail << routes.grad_ze_recon.size() << " z_e coordinates bitwise equal; commitment->codebook and "
           << "codebook->encoder exactly zero";
  return o;
}

// ---------------------------------------------------------------------------
// 4. VQ-VAE learning on the two-pattern corpus

// Smallest set of most frequent codes covering at least half the occurrences.
std::set<std::int32_t> dominant_codes(const std::vector<std::vector<std::int32_t>>& clips) {
  std::map<std::int32_t, std::size_t> freq;
  std::size_t total = 0;
  for (const auto& c : clips) {
    for (auto v : c) ++freq[v], ++total;
  }
  std::vector<std::pair<std::size_t, std::int32_t>> ranked;
  for (auto [code, n] : freq) ranked.emplace_back(n, code);
  std::sort(ranked.begin(), ranked.end(), [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
  std::set<std::int32_t> out;
  std::size_t covered = 0;
  for (auto [n, code] : ranked) {
    if (2 * covered >= total) break;
    out.insert(code);
    covered += n;
  }
  return out;
}

Outcome vqvae_learning() {
  Outcome o;
  const auto t0 = Clock::now();
  const fs::path dir = fresh_dir("c4_patterns");
  const auto records = corpus::generate_pattern_corpus(dir, 36, 4);
  std::vector<dsp::MelSpec> train_set, held_out;
  std::map<std::string, std::vector<const dsp::MelSpec*>> held_by_pattern;
  std::map<std::string, std::size_t> seen;
  std::vector<std::pair<std::string, std::size_t>> held_index;
  for (const auto& r : records) {
    auto mel = dsp::mel_spectrogram(dsp::read_wav(r.audio_path));
    const std::string pattern = *r.split;
    if (seen[pattern]++ < 32) {
      train_set.push_back(std::move(mel));
    } else {
      held_index.emplace_back(pattern, held_out.size());
      held_out.push_back(std::move(mel));
    }
  }
  const auto config = vqvae::VqVaeConfig::desk();
  vqvae::VqVae model(config, 4);
  const auto stats = vqvae::train(model, train_set, held_out, 4);
  const double first = stats.front().validation.recon, last = stats.back().validation.recon;
  o.require(stats.size() == 50, "50 epochs");
  o.require(last < 0.5 * first, "held-out recon after 50 epochs < 50% of epoch 1");

  std::map<std::string, std::vector<std::vector<std::int32_t>>> codes;
  for (auto [pattern, i] : held_index) codes[pattern].push_back(model.codes(held_out[i]));
  const auto low = dominant_codes(codes["low"]), high = dominant_codes(codes["high"]);
  std::vector<std::int32_t> shared;
  std::set_intersection(low.begin(), low.end(), high.begin(), high.end(), std::back_inserter(shared));
  o.require(shared.empty(), "dominant code sets disjoint");

  model.save(dir / "vq.ckpt");
  const auto reloaded = vqvae::VqVae::load(dir / "vq.ckpt");
  bool deterministic = true;
  for (auto [pattern, i] : held_index) {
    deterministic = deterministic && model.codes(held_out[i]) == model.codes(held_out[i]) &&
                    reloaded.codes(held_out[i]) == model.codes(held_out[i]);
  }
  o.require(deterministic, "codes identical across reruns and reload");
  o.detail << "held-out recon " << first << " -> " << last << " (" << 100.0 * last / first << "%), dominant codes low "
           << low.size() << " / high " << high.size() << ", shared " << shared.size() << ", " << seconds_since(t0)
           << " s";
  return o;
}

// ---------------------------------------------------------------------------
// 5. DSP oracle

Outcome dsp_oracle() {
  Outcome o;
  const auto clip = test::tone(1000.0, 4.0, 0.5);
  const auto mel = dsp::mel_spectrogram(clip);
  const auto ref = test::ref_mel_spec(clip.samples);
  double worst = 0.0, lo = 1.0, hi = -1.0;
  for (std::size_t m = 0; m < 80; ++m) {
    for (std::size_t t = 0; t < 256; ++t) {
      worst = std::max(worst, std::abs(mel.at(m, t) - ref[m][t]));
      lo = std::min(lo, mel.at(m, t));
      hi = std::max(hi, mel.at(m, t));
    }
  }
  o.require(worst < 1e-3, "mel within 1e-3 of the direct-DFT reference");
  o.require(mel.tensor().shape() == Shape{80, 256}, "shape 80x256");
  o.require(lo >= -1.0 && hi <= 1.0, "range within [-1, 1]");
  o.detail << "mel max |diff| " << worst << "; pitch";
  for (double hz : {120.0, 200.0, 300.0}) {
    const double f0 = dsp::average_pitch(test::tone(hz, 2.0, 0.5));
    o.require(std::abs(f0 - hz) <= 3.0, "pitch " + std::to_string(hz));
    o.detail << " " << hz << "->" << f0;
  }
  const double energy = dsp::average_energy(test::tone(250.0, 1.0, 0.5));
  o.require(std::abs(energy - 0.3536) <= 1e-3, "half-scale sine energy");
  o.detail << "; energy " << energy;
  return o;
}

// ---------------------------------------------------------------------------
// 6. Schedule conformance

Outcome schedule_conformance() {
  Outcome o;
  classifier::ClassifierConfig cfg = classifier::ClassifierConfig::full();
  cfg.conv1_kernel = 5;
  cfg.conv1_filters = 2;
  cfg.conv2_filters = 2;
  cfg.blstm_units = 3;
  cfg.dense_units = 4;
  cfg.batch_size = 4;
  Rng rng(606);
  std::vector<dsp::MelSpec> mels;
  for (int i = 0; i < 4; ++i) mels.emplace_back(test::random_tensor({80, 256}, rng));
  std::vector<classifier::Sample> samples;
  for (int i = 0; i < 4; ++i) samples.push_back({&mels[static_cast<std::size_t>(i)], i});

  classifier::Classifier model(cfg, 3);
  ParameterSnapshot best;
  std::vector<std::size_t> decay_epochs;
  std::vector<double> lrs;
  bool reverted = true;
  classifier::TrainHooks hooks;
  hooks.validate = [](const classifier::Classifier&, std::size_t) { return 0.5; };
  hooks.on_epoch = [&](const classifier::EpochRecord& r, const classifier::PlateauSchedule&,
                       classifier::PlateauSchedule::Action a, classifier::Classifier& m) {
    using A = classifier::PlateauSchedule::Action;
    lrs.push_back(r.lr);
    if (a == A::kImproved) best = snapshot(m.parameters());
    if (a == A::kDecay || a == A::kStop) {
      decay_epochs.push_back(r.epoch);
      reverted = reverted && snapshot(m.parameters()) == best;
    }
  };
  const auto result = classifier::train(model, samples, {}, 7, hooks);
  classifier::PlateauSchedule schedule(cfg);
  while (schedule.observe(0.5) != classifier::PlateauSchedule::Action::kStop) {
  }
  o.require(decay_epochs == std::vector<std::size_t>{6, 12, 18, 24}, "halvings at epochs 6/12/18/24");
  o.require(result.stop == classifier::StopReason::kLrFloor, "stopped by the lr floor");
  o.require(schedule.learning_rate() == 6.25e-6, "final lr 6.25e-6");
  o.require(lrs.size() == 24 && lrs[0] == 1e-4 && lrs[6] == 5e-5 && lrs[12] == 2.5e-5 && lrs[18] == 1.25e-5,
            "lr per phase");
  o.require(reverted && snapshot(model.parameters()) == best, "bit-exact reversion at each decay");
  o.detail << "decays at";
  for (auto e : decay_epochs) o.detail << " " << e;
  o.detail << ", final lr " << schedule.learning_rate() << ", " << result.history.size() << " epochs";
  return o;
}

// ---------------------------------------------------------------------------
// 7. Metric oracle

Outcome metric_oracle() {
  Outcome o;
  Rng rng(707);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    corpus::ConfusionMatrix cm;
    for (std::size_t g = 0; g < 4; ++g) {
      for (std::size_t p = 0; p < 4; ++p) cm.add(g, p, static_cast<std::int64_t>(rng.below(30)) + (g == p));
    }
    worst = std::max(worst, std::abs(corpus::uar(cm) - test::brute_force_uar(cm)));
  }
  corpus::ConfusionMatrix one_class;
  for (std::size_t g = 0; g < 4; ++g) one_class.add(g, 1, 50);
  const double constant = corpus::uar(one_class);
  o.require(worst <= 1e-12, "agreement to 1e-12");
  o.require(constant == 0.25, "one-class predictor scores exactly 0.25");
  o.detail << "1000 matrices, max |diff| " << worst << "; one-class UAR " << constant;
  return o;
}

// ---------------------------------------------------------------------------
// 8. Split invariants

Outcome split_invariants() {
  Outcome o;
  corpus::SyntheticCorpusOptions opts;
  opts.seconds = 0.5;
  const auto recs = corpus::generate_synthetic_corpus(fresh_dir("c8_base"), opts);
  const auto plan = corpus::loso_folds(recs);
  o.require(plan.folds.size() == 10, "10 LOSO folds");
  std::vector<int> tested(plan.records.size(), 0);
  std::size_t leaks = 0;
  for (const auto& f : plan.folds) {
    std::set<std::string> train_spk, test_spk;
    for (auto i : f.train) train_spk.insert(plan.records[i].speaker_id);
    for (auto i : f.val) train_spk.insert(plan.records[i].speaker_id);
    for (auto i : f.test) test_spk.insert(plan.records[i].speaker_id), ++tested[i];
    for (const auto& s : test_spk) leaks += train_spk.count(s);
    o.require(f.train.size() + f.val.size() + f.test.size() == plan.records.size(), "fold covers all records");
  }
  o.require(std::all_of(tested.begin(), tested.end(), [](int t) { return t == 1; }), "each record tested once");
  o.require(leaks == 0, "no speaker leakage");

  corpus::SyntheticCorpusOptions eval_opts = opts;
  eval_opts.id_prefix = "evl";
  eval_opts.seed = 8;
  eval_opts.per_class_per_speaker = 5;
  const auto eval = corpus::generate_synthetic_corpus(fresh_dir("c8_eval"), eval_opts);
  const auto a = corpus::cross_corpus_split(recs, eval, 0.3, 42);
  const auto b = corpus::cross_corpus_split(recs, eval, 0.3, 42);
  const auto& f = a.folds.at(0);
  std::set<std::size_t> held(f.val.begin(), f.val.end());
  held.insert(f.test.begin(), f.test.end());
  const bool exact = f.train.size() == recs.size() && held.size() == eval.size() &&
                     f.val.size() + f.test.size() == eval.size() && *held.begin() == recs.size() &&
                     *held.rbegin() == recs.size() + eval.size() - 1;
  const auto expected_val = static_cast<std::size_t>(std::floor(0.3 * static_cast<double>(eval.size()) + 0.5));
  o.require(exact, "30/70 split partitions the evaluation corpus");
  o.require(f.val.size() == expected_val, "validation share 30%");
  o.require(b.folds[0].val == f.val && b.folds[0].test == f.test, "same seed, same split");
  o.detail << "10 folds, leakage " << leaks << "; cross split " << f.val.size() << "/" << f.test.size() << " of "
           << eval.size();
  return o;
}

// ---------------------------------------------------------------------------
// 9. End-to-end pipeline

Outcome end_to_end() {
  Outcome o;
  const auto t0 = Clock::now();
  const fs::path root = fresh_dir("c9");
  const std::string c = (root / "corpus").string(), manifest = c + "/manifest.jsonl";
  const auto p = [&](const std::string& name) { return (root / name).string(); };
  cli({"synth", "--out", c, "--speakers", "10", "--per-class", "8", "--val-fraction", "0.2", "--test-fraction",
       "0.4", "--seed", "9"});
  cli({"features", "--manifest", manifest, "--out", p("feat")});
  cli({"train-vqvae", "--manifest", manifest, "--features", p("feat"), "--out", p("vq"), "--desk-scale"});
  cli({"encode", "--manifest", manifest, "--features", p("feat"), "--checkpoint", p("vq") + "/vqvae.ckpt", "--out",
       p("codes")});
  for (std::string policy : {"oracle", "random"}) {
    cli({"annotate", "--manifest", manifest, "--out", p("ann_" + policy), "--backend", "mock:" + policy, "--variant",
         "text_energy_f0_gender_codes", "--shots", "few", "--features", p("feat"), "--codes",
         p("codes") + "/codes.jsonl", "--seed", "9"});
  }

  // (a) oracle labels == gold labels => identical classifier checkpoints.
  const auto records = corpus::load_manifest(manifest);
  std::map<std::string, Emotion> gold;
  for (const auto& r : records) gold[r.utterance_id] = *r.gold_label;
  const auto oracle = annotate::read_annotations(p("ann_oracle") + "/annotations.jsonl");
  const bool labels_equal = oracle.size() == records.size() &&
                            std::all_of(oracle.begin(), oracle.end(), [&](const auto& a) {
                              return a.label && *a.label == gold.at(a.utterance_id);
                            });
  const std::vector<std::string> train_args = {"--manifest", manifest, "--features", p("feat"), "--folds", "fixed",
                                               "--desk-scale", "--seed", "9"};
  auto with = [&](std::vector<std::string> head, const std::vector<std::string>& tail) {
    head.insert(head.end(), train_args.begin(), train_args.end());
    head.insert(head.end(), tail.begin(), tail.end());
    return head;
  };
  cli(with({"train-classifier"}, {"--labels", "gold", "--repeats", "1", "--out", p("cls_gold")}));
  cli(with({"train-classifier"}, {"--labels", "llm", "--annotations", p("ann_oracle") + "/annotations.jsonl",
                                  "--repeats", "1", "--out", p("cls_oracle")}));
  const std::string ckpt_gold = file_bytes(p("cls_gold") + "/checkpoints/fold0_rep0.ckpt");
  const bool same_ckpt = !ckpt_gold.empty() && ckpt_gold == file_bytes(p("cls_oracle") + "/checkpoints/fold0_rep0.ckpt");
  o.require(labels_equal, "(a) oracle labels equal gold");
  o.require(same_ckpt, "(a) identical checkpoints");

  // (b) uniform-random annotator. A single label draw fixes which classes
  // happen to carry a matching majority label, so the downstream UAR is
  // averaged over independently seeded annotation runs.
  const json random_summary = read_json(p("ann_random") + "/annotation_summary.json");
  const double agreement = random_summary.at("gold_agreement").get<double>();
  constexpr int kDraws = 20;
  double uar_sum = 0.0;
  for (int k = 0; k < kDraws; ++k) {
    const std::string seed = std::to_string(100 + k), ann = p("draws/ann" + seed), run = p("draws/cls" + seed);
    cli({"annotate", "--manifest", manifest, "--out", ann, "--backend", "mock:random", "--seed", seed});
    cli({"train-classifier", "--manifest", manifest, "--features", p("feat"), "--folds", "fixed", "--desk-scale",
         "--labels", "llm", "--annotations", ann + "/annotations.jsonl", "--repeats", "1", "--seed", seed, "--out",
         run});
    uar_sum += read_json(run + "/run_report.json").at("mean").get<double>();
  }
  const double random_uar = uar_sum / kDraws;
  o.require(std::abs(agreement - 0.25) <= 0.05, "(b) label agreement 25% +/- 5");
  o.require(std::abs(random_uar - 0.25) <= 0.05, "(b) test UAR within 5 points of 25%");

  // (c) few-shot full-context prompts, rebuilt from the stage files and tied
  // to the run through the recorded prompt hashes.
  annotate::ContextSources sources;
  for (auto& [id, f] : pipeline::read_features(p("feat") + "/features.jsonl")) sources.features.emplace(id, f);
  for (auto& cr : vqvae::read_codes(p("codes") + "/codes.jsonl")) sources.codes.emplace(cr.utterance_id, cr.codes);
  std::vector<corpus::UtteranceRecord> pool;
  for (const auto& r : records) {
    if (r.split == "train") pool.push_back(r);
  }
  annotate::AnnotateOptions opts;
  opts.variant = annotate::ContextVariant::kTextEnergyF0GenderCodes;
  opts.shots = annotate::Shots::kFew;
  opts.seed = 9;
  const auto prompts = annotate::corpus_prompts(records, pool, sources, opts);
  std::map<std::string, std::string> hash_by_id;
  for (const auto& a : oracle) hash_by_id[a.utterance_id] = a.prompt_hash;
  bool shape_ok = prompts.size() == records.size(), hashes_match = true;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto& text = prompts[i].user;
    std::size_t examples = 0, code_lines = 0;
    bool codes_64 = true;
    std::istringstream lines(text);
    for (std::string line; std::getline(lines, line);) {
      if (line.rfind("Example ", 0) == 0) ++examples;
      if (line.rfind("audio codes:", 0) == 0) {
        ++code_lines;
        std::istringstream toks(line.substr(12));
        std::size_t n = 0;
        for (std::string t; toks >> t;) ++n;
        codes_64 = codes_64 && n == 64;
      }
    }
    shape_ok = shape_ok && examples == 10 && prompts[i].exemplars == 10 && code_lines == 11 && codes_64;
    hashes_match = hashes_match && hash_by_id[records[i].utterance_id] == prompts[i].hash();
  }
  o.require(shape_ok, "(c) 10 exemplars and 64 code tokens per block");
  o.require(hashes_match, "(c) prompts match the hashes recorded by the run");

  const double elapsed = seconds_since(t0);
  o.require(elapsed < 600.0, "< 10 min");
  o.detail << "(a) checkpoints " << (same_ckpt ? "identical" : "differ") << "; (b) agreement " << agreement
           << ", test UAR " << random_uar << " (mean of " << kDraws << " annotation draws); (c) " << prompts.size()
           << " prompts checked; "
           << elapsed << " s";
  return o;
}

// ---------------------------------------------------------------------------
// 10. Augmentation harness

Outcome augmentation() {
  Outcome o;
  const auto t0 = Clock::now();
  const fs::path root = fresh_dir("c10");
  const auto p = [&](const std::string& name) { return (root / name).string(); };
  cli({"synth", "--out", p("base"), "--speakers", "10", "--per-class", "2", "--val-fraction", "0.2",
       "--test-fraction", "0.4", "--seed", "10"});
  cli({"synth", "--out", p("extra"), "--speakers", "6", "--per-class", "2", "--prefix", "ext", "--seed", "11",
       "--val-fraction", "0", "--test-fraction", "0"});
  cli({"features", "--manifest", p("base") + "/manifest.jsonl", "--out", p("feat_base")});
  cli({"features", "--manifest", p("extra") + "/manifest.jsonl", "--out", p("feat_extra")});
  cli({"annotate", "--manifest", p("extra") + "/manifest.jsonl", "--out", p("ann_extra"), "--backend",
       "mock:oracle"});
  cli({"augment-eval", "--manifest", p("base") + "/manifest.jsonl", "--extra-manifest", p("extra") + "/manifest.jsonl",
       "--extra-annotations", p("ann_extra") + "/annotations.jsonl", "--features", p("feat_base"), "--features",
       p("feat_extra"), "--folds", "fixed", "--repeats", "10", "--desk-scale", "--seed", "10", "--out", p("aug")});

  const json report = read_json(p("aug") + "/augment_report.json");
  const double delta = report.at("mean_delta").get<double>();
  o.require(delta >= -0.02, "mean delta >= -0.02");
  for (const char* side : {"baseline", "augmented"}) {
    const json& run = report.at(side);
    const auto uars = run.at("uars").get<std::vector<double>>();
    o.require(uars.size() == 10, std::string(side) + " carries 10 UAR values");
    long double sum = 0.0L;
    for (double u : uars) sum += u;
    const long double mean = sum / uars.size();
    long double ss = 0.0L;
    for (double u : uars) ss += (u - mean) * (u - mean);
    const long double sd = std::sqrt(ss / (uars.size() - 1));
    o.require(std::abs(static_cast<double>(mean) - run.at("mean").get<double>()) <= 1e-12, std::string(side) + " mean");
    o.require(std::abs(static_cast<double>(sd) - run.at("std").get<double>()) <= 1e-12, std::string(side) + " std");
    o.detail << side << " " << run.at("mean").get<double>() << " +/- " << run.at("std").get<double>() << "; ";
  }
  std::string schema_log;
  o.require(schema_valid({p("aug") + "/augment_report.json"}, schema_log), "schema-valid report: " + schema_log);
  o.detail << "mean delta " << delta << ", extras used " << report.at("merge").at("extra_used") << ", "
           << seconds_since(t0) << " s";
  return o;
}

// ---------------------------------------------------------------------------
// 11. Full protocol smoke test

Outcome protocol_smoke() {
  Outcome o;
  const auto t0 = Clock::now();
  const fs::path root = fresh_dir("c11");
  const auto p = [&](const std::string& name) { return (root / name).string(); };
  const std::string manifest = p("iemocap") + "/manifest.jsonl";
  cli({"synth", "--out", p("iemocap"), "--speakers", "10", "--per-class", "1", "--corpus", "iemocap", "--prefix",
       "Ses", "--seed", "11"});
  // Desk-scale model sizes with an epoch cap so 100 runs fit a CI budget.
  std::ofstream(p("config.json")) << R"({"classifier": {"max_epochs": 4}, "repeats": 10, "seed": 1})";
  cli({"features", "--manifest", manifest, "--out", p("feat")});
  cli({"annotate", "--manifest", manifest, "--out", p("ann"), "--backend", "mock:keyword"});
  cli({"train-classifier", "--manifest", manifest, "--features", p("feat"), "--labels", "llm", "--annotations",
       p("ann") + "/annotations.jsonl", "--folds", "loso", "--desk-scale", "--config", p("config.json"), "--out",
       p("run")});

  const json run = read_json(p("run") + "/run_report.json");
  const auto& folds = run.at("folds");
  bool ten_each = folds.size() == 10;
  for (const auto& f : folds) ten_each = ten_each && f.at("uars").size() == 10;
  o.require(ten_each, "10 LOSO folds x 10 repeats");
  o.require(run.at("uars").size() == 10 && run.at("seeds").size() == 10, "10 repeat values and seeds");
  o.require(run.at("config").at("conv1_filters") == classifier::ClassifierConfig::desk().conv1_filters,
            "desk-profile model sizes");
  std::size_t checkpoints = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(p("run") + "/checkpoints")) ++checkpoints;
  o.require(checkpoints == 100, "100 checkpoints");
  std::string schema_log;
  const bool valid = schema_valid({p("feat") + "/features_report.json", p("ann") + "/annotation_summary.json",
                                   p("run") + "/run_report.json"},
                                  schema_log);
  o.require(valid, "schema-valid reports: " + schema_log);
  std::ostringstream rout, rerr;
  o.require(cli::run({"report", p("run") + "/run_report.json"}, rout, rerr) == 0, "report command accepts the output");
  o.detail << folds.size() << " folds x " << run.at("uars").size() << " repeats, UAR " << run.at("mean").get<double>()
           << " +/- " << run.at("std").get<double>() << ", " << checkpoints << " checkpoints, " << seconds_since(t0)
           << " s";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  g_work = fs::temp_directory_path() / "serann_acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::istringstream ids(argv[++i]);
      for (std::string id; std::getline(ids, id, ',');) only.insert(std::stoi(id));
    } else if (a == "--work" && i + 1 < argc) {
      g_work = argv[++i];
    } else {
      std::cerr << "usage: acceptance [--only N[,M...]] [--work DIR]\n";
      return 2;
    }
  }
  fs::create_directories(g_work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"quantizer oracle", quantizer_oracle},
      {"straight-through", straight_through},
      {"VQ-VAE learning", vqvae_learning},
      {"DSP oracle", dsp_oracle},
      {"schedule conformance", schedule_conformance},
      {"metric oracle", metric_oracle},
      {"split invariants", split_invariants},
      {"end-to-end pipeline", end_to_end},
      {"augmentation harness", augmentation},
      {"protocol smoke test", protocol_smoke},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "exception: " << e.what();
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first
              << "): " << o.detail.str() << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
