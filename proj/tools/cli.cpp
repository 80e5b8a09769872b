#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>

#include "serann/annotate.hpp"
#include "serann/corpus.hpp"
#include "serann/error.hpp"
#include "serann/pipeline.hpp"
#include "serann/vqvae.hpp"

namespace serann::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string manifest;
  std::string out;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  std::string config;
  bool desk = false;
};

void add_common(CLI::App* sub, Common& c, bool manifest_required = true) {
  auto* m = sub->add_option("--manifest", c.manifest, "Utterance manifest (JSONL)")->check(CLI::ExistingFile);
  if (manifest_required) m->required();
  sub->add_option("--out", c.out, "Output directory")->required();
  c.seed_opt = sub->add_option("--seed", c.seed, "Base seed (overrides the config file)");
  sub->add_option("--config", c.config, "Pipeline config JSON")->check(CLI::ExistingFile);
  sub->add_flag("--desk-scale", c.desk, "Use the small desk-scale model configs");
}

pipeline::PipelineConfig effective_config(const Common& c) {
  auto cfg = pipeline::load_config(c.config.empty() ? std::nullopt : std::optional<fs::path>(c.config), c.desk);
  if (c.seed_opt != nullptr && c.seed_opt->count() > 0) cfg.seed = c.seed;
  return cfg;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json failures_json(const std::vector<pipeline::RecordFailure>& failures) {
  json arr = json::array();
  for (const auto& f : failures) arr.push_back({{"utterance_id", f.utterance_id}, {"message", f.message}});
  return arr;
}

int report_failures(const std::vector<pipeline::RecordFailure>& failures, std::ostream& err) {
  for (const auto& f : failures) err << "error: " << f.utterance_id << ": " << f.message << '\n';
  return failures.empty() ? 0 : 1;
}

bool is_training_split(const corpus::UtteranceRecord& r) { return !r.split || (*r.split != "val" && *r.split != "test"); }

pipeline::MelStore load_mel_stores(const std::vector<std::string>& dirs) {
  pipeline::MelStore all;
  for (const auto& d : dirs) {
    auto store = pipeline::read_mels(pipeline::FeatureFiles{d}.mels());
    all.merge(store);
  }
  return all;
}

// --- features ---------------------------------------------------------------

struct FeaturesArgs {
  Common common;
  std::size_t threads = 0;
};

int cmd_features(const FeaturesArgs& a, std::ostream& out, std::ostream& err) {
  const auto records = corpus::load_manifest(a.common.manifest);
  const auto extracted = pipeline::extract_features(records, a.threads);
  const pipeline::FeatureFiles files{a.common.out};
  fs::create_directories(files.dir);
  pipeline::write_mels(files.mels(), extracted.mels);
  pipeline::write_features(files.features(), extracted.features);
  write_json(files.dir / "features_report.json", {{"schema_version", pipeline::kSchemaVersion},
                                                  {"kind", "features_report"},
                                                  {"manifest", a.common.manifest},
                                                  {"records", records.size()},
                                                  {"written", extracted.features.size()},
                                                  {"failures", failures_json(extracted.failures)}});
  out << "features: " << extracted.features.size() << "/" << records.size() << " records -> " << files.dir.string()
      << '\n';
  return report_failures(extracted.failures, err);
}

// --- train-vqvae --------------------------------------------------------------

struct TrainVqArgs {
  Common common;
  std::string features;
  std::optional<std::size_t> epochs, batch_size, codebook_size;
  std::optional<double> learning_rate;
};

int cmd_train_vqvae(const TrainVqArgs& a, std::ostream& out, std::ostream& err) {
  auto cfg = effective_config(a.common);
  if (a.epochs) cfg.vqvae.epochs = *a.epochs;
  if (a.batch_size) cfg.vqvae.batch_size = *a.batch_size;
  if (a.codebook_size) cfg.vqvae.codebook_size = *a.codebook_size;
  if (a.learning_rate) cfg.vqvae.learning_rate = *a.learning_rate;
  cfg.vqvae.validate();

  const auto records = corpus::load_manifest(a.common.manifest);
  const auto mels = pipeline::read_mels(pipeline::FeatureFiles{a.features}.mels());
  std::vector<corpus::UtteranceRecord> train_recs, val_recs;
  for (const auto& r : records) (is_training_split(r) ? train_recs : val_recs).push_back(r);
  std::erase_if(val_recs, [](const auto& r) { return r.split != "val"; });
  if (train_recs.empty()) throw PreconditionError("no training records in " + a.common.manifest);

  const fs::path dir = a.common.out;
  fs::create_directories(dir);
  std::ofstream history(dir / "vqvae_history.jsonl", std::ios::trunc);
  vqvae::VqVae model(cfg.vqvae, cfg.seed);
  const auto stats = vqvae::train(model, pipeline::gather_mels(train_recs, mels), pipeline::gather_mels(val_recs, mels),
                                  cfg.seed, [&](const vqvae::EpochStats& s) {
                                    history << json{{"epoch", s.epoch},
                                                    {"recon", s.train.recon},
                                                    {"codebook", s.train.codebook},
                                                    {"commitment", s.train.commitment},
                                                    {"total", s.train.total},
                                                    {"val_recon", s.validation.recon}}
                                                   .dump()
                                            << '\n';
                                    err << "vqvae epoch " << s.epoch << " recon " << s.train.recon << '\n';
                                  });
  model.save(dir / "vqvae.ckpt");
  write_json(dir / "vqvae_report.json", {{"schema_version", pipeline::kSchemaVersion},
                                         {"kind", "vqvae_report"},
                                         {"config", json::parse(cfg.vqvae.to_json())},
                                         {"seed", cfg.seed},
                                         {"train_records", train_recs.size()},
                                         {"val_records", val_recs.size()},
                                         {"epochs", stats.size()},
                                         {"first_recon", stats.empty() ? 0.0 : stats.front().train.recon},
                                         {"final_recon", stats.empty() ? 0.0 : stats.back().train.recon}});
  out << "train-vqvae: " << stats.size() << " epochs -> " << (dir / "vqvae.ckpt").string() << '\n';
  return 0;
}

// --- encode -------------------------------------------------------------------

struct EncodeArgs {
  Common common;
  std::string features;
  std::string checkpoint;
};

int cmd_encode(const EncodeArgs& a, std::ostream& out, std::ostream& err) {
  const auto records = corpus::load_manifest(a.common.manifest);
  const auto mels = pipeline::read_mels(pipeline::FeatureFiles{a.features}.mels());
  const auto model = vqvae::VqVae::load(a.checkpoint);
  std::vector<vqvae::CodesRecord> codes;
  std::vector<pipeline::RecordFailure> failures;
  for (const auto& r : records) {
    const auto it = mels.find(r.utterance_id);
    if (it == mels.end()) {
      failures.push_back({r.utterance_id, "no Mel spectrogram in " + a.features});
      continue;
    }
    codes.push_back({r.utterance_id, model.codes(it->second)});
  }
  const fs::path dir = a.common.out;
  fs::create_directories(dir);
  vqvae::write_codes(dir / "codes.jsonl", codes);
  write_json(dir / "encode_report.json", {{"schema_version", pipeline::kSchemaVersion},
                                          {"kind", "encode_report"},
                                          {"checkpoint", a.checkpoint},
                                          {"records", records.size()},
                                          {"written", codes.size()},
                                          {"failures", failures_json(failures)}});
  out << "encode: " << codes.size() << "/" << records.size() << " records -> " << (dir / "codes.jsonl").string()
      << '\n';
  return report_failures(failures, err);
}

// --- annotate -----------------------------------------------------------------

struct AnnotateArgs {
  Common common;
  std::string variant = "text";
  std::string shots = "zero";
  std::string backend;
  std::string features;
  std::string codes;
  std::string exemplars;
  std::string cache;
  std::size_t concurrency = 1;
  std::size_t failure_budget = 0;
  bool balanced = false;
};

std::unique_ptr<annotate::Backend> make_backend(const std::string& spec,
                                                const std::vector<corpus::UtteranceRecord>& records,
                                                const pipeline::PipelineConfig& cfg) {
  if (spec == "http") return annotate::make_http_backend(cfg.backend);
  if (spec.rfind("mock:", 0) != 0) throw PreconditionError("unknown backend " + spec + " (use http or mock:<policy>)");
  std::string policy = spec.substr(5);
  Emotion fixed = Emotion::kNeutral;
  if (const auto colon = policy.find(':'); colon != std::string::npos) {
    const auto label = parse_emotion(policy.substr(colon + 1));
    if (!label) throw PreconditionError("unknown label in backend " + spec);
    fixed = *label;
    policy = policy.substr(0, colon);
  }
  return annotate::make_mock_backend(annotate::parse_mock_policy(policy), records, cfg.seed, fixed);
}

int cmd_annotate(const AnnotateArgs& a, std::ostream& out, std::ostream& err) {
  const auto cfg = effective_config(a.common);
  const auto records = corpus::load_manifest(a.common.manifest);
  annotate::AnnotateOptions options;
  options.variant = annotate::parse_variant(a.variant);
  options.shots = annotate::parse_shots(a.shots);
  options.seed = cfg.seed;
  options.balanced = a.balanced;
  options.concurrency = a.concurrency;
  options.failure_budget = a.failure_budget;

  annotate::ContextSources sources;
  if (annotate::needs_features(options.variant)) {
    if (a.features.empty()) throw PreconditionError("variant " + a.variant + " needs --features");
    for (auto& [id, f] : pipeline::read_features(pipeline::FeatureFiles{a.features}.features())) {
      sources.features.emplace(id, f);
    }
  }
  if (annotate::needs_codes(options.variant)) {
    if (a.codes.empty()) throw PreconditionError("variant " + a.variant + " needs --codes");
    for (auto& c : vqvae::read_codes(a.codes)) sources.codes.emplace(c.utterance_id, std::move(c.codes));
  }

  std::vector<corpus::UtteranceRecord> pool;
  if (!a.exemplars.empty()) {
    pool = corpus::load_manifest(a.exemplars);
  } else {
    for (const auto& r : records) {
      if (r.split == "train") pool.push_back(r);
    }
    if (pool.empty()) pool = records;
  }

  const auto backend = make_backend(a.backend, records, cfg);
  const fs::path dir = a.common.out;
  fs::create_directories(dir);
  annotate::ResponseCache cache(a.cache.empty() ? dir / "cache.jsonl" : fs::path(a.cache));
  std::optional<annotate::RateLimiter> limiter;
  if (a.backend == "http") limiter.emplace(cfg.backend.requests_per_minute);
  annotate::CallContext ctx;
  ctx.backend = backend.get();
  ctx.cache = &cache;
  ctx.limiter = limiter ? &*limiter : nullptr;
  ctx.retry = {cfg.backend.max_retries, cfg.backend.backoff_base_seconds};

  const auto run = annotate::annotate_corpus(records, pool, sources, options, ctx);
  annotate::write_annotations(dir / "annotations.jsonl", run.results);
  json summary = json::parse(run.summary.to_json());
  summary["schema_version"] = pipeline::kSchemaVersion;
  summary["kind"] = "annotation_summary";
  summary["backend_id"] = backend->id();
  summary["variant"] = a.variant;
  summary["shots"] = a.shots;
  summary["seed"] = cfg.seed;
  summary["template_version"] = std::string(annotate::kTemplateVersion);
  if (a.backend == "http") summary["backend_config"] = json::parse(cfg.backend.to_json());
  write_json(dir / "annotation_summary.json", summary);
  out << "annotate: " << run.summary.annotated << "/" << run.summary.records << " records, "
      << run.summary.backend_calls << " backend calls, " << run.summary.cache_hits << " cache hits\n";
  for (const auto& f : run.summary.failures) err << "error: " << f.utterance_id << ": " << f.message << '\n';
  return run.summary.failures.empty() ? 0 : 1;
}

// --- train-classifier / augment-eval -------------------------------------------

struct ProtocolArgs {
  Common common;
  std::vector<std::string> features;
  std::string labels = "gold";
  std::string annotations;
  std::string folds = "loso";
  std::string eval_manifest;
  std::string eval_annotations;
  double val_fraction = 0.3;
  std::optional<std::size_t> repeats;
  std::optional<std::size_t> max_epochs;
  std::string extra_manifest;
  std::string extra_annotations;
};

void add_protocol_options(CLI::App* sub, ProtocolArgs& a) {
  add_common(sub, a.common);
  sub->add_option("--features", a.features, "Feature directories holding mels.bin (repeatable)")
      ->required()
      ->check(CLI::ExistingDirectory);
  sub->add_option("--folds", a.folds, "Fold protocol")->check(CLI::IsMember({"loso", "cross", "fixed"}));
  sub->add_option("--eval-manifest", a.eval_manifest, "Evaluation corpus for --folds cross")
      ->check(CLI::ExistingFile);
  sub->add_option("--val-fraction", a.val_fraction, "Share of the evaluation corpus used for validation (cross)");
  sub->add_option("--repeats", a.repeats, "Repeats per fold (overrides the config file)");
  sub->add_option("--max-epochs", a.max_epochs, "Classifier epoch cap (overrides the config file)");
}

std::vector<corpus::UtteranceRecord> with_annotations(const std::string& manifest, const std::string& annotations) {
  auto records = corpus::load_manifest(manifest);
  if (!annotations.empty()) annotate::apply_annotations(records, annotate::read_annotations(annotations));
  return records;
}

corpus::FoldPlan make_plan(const ProtocolArgs& a, const std::vector<corpus::UtteranceRecord>& records,
                           std::uint64_t seed) {
  if (a.folds == "loso") return corpus::loso_folds(records);
  if (a.folds == "fixed") return corpus::fixed_split(records);
  if (a.eval_manifest.empty()) throw PreconditionError("--folds cross needs --eval-manifest");
  return corpus::cross_corpus_split(records, with_annotations(a.eval_manifest, a.eval_annotations), a.val_fraction,
                                    seed);
}

pipeline::ProtocolOptions protocol_options(const ProtocolArgs& a, const pipeline::PipelineConfig& cfg,
                                           std::ostream& err) {
  pipeline::ProtocolOptions o;
  o.config = cfg.classifier;
  if (a.max_epochs) o.config.max_epochs = *a.max_epochs;
  o.config.validate();
  if (a.repeats == 0u) throw PreconditionError("--repeats must be at least 1");
  o.seeds = pipeline::repeat_seeds(cfg.seed, a.repeats.value_or(cfg.repeats));
  o.labels = pipeline::parse_label_source(a.labels);
  o.artifacts_dir = a.common.out;
  o.log = [&err](const std::string& line) { err << line << '\n'; };
  return o;
}

int cmd_train_classifier(const ProtocolArgs& a, std::ostream& out, std::ostream& err) {
  const auto cfg = effective_config(a.common);
  const auto records = with_annotations(a.common.manifest, a.annotations);
  const auto plan = make_plan(a, records, cfg.seed);
  const auto mels = load_mel_stores(a.features);
  fs::create_directories(a.common.out);
  const auto report = pipeline::run_protocol(plan, mels, protocol_options(a, cfg, err));
  const fs::path path = fs::path(a.common.out) / "run_report.json";
  std::ofstream(path, std::ios::trunc) << report.to_json() << '\n';
  out << "train-classifier: " << plan.kind << " " << plan.folds.size() << " folds x " << report.seeds.size()
      << " repeats, UAR " << report.summary.mean << " +/- " << report.summary.stddev << " -> " << path.string()
      << '\n';
  return 0;
}

int cmd_augment_eval(const ProtocolArgs& a, std::ostream& out, std::ostream& err) {
  const auto cfg = effective_config(a.common);
  const auto records = corpus::load_manifest(a.common.manifest);
  const auto extra = with_annotations(a.extra_manifest, a.extra_annotations);
  const auto plan = make_plan(a, records, cfg.seed);
  const auto mels = load_mel_stores(a.features);
  fs::create_directories(a.common.out);
  const auto report = pipeline::augment_eval(plan, extra, mels, protocol_options(a, cfg, err));
  const fs::path path = fs::path(a.common.out) / "augment_report.json";
  std::ofstream(path, std::ios::trunc) << report.to_json() << '\n';
  out << "augment-eval: baseline " << report.baseline.summary.mean << ", augmented " << report.augmented.summary.mean
      << ", mean delta " << report.mean_delta << " (" << report.merge.extra_used << " extra, "
      << report.merge.excluded_unparseable << " unparseable excluded) -> " << path.string() << '\n';
  return 0;
}

// --- report / synth -------------------------------------------------------------

int cmd_report(const std::vector<std::string>& files, std::ostream& out, std::ostream& err) {
  int rc = 0;
  for (const auto& f : files) {
    try {
      out << f << ": " << pipeline::describe_report(f) << '\n';
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      rc = 1;
    }
  }
  return rc;
}

struct SynthArgs {
  std::string out;
  std::string corpus = "synthetic";
  corpus::SyntheticCorpusOptions options;
  std::size_t patterns = 0;
};

int cmd_synth(SynthArgs a, std::ostream& out) {
  const auto id = corpus::parse_corpus(a.corpus);
  if (!id) throw PreconditionError("unknown corpus " + a.corpus);
  a.options.corpus = *id;
  const auto records = a.patterns > 0 ? corpus::generate_pattern_corpus(a.out, a.patterns, a.options.seed)
                                      : corpus::generate_synthetic_corpus(a.out, a.options);
  out << "synth: " << records.size() << " utterances -> " << (fs::path(a.out) / "manifest.jsonl").string() << '\n';
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Speech emotion annotation and recognition pipeline", "serann"};
  app.require_subcommand(1);

  FeaturesArgs features;
  auto* features_cmd = app.add_subcommand("features", "Compute Mel spectrograms and utterance features");
  add_common(features_cmd, features.common);
  features_cmd->add_option("--threads", features.threads, "Worker threads (0 = all cores)");

  TrainVqArgs vq;
  auto* vq_cmd = app.add_subcommand("train-vqvae", "Train the VQ-VAE on the manifest's training records");
  add_common(vq_cmd, vq.common);
  vq_cmd->add_option("--features", vq.features, "Feature directory")->required()->check(CLI::ExistingDirectory);
  vq_cmd->add_option("--epochs", vq.epochs, "Epochs (overrides the config file)");
  vq_cmd->add_option("--batch-size", vq.batch_size, "Batch size (overrides the config file)");
  vq_cmd->add_option("--codebook-size", vq.codebook_size, "Codebook size (overrides the config file)");
  vq_cmd->add_option("--learning-rate", vq.learning_rate, "Learning rate (overrides the config file)");

  EncodeArgs enc;
  auto* enc_cmd = app.add_subcommand("encode", "Extract 64 VQ-VAE codes per utterance");
  add_common(enc_cmd, enc.common);
  enc_cmd->add_option("--features", enc.features, "Feature directory")->required()->check(CLI::ExistingDirectory);
  enc_cmd->add_option("--checkpoint", enc.checkpoint, "VQ-VAE checkpoint")->required()->check(CLI::ExistingFile);

  AnnotateArgs ann;
  auto* ann_cmd = app.add_subcommand("annotate", "Label utterances with an LLM backend");
  add_common(ann_cmd, ann.common);
  ann_cmd->add_option("--variant", ann.variant, "Context variant")
      ->check(CLI::IsMember({"text", "text_energy_f0", "text_energy_f0_gender", "text_energy_f0_gender_codes"}));
  ann_cmd->add_option("--shots", ann.shots, "zero or few")->check(CLI::IsMember({"zero", "few"}));
  ann_cmd->add_option("--backend", ann.backend, "http, mock:oracle, mock:random, mock:fixed:<label> or mock:keyword")
      ->required();
  ann_cmd->add_option("--features", ann.features, "Feature directory")->check(CLI::ExistingDirectory);
  ann_cmd->add_option("--codes", ann.codes, "codes.jsonl from encode")->check(CLI::ExistingFile);
  ann_cmd->add_option("--exemplars", ann.exemplars, "Manifest of few-shot candidates (default: split=train)")
      ->check(CLI::ExistingFile);
  ann_cmd->add_option("--cache", ann.cache, "Response cache (default: <out>/cache.jsonl)");
  ann_cmd->add_option("--concurrency", ann.concurrency, "Concurrent backend requests");
  ann_cmd->add_option("--failure-budget", ann.failure_budget, "Failed records tolerated before aborting");
  ann_cmd->add_flag("--balanced", ann.balanced, "Class-balanced few-shot exemplars");

  ProtocolArgs train;
  auto* train_cmd = app.add_subcommand("train-classifier", "Train and evaluate the classifier over folds and repeats");
  add_protocol_options(train_cmd, train);
  train_cmd->add_option("--labels", train.labels, "Training label source")->check(CLI::IsMember({"gold", "llm"}));
  train_cmd->add_option("--annotations", train.annotations, "annotations.jsonl applied to the manifest")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--eval-annotations", train.eval_annotations, "annotations.jsonl for --eval-manifest")
      ->check(CLI::ExistingFile);

  ProtocolArgs aug;
  auto* aug_cmd = app.add_subcommand("augment-eval", "Compare baseline and LLM-augmented training");
  add_protocol_options(aug_cmd, aug);
  aug_cmd->add_option("--extra-manifest", aug.extra_manifest, "Extra utterances")->required()->check(CLI::ExistingFile);
  aug_cmd->add_option("--extra-annotations", aug.extra_annotations, "annotations.jsonl for the extra utterances")
      ->required()
      ->check(CLI::ExistingFile);

  std::vector<std::string> report_files;
  auto* report_cmd = app.add_subcommand("report", "Validate and summarise report files");
  report_cmd->add_option("files", report_files, "Report JSON files")->required()->check(CLI::ExistingFile);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic corpus");
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();
  synth_cmd->add_option("--speakers", synth.options.speakers, "Speakers");
  synth_cmd->add_option("--per-class", synth.options.per_class_per_speaker, "Utterances per class per speaker");
  synth_cmd->add_option("--seconds", synth.options.seconds, "Clip length");
  synth_cmd->add_option("--seed", synth.options.seed, "Seed");
  synth_cmd->add_option("--prefix", synth.options.id_prefix, "Utterance id prefix");
  synth_cmd->add_option("--val-fraction", synth.options.val_fraction, "Share of speakers tagged val");
  synth_cmd->add_option("--test-fraction", synth.options.test_fraction, "Share of speakers tagged test");
  synth_cmd->add_option("--corpus", synth.corpus, "Corpus tag written to the manifest");
  synth_cmd->add_option("--patterns", synth.patterns, "Generate the two-pattern corpus with N clips per pattern");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*features_cmd) return cmd_features(features, out, err);
    if (*vq_cmd) return cmd_train_vqvae(vq, out, err);
    if (*enc_cmd) return cmd_encode(enc, out, err);
    if (*ann_cmd) return cmd_annotate(ann, out, err);
    if (*train_cmd) return cmd_train_classifier(train, out, err);
    if (*aug_cmd) return cmd_augment_eval(aug, out, err);
    if (*report_cmd) return cmd_report(report_files, out, err);
    if (*synth_cmd) return cmd_synth(synth, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace serann::cli
