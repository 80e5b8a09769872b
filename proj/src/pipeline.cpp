#include "serann/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>

#include "serann/checkpoint.hpp"
#include "serann/error.hpp"
#include "serann/rng.hpp"

namespace serann::pipeline {

using nlohmann::json;

namespace {

template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

json parse_or_throw(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError("invalid " + what + ": " + e.what());
  }
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::optional<Emotion> label_from(const corpus::UtteranceRecord& r, LabelSource source) {
  if (r.provenance) return corpus::training_label(r);
  if (source == LabelSource::kGold) return r.gold_label;
  if (r.llm_unparseable) return std::nullopt;
  return r.llm_label;
}

const dsp::MelSpec& mel_for(const MelStore& mels, const corpus::UtteranceRecord& r) {
  const auto it = mels.find(r.utterance_id);
  if (it == mels.end()) throw PreconditionError("no Mel spectrogram for " + r.utterance_id);
  return it->second;
}

json fold_json(const FoldResult& f) {
  return {{"index", f.index},
          {"test_speakers", f.test_speakers},
          {"val_speakers", f.val_speakers},
          {"train_size", f.train_size},
          {"val_size", f.val_size},
          {"test_size", f.test_size},
          {"excluded_unlabelled", f.excluded_unlabelled},
          {"uars", f.uars},
          {"best_epochs", f.best_epochs},
          {"epochs_run", f.epochs_run}};
}

json protocol_json(const ProtocolReport& r) {
  json folds = json::array();
  for (const auto& f : r.folds) folds.push_back(fold_json(f));
  return {{"schema_version", kSchemaVersion},
          {"kind", "run_report"},
          {"protocol", r.protocol},
          {"labels", std::string(to_string(r.labels))},
          {"config", json::parse(r.config.to_json())},
          {"seeds", r.seeds},
          {"repeats", r.seeds.size()},
          {"config_digest", r.summary.config_digest},
          {"folds", folds},
          {"uars", r.summary.uars},
          {"mean", r.summary.mean},
          {"std", r.summary.stddev}};
}

}  // namespace

ExtractedFeatures extract_features(const std::vector<corpus::UtteranceRecord>& records, std::size_t threads) {
  struct Slot {
    std::optional<dsp::MelSpec> mel;
    dsp::UtteranceFeatures features;
    std::string error;
  };
  std::vector<Slot> slots(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) {
    try {
      const auto clip = dsp::read_wav(records[i].audio_path);
      slots[i].mel = dsp::mel_spectrogram(clip);
      slots[i].features = dsp::extract_features(clip, records[i].gender);
    } catch (const std::exception& e) {
      slots[i].error = e.what();
    }
  });
  ExtractedFeatures out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& id = records[i].utterance_id;
    if (!slots[i].mel) {
      out.failures.push_back({id, slots[i].error});
      continue;
    }
    out.mels.emplace(id, std::move(*slots[i].mel));
    out.features.emplace(id, slots[i].features);
  }
  return out;
}

void write_mels(const std::filesystem::path& path, const MelStore& mels) {
  Container c;
  c.metadata = json{{"kind", "mels"}, {"count", mels.size()}}.dump();
  c.blobs.reserve(mels.size());
  for (const auto& [id, mel] : mels) c.blobs.push_back({id, mel.tensor(), BlobType::kFloat64});
  write_container(path, c);
}

MelStore read_mels(const std::filesystem::path& path) {
  const Container c = read_container(path);
  const json meta = parse_or_throw(c.metadata, "Mel store metadata");
  if (meta.value("kind", "") != "mels") throw FormatError(path.string() + " is not a Mel store");
  MelStore out;
  for (const auto& b : c.blobs) out.emplace(b.name, dsp::MelSpec(b.tensor));
  return out;
}

void write_features(const std::filesystem::path& path, const FeatureStore& features) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write features file " + path.string());
  for (const auto& [id, f] : features) {
    out << json{{"utterance_id", id},
                {"avg_energy", f.avg_energy},
                {"avg_pitch_hz", f.avg_pitch_hz},
                {"gender", std::string(to_string(f.gender))}}
               .dump()
        << '\n';
  }
}

FeatureStore read_features(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open features file " + path.string());
  FeatureStore out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(text);
      dsp::UtteranceFeatures f;
      f.avg_energy = j.at("avg_energy").get<double>();
      f.avg_pitch_hz = j.at("avg_pitch_hz").get<double>();
      const auto g = parse_gender(j.value("gender", "unknown"));
      if (!g) throw FormatError("unknown gender");
      f.gender = *g;
      out[j.at("utterance_id").get<std::string>()] = f;
    } catch (const std::exception& e) {
      throw FormatError(path.string() + " line " + std::to_string(line) + ": " + e.what());
    }
  }
  return out;
}

std::vector<dsp::MelSpec> gather_mels(const std::vector<corpus::UtteranceRecord>& records, const MelStore& mels) {
  std::vector<dsp::MelSpec> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(mel_for(mels, r));
  return out;
}

std::vector<vqvae::CodesRecord> encode_all(const vqvae::VqVae& model,
                                           const std::vector<corpus::UtteranceRecord>& records,
                                           const MelStore& mels) {
  std::vector<vqvae::CodesRecord> out(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    out[i] = {records[i].utterance_id, model.codes(mel_for(mels, records[i]))};
  }
  return out;
}

std::map<std::string, std::vector<std::int32_t>> codes_by_id(const std::vector<vqvae::CodesRecord>& codes) {
  std::map<std::string, std::vector<std::int32_t>> out;
  for (const auto& c : codes) out[c.utterance_id] = c.codes;
  return out;
}

std::string_view to_string(LabelSource s) { return s == LabelSource::kGold ? "gold" : "llm"; }

LabelSource parse_label_source(std::string_view name) {
  if (name == "gold") return LabelSource::kGold;
  if (name == "llm") return LabelSource::kLlm;
  throw PreconditionError("unknown label source: " + std::string(name));
}

std::string ProtocolReport::to_json() const { return protocol_json(*this).dump(2); }

std::string config_digest(const classifier::ClassifierConfig& config, std::string_view protocol, LabelSource labels,
                          const std::vector<std::uint64_t>& seeds) {
  const json j = {{"classifier", json::parse(config.to_json())},
                  {"protocol", protocol},
                  {"labels", to_string(labels)},
                  {"seeds", seeds}};
  return annotate::sha256_hex(j.dump());
}

std::vector<std::uint64_t> repeat_seeds(std::uint64_t base, std::size_t repeats) {
  std::vector<std::uint64_t> out(repeats);
  for (std::size_t r = 0; r < repeats; ++r) out[r] = base + r;
  return out;
}

ProtocolReport run_protocol(const corpus::FoldPlan& plan, const MelStore& mels, const ProtocolOptions& options,
                            const std::vector<corpus::UtteranceRecord>& extra) {
  options.config.validate();
  if (options.seeds.empty()) throw PreconditionError("at least one repeat seed is required");
  if (plan.folds.empty()) throw PreconditionError("fold plan has no folds");

  ProtocolReport report;
  report.protocol = plan.kind;
  report.labels = options.labels;
  report.config = options.config;
  report.seeds = options.seeds;
  if (!options.artifacts_dir.empty()) {
    std::filesystem::create_directories(options.artifacts_dir / "checkpoints");
    std::filesystem::create_directories(options.artifacts_dir / "history");
  }

  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    const auto& fold = plan.folds[f];
    FoldResult result;
    result.index = f;
    result.test_speakers = fold.test_speakers;
    result.val_speakers = fold.val_speakers;

    const auto labelled = [&](const corpus::UtteranceRecord& r, std::vector<classifier::Sample>& into) {
      const auto label = label_from(r, options.labels);
      if (!label) {
        ++result.excluded_unlabelled;
        return;
      }
      into.push_back({&mel_for(mels, r), class_index(*label)});
    };
    std::vector<classifier::Sample> train_set, val_set, test_set;
    for (std::size_t i : fold.train) labelled(plan.records[i], train_set);
    for (const auto& r : extra) labelled(r, train_set);
    for (std::size_t i : fold.val) labelled(plan.records[i], val_set);
    for (std::size_t i : fold.test) {
      const auto& r = plan.records[i];
      if (!r.gold_label) throw PreconditionError("test record " + r.utterance_id + " has no gold label");
      test_set.push_back({&mel_for(mels, r), class_index(*r.gold_label)});
    }
    result.train_size = train_set.size();
    result.val_size = val_set.size();
    result.test_size = test_set.size();
    if (test_set.empty()) throw PreconditionError("fold " + std::to_string(f) + " has no test records");

    for (std::size_t r = 0; r < options.seeds.size(); ++r) {
      const std::uint64_t seed = mix_seed(options.seeds[r], f);
      classifier::Classifier model(options.config, seed);
      const auto trained = classifier::train(model, train_set, val_set, seed);
      const double test_uar = classifier::evaluate_uar(model, test_set);
      result.uars.push_back(test_uar);
      result.best_epochs.push_back(trained.best_epoch);
      result.epochs_run.push_back(trained.history.size());
      const std::string tag = "fold" + std::to_string(f) + "_rep" + std::to_string(r);
      if (!options.artifacts_dir.empty()) {
        model.save(options.artifacts_dir / "checkpoints" / (tag + ".ckpt"));
        classifier::write_history(options.artifacts_dir / "history" / (tag + ".jsonl"), trained.history);
      }
      if (options.log) {
        std::ostringstream line;
        line << plan.kind << " " << tag << " seed=" << options.seeds[r] << " epochs=" << trained.history.size()
             << " best_epoch=" << trained.best_epoch << " test_uar=" << test_uar;
        options.log(line.str());
      }
    }
    report.folds.push_back(std::move(result));
  }

  std::vector<double> per_repeat(options.seeds.size(), 0.0);
  for (std::size_t r = 0; r < per_repeat.size(); ++r) {
    for (const auto& fold : report.folds) per_repeat[r] += fold.uars[r];
    per_repeat[r] /= static_cast<double>(report.folds.size());
  }
  report.summary = corpus::aggregate_runs(
      per_repeat, config_digest(options.config, plan.kind, options.labels, options.seeds));
  return report;
}

std::string AugmentReport::to_json() const {
  const json j = {{"schema_version", kSchemaVersion},
                  {"kind", "augment_report"},
                  {"merge",
                   {{"base", merge.base},
                    {"extra_used", merge.extra_used},
                    {"excluded_unparseable", merge.excluded_unparseable}}},
                  {"baseline", protocol_json(baseline)},
                  {"augmented", protocol_json(augmented)},
                  {"deltas", deltas},
                  {"mean_delta", mean_delta}};
  return j.dump(2);
}

AugmentReport augment_eval(const corpus::FoldPlan& plan, const std::vector<corpus::UtteranceRecord>& extra,
                           const MelStore& mels, const ProtocolOptions& options) {
  const auto merged = corpus::augment_merge(plan.records, extra);
  std::vector<corpus::UtteranceRecord> extras;
  for (const auto& r : merged.records) {
    if (r.provenance == corpus::Provenance::kLlm) extras.push_back(r);
  }

  AugmentReport out;
  out.merge = merged.report;
  ProtocolOptions base_opts = options;
  ProtocolOptions aug_opts = options;
  if (!options.artifacts_dir.empty()) {
    base_opts.artifacts_dir = options.artifacts_dir / "baseline";
    aug_opts.artifacts_dir = options.artifacts_dir / "augmented";
  }
  out.baseline = run_protocol(plan, mels, base_opts);
  out.augmented = run_protocol(plan, mels, aug_opts, extras);
  for (std::size_t r = 0; r < options.seeds.size(); ++r) {
    out.deltas.push_back(out.augmented.summary.uars[r] - out.baseline.summary.uars[r]);
  }
  out.mean_delta = out.augmented.summary.mean - out.baseline.summary.mean;
  return out;
}

PipelineConfig PipelineConfig::defaults(bool desk) {
  PipelineConfig c;
  c.vqvae = desk ? vqvae::VqVaeConfig::desk() : vqvae::VqVaeConfig::full();
  c.classifier = desk ? classifier::ClassifierConfig::desk() : classifier::ClassifierConfig::full();
  return c;
}

PipelineConfig PipelineConfig::from_json(const std::string& text, const PipelineConfig& base) {
  const json j = parse_or_throw(text, "pipeline config");
  if (!j.is_object()) throw FormatError("pipeline config must be a JSON object");
  PipelineConfig c = base;
  for (const auto& [key, value] : j.items()) {
    if (key == "vqvae") {
      c.vqvae = vqvae::VqVaeConfig::from_json(value.dump(), c.vqvae);
    } else if (key == "classifier") {
      c.classifier = classifier::ClassifierConfig::from_json(value.dump(), c.classifier);
    } else if (key == "backend") {
      c.backend = annotate::BackendConfig::from_json(value.dump(), c.backend);
    } else if (key == "repeats") {
      c.repeats = value.get<std::size_t>();
    } else if (key == "seed") {
      c.seed = value.get<std::uint64_t>();
    } else {
      throw FormatError("unknown pipeline config key: " + key);
    }
  }
  if (c.repeats == 0) throw PreconditionError("repeats must be at least 1");
  return c;
}

std::string PipelineConfig::to_json() const {
  return json{{"vqvae", json::parse(vqvae.to_json())},
              {"classifier", json::parse(classifier.to_json())},
              {"backend", json::parse(backend.to_json())},
              {"repeats", repeats},
              {"seed", seed}}
      .dump();
}

PipelineConfig load_config(const std::optional<std::filesystem::path>& path, bool desk) {
  const PipelineConfig base = PipelineConfig::defaults(desk);
  if (!path) return base;
  return PipelineConfig::from_json(read_text(*path), base);
}

std::string describe_report(const std::filesystem::path& path) {
  const json j = parse_or_throw(read_text(path), "report " + path.string());
  if (!j.is_object() || !j.contains("schema_version") || !j.contains("kind")) {
    throw FormatError(path.string() + " is not a report (schema_version and kind required)");
  }
  if (j.at("schema_version") != kSchemaVersion) {
    throw FormatError(path.string() + ": unsupported schema_version " + j.at("schema_version").dump());
  }
  const std::string kind = j.at("kind").get<std::string>();
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(4);
  const auto run_line = [&out](const json& r) {
    out << r.at("protocol").get<std::string>() << " labels=" << r.at("labels").get<std::string>()
        << " folds=" << r.at("folds").size() << " repeats=" << r.at("uars").size()
        << " uar=" << r.at("mean").get<double>() << " +/- " << r.at("std").get<double>();
  };
  try {
    out << kind << ": ";
    if (kind == "run_report") {
      run_line(j);
      out << " digest=" << j.at("config_digest").get<std::string>().substr(0, 12);
    } else if (kind == "augment_report") {
      out << "baseline ";
      run_line(j.at("baseline"));
      out << "; augmented ";
      run_line(j.at("augmented"));
      out << "; mean_delta=" << j.at("mean_delta").get<double>()
          << " extra_used=" << j.at("merge").at("extra_used").get<std::size_t>();
    } else if (kind == "annotation_summary") {
      out << "records=" << j.at("records").get<std::size_t>() << " annotated=" << j.at("annotated").get<std::size_t>()
          << " unparseable_rate=" << j.at("unparseable_rate").get<double>()
          << " cache_hit_rate=" << j.at("cache_hit_rate").get<double>()
          << " failures=" << j.at("failures").size();
    } else if (kind == "features_report" || kind == "encode_report") {
      out << "records=" << j.at("records").get<std::size_t>() << " written=" << j.at("written").get<std::size_t>()
          << " failures=" << j.at("failures").size();
    } else if (kind == "vqvae_report") {
      out << "epochs=" << j.at("epochs").get<std::size_t>()
          << " first_recon=" << j.at("first_recon").get<double>()
          << " final_recon=" << j.at("final_recon").get<double>();
    } else {
      throw FormatError(path.string() + ": unknown report kind " + kind);
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed " + kind + ": " + e.what());
  }
  return out.str();
}

}  // namespace serann::pipeline
