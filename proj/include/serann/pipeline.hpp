#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "serann/annotate.hpp"
#include "serann/classifier.hpp"
#include "serann/corpus.hpp"
#include "serann/dsp.hpp"
#include "serann/vqvae.hpp"

namespace serann::pipeline {

inline constexpr int kSchemaVersion = 1;

using MelStore = std::map<std::string, dsp::MelSpec>;
using FeatureStore = std::map<std::string, dsp::UtteranceFeatures>;

struct RecordFailure {
  std::string utterance_id;
  std::string message;
};

struct ExtractedFeatures {
  MelStore mels;
  FeatureStore features;
  std::vector<RecordFailure> failures;  ///< in manifest order
};

/// Reads every clip and computes its Mel spectrogram and utterance features,
/// spread over `threads` workers (0 = hardware concurrency). Per-record
/// failures are collected rather than thrown.
ExtractedFeatures extract_features(const std::vector<corpus::UtteranceRecord>& records, std::size_t threads = 0);

/// Directory layout written by the features stage.
struct FeatureFiles {
  std::filesystem::path dir;
  std::filesystem::path mels() const { return dir / "mels.bin"; }
  std::filesystem::path features() const { return dir / "features.jsonl"; }
};

void write_mels(const std::filesystem::path& path, const MelStore& mels);
MelStore read_mels(const std::filesystem::path& path);
/// One line per record: {utterance_id, avg_energy, avg_pitch_hz, gender}.
void write_features(const std::filesystem::path& path, const FeatureStore& features);
FeatureStore read_features(const std::filesystem::path& path);

/// Throws PreconditionError naming the first record without an entry.
std::vector<dsp::MelSpec> gather_mels(const std::vector<corpus::UtteranceRecord>& records, const MelStore& mels);

std::vector<vqvae::CodesRecord> encode_all(const vqvae::VqVae& model,
                                           const std::vector<corpus::UtteranceRecord>& records,
                                           const MelStore& mels);

std::map<std::string, std::vector<std::int32_t>> codes_by_id(const std::vector<vqvae::CodesRecord>& codes);

// ---------------------------------------------------------------------------
// Classifier protocols

enum class LabelSource { kGold, kLlm };
std::string_view to_string(LabelSource s);
LabelSource parse_label_source(std::string_view name);

struct ProtocolOptions {
  classifier::ClassifierConfig config = classifier::ClassifierConfig::desk();
  std::vector<std::uint64_t> seeds = {1};  ///< one repeat per seed
  LabelSource labels = LabelSource::kGold;
  /// Where checkpoints and per-run histories go; nothing is written if empty.
  std::filesystem::path artifacts_dir;
  std::function<void(const std::string&)> log;
};

struct FoldResult {
  std::size_t index = 0;
  std::vector<std::string> test_speakers;
  std::vector<std::string> val_speakers;
  std::size_t train_size = 0;
  std::size_t val_size = 0;
  std::size_t test_size = 0;
  /// Train/val records left out for lacking a label from the source.
  std::size_t excluded_unlabelled = 0;
  std::vector<double> uars;  ///< test UAR per repeat
  std::vector<std::size_t> best_epochs;
  std::vector<std::size_t> epochs_run;
};

struct ProtocolReport {
  std::string protocol;  ///< FoldPlan::kind
  LabelSource labels = LabelSource::kGold;
  classifier::ClassifierConfig config;
  std::vector<std::uint64_t> seeds;
  std::vector<FoldResult> folds;
  /// uars holds one value per repeat: the mean test UAR over folds.
  corpus::RunReport summary;

  /// {schema_version, kind: "run_report", ...}
  std::string to_json() const;
};

/// SHA-256 over the canonical JSON of everything that determines a run:
/// classifier config, protocol, label source and seeds.
std::string config_digest(const classifier::ClassifierConfig& config, std::string_view protocol,
                          LabelSource labels, const std::vector<std::uint64_t>& seeds);

/// Seeds base, base + 1, ..., base + repeats - 1.
std::vector<std::uint64_t> repeat_seeds(std::uint64_t base, std::size_t repeats);

/// Trains one classifier per fold and repeat and scores it on the fold's test
/// records against gold labels. Training and validation use the label source
/// (records without such a label are left out). Records in `extra` are added
/// to every fold's training set with their LLM labels. Repeat r seeds fold f
/// with mix_seed(seeds[r], f).
ProtocolReport run_protocol(const corpus::FoldPlan& plan, const MelStore& mels, const ProtocolOptions& options,
                            const std::vector<corpus::UtteranceRecord>& extra = {});

struct AugmentReport {
  ProtocolReport baseline;
  ProtocolReport augmented;
  corpus::MergeReport merge;
  std::vector<double> deltas;  ///< augmented - baseline, per repeat
  double mean_delta = 0.0;

  /// {schema_version, kind: "augment_report", ...}
  std::string to_json() const;
};

/// Baseline and augmented runs over the same folds and seeds. Unparseable
/// extras are excluded and counted in `merge`.
AugmentReport augment_eval(const corpus::FoldPlan& plan, const std::vector<corpus::UtteranceRecord>& extra,
                           const MelStore& mels, const ProtocolOptions& options);

// ---------------------------------------------------------------------------
// Configuration

/// Stage settings read from a JSON config file with optional sections
/// "vqvae", "classifier" and "backend" plus top-level "repeats" and "seed".
/// Missing keys keep the base profile (full or desk).
struct PipelineConfig {
  vqvae::VqVaeConfig vqvae = vqvae::VqVaeConfig::full();
  classifier::ClassifierConfig classifier = classifier::ClassifierConfig::full();
  annotate::BackendConfig backend;
  std::size_t repeats = 10;
  std::uint64_t seed = 1;

  static PipelineConfig defaults(bool desk);
  /// Throws FormatError on malformed JSON or unknown sections.
  static PipelineConfig from_json(const std::string& text, const PipelineConfig& base);
  std::string to_json() const;
};

PipelineConfig load_config(const std::optional<std::filesystem::path>& path, bool desk);

/// Summary line for a report file written by this library. Throws
/// FormatError if the file is not a report or has an unknown schema version.
std::string describe_report(const std::filesystem::path& path);

}  // namespace serann::pipeline
