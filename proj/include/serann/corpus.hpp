#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "serann/types.hpp"

namespace serann::corpus {

enum class CorpusId { kIemocap, kMspImprov, kMeld, kSynthetic };

std::string_view to_string(CorpusId c);
std::optional<CorpusId> parse_corpus(std::string_view name);

/// Where a training label came from once extra data has been merged in.
enum class Provenance { kGold, kLlm };

std::string_view to_string(Provenance p);

/// Label string written for an LLM reply that did not name exactly one class.
inline constexpr std::string_view kUnparseable = "UNPARSEABLE";

struct UtteranceRecord {
  std::string utterance_id;
  /// Resolved against the manifest directory on load.
  std::filesystem::path audio_path;
  std::string transcript;
  std::string speaker_id;
  Gender gender = Gender::kUnknown;
  CorpusId corpus = CorpusId::kSynthetic;
  std::optional<Emotion> gold_label;
  std::optional<Emotion> llm_label;
  /// Set when the LLM was asked and its reply was unparseable.
  bool llm_unparseable = false;
  /// Label in the corpus' own taxonomy, consumed by map_labels.
  std::optional<std::string> source_label;
  /// Optional user-assigned split tag such as "train", "val" or "test".
  std::optional<std::string> split;
  std::optional<Provenance> provenance;
};

/// Label used for training: the LLM label for merged LLM records, gold otherwise.
std::optional<Emotion> training_label(const UtteranceRecord& r);

/// Reads a JSONL manifest. Blank lines are skipped. Throws FormatError with
/// the line number on malformed JSON or a missing field, and on duplicate ids.
std::vector<UtteranceRecord> load_manifest(const std::filesystem::path& path);

/// Writes records as JSONL, with audio paths relative to the manifest directory.
void write_manifest(const std::filesystem::path& path, const std::vector<UtteranceRecord>& records);

// ---------------------------------------------------------------------------
// Label mapping

struct LabelMap {
  CorpusId corpus;
  std::map<std::string, Emotion> keep;
  std::vector<std::string> drop;
};

LabelMap iemocap_label_map();
LabelMap msp_improv_label_map();
LabelMap meld_label_map();
LabelMap synthetic_label_map();
LabelMap label_map_for(CorpusId corpus);

/// Published per-class sizes after mapping, in class-index order. MELD uses
/// joy = 1607 and anger = 2308, the reading under which the four classes sum
/// to the reported 11353 utterances.
std::array<std::int64_t, kNumEmotions> published_class_counts(CorpusId corpus);

struct DropReport {
  std::size_t input = 0;
  std::size_t kept = 0;
  std::size_t dropped = 0;
  std::map<std::string, std::size_t> dropped_by_label;
  std::array<std::size_t, kNumEmotions> kept_by_class{};
};

struct MappedRecords {
  std::vector<UtteranceRecord> records;
  DropReport report;
};

/// Sets gold_label from source_label. Records without a source_label pass
/// through unchanged. Throws FormatError naming any label the map neither
/// keeps nor drops.
MappedRecords map_labels(const std::vector<UtteranceRecord>& records, const LabelMap& map);

std::string drop_report_json(const DropReport& report);

// ---------------------------------------------------------------------------
// Splits

/// Index sets into FoldPlan::records.
struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
  std::vector<std::string> test_speakers;
  std::vector<std::string> val_speakers;
};

struct FoldPlan {
  std::string kind;
  std::vector<UtteranceRecord> records;
  std::vector<Fold> folds;
};

std::vector<UtteranceRecord> select(const FoldPlan& plan, const std::vector<std::size_t>& indices);

/// One fold per speaker (speakers in sorted order). The test set is that
/// speaker; the validation set is the next speaker in sorted order (wrapping);
/// the rest train. With two speakers there is no validation speaker and val
/// is empty. Throws PreconditionError for fewer than two speakers.
FoldPlan loso_folds(const std::vector<UtteranceRecord>& records);

/// Train on all of train_corpus; split eval_corpus into validation and test.
/// Validation gets round-half-up(val_fraction * N) records, stratified by gold
/// label with largest-remainder quotas; records are shuffled per class with
/// the seed. Single fold.
FoldPlan cross_corpus_split(const std::vector<UtteranceRecord>& train_corpus,
                            const std::vector<UtteranceRecord>& eval_corpus,
                            double val_fraction, std::uint64_t seed);

/// Uses the records' split tags ("train", "val", "test"). Single fold.
FoldPlan fixed_split(const std::vector<UtteranceRecord>& records);

struct MergeReport {
  std::size_t base = 0;
  std::size_t extra_used = 0;
  std::size_t excluded_unparseable = 0;
};

struct MergedRecords {
  std::vector<UtteranceRecord> records;
  MergeReport report;
};

/// Base records are tagged gold and extra records llm. Unparseable extras are
/// excluded and counted. Throws PreconditionError for an extra record with no
/// LLM annotation and for an id present in both sets.
MergedRecords augment_merge(const std::vector<UtteranceRecord>& base,
                            const std::vector<UtteranceRecord>& extra);

// ---------------------------------------------------------------------------
// Metrics

/// K x K counts, rows gold, columns predicted.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = kNumEmotions);

  std::size_t classes() const { return k_; }
  void add(std::size_t gold, std::size_t predicted, std::int64_t count = 1);
  std::int64_t at(std::size_t gold, std::size_t predicted) const { return counts_[gold * k_ + predicted]; }
  std::int64_t& at(std::size_t gold, std::size_t predicted) { return counts_[gold * k_ + predicted]; }
  std::int64_t support(std::size_t gold) const;
  std::int64_t total() const;

 private:
  std::size_t k_;
  std::vector<std::int64_t> counts_;
};

enum class ZeroSupport {
  kError,  ///< throw DegenerateDataError naming the class
  kSkip,   ///< average over classes that have support
};

double uar(const ConfusionMatrix& cm, ZeroSupport policy = ZeroSupport::kError);

struct RunReport {
  std::vector<double> uars;
  double mean = 0.0;
  double stddev = 0.0;
  std::string config_digest;
};

/// Arithmetic mean and sample standard deviation (n - 1; 0 for one value).
RunReport aggregate_runs(const std::vector<double>& uars, std::string config_digest = "");

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticCorpusOptions {
  std::size_t speakers = 10;
  std::size_t per_class_per_speaker = 2;
  double seconds = 1.5;
  std::uint64_t seed = 1;
  std::string id_prefix = "syn";
  CorpusId corpus = CorpusId::kSynthetic;
  /// Fractions of speakers (the last ones) whose utterances are tagged "val" and "test".
  double val_fraction = 0.2;
  double test_fraction = 0.2;
};

/// Writes one WAV per utterance plus manifest.jsonl into dir. Speakers
/// alternate male/female. Each class has its own pitch ratio, loudness and
/// harmonic brightness, and its transcript uses class keywords.
std::vector<UtteranceRecord> generate_synthetic_corpus(const std::filesystem::path& dir,
                                                       const SyntheticCorpusOptions& options);

/// Two spectrally distinct patterns: "low" (a steady 250 Hz tone with few
/// harmonics) and "high" (band-limited noise around 4-6 kHz). Clips are long
/// enough to fill all 256 Mel frames. The pattern name is the split field.
std::vector<UtteranceRecord> generate_pattern_corpus(const std::filesystem::path& dir,
                                                     std::size_t per_pattern, std::uint64_t seed);

/// Words the synthetic generator uses for each class.
const std::vector<std::string>& synthetic_keywords(Emotion e);

}  // namespace serann::corpus
