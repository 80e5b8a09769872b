#include "serann/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <unordered_set>

#include "serann/error.hpp"
#include "serann/rng.hpp"

namespace serann::corpus {

using nlohmann::json;

std::string_view to_string(CorpusId c) {
  switch (c) {
    case CorpusId::kIemocap:
      return "iemocap";
    case CorpusId::kMspImprov:
      return "mspimprov";
    case CorpusId::kMeld:
      return "meld";
    case CorpusId::kSynthetic:
      return "synthetic";
  }
  return "synthetic";
}

std::optional<CorpusId> parse_corpus(std::string_view name) {
  for (CorpusId c : {CorpusId::kIemocap, CorpusId::kMspImprov, CorpusId::kMeld, CorpusId::kSynthetic}) {
    if (to_string(c) == name) return c;
  }
  return std::nullopt;
}

std::string_view to_string(Provenance p) { return p == Provenance::kGold ? "gold" : "llm"; }

std::optional<Emotion> training_label(const UtteranceRecord& r) {
  if (r.provenance == Provenance::kLlm) return r.llm_label;
  return r.gold_label;
}

namespace {

std::string required_string(const json& j, const char* field, std::size_t line) {
  const auto it = j.find(field);
  if (it == j.end() || !it->is_string()) {
    throw FormatError("manifest line " + std::to_string(line) + ": missing or non-string field '" +
                      field + "'");
  }
  return it->get<std::string>();
}

std::optional<std::string> optional_string(const json& j, const char* field, std::size_t line) {
  const auto it = j.find(field);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) {
    throw FormatError("manifest line " + std::to_string(line) + ": field '" + field +
                      "' must be a string");
  }
  return it->get<std::string>();
}

Emotion emotion_field(const std::string& value, const char* field, std::size_t line) {
  const auto e = parse_emotion(value);
  if (!e) {
    throw FormatError("manifest line " + std::to_string(line) + ": " + field + " '" + value +
                      "' is not one of angry, happy, neutral, sad");
  }
  return *e;
}

}  // namespace

std::vector<UtteranceRecord> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path.string());
  const std::filesystem::path base = path.parent_path();
  std::vector<UtteranceRecord> records;
  std::unordered_set<std::string> seen;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw FormatError("manifest line " + std::to_string(line) + ": " + e.what());
    }
    if (!j.is_object()) throw FormatError("manifest line " + std::to_string(line) + ": not a JSON object");

    UtteranceRecord r;
    r.utterance_id = required_string(j, "utterance_id", line);
    r.audio_path = base / required_string(j, "audio_path", line);
    r.transcript = required_string(j, "transcript", line);
    r.speaker_id = required_string(j, "speaker_id", line);
    const std::string gender = required_string(j, "gender", line);
    const auto g = parse_gender(gender);
    if (!g) throw FormatError("manifest line " + std::to_string(line) + ": unknown gender '" + gender + "'");
    r.gender = *g;
    const std::string corpus = required_string(j, "corpus", line);
    const auto c = parse_corpus(corpus);
    if (!c) throw FormatError("manifest line " + std::to_string(line) + ": unknown corpus '" + corpus + "'");
    r.corpus = *c;
    if (auto gold = optional_string(j, "gold_label", line)) r.gold_label = emotion_field(*gold, "gold_label", line);
    if (auto llm = optional_string(j, "llm_label", line)) {
      if (*llm == kUnparseable) {
        r.llm_unparseable = true;
      } else {
        r.llm_label = emotion_field(*llm, "llm_label", line);
      }
    }
    r.source_label = optional_string(j, "source_label", line);
    r.split = optional_string(j, "split", line);
    if (auto prov = optional_string(j, "provenance", line)) {
      if (*prov == "gold") {
        r.provenance = Provenance::kGold;
      } else if (*prov == "llm") {
        r.provenance = Provenance::kLlm;
      } else {
        throw FormatError("manifest line " + std::to_string(line) + ": unknown provenance '" + *prov + "'");
      }
    }
    if (!seen.insert(r.utterance_id).second) {
      throw FormatError("manifest line " + std::to_string(line) + ": duplicate utterance_id '" +
                        r.utterance_id + "'");
    }
    records.push_back(std::move(r));
  }
  return records;
}

void write_manifest(const std::filesystem::path& path, const std::vector<UtteranceRecord>& records) {
  const std::filesystem::path base = std::filesystem::absolute(path).parent_path();
  if (!base.empty()) std::filesystem::create_directories(base);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write manifest " + path.string());
  for (const auto& r : records) {
    const auto audio = std::filesystem::absolute(r.audio_path).lexically_normal();
    json j = {{"utterance_id", r.utterance_id},
              {"audio_path", audio.lexically_relative(base.lexically_normal()).generic_string()},
              {"transcript", r.transcript},
              {"speaker_id", r.speaker_id},
              {"gender", std::string(to_string(r.gender))},
              {"corpus", std::string(to_string(r.corpus))}};
    if (r.gold_label) j["gold_label"] = std::string(to_string(*r.gold_label));
    if (r.llm_label) {
      j["llm_label"] = std::string(to_string(*r.llm_label));
    } else if (r.llm_unparseable) {
      j["llm_label"] = std::string(kUnparseable);
    }
    if (r.source_label) j["source_label"] = *r.source_label;
    if (r.split) j["split"] = *r.split;
    if (r.provenance) j["provenance"] = std::string(to_string(*r.provenance));
    out << j.dump() << '\n';
  }
}

LabelMap iemocap_label_map() {
  return {CorpusId::kIemocap,
          {{"ang", Emotion::kAngry},
           {"hap", Emotion::kHappy},
           {"exc", Emotion::kHappy},
           {"neu", Emotion::kNeutral},
           {"sad", Emotion::kSad}},
          {"fru", "sur", "fea", "dis", "oth", "xxx"}};
}

LabelMap msp_improv_label_map() {
  return {CorpusId::kMspImprov,
          {{"A", Emotion::kAngry}, {"H", Emotion::kHappy}, {"N", Emotion::kNeutral}, {"S", Emotion::kSad}},
          {"O", "X"}};
}

LabelMap meld_label_map() {
  return {CorpusId::kMeld,
          {{"anger", Emotion::kAngry},
           {"joy", Emotion::kHappy},
           {"neutral", Emotion::kNeutral},
           {"sadness", Emotion::kSad}},
          {"disgust", "surprise", "fear"}};
}

LabelMap synthetic_label_map() {
  LabelMap m{CorpusId::kSynthetic, {}, {}};
  for (Emotion e : kAllEmotions) m.keep.emplace(std::string(to_string(e)), e);
  return m;
}

LabelMap label_map_for(CorpusId corpus) {
  switch (corpus) {
    case CorpusId::kIemocap:
      return iemocap_label_map();
    case CorpusId::kMspImprov:
      return msp_improv_label_map();
    case CorpusId::kMeld:
      return meld_label_map();
    case CorpusId::kSynthetic:
      return synthetic_label_map();
  }
  return synthetic_label_map();
}

std::array<std::int64_t, kNumEmotions> published_class_counts(CorpusId corpus) {
  switch (corpus) {
    case CorpusId::kIemocap:
      return {1103, 1636, 1708, 1084};
    case CorpusId::kMspImprov:
      return {792, 2644, 3477, 885};
    case CorpusId::kMeld:
      return {2308, 1607, 6436, 1002};
    case CorpusId::kSynthetic:
      break;
  }
  throw PreconditionError("no published class counts for the synthetic corpus");
}

MappedRecords map_labels(const std::vector<UtteranceRecord>& records, const LabelMap& map) {
  const std::set<std::string> drop(map.drop.begin(), map.drop.end());
  MappedRecords out;
  out.report.input = records.size();
  for (const auto& r : records) {
    if (!r.source_label) {
      out.records.push_back(r);
      if (r.gold_label) ++out.report.kept_by_class[class_index(*r.gold_label)];
      continue;
    }
    const std::string& label = *r.source_label;
    if (const auto it = map.keep.find(label); it != map.keep.end()) {
      UtteranceRecord kept = r;
      kept.gold_label = it->second;
      ++out.report.kept_by_class[class_index(it->second)];
      out.records.push_back(std::move(kept));
    } else if (drop.count(label)) {
      ++out.report.dropped;
      ++out.report.dropped_by_label[label];
    } else {
      throw FormatError("label '" + label + "' of utterance '" + r.utterance_id +
                        "' is not covered by the " + std::string(to_string(map.corpus)) + " label map");
    }
  }
  out.report.kept = out.records.size();
  return out;
}

std::string drop_report_json(const DropReport& report) {
  json kept_by_class = json::object();
  for (Emotion e : kAllEmotions) kept_by_class[std::string(to_string(e))] = report.kept_by_class[class_index(e)];
  json j = {{"schema_version", 1},
            {"input", report.input},
            {"kept", report.kept},
            {"dropped", report.dropped},
            {"dropped_by_label", report.dropped_by_label},
            {"kept_by_class", kept_by_class}};
  return j.dump(2);
}

std::vector<UtteranceRecord> select(const FoldPlan& plan, const std::vector<std::size_t>& indices) {
  std::vector<UtteranceRecord> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(plan.records.at(i));
  return out;
}

FoldPlan loso_folds(const std::vector<UtteranceRecord>& records) {
  std::set<std::string> speaker_set;
  for (const auto& r : records) speaker_set.insert(r.speaker_id);
  if (speaker_set.size() < 2) {
    throw PreconditionError("leave-one-speaker-out needs at least two speakers, found " +
                            std::to_string(speaker_set.size()));
  }
  const std::vector<std::string> speakers(speaker_set.begin(), speaker_set.end());
  FoldPlan plan{"loso", records, {}};
  for (std::size_t s = 0; s < speakers.size(); ++s) {
    Fold fold;
    fold.test_speakers = {speakers[s]};
    if (speakers.size() > 2) fold.val_speakers = {speakers[(s + 1) % speakers.size()]};
    for (std::size_t i = 0; i < records.size(); ++i) {
      const std::string& sp = records[i].speaker_id;
      if (sp == fold.test_speakers[0]) {
        fold.test.push_back(i);
      } else if (!fold.val_speakers.empty() && sp == fold.val_speakers[0]) {
        fold.val.push_back(i);
      } else {
        fold.train.push_back(i);
      }
    }
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

FoldPlan cross_corpus_split(const std::vector<UtteranceRecord>& train_corpus,
                            const std::vector<UtteranceRecord>& eval_corpus, double val_fraction,
                            std::uint64_t seed) {
  if (train_corpus.empty() || eval_corpus.empty()) {
    throw PreconditionError("cross-corpus split needs non-empty training and evaluation corpora");
  }
  if (!(val_fraction >= 0.0 && val_fraction <= 1.0)) {
    throw PreconditionError("val_fraction must lie in [0, 1]");
  }
  FoldPlan plan{"cross", train_corpus, {}};
  plan.records.insert(plan.records.end(), eval_corpus.begin(), eval_corpus.end());
  Fold fold;
  for (std::size_t i = 0; i < train_corpus.size(); ++i) fold.train.push_back(i);

  // Strata are the four classes plus one for unlabelled records.
  constexpr std::size_t kStrata = kNumEmotions + 1;
  std::array<std::vector<std::size_t>, kStrata> strata;
  for (std::size_t i = 0; i < eval_corpus.size(); ++i) {
    const auto& g = eval_corpus[i].gold_label;
    strata[g ? class_index(*g) : kNumEmotions].push_back(train_corpus.size() + i);
  }
  const auto n = static_cast<double>(eval_corpus.size());
  const auto val_total = static_cast<std::size_t>(std::floor(val_fraction * n + 0.5));
  std::array<std::size_t, kStrata> quota{};
  std::array<double, kStrata> remainder{};
  std::size_t assigned = 0;
  for (std::size_t s = 0; s < kStrata; ++s) {
    const double exact = val_fraction * static_cast<double>(strata[s].size());
    quota[s] = static_cast<std::size_t>(std::floor(exact));
    remainder[s] = exact - std::floor(exact);
    assigned += quota[s];
  }
  std::array<std::size_t, kStrata> order{};
  for (std::size_t s = 0; s < kStrata; ++s) order[s] = s;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < val_total && k < kStrata; ++k) {
    if (quota[order[k]] < strata[order[k]].size()) {
      ++quota[order[k]];
      ++assigned;
    }
  }

  Rng rng(seed);
  for (std::size_t s = 0; s < kStrata; ++s) {
    auto& members = strata[s];
    rng.shuffle(std::span<std::size_t>(members));
    fold.val.insert(fold.val.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(quota[s]));
    fold.test.insert(fold.test.end(), members.begin() + static_cast<std::ptrdiff_t>(quota[s]), members.end());
  }
  std::sort(fold.val.begin(), fold.val.end());
  std::sort(fold.test.begin(), fold.test.end());
  plan.folds.push_back(std::move(fold));
  return plan;
}

FoldPlan fixed_split(const std::vector<UtteranceRecord>& records) {
  FoldPlan plan{"fixed", records, {}};
  Fold fold;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const std::string tag = records[i].split.value_or("");
    if (tag == "train") {
      fold.train.push_back(i);
    } else if (tag == "val") {
      fold.val.push_back(i);
    } else if (tag == "test") {
      fold.test.push_back(i);
    } else {
      throw PreconditionError("utterance '" + records[i].utterance_id +
                              "' has no train/val/test split tag");
    }
  }
  plan.folds.push_back(std::move(fold));
  return plan;
}

MergedRecords augment_merge(const std::vector<UtteranceRecord>& base,
                            const std::vector<UtteranceRecord>& extra) {
  MergedRecords out;
  std::unordered_set<std::string> ids;
  for (const auto& r : base) {
    ids.insert(r.utterance_id);
    UtteranceRecord copy = r;
    copy.provenance = Provenance::kGold;
    out.records.push_back(std::move(copy));
  }
  out.report.base = base.size();
  for (const auto& r : extra) {
    if (ids.count(r.utterance_id)) {
      throw PreconditionError("utterance id '" + r.utterance_id + "' appears in both base and extra data");
    }
    if (r.llm_unparseable) {
      ++out.report.excluded_unparseable;
      continue;
    }
    if (!r.llm_label) {
      throw PreconditionError("extra utterance '" + r.utterance_id + "' has no LLM label");
    }
    ids.insert(r.utterance_id);
    UtteranceRecord copy = r;
    copy.provenance = Provenance::kLlm;
    out.records.push_back(std::move(copy));
    ++out.report.extra_used;
  }
  return out;
}

}  // namespace serann::corpus
