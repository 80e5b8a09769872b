#include "serann/annotate.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <thread>

namespace serann::annotate {

using nlohmann::json;

namespace {

constexpr std::string_view kUnparseable = "UNPARSEABLE";

constexpr std::string_view kSystemPrompt =
    "You are an expert annotator of emotion in recorded speech. Each utterance is described by its "
    "transcript and, when available, measurements of the audio.\n"
    "Classify the emotion of the target utterance into exactly one of: angry, happy, neutral, sad. "
    "Answer with the single word.";

std::string one_line(std::string_view text) {
  std::string out(text);
  for (char& c : out) {
    if (c == '\n' || c == '\r' || c == '\t') c = ' ';
  }
  return out;
}

std::string format_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void append_context(std::string& out, const UtteranceContext& ctx, ContextVariant variant) {
  out += "transcript: " + one_line(ctx.transcript) + "\n";
  if (needs_features(variant)) {
    if (!ctx.features) throw PreconditionError(ctx.utterance_id + ": variant needs features (avg_energy, avg_pitch_hz)");
    out += "average energy (0-1 RMS): " + format_fixed(ctx.features->avg_energy, 3) + "\n";
    out += "average pitch: " + format_fixed(ctx.features->avg_pitch_hz, 0) + " Hz\n";
  }
  if (needs_gender(variant)) {
    if (ctx.features->gender == Gender::kUnknown) {
      throw PreconditionError(ctx.utterance_id + ": variant needs the speaker gender");
    }
    out += "speaker gender: " + std::string(to_string(ctx.features->gender)) + "\n";
  }
  if (needs_codes(variant)) {
    if (!ctx.codes || ctx.codes->empty()) throw PreconditionError(ctx.utterance_id + ": variant needs audio codes");
    out += "audio codes:";
    for (std::int32_t c : *ctx.codes) out += " " + std::to_string(c);
    out += "\n";
  }
}

std::string failure_kind(const std::exception& e) {
  if (dynamic_cast<const AuthError*>(&e)) return "auth";
  if (dynamic_cast<const TimeoutError*>(&e)) return "timeout";
  if (dynamic_cast<const RetriesExhaustedError*>(&e)) return "retries_exhausted";
  return "other";
}

void real_sleep(double seconds) {
  if (seconds > 0) std::this_thread::sleep_for(std::chrono::duration<double>(seconds));
}

}  // namespace

std::string_view to_string(ContextVariant v) {
  switch (v) {
    case ContextVariant::kTextOnly: return "text";
    case ContextVariant::kTextEnergyF0: return "text_energy_f0";
    case ContextVariant::kTextEnergyF0Gender: return "text_energy_f0_gender";
    case ContextVariant::kTextEnergyF0GenderCodes: return "text_energy_f0_gender_codes";
  }
  return "text";
}

ContextVariant parse_variant(std::string_view name) {
  for (auto v : {ContextVariant::kTextOnly, ContextVariant::kTextEnergyF0, ContextVariant::kTextEnergyF0Gender,
                 ContextVariant::kTextEnergyF0GenderCodes}) {
    if (to_string(v) == name) return v;
  }
  throw PreconditionError("unknown context variant: " + std::string(name));
}

bool needs_features(ContextVariant v) { return v != ContextVariant::kTextOnly; }
bool needs_gender(ContextVariant v) {
  return v == ContextVariant::kTextEnergyF0Gender || v == ContextVariant::kTextEnergyF0GenderCodes;
}
bool needs_codes(ContextVariant v) { return v == ContextVariant::kTextEnergyF0GenderCodes; }

std::string_view to_string(Shots s) { return s == Shots::kZero ? "zero" : "few"; }

Shots parse_shots(std::string_view name) {
  if (name == "zero") return Shots::kZero;
  if (name == "few") return Shots::kFew;
  throw PreconditionError("shots must be zero or few, got " + std::string(name));
}

std::vector<const corpus::UtteranceRecord*> select_few_shot(const std::vector<corpus::UtteranceRecord>& pool,
                                                            std::size_t k, Rng& rng, bool balanced) {
  std::vector<const corpus::UtteranceRecord*> labelled;
  for (const auto& r : pool) {
    if (r.gold_label) labelled.push_back(&r);
  }
  if (labelled.size() < k) {
    throw PreconditionError("few-shot selection needs " + std::to_string(k) + " labelled records, pool has " +
                            std::to_string(labelled.size()));
  }
  if (!balanced) {
    // Partial Fisher-Yates: the first k slots are a uniform draw.
    for (std::size_t i = 0; i < k; ++i) std::swap(labelled[i], labelled[i + rng.below(labelled.size() - i)]);
    labelled.resize(k);
    return labelled;
  }
  std::array<std::vector<const corpus::UtteranceRecord*>, kNumEmotions> by_class;
  for (const auto* r : labelled) by_class[static_cast<std::size_t>(class_index(*r->gold_label))].push_back(r);
  for (auto& c : by_class) rng.shuffle(std::span<const corpus::UtteranceRecord*>(c));
  std::vector<const corpus::UtteranceRecord*> out;
  for (std::size_t round = 0; out.size() < k; ++round) {
    for (auto& c : by_class) {
      if (round < c.size() && out.size() < k) out.push_back(c[round]);
    }
  }
  return out;
}

std::string PromptSpec::serialized() const {
  return "template: " + template_version + "\n[system]\n" + system + "\n[user]\n" + user;
}

std::string PromptSpec::hash() const { return sha256_hex(serialized()); }

PromptSpec build_prompt(const UtteranceContext& target, ContextVariant variant,
                        const std::vector<FewShotExample>& few_shot) {
  if (!few_shot.empty() && few_shot.size() != kFewShotCount) {
    throw PreconditionError("few-shot block must hold 0 or " + std::to_string(kFewShotCount) + " examples, got " +
                            std::to_string(few_shot.size()));
  }
  PromptSpec p;
  p.system = std::string(kSystemPrompt);
  p.variant = variant;
  p.exemplars = few_shot.size();
  for (std::size_t i = 0; i < few_shot.size(); ++i) {
    p.user += "Example " + std::to_string(i + 1) + "\n";
    append_context(p.user, few_shot[i].context, variant);
    p.user += "emotion: " + std::string(to_string(few_shot[i].label)) + "\n\n";
  }
  p.user += "Target\n";
  append_context(p.user, target, variant);
  p.user += "emotion:";
  return p;
}

std::optional<Emotion> parse_label(std::string_view raw) {
  static const std::map<std::string, Emotion, std::less<>> kWords = {
      {"angry", Emotion::kAngry},     {"anger", Emotion::kAngry}, {"happy", Emotion::kHappy},
      {"joy", Emotion::kHappy},       {"neutral", Emotion::kNeutral}, {"sad", Emotion::kSad},
      {"sadness", Emotion::kSad}};
  std::set<Emotion> found;
  std::string word;
  const auto flush = [&] {
    if (auto it = kWords.find(word); it != kWords.end()) found.insert(it->second);
    word.clear();
  };
  for (char c : raw) {
    if (std::isalpha(static_cast<unsigned char>(c))) {
      word += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else {
      flush();
    }
  }
  flush();
  if (found.size() != 1) return std::nullopt;
  return *found.begin();
}

std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[digest[i] >> 4];
    out += kHex[digest[i] & 15];
  }
  return out;
}

// ---------------------------------------------------------------------------

ResponseCache::ResponseCache(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.empty() || !std::filesystem::exists(path_)) return;
  std::ifstream in(path_);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      entries_[j.at("backend_id").get<std::string>() + "\n" + j.at("prompt_hash").get<std::string>()] =
          j.at("raw_response").get<std::string>();
    } catch (const json::exception&) {
      // A write cut short by an interruption leaves a partial final line.
      if (in.peek() != std::char_traits<char>::eof()) {
        throw FormatError(path_.string() + " line " + std::to_string(n) + ": malformed cache entry");
      }
    }
  }
}

std::optional<std::string> ResponseCache::lookup(const std::string& backend_id, const std::string& prompt_hash) const {
  std::lock_guard lock(mutex_);
  auto it = entries_.find(backend_id + "\n" + prompt_hash);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void ResponseCache::store(const std::string& backend_id, const std::string& prompt_hash,
                          const std::string& raw_response) {
  std::lock_guard lock(mutex_);
  const auto [it, inserted] = entries_.emplace(backend_id + "\n" + prompt_hash, raw_response);
  if (!inserted || path_.empty()) return;
  std::ofstream out(path_, std::ios::app | std::ios::binary);
  if (!out) throw FormatError("cannot append to cache " + path_.string());
  out << json{{"backend_id", backend_id}, {"prompt_hash", prompt_hash}, {"raw_response", raw_response}}.dump()
      << '\n';
}

std::size_t ResponseCache::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

RateLimiter::RateLimiter(double rpm, Sleeper sleeper)
    : interval_(60.0 / rpm), sleeper_(sleeper ? std::move(sleeper) : Sleeper(real_sleep)) {
  if (!(rpm > 0.0)) throw PreconditionError("requests_per_minute must be positive");
}

void RateLimiter::acquire() {
  using clock = std::chrono::steady_clock;
  double wait = 0.0;
  {
    std::lock_guard lock(mutex_);
    const auto now = clock::now();
    const auto step = std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(interval_));
    if (next_ && now < *next_) {
      wait = std::chrono::duration<double>(*next_ - now).count();
      *next_ += step;
    } else {
      next_ = now + step;
    }
  }
  if (wait > 0.0) sleeper_(wait);
}

AnnotationResult annotate(const UtteranceContext& target, const PromptSpec& prompt, CallContext& ctx) {
  if (ctx.backend == nullptr || ctx.cache == nullptr) throw PreconditionError("annotate needs a backend and a cache");
  AnnotationResult r;
  r.utterance_id = target.utterance_id;
  r.backend_id = ctx.backend->id();
  r.prompt_hash = prompt.hash();
  r.template_version = prompt.template_version;
  if (auto hit = ctx.cache->lookup(r.backend_id, r.prompt_hash)) {
    r.raw_response = *hit;
    r.label = parse_label(r.raw_response);
    r.cache_hit = true;
    return r;
  }
  const Sleeper sleep = ctx.sleeper ? ctx.sleeper : Sleeper(real_sleep);
  const BackendRequest request{target.utterance_id, target.transcript, &prompt};
  for (std::size_t attempt = 0;; ++attempt) {
    if (ctx.limiter) ctx.limiter->acquire();
    ++r.attempts;
    try {
      r.raw_response = ctx.backend->complete(request);
      break;
    } catch (const AuthError& e) {
      throw AuthError(target.utterance_id + ": " + e.what());
    } catch (const TimeoutError& e) {
      if (attempt == ctx.retry.max_retries) throw TimeoutError(target.utterance_id + ": " + e.what());
    } catch (const TransientError& e) {
      if (attempt == ctx.retry.max_retries) {
        throw RetriesExhaustedError(target.utterance_id + ": gave up after " + std::to_string(r.attempts) +
                                    " attempts: " + e.what());
      }
    }
    sleep(ctx.retry.backoff_base_seconds * std::ldexp(1.0, static_cast<int>(attempt)));
  }
  r.label = parse_label(r.raw_response);
  ctx.cache->store(r.backend_id, r.prompt_hash, r.raw_response);
  return r;
}

// ---------------------------------------------------------------------------

UtteranceContext make_context(const corpus::UtteranceRecord& record, const ContextSources& sources) {
  UtteranceContext c;
  c.utterance_id = record.utterance_id;
  c.transcript = record.transcript;
  if (auto it = sources.features.find(record.utterance_id); it != sources.features.end()) {
    c.features = it->second;
    if (c.features->gender == Gender::kUnknown) c.features->gender = record.gender;
  }
  if (auto it = sources.codes.find(record.utterance_id); it != sources.codes.end()) c.codes = it->second;
  return c;
}

namespace {

struct PreparedRun {
  std::vector<UtteranceContext> contexts;
  std::vector<PromptSpec> prompts;
  std::vector<std::string> few_shot_ids;
};

PreparedRun prepare(const std::vector<corpus::UtteranceRecord>& records,
                    const std::vector<corpus::UtteranceRecord>& exemplar_pool, const ContextSources& sources,
                    const AnnotateOptions& options) {
  PreparedRun run;
  std::vector<FewShotExample> candidates;
  if (options.shots == Shots::kFew) {
    Rng rng(options.seed);
    std::size_t labelled = 0;
    for (const auto& r : exemplar_pool) labelled += r.gold_label.has_value();
    const auto picks = select_few_shot(exemplar_pool, std::min(kFewShotCount + 1, labelled), rng, options.balanced);
    for (const auto* r : picks) {
      candidates.push_back({make_context(*r, sources), *r->gold_label});
      run.few_shot_ids.push_back(r->utterance_id);
    }
  }
  for (const auto& rec : records) {
    run.contexts.push_back(make_context(rec, sources));
    std::vector<FewShotExample> shots;
    for (const auto& ex : candidates) {
      if (shots.size() == kFewShotCount) break;
      if (ex.context.utterance_id != rec.utterance_id) shots.push_back(ex);
    }
    if (options.shots == Shots::kFew && shots.size() != kFewShotCount) {
      throw PreconditionError("exemplar pool too small for " + rec.utterance_id);
    }
    run.prompts.push_back(build_prompt(run.contexts.back(), options.variant, shots));
  }
  return run;
}

}  // namespace

std::vector<PromptSpec> corpus_prompts(const std::vector<corpus::UtteranceRecord>& records,
                                       const std::vector<corpus::UtteranceRecord>& exemplar_pool,
                                       const ContextSources& sources, const AnnotateOptions& options) {
  return prepare(records, exemplar_pool, sources, options).prompts;
}

std::string AnnotationSummary::to_json() const {
  json failures_json = json::array();
  for (const auto& f : failures) {
    failures_json.push_back({{"utterance_id", f.utterance_id}, {"kind", f.kind}, {"message", f.message}});
  }
  json j = {{"records", records},
            {"annotated", annotated},
            {"label_counts", label_counts},
            {"unparseable_rate", unparseable_rate},
            {"cache_hits", cache_hits},
            {"cache_hit_rate", annotated ? static_cast<double>(cache_hits) / static_cast<double>(annotated) : 0.0},
            {"backend_calls", backend_calls},
            {"gold_agreement", gold_agreement ? json(*gold_agreement) : json(nullptr)},
            {"failures", failures_json},
            {"few_shot_ids", few_shot_ids}};
  return j.dump();
}

AnnotationRun annotate_corpus(const std::vector<corpus::UtteranceRecord>& records,
                              const std::vector<corpus::UtteranceRecord>& exemplar_pool,
                              const ContextSources& sources, const AnnotateOptions& options, CallContext& ctx) {
  const PreparedRun prep = prepare(records, exemplar_pool, sources, options);
  const std::size_t n = records.size();
  std::vector<std::optional<AnnotationResult>> slots(n);
  std::vector<std::optional<AnnotationFailure>> failed(n);
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> failures{0};
  std::atomic<bool> abort{false};

  const auto worker = [&] {
    for (;;) {
      if (abort.load()) return;
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        slots[i] = annotate(prep.contexts[i], prep.prompts[i], ctx);
      } catch (const Error& e) {
        failed[i] = AnnotationFailure{records[i].utterance_id, failure_kind(e), e.what()};
        if (failures.fetch_add(1) + 1 > options.failure_budget) abort.store(true);
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(options.concurrency, n));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (abort.load()) {
    std::string first;
    for (const auto& f : failed) {
      if (f) {
        first = f->utterance_id + " (" + f->kind + "): " + f->message;
        break;
      }
    }
    throw BudgetExceededError(std::to_string(failures.load()) + " annotation failures exceed the budget of " +
                              std::to_string(options.failure_budget) + "; first: " + first);
  }

  AnnotationRun run;
  AnnotationSummary& s = run.summary;
  s.records = n;
  s.few_shot_ids = prep.few_shot_ids;
  std::size_t with_gold = 0, agree = 0, unparseable = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (failed[i]) s.failures.push_back(*failed[i]);
    if (!slots[i]) continue;
    const AnnotationResult& r = *slots[i];
    ++s.annotated;
    s.cache_hits += r.cache_hit;
    s.backend_calls += r.attempts;
    ++s.label_counts[r.label ? std::string(to_string(*r.label)) : std::string(kUnparseable)];
    unparseable += !r.label;
    if (records[i].gold_label) {
      ++with_gold;
      agree += r.label == records[i].gold_label;
    }
    run.results.push_back(r);
  }
  s.unparseable_rate = s.annotated ? static_cast<double>(unparseable) / static_cast<double>(s.annotated) : 0.0;
  if (with_gold) s.gold_agreement = static_cast<double>(agree) / static_cast<double>(with_gold);
  std::sort(run.results.begin(), run.results.end(),
            [](const AnnotationResult& a, const AnnotationResult& b) { return a.utterance_id < b.utterance_id; });
  return run;
}

void write_annotations(const std::filesystem::path& path, const std::vector<AnnotationResult>& results) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  for (const auto& r : results) {
    out << json{{"utterance_id", r.utterance_id},
                {"label", r.label ? std::string(to_string(*r.label)) : std::string(kUnparseable)},
                {"raw_response", r.raw_response},
                {"prompt_hash", r.prompt_hash},
                {"backend_id", r.backend_id},
                {"template_version", r.template_version}}
               .dump()
        << '\n';
  }
}

std::vector<AnnotationResult> read_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  std::vector<AnnotationResult> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    const std::string where = path.string() + " line " + std::to_string(n);
    try {
      const json j = json::parse(line);
      AnnotationResult r;
      r.utterance_id = j.at("utterance_id").get<std::string>();
      const std::string label = j.at("label").get<std::string>();
      if (label != kUnparseable) {
        r.label = parse_emotion(label);
        if (!r.label) throw FormatError(where + ": unknown label \"" + label + "\"");
      }
      r.raw_response = j.at("raw_response").get<std::string>();
      r.prompt_hash = j.at("prompt_hash").get<std::string>();
      r.backend_id = j.at("backend_id").get<std::string>();
      r.template_version = j.at("template_version").get<std::string>();
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
  }
  return out;
}

std::size_t apply_annotations(std::vector<corpus::UtteranceRecord>& records,
                              const std::vector<AnnotationResult>& annotations) {
  std::unordered_map<std::string, const AnnotationResult*> by_id;
  for (const auto& a : annotations) by_id[a.utterance_id] = &a;
  std::size_t updated = 0;
  for (auto& r : records) {
    auto it = by_id.find(r.utterance_id);
    if (it == by_id.end()) continue;
    r.llm_label = it->second->label;
    r.llm_unparseable = !it->second->label;
    ++updated;
  }
  return updated;
}

}  // namespace serann::annotate
