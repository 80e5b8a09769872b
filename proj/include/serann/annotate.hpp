#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "serann/corpus.hpp"
#include "serann/dsp.hpp"
#include "serann/error.hpp"
#include "serann/rng.hpp"
#include "serann/types.hpp"

namespace serann::annotate {

inline constexpr std::string_view kTemplateVersion = "v1";
inline constexpr std::size_t kFewShotCount = 10;

enum class ContextVariant { kTextOnly, kTextEnergyF0, kTextEnergyF0Gender, kTextEnergyF0GenderCodes };

std::string_view to_string(ContextVariant v);
/// "text", "text_energy_f0", "text_energy_f0_gender", "text_energy_f0_gender_codes".
ContextVariant parse_variant(std::string_view name);

bool needs_features(ContextVariant v);
bool needs_gender(ContextVariant v);
bool needs_codes(ContextVariant v);

enum class Shots { kZero, kFew };
std::string_view to_string(Shots s);
Shots parse_shots(std::string_view name);

/// Everything a prompt may say about one utterance.
struct UtteranceContext {
  std::string utterance_id;
  std::string transcript;
  std::optional<dsp::UtteranceFeatures> features;  ///< energy, pitch and gender
  std::optional<std::vector<std::int32_t>> codes;
};

struct FewShotExample {
  UtteranceContext context;
  Emotion label = Emotion::kNeutral;
};

/// k distinct records drawn uniformly without replacement from those with a
/// gold label. With `balanced`, classes are visited round-robin instead.
/// Throws PreconditionError if fewer than k labelled records exist.
std::vector<const corpus::UtteranceRecord*> select_few_shot(const std::vector<corpus::UtteranceRecord>& pool,
                                                            std::size_t k, Rng& rng, bool balanced = false);

struct PromptSpec {
  std::string system;
  std::string user;
  ContextVariant variant = ContextVariant::kTextOnly;
  std::size_t exemplars = 0;
  std::string template_version{kTemplateVersion};

  /// Canonical text that is hashed and cached.
  std::string serialized() const;
  /// SHA-256 of serialized(), lower-case hex.
  std::string hash() const;
};

/// Deterministic prompt for `target`. Exemplar blocks mirror the target's
/// context lines. Throws PreconditionError naming the missing field when the
/// variant needs features, a known gender or codes that are absent, and if
/// the few-shot block is neither empty nor exactly 10 examples.
PromptSpec build_prompt(const UtteranceContext& target, ContextVariant variant,
                        const std::vector<FewShotExample>& few_shot);

/// Label found by a case-insensitive whole-word scan, with anger/joy/sadness
/// folded in; nullopt when none or several distinct labels appear.
std::optional<Emotion> parse_label(std::string_view raw_response);

std::string sha256_hex(std::string_view data);

// ---------------------------------------------------------------------------
// Backends

struct BackendRequest {
  std::string utterance_id;
  std::string transcript;
  const PromptSpec* prompt = nullptr;
};

/// Retryable failure (HTTP 429, 5xx, connection reset).
class TransientError : public Error {
 public:
  using Error::Error;
};

class AuthError : public Error {
 public:
  using Error::Error;
};

class TimeoutError : public Error {
 public:
  using Error::Error;
};

class RetriesExhaustedError : public Error {
 public:
  using Error::Error;
};

class BudgetExceededError : public Error {
 public:
  using Error::Error;
};

class Backend {
 public:
  virtual ~Backend() = default;
  /// Part of the cache key, so distinct backends never share answers.
  virtual std::string id() const = 0;
  /// Raw reply text. May throw TransientError, AuthError or TimeoutError.
  virtual std::string complete(const BackendRequest& request) = 0;
};

enum class MockPolicy { kOracle, kRandom, kFixed, kKeyword };

/// Offline stand-ins. Oracle answers each utterance's gold label (construction
/// throws PreconditionError if a record lacks one); random draws a label from
/// (seed, utterance id); fixed always answers one label; keyword votes with the
/// synthetic class keywords found in the transcript and says it cannot tell
/// when there are none.
std::unique_ptr<Backend> make_mock_backend(MockPolicy policy, const std::vector<corpus::UtteranceRecord>& records,
                                           std::uint64_t seed = 0, Emotion fixed = Emotion::kNeutral);
MockPolicy parse_mock_policy(std::string_view name);

struct BackendConfig {
  std::string endpoint = "https://api.openai.com/v1/chat/completions";
  std::string model = "gpt-4";
  std::string api_key_env = "OPENAI_API_KEY";
  double timeout_seconds = 60.0;
  std::size_t max_retries = 3;
  double requests_per_minute = 60.0;
  double temperature = 0.0;
  double backoff_base_seconds = 2.0;

  /// Throws PreconditionError on a non-positive rpm cap or timeout.
  void validate() const;
  std::string to_json() const;
  static BackendConfig from_json(const std::string& text);
  /// Missing keys keep the values of `base`.
  static BackendConfig from_json(const std::string& text, const BackendConfig& base);
};

/// JSON chat-completion client. The key is read from the environment on
/// construction (AuthError if unset) and never written anywhere.
std::unique_ptr<Backend> make_http_backend(const BackendConfig& config);

/// Request body sent by the HTTP backend.
std::string chat_request_body(const BackendConfig& config, const PromptSpec& prompt);
/// Content of the first choice; FormatError if absent.
std::string parse_chat_response(std::string_view body);

// ---------------------------------------------------------------------------
// Cache, retry, rate limiting

/// Append-only JSONL store keyed by (backend id, prompt hash). Thread-safe.
class ResponseCache {
 public:
  /// Empty path: in-memory only.
  explicit ResponseCache(std::filesystem::path path = {});

  std::optional<std::string> lookup(const std::string& backend_id, const std::string& prompt_hash) const;
  void store(const std::string& backend_id, const std::string& prompt_hash, const std::string& raw_response);
  std::size_t size() const;

 private:
  std::filesystem::path path_;
  mutable std::mutex mutex_;
  std::unordered_map<std::string, std::string> entries_;
};

using Sleeper = std::function<void(double seconds)>;

/// Minimum spacing of 60/rpm seconds between request starts. Thread-safe.
class RateLimiter {
 public:
  explicit RateLimiter(double requests_per_minute, Sleeper sleeper = {});
  void acquire();

 private:
  double interval_;
  Sleeper sleeper_;
  std::mutex mutex_;
  std::optional<std::chrono::steady_clock::time_point> next_;
};

struct RetryPolicy {
  std::size_t max_retries = 3;
  double backoff_base_seconds = 2.0;  ///< waits base, 2 base, 4 base, ...
};

struct AnnotationResult {
  std::string utterance_id;
  std::optional<Emotion> label;  ///< nullopt means UNPARSEABLE
  std::string raw_response;
  std::string backend_id;
  std::string prompt_hash;
  std::string template_version{kTemplateVersion};
  bool cache_hit = false;
  std::size_t attempts = 0;  ///< backend calls made for this record
};

struct CallContext {
  Backend* backend = nullptr;
  ResponseCache* cache = nullptr;
  RateLimiter* limiter = nullptr;  ///< optional
  RetryPolicy retry;
  Sleeper sleeper;  ///< backoff waits; real sleep when empty
};

/// Cache lookup, else backend call with retries, then parse and store.
/// Errors carry the utterance id: AuthError, TimeoutError or
/// RetriesExhaustedError.
AnnotationResult annotate(const UtteranceContext& target, const PromptSpec& prompt, CallContext& ctx);

struct AnnotateOptions {
  ContextVariant variant = ContextVariant::kTextOnly;
  Shots shots = Shots::kZero;
  std::uint64_t seed = 0;
  bool balanced = false;
  std::size_t concurrency = 1;
  /// Failed records tolerated before the run aborts with BudgetExceededError.
  std::size_t failure_budget = 0;
};

struct AnnotationFailure {
  std::string utterance_id;
  std::string kind;  ///< "auth", "timeout", "retries_exhausted", "other"
  std::string message;
};

struct AnnotationSummary {
  std::size_t records = 0;
  std::size_t annotated = 0;
  std::map<std::string, std::size_t> label_counts;  ///< includes UNPARSEABLE
  double unparseable_rate = 0.0;
  std::size_t cache_hits = 0;
  std::size_t backend_calls = 0;
  std::optional<double> gold_agreement;  ///< over annotated records with gold
  std::vector<AnnotationFailure> failures;
  std::vector<std::string> few_shot_ids;

  std::string to_json() const;
};

struct AnnotationRun {
  std::vector<AnnotationResult> results;  ///< sorted by utterance id
  AnnotationSummary summary;
};

/// Per-record audio context, keyed by utterance id.
struct ContextSources {
  std::unordered_map<std::string, dsp::UtteranceFeatures> features;
  std::unordered_map<std::string, std::vector<std::int32_t>> codes;
};

UtteranceContext make_context(const corpus::UtteranceRecord& record, const ContextSources& sources);

/// Annotates every record. Few-shot exemplars come from `exemplar_pool` (the
/// training records): one fixed draw of 11 per run, each prompt using the
/// first 10 that are not its own target. Throws PreconditionError up front if
/// any record lacks a context the variant needs.
AnnotationRun annotate_corpus(const std::vector<corpus::UtteranceRecord>& records,
                              const std::vector<corpus::UtteranceRecord>& exemplar_pool,
                              const ContextSources& sources, const AnnotateOptions& options, CallContext& ctx);

/// Every prompt annotate_corpus would send, in record order.
std::vector<PromptSpec> corpus_prompts(const std::vector<corpus::UtteranceRecord>& records,
                                       const std::vector<corpus::UtteranceRecord>& exemplar_pool,
                                       const ContextSources& sources, const AnnotateOptions& options);

/// One JSON object per line: {utterance_id, label, raw_response, prompt_hash,
/// backend_id, template_version}; label is UNPARSEABLE when unparsed.
void write_annotations(const std::filesystem::path& path, const std::vector<AnnotationResult>& results);
std::vector<AnnotationResult> read_annotations(const std::filesystem::path& path);

/// Copies annotation labels into the records' llm fields by utterance id.
/// Returns the number of records updated.
std::size_t apply_annotations(std::vector<corpus::UtteranceRecord>& records,
                              const std::vector<AnnotationResult>& annotations);

}  // namespace serann::annotate
