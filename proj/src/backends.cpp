#include <httplib.h>

#include <array>
#include <cctype>
#include <cstdlib>
#include <nlohmann/json.hpp>
#include <unordered_map>

#include "serann/annotate.hpp"

namespace serann::annotate {

using nlohmann::json;

namespace {

class OracleBackend final : public Backend {
 public:
  explicit OracleBackend(const std::vector<corpus::UtteranceRecord>& records) {
    for (const auto& r : records) {
      if (!r.gold_label) throw PreconditionError("oracle backend: " + r.utterance_id + " has no gold label");
      gold_[r.utterance_id] = *r.gold_label;
    }
  }
  std::string id() const override { return "mock:oracle"; }
  std::string complete(const BackendRequest& request) override {
    auto it = gold_.find(request.utterance_id);
    if (it == gold_.end()) throw Error("oracle backend: no gold label for " + request.utterance_id);
    return std::string(to_string(it->second));
  }

 private:
  std::unordered_map<std::string, Emotion> gold_;
};

class RandomBackend final : public Backend {
 public:
  explicit RandomBackend(std::uint64_t seed) : seed_(seed) {}
  std::string id() const override { return "mock:random:" + std::to_string(seed_); }
  std::string complete(const BackendRequest& request) override {
    Rng rng(mix_seed(seed_, fnv1a(request.utterance_id)));
    return std::string(to_string(kAllEmotions[rng.below(kNumEmotions)]));
  }

 private:
  std::uint64_t seed_;
};

class FixedBackend final : public Backend {
 public:
  explicit FixedBackend(Emotion label) : label_(label) {}
  std::string id() const override { return "mock:fixed:" + std::string(to_string(label_)); }
  std::string complete(const BackendRequest&) override { return std::string(to_string(label_)); }

 private:
  Emotion label_;
};

class KeywordBackend final : public Backend {
 public:
  std::string id() const override { return "mock:keyword"; }
  std::string complete(const BackendRequest& request) override {
    std::array<int, kNumEmotions> votes{};
    std::string word;
    const auto flush = [&] {
      for (Emotion e : kAllEmotions) {
        for (const auto& k : corpus::synthetic_keywords(e)) {
          if (k == word) ++votes[static_cast<std::size_t>(class_index(e))];
        }
      }
      word.clear();
    };
    for (char c : request.transcript) {
      if (std::isalpha(static_cast<unsigned char>(c))) {
        word += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      } else {
        flush();
      }
    }
    flush();
    const auto best = std::max_element(votes.begin(), votes.end());
    if (*best == 0 || std::count(votes.begin(), votes.end(), *best) > 1) return "I cannot tell from this.";
    return std::string(to_string(emotion_from_index(static_cast<int>(best - votes.begin()))));
  }
};

struct Endpoint {
  std::string scheme_host_port;
  std::string path;
};

Endpoint split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw PreconditionError("endpoint must be an absolute URL: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(const BackendConfig& config) : config_(config), endpoint_(split_url(config.endpoint)) {
    config_.validate();
    const char* key = std::getenv(config_.api_key_env.c_str());
    if (key == nullptr || *key == '\0') {
      throw AuthError("environment variable " + config_.api_key_env + " is not set");
    }
    key_ = key;
  }

  std::string id() const override {
    return "http:" + config_.model + "@" + config_.endpoint + "#t=" + json(config_.temperature).dump();
  }

  std::string complete(const BackendRequest& request) override {
    if (request.prompt == nullptr) throw PreconditionError("backend request without a prompt");
    httplib::Client client(endpoint_.scheme_host_port);
    const auto seconds = std::chrono::duration<double>(config_.timeout_seconds);
    const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(seconds);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    const httplib::Headers headers = {{"Authorization", "Bearer " + key_}};
    const auto res =
        client.Post(endpoint_.path, headers, chat_request_body(config_, *request.prompt), "application/json");
    if (!res) {
      const httplib::Error err = res.error();
      if (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read) {
        throw TimeoutError("no response within " + json(config_.timeout_seconds).dump() + " s (" +
                           httplib::to_string(err) + ")");
      }
      throw TransientError("request failed: " + httplib::to_string(err));
    }
    if (res->status == 401 || res->status == 403) {
      throw AuthError("authentication rejected (HTTP " + std::to_string(res->status) + ")");
    }
    if (res->status == 429 || res->status >= 500) {
      throw TransientError("HTTP " + std::to_string(res->status));
    }
    if (res->status != 200) {
      throw Error("HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
    }
    return parse_chat_response(res->body);
  }

 private:
  BackendConfig config_;
  Endpoint endpoint_;
  std::string key_;
};

}  // namespace

std::unique_ptr<Backend> make_mock_backend(MockPolicy policy, const std::vector<corpus::UtteranceRecord>& records,
                                           std::uint64_t seed, Emotion fixed) {
  switch (policy) {
    case MockPolicy::kOracle: return std::make_unique<OracleBackend>(records);
    case MockPolicy::kRandom: return std::make_unique<RandomBackend>(seed);
    case MockPolicy::kFixed: return std::make_unique<FixedBackend>(fixed);
    case MockPolicy::kKeyword: return std::make_unique<KeywordBackend>();
  }
  throw PreconditionError("unknown mock policy");
}

MockPolicy parse_mock_policy(std::string_view name) {
  if (name == "oracle") return MockPolicy::kOracle;
  if (name == "random") return MockPolicy::kRandom;
  if (name == "fixed") return MockPolicy::kFixed;
  if (name == "keyword") return MockPolicy::kKeyword;
  throw PreconditionError("unknown mock policy: " + std::string(name));
}

void BackendConfig::validate() const {
  if (!(requests_per_minute > 0.0)) throw PreconditionError("requests_per_minute must be positive");
  if (!(timeout_seconds > 0.0)) throw PreconditionError("timeout_seconds must be positive");
  if (!(backoff_base_seconds >= 0.0)) throw PreconditionError("backoff_base_seconds must be non-negative");
  if (model.empty()) throw PreconditionError("model must be set");
  if (api_key_env.empty()) throw PreconditionError("api_key_env must be set");
}

std::string BackendConfig::to_json() const {
  return json{{"endpoint", endpoint},
              {"model", model},
              {"api_key_env", api_key_env},
              {"timeout_seconds", timeout_seconds},
              {"max_retries", max_retries},
              {"requests_per_minute", requests_per_minute},
              {"temperature", temperature},
              {"backoff_base_seconds", backoff_base_seconds}}
      .dump();
}

BackendConfig BackendConfig::from_json(const std::string& text, const BackendConfig& base) {
  BackendConfig c = base;
  try {
    const json j = json::parse(text);
    c.endpoint = j.value("endpoint", c.endpoint);
    c.model = j.value("model", c.model);
    c.api_key_env = j.value("api_key_env", c.api_key_env);
    c.timeout_seconds = j.value("timeout_seconds", c.timeout_seconds);
    c.max_retries = j.value("max_retries", c.max_retries);
    c.requests_per_minute = j.value("requests_per_minute", c.requests_per_minute);
    c.temperature = j.value("temperature", c.temperature);
    c.backoff_base_seconds = j.value("backoff_base_seconds", c.backoff_base_seconds);
  } catch (const json::exception& e) {
    throw FormatError(std::string("invalid backend config: ") + e.what());
  }
  c.validate();
  return c;
}

BackendConfig BackendConfig::from_json(const std::string& text) { return from_json(text, BackendConfig{}); }

std::unique_ptr<Backend> make_http_backend(const BackendConfig& config) {
  return std::make_unique<HttpBackend>(config);
}

std::string chat_request_body(const BackendConfig& config, const PromptSpec& prompt) {
  return json{{"model", config.model},
              {"temperature", config.temperature},
              {"messages", json::array({{{"role", "system"}, {"content", prompt.system}},
                                        {{"role", "user"}, {"content", prompt.user}}})}}
      .dump();
}

std::string parse_chat_response(std::string_view body) {
  try {
    const json j = json::parse(body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("unexpected chat-completion response: ") + e.what());
  }
}

}  // namespace serann::annotate
