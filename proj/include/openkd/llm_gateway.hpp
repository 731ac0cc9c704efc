#pragma once

// Provider-agnostic chat client with a record/replay transcript cache and a
// canned mock table, so every LLM-dependent path can run offline.

#include <openssl/evp.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
// <resolv.h> (pulled in by httplib) defines _res, which collides with Eigen.
#ifdef _res
#undef _res
#endif
#include <nlohmann/json.hpp>

#include "openkd/errors.hpp"

namespace openkd::llm {

struct Message {
  std::string role;  // system | user | assistant
  std::string content;

  friend bool operator==(const Message&, const Message&) = default;
};

struct ChatRequest {
  std::string provider = "openai";
  std::string model = "gpt-3.5-turbo";
  std::vector<Message> messages;
  double temperature = 1.0;

  void validate() const {
    if (messages.empty()) throw ArgumentError("chat request has no messages");
    for (const auto& m : messages)
      if (m.role != "system" && m.role != "user" && m.role != "assistant")
        throw ArgumentError("invalid chat role: " + m.role);
  }

  const std::string& last_user_message() const {
    for (auto it = messages.rbegin(); it != messages.rend(); ++it)
      if (it->role == "user") return it->content;
    throw ArgumentError("chat request has no user message");
  }
};

inline std::string sha256_hex(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

inline nlohmann::json to_json(const ChatRequest& req) {
  nlohmann::json msgs = nlohmann::json::array();
  for (const auto& m : req.messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
  return {{"provider", req.provider}, {"model", req.model}, {"messages", msgs}, {"temperature", req.temperature}};
}

// Digest of the canonical (sorted-key, compact) JSON of the request plus the
// repetition counter; repetitions of one prompt are cached separately.
inline std::string repetition_key(const ChatRequest& req, int repetition) {
  if (repetition < 0) throw ArgumentError("repetition index must be non-negative");
  auto j = to_json(req);
  j["repetition"] = repetition;
  return sha256_hex(j.dump());
}

// ---------------------------------------------------------------- transport

class Transport {
 public:
  virtual ~Transport() = default;
  virtual std::string send(const ChatRequest& req) = 0;
};

struct HttpOptions {
  std::string base_url;  // scheme://host[:port]
  std::string path = "/v1/chat/completions";
  std::string api_key;
  int max_attempts = 3;
  int timeout_seconds = 60;

  // OPENAI_API_KEY and OPENAI_BASE_URL (default https://api.openai.com).
  static HttpOptions from_env() {
    HttpOptions o;
    if (const char* k = std::getenv("OPENAI_API_KEY")) o.api_key = k;
    const char* base = std::getenv("OPENAI_BASE_URL");
    o.base_url = base ? base : "https://api.openai.com";
    return o;
  }
};

// OpenAI-compatible chat-completions endpoint.
class HttpTransport final : public Transport {
 public:
  explicit HttpTransport(HttpOptions opts) : opts_(std::move(opts)) {}

  std::string send(const ChatRequest& req) override {
    if (opts_.api_key.empty())
      throw ConfigurationError("live LLM calls need provider credentials (set OPENAI_API_KEY)");
    nlohmann::json body = {{"model", req.model}, {"temperature", req.temperature}, {"messages", nlohmann::json::array()}};
    for (const auto& m : req.messages) body["messages"].push_back({{"role", m.role}, {"content", m.content}});
    httplib::Client cli(opts_.base_url);
    cli.set_connection_timeout(opts_.timeout_seconds);
    cli.set_read_timeout(opts_.timeout_seconds);
    cli.set_bearer_token_auth(opts_.api_key);
    std::string last_error;
    for (int attempt = 1; attempt <= opts_.max_attempts; ++attempt) {
      auto res = cli.Post(opts_.path, body.dump(), "application/json");
      if (res && res->status == 200) {
        try {
          return nlohmann::json::parse(res->body).at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
          last_error = std::string("unexpected response body: ") + e.what();
        }
      } else {
        last_error = res ? "HTTP " + std::to_string(res->status) : httplib::to_string(res.error());
      }
      if (attempt < opts_.max_attempts) std::this_thread::sleep_for(std::chrono::milliseconds(500 * attempt));
    }
    throw TransportError("provider call failed: " + last_error, opts_.max_attempts);
  }

 private:
  HttpOptions opts_;
};

// ---------------------------------------------------------------- cache

// Append-only JSON-lines transcript store:
//   {"key": ..., "request": {...}, "reply": ..., "timestamp": ...}
class TranscriptCache {
 public:
  TranscriptCache() = default;
  explicit TranscriptCache(std::filesystem::path path) : path_(std::move(path)) {
    std::ifstream in(path_);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.empty()) continue;
      try {
        auto j = nlohmann::json::parse(line);
        entries_[j.at("key").get<std::string>()] = j.at("reply").get<std::string>();
      } catch (const nlohmann::json::exception& e) {
        throw IngestionError("transcript cache " + path_.string() + " line " + std::to_string(n) + ": " + e.what());
      }
    }
  }

  std::optional<std::string> lookup(const std::string& key) const {
    std::lock_guard lock(mu_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  // Idempotent for an identical (key, reply); a conflicting reply for an
  // existing key is an error.
  void append(const std::string& key, const ChatRequest& req, const std::string& reply) {
    std::lock_guard lock(mu_);
    auto it = entries_.find(key);
    if (it != entries_.end()) {
      if (it->second == reply) return;
      throw Error("transcript cache already holds a different reply for key " + key);
    }
    entries_[key] = reply;
    if (path_.empty()) return;
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    std::ofstream out(path_, std::ios::app);
    if (!out) throw Error("cannot append to transcript cache " + path_.string());
    nlohmann::json line = {{"key", key}, {"request", to_json(req)}, {"reply", reply}, {"timestamp", now_iso8601()}};
    out << line.dump() << "\n";
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
  }

 private:
  static std::string now_iso8601() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
  }

  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::map<std::string, std::string> entries_;
};

// ---------------------------------------------------------------- mock

// Canned replies keyed by the last user message. Repetition i receives
// replies[i % replies.size()].
class MockTable {
 public:
  void add(const std::string& user_message, std::vector<std::string> replies) {
    if (replies.empty()) throw ArgumentError("mock entry needs at least one reply");
    auto& slot = table_[user_message];
    slot.insert(slot.end(), replies.begin(), replies.end());
  }

  std::optional<std::string> lookup(const ChatRequest& req, int repetition) const {
    auto it = table_.find(req.last_user_message());
    if (it == table_.end()) return std::nullopt;
    return it->second[static_cast<std::size_t>(repetition) % it->second.size()];
  }

  std::size_t size() const noexcept { return table_.size(); }

 private:
  std::map<std::string, std::vector<std::string>> table_;
};

// ---------------------------------------------------------------- gateway

enum class Mode { live, record, replay, mock };

inline Mode parse_mode(const std::string& s) {
  if (s == "live") return Mode::live;
  if (s == "record") return Mode::record;
  if (s == "replay") return Mode::replay;
  if (s == "mock") return Mode::mock;
  throw ConfigurationError("unknown llm mode '" + s + "' (expected live, record, replay or mock)");
}

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::live: return "live";
    case Mode::record: return "record";
    case Mode::replay: return "replay";
    case Mode::mock: return "mock";
  }
  return "?";
}

class Gateway {
 public:
  Gateway(Mode mode, std::shared_ptr<Transport> transport, std::shared_ptr<TranscriptCache> cache,
          std::shared_ptr<MockTable> mock = nullptr)
      : mode_(mode), transport_(std::move(transport)), cache_(std::move(cache)), mock_(std::move(mock)) {
    if ((mode_ == Mode::live || mode_ == Mode::record) && !transport_)
      throw ConfigurationError(to_string(mode_) + " mode needs a transport");
    if ((mode_ == Mode::record || mode_ == Mode::replay) && !cache_)
      throw ConfigurationError(to_string(mode_) + " mode needs a transcript cache");
    if (mode_ == Mode::mock && !mock_) throw ConfigurationError("mock mode needs a mock table");
  }

  static Gateway mock(std::shared_ptr<MockTable> table) { return Gateway(Mode::mock, nullptr, nullptr, std::move(table)); }

  std::string chat(const ChatRequest& req, int repetition = 0) {
    req.validate();
    ++requests_;
    switch (mode_) {
      case Mode::mock: {
        auto r = mock_->lookup(req, repetition);
        if (!r) throw CacheMissError("mock table has no entry for: " + req.last_user_message());
        return *r;
      }
      case Mode::replay: {
        const auto key = repetition_key(req, repetition);
        auto r = cache_->lookup(key);
        if (!r) throw CacheMissError("no recorded transcript for key " + key);
        return *r;
      }
      case Mode::record: {
        const auto key = repetition_key(req, repetition);
        if (auto r = cache_->lookup(key)) return *r;
        auto reply = transport_->send(req);
        ++network_calls_;
        cache_->append(key, req, reply);
        return reply;
      }
      case Mode::live:
        ++network_calls_;
        return transport_->send(req);
    }
    throw ConfigurationError("unreachable llm mode");
  }

  Mode mode() const noexcept { return mode_; }
  long requests() const noexcept { return requests_; }
  long network_calls() const noexcept { return network_calls_; }

 private:
  Mode mode_;
  std::shared_ptr<Transport> transport_;
  std::shared_ptr<TranscriptCache> cache_;
  std::shared_ptr<MockTable> mock_;
  std::atomic<long> requests_{0};
  std::atomic<long> network_calls_{0};
};

}  // namespace openkd::llm
