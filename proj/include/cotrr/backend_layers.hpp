#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <semaphore>
#include <string>
#include <vector>

#include "cotrr/backend.hpp"

namespace cotrr {

struct RetryPolicy {
  int max_attempts = 5;
  std::chrono::milliseconds initial_backoff{1000};
  double multiplier = 2.0;
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

/// Retries transient failures with exponential backoff and full jitter.
class RetryingBackend final : public ChatBackend {
 public:
  RetryingBackend(BackendPtr inner, RetryPolicy policy = {}, Sleeper sleeper = {}, std::uint64_t jitter_seed = 0);

  ChatResponse chat(const ChatRequest& request) override;

  // Upper bound of the jitter window before attempt `attempt` (1-based count of failures so far).
  std::chrono::milliseconds backoff_ceiling(int failures) const;

 private:
  BackendPtr inner_;
  RetryPolicy policy_;
  Sleeper sleeper_;
  std::mutex rng_mutex_;
  std::mt19937_64 rng_;
};

/// One file per request digest under `root`. Writes are temp-file + rename.
class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path root);

  std::optional<std::string> load(const std::string& key) const;
  void store(const std::string& key, const std::string& model, const std::string& text);
  bool evict(const std::string& key);
  std::filesystem::path entry_path(const std::string& key) const;
  const std::filesystem::path& root() const noexcept { return root_; }

 private:
  std::filesystem::path root_;
};

class CachingBackend final : public ChatBackend {
 public:
  CachingBackend(BackendPtr inner, std::shared_ptr<ResponseCache> cache);
  ChatResponse chat(const ChatRequest& request) override;

 private:
  BackendPtr inner_;
  std::shared_ptr<ResponseCache> cache_;
};

/// Caps the number of requests in flight through `inner`.
class BoundedBackend final : public ChatBackend {
 public:
  BoundedBackend(BackendPtr inner, int parallelism);
  ChatResponse chat(const ChatRequest& request) override;

 private:
  BackendPtr inner_;
  std::counting_semaphore<1024> slots_;
};

/// Keeps a copy of every request that passes through; used for audits and tests.
class RecordingBackend final : public ChatBackend {
 public:
  explicit RecordingBackend(BackendPtr inner);
  ChatResponse chat(const ChatRequest& request) override;

  std::vector<ChatRequest> requests() const;
  std::size_t call_count() const;

 private:
  BackendPtr inner_;
  mutable std::mutex mutex_;
  std::vector<ChatRequest> requests_;
};

struct HttpReply {
  int status = 0;
  std::string body;
};

/// Minimal POST transport so the protocol layer can be tested without sockets.
class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  // Throws BackendError(transient) on connection failures and timeouts.
  virtual HttpReply post(const std::string& url, const std::vector<std::pair<std::string, std::string>>& headers,
                         const std::string& body) = 0;
};

struct EndpointConfig {
  std::string base_url;
  std::string api_key;
  std::chrono::seconds timeout{120};
};

std::unique_ptr<HttpTransport> make_http_transport(const EndpointConfig& config);

/// Single-attempt chat-completions client. Compose with RetryingBackend for retries.
class HttpChatBackend final : public ChatBackend {
 public:
  HttpChatBackend(EndpointConfig config, std::shared_ptr<HttpTransport> transport);
  ChatResponse chat(const ChatRequest& request) override;

 private:
  EndpointConfig config_;
  std::shared_ptr<HttpTransport> transport_;
};

/// Reads the first choice's message content; throws BackendError(malformed_reply).
std::string completion_text(const std::string& reply_body);

}  // namespace cotrr
