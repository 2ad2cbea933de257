#include "cotrr/backend_layers.hpp"

#include <algorithm>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iterator>
#include <sstream>
#include <thread>

namespace cotrr {

RetryingBackend::RetryingBackend(BackendPtr inner, RetryPolicy policy, Sleeper sleeper, std::uint64_t jitter_seed)
    : inner_(std::move(inner)), policy_(policy), sleeper_(std::move(sleeper)), rng_(jitter_seed) {
  if (policy_.max_attempts < 1) throw std::invalid_argument("retry policy needs at least one attempt");
  if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

std::chrono::milliseconds RetryingBackend::backoff_ceiling(int failures) const {
  const double ms = static_cast<double>(policy_.initial_backoff.count()) *
                    std::pow(policy_.multiplier, static_cast<double>(std::max(0, failures - 1)));
  return std::chrono::milliseconds(static_cast<std::int64_t>(ms));
}

ChatResponse RetryingBackend::chat(const ChatRequest& request) {
  std::string last_error;
  for (int attempt = 1; attempt <= policy_.max_attempts; ++attempt) {
    try {
      ChatResponse r = inner_->chat(request);
      r.attempts = attempt;
      return r;
    } catch (const BackendError& e) {
      if (e.kind() != BackendError::Kind::transient) throw;
      last_error = e.what();
      if (attempt == policy_.max_attempts) break;
    }
    std::chrono::milliseconds delay{0};
    {
      std::lock_guard lock(rng_mutex_);
      std::uniform_int_distribution<std::int64_t> jitter(0, backoff_ceiling(attempt).count());
      delay = std::chrono::milliseconds(jitter(rng_));
    }
    sleeper_(delay);
  }
  throw BackendError(BackendError::Kind::retries_exhausted,
                     "gave up after " + std::to_string(policy_.max_attempts) + " attempts: " + last_error);
}

ResponseCache::ResponseCache(std::filesystem::path root) : root_(std::move(root)) {
  std::filesystem::create_directories(root_);
}

std::filesystem::path ResponseCache::entry_path(const std::string& key) const {
  const std::string shard = key.size() >= 2 ? key.substr(0, 2) : std::string("__");
  return root_ / shard / key;
}

std::optional<std::string> ResponseCache::load(const std::string& key) const {
  std::ifstream in(entry_path(key), std::ios::binary);
  if (!in) return std::nullopt;
  const std::string data{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  // Header lines until a blank line, then the body. `length:` guards against partial files.
  if (data.rfind("cotrr-cache 1\n", 0) != 0) return std::nullopt;
  const auto sep = data.find("\n\n");
  if (sep == std::string::npos) return std::nullopt;
  std::istringstream header(data.substr(0, sep));
  std::string line;
  std::optional<std::size_t> length;
  while (std::getline(header, line)) {
    if (line.rfind("length: ", 0) == 0) {
      try {
        length = std::stoull(line.substr(8));
      } catch (const std::exception&) {
        return std::nullopt;
      }
    }
  }
  std::string body = data.substr(sep + 2);
  if (!length || body.size() != *length) return std::nullopt;
  return body;
}

void ResponseCache::store(const std::string& key, const std::string& model, const std::string& text) {
  static std::atomic<std::uint64_t> counter{0};
  const auto target = entry_path(key);
  std::filesystem::create_directories(target.parent_path());
  std::ostringstream tmp_name;
  tmp_name << key << ".tmp." << std::hash<std::thread::id>{}(std::this_thread::get_id()) << '.' << counter++;
  const auto tmp = target.parent_path() / tmp_name.str();
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cache: cannot write " + tmp.string());
    std::string safe_model = model;
    std::replace(safe_model.begin(), safe_model.end(), '\n', ' ');
    out << "cotrr-cache 1\n"
        << "model: " << safe_model << '\n'
        << "created: " << std::time(nullptr) << '\n'
        << "length: " << text.size() << "\n\n"
        << text;
    if (!out) throw std::runtime_error("cache: short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, target);
}

bool ResponseCache::evict(const std::string& key) {
  std::error_code ec;
  return std::filesystem::remove(entry_path(key), ec);
}

CachingBackend::CachingBackend(BackendPtr inner, std::shared_ptr<ResponseCache> cache)
    : inner_(std::move(inner)), cache_(std::move(cache)) {}

ChatResponse CachingBackend::chat(const ChatRequest& request) {
  const std::string key = cache_key(request);
  if (auto hit = cache_->load(key)) return {std::move(*hit), true, 1};
  ChatResponse r = inner_->chat(request);
  cache_->store(key, request.model, r.text);
  return r;
}

BoundedBackend::BoundedBackend(BackendPtr inner, int parallelism)
    : inner_(std::move(inner)), slots_(std::clamp(parallelism, 1, 1024)) {
  if (parallelism < 1) throw std::invalid_argument("parallelism must be >= 1");
}

ChatResponse BoundedBackend::chat(const ChatRequest& request) {
  slots_.acquire();
  struct Release {
    std::counting_semaphore<1024>& s;
    ~Release() { s.release(); }
  } release{slots_};
  return inner_->chat(request);
}

RecordingBackend::RecordingBackend(BackendPtr inner) : inner_(std::move(inner)) {}

ChatResponse RecordingBackend::chat(const ChatRequest& request) {
  {
    std::lock_guard lock(mutex_);
    requests_.push_back(request);
  }
  return inner_->chat(request);
}

std::vector<ChatRequest> RecordingBackend::requests() const {
  std::lock_guard lock(mutex_);
  return requests_;
}

std::size_t RecordingBackend::call_count() const {
  std::lock_guard lock(mutex_);
  return requests_.size();
}

std::string completion_text(const std::string& reply_body) {
  auto malformed = [](const std::string& why) {
    return BackendError(BackendError::Kind::malformed_reply, "malformed endpoint reply: " + why);
  };
  const auto body = nlohmann::json::parse(reply_body, nullptr, false);
  if (body.is_discarded() || !body.is_object()) throw malformed("not a JSON object");
  const auto choices = body.find("choices");
  if (choices == body.end() || !choices->is_array() || choices->empty()) throw malformed("no choices");
  const auto& first = (*choices)[0];
  if (!first.is_object() || !first.contains("message") || !first["message"].is_object()) {
    throw malformed("first choice has no message");
  }
  const auto& content = first["message"].value("content", nlohmann::json());
  std::string text;
  if (content.is_string()) {
    text = content.get<std::string>();
  } else if (content.is_array()) {
    for (const auto& part : content) {
      if (part.is_object() && part.value("type", "") == "text" && part.contains("text") && part["text"].is_string()) {
        text += part["text"].get<std::string>();
      }
    }
  }
  if (text.empty()) throw malformed("empty completion text");
  return text;
}

HttpChatBackend::HttpChatBackend(EndpointConfig config, std::shared_ptr<HttpTransport> transport)
    : config_(std::move(config)), transport_(std::move(transport)) {
  if (config_.base_url.empty()) throw BackendError(BackendError::Kind::config, "endpoint base URL is not set");
}

ChatResponse HttpChatBackend::chat(const ChatRequest& request) {
  std::string url = config_.base_url;
  while (!url.empty() && url.back() == '/') url.pop_back();
  url += "/chat/completions";
  std::vector<std::pair<std::string, std::string>> headers{{"Content-Type", "application/json"}};
  if (!config_.api_key.empty()) headers.emplace_back("Authorization", "Bearer " + config_.api_key);

  const HttpReply reply = transport_->post(url, headers, to_wire_json(request).dump());
  if (reply.status == 429 || reply.status >= 500) {
    throw BackendError(BackendError::Kind::transient, "HTTP " + std::to_string(reply.status), reply.status);
  }
  if (reply.status < 200 || reply.status >= 300) {
    throw BackendError(BackendError::Kind::permanent,
                       "HTTP " + std::to_string(reply.status) + ": " + reply.body.substr(0, 512), reply.status);
  }
  return {completion_text(reply.body), false, 1};
}

}  // namespace cotrr
