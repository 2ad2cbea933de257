#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

namespace cotrr {

enum class Role { system, user };

std::string_view to_string(Role role);

struct TextPart {
  std::string text;
};

/// Image content carried as raw bytes; base64 only exists on the wire.
struct ImagePart {
  std::string media_type;  // e.g. "image/jpeg"
  std::string bytes;

  // Throws std::invalid_argument when `payload` is not valid base64.
  static ImagePart from_base64(std::string media_type, std::string_view payload);
};

using ContentPart = std::variant<TextPart, ImagePart>;

struct Message {
  Role role = Role::user;
  std::vector<ContentPart> parts;
};

struct ChatRequest {
  std::string model;
  double temperature = 0.0;
  std::vector<Message> messages;
};

struct ChatResponse {
  std::string text;
  bool from_cache = false;
  int attempts = 1;
};

class BackendError : public std::runtime_error {
 public:
  enum class Kind {
    transient,          // timeout, connection failure, 429, 5xx
    permanent,          // other 4xx
    malformed_reply,    // endpoint answered without completion text
    retries_exhausted,
    script_exhausted,
    config,
  };

  BackendError(Kind kind, const std::string& what, int http_status = 0)
      : std::runtime_error(what), kind_(kind), http_status_(http_status) {}

  Kind kind() const noexcept { return kind_; }
  int http_status() const noexcept { return http_status_; }

 private:
  Kind kind_;
  int http_status_;
};

/// Anything that answers a chat-completions request. Implementations must be thread-safe.
class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  virtual ChatResponse chat(const ChatRequest& request) = 0;
};

using BackendPtr = std::shared_ptr<ChatBackend>;

/// Content-addressed key over model, temperature, roles, text parts and image bytes.
std::string cache_key(const ChatRequest& request);

/// Returns one message per violated request rule; empty when the request conforms.
std::vector<std::string> check_conformance(const ChatRequest& request, double expected_temperature = 0.0);

/// JSON body for `POST {base_url}/chat/completions`.
nlohmann::json to_wire_json(const ChatRequest& request);
/// Inverse of `to_wire_json`; throws std::invalid_argument on unsupported structure.
ChatRequest from_wire_json(const nlohmann::json& body);

/// Concatenation of every text part in every message, separated by newlines.
std::string joined_text(const ChatRequest& request);

}  // namespace cotrr
