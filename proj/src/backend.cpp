#include "cotrr/backend.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "cotrr/digest.hpp"

namespace cotrr {

std::string_view to_string(Role role) {
  return role == Role::system ? "system" : "user";
}

ImagePart ImagePart::from_base64(std::string media_type, std::string_view payload) {
  auto decoded = base64_decode(payload);
  if (!decoded) throw std::invalid_argument("image payload is not valid base64");
  return {std::move(media_type), std::move(*decoded)};
}

std::string cache_key(const ChatRequest& request) {
  Sha256 h;
  h.update_field("chat-request/v1");
  h.update_field(request.model);
  std::uint64_t temp_bits = 0;
  static_assert(sizeof(temp_bits) == sizeof(request.temperature));
  std::memcpy(&temp_bits, &request.temperature, sizeof(temp_bits));
  h.update_field(std::to_string(temp_bits));
  h.update_field(std::to_string(request.messages.size()));
  for (const auto& m : request.messages) {
    h.update_field(to_string(m.role));
    h.update_field(std::to_string(m.parts.size()));
    for (const auto& part : m.parts) {
      if (const auto* t = std::get_if<TextPart>(&part)) {
        h.update_field("text");
        h.update_field(t->text);
      } else {
        const auto& img = std::get<ImagePart>(part);
        h.update_field("image");
        h.update_field(img.media_type);
        h.update_field(img.bytes);
      }
    }
  }
  return h.hex_digest();
}

std::vector<std::string> check_conformance(const ChatRequest& request, double expected_temperature) {
  std::vector<std::string> problems;
  if (request.temperature != expected_temperature) {
    std::ostringstream os;
    os << "temperature " << request.temperature << " != required " << expected_temperature;
    problems.push_back(os.str());
  }
  if (request.model.empty()) problems.emplace_back("model is empty");
  if (request.messages.empty()) problems.emplace_back("no messages");
  for (std::size_t i = 0; i < request.messages.size(); ++i) {
    const auto& m = request.messages[i];
    if (m.parts.empty()) problems.push_back("message " + std::to_string(i) + " has no content parts");
    for (const auto& part : m.parts) {
      if (const auto* img = std::get_if<ImagePart>(&part)) {
        if (img->media_type.rfind("image/", 0) != 0) {
          problems.push_back("message " + std::to_string(i) + " has an image part without an image media type");
        }
        if (img->bytes.empty()) problems.push_back("message " + std::to_string(i) + " has an empty image part");
      }
    }
  }
  return problems;
}

nlohmann::json to_wire_json(const ChatRequest& request) {
  nlohmann::json messages = nlohmann::json::array();
  for (const auto& m : request.messages) {
    nlohmann::json content = nlohmann::json::array();
    for (const auto& part : m.parts) {
      if (const auto* t = std::get_if<TextPart>(&part)) {
        content.push_back({{"type", "text"}, {"text", t->text}});
      } else {
        const auto& img = std::get<ImagePart>(part);
        content.push_back({{"type", "image_url"},
                           {"image_url", {{"url", "data:" + img.media_type + ";base64," + base64_encode(img.bytes)}}}});
      }
    }
    messages.push_back({{"role", to_string(m.role)}, {"content", std::move(content)}});
  }
  return {{"model", request.model}, {"temperature", request.temperature}, {"messages", std::move(messages)}};
}

ChatRequest from_wire_json(const nlohmann::json& body) {
  auto fail = [](const std::string& why) { throw std::invalid_argument("wire request: " + why); };
  if (!body.is_object()) fail("body is not an object");
  ChatRequest req;
  if (!body.contains("model") || !body["model"].is_string()) fail("missing model");
  req.model = body["model"].get<std::string>();
  if (body.contains("temperature")) {
    if (!body["temperature"].is_number()) fail("temperature is not a number");
    req.temperature = body["temperature"].get<double>();
  }
  if (!body.contains("messages") || !body["messages"].is_array()) fail("missing messages");
  for (const auto& jm : body["messages"]) {
    if (!jm.is_object() || !jm.contains("role") || !jm["role"].is_string()) fail("message without role");
    Message m;
    const auto role = jm["role"].get<std::string>();
    if (role == "system") {
      m.role = Role::system;
    } else if (role == "user") {
      m.role = Role::user;
    } else {
      fail("unsupported role '" + role + "'");
    }
    const auto& content = jm.value("content", nlohmann::json());
    if (content.is_string()) {
      m.parts.push_back(TextPart{content.get<std::string>()});
    } else if (content.is_array()) {
      for (const auto& jp : content) {
        const auto type = jp.value("type", std::string());
        if (type == "text" && jp.contains("text") && jp["text"].is_string()) {
          m.parts.push_back(TextPart{jp["text"].get<std::string>()});
        } else if (type == "image_url") {
          const auto url = jp.value("image_url", nlohmann::json::object()).value("url", std::string());
          const auto comma = url.find(',');
          const auto marker = url.find(";base64");
          if (url.rfind("data:", 0) != 0 || comma == std::string::npos || marker == std::string::npos ||
              marker > comma) {
            fail("image part is not a base64 data URL");
          }
          m.parts.push_back(ImagePart::from_base64(url.substr(5, marker - 5), std::string_view(url).substr(comma + 1)));
        } else {
          fail("unsupported content part");
        }
      }
    } else {
      fail("message content must be a string or an array");
    }
    req.messages.push_back(std::move(m));
  }
  return req;
}

std::string joined_text(const ChatRequest& request) {
  std::string out;
  for (const auto& m : request.messages) {
    for (const auto& part : m.parts) {
      if (const auto* t = std::get_if<TextPart>(&part)) {
        out += t->text;
        out += '\n';
      }
    }
  }
  return out;
}

}  // namespace cotrr
