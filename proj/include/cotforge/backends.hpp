#pragma once

// Chat backends that play the teacher and expert roles during
// chain-of-thought collection: a scripted mock, an OpenAI-style HTTP client,
// and a grammar-driven simulator for offline desk runs.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "cotforge/corpus.hpp"

namespace cotforge {

enum class Role { kSystem, kUser, kAssistant };
std::string_view role_name(Role role);

struct ChatMessage {
  Role role;
  std::string content;
};

class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  /// Returns the assistant reply. Throws TransportError on delivery failure.
  virtual std::string send(const std::vector<ChatMessage>& messages) = 0;
};

/// Creates one backend per record so per-record state (e.g. call ordinals)
/// never leaks between records or workers.
using BackendFactory = std::function<std::unique_ptr<ChatBackend>()>;

/// Every outgoing user message starts with this line so backends can route
/// on the task without parsing free-form templates.
std::string task_header(std::string_view task);
/// Task name from a user message, or empty if there is no header.
std::string_view parse_task_header(std::string_view content);

struct RetryPolicy {
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{0};
  double multiplier = 2.0;
  std::chrono::milliseconds max_backoff{5000};
};

struct Reply {
  std::string text;
  int retries = 0;
};

/// Retries TransportError up to policy.max_retries times with exponential
/// backoff. Rethrows the last error with the total attempt count.
Reply send_with_retry(ChatBackend& backend, const std::vector<ChatMessage>& messages,
                      const RetryPolicy& policy);

// ---------------------------------------------------------------------------

/// One line of a mock script: {"match": substring-or-ordinal, "reply": str}.
/// A rule may carry "error" instead of "reply" to inject a transport failure.
struct ScriptRule {
  std::variant<std::string, long> match;
  std::optional<std::string> reply;
  std::optional<std::string> error;
};

std::vector<ScriptRule> parse_script(std::string_view jsonl);
std::vector<ScriptRule> load_script(const std::filesystem::path& path);

/// Rules are tried in order. An ordinal rule matches the n-th call (0-based)
/// made to this instance; a substring rule matches if the last user message
/// contains it. No match is a TransportError.
class ScriptedBackend : public ChatBackend {
 public:
  explicit ScriptedBackend(std::vector<ScriptRule> rules) : rules_(std::move(rules)) {}
  std::string send(const std::vector<ChatMessage>& messages) override;
  long calls() const noexcept { return calls_; }

 private:
  std::vector<ScriptRule> rules_;
  long calls_ = 0;
};

// ---------------------------------------------------------------------------

struct HttpBackendConfig {
  std::string url;  // e.g. http://localhost:8000/v1/chat/completions
  std::string model;
  double temperature = 0.7;
  std::string reply_pointer = "/choices/0/message/content";
  std::string api_key_env = "COTFORGE_API_KEY";
  std::chrono::seconds timeout{60};
};

/// {"model", "messages":[{"role","content"}], "temperature"}
std::string build_chat_request(const std::vector<ChatMessage>& messages, std::string_view model,
                               double temperature);
/// Reads the assistant text at a JSON pointer. Throws TransportError if the
/// body is not JSON or the pointer does not name a string.
std::string extract_reply(std::string_view body, const std::string& pointer);

class HttpChatBackend : public ChatBackend {
 public:
  explicit HttpChatBackend(HttpBackendConfig cfg);
  std::string send(const std::vector<ChatMessage>& messages) override;

 private:
  HttpBackendConfig cfg_;
  std::string origin_;  // scheme://host:port
  std::string path_;
};

// ---------------------------------------------------------------------------

struct SimulatedBackendConfig {
  std::uint64_t seed = 0;
  double init_accuracy = 0.35;  // P(initial answer is the reference)
  double step_accuracy = 0.5;   // P(a strategy step lands on the reference)
  double chain_error_rate = 0.1;  // P(reformatted chain names the wrong finding)
};

/// Offline stand-in for both the teacher and the expert. It reads
/// `condition_id=`/`noise_id=` from the rendered context, answers with
/// grammar text, and makes seeded, content-addressed mistakes so replies are
/// a pure function of the message history.
class SimulatedBackend : public ChatBackend {
 public:
  SimulatedBackend(GrammarSpec grammar, SimulatedBackendConfig cfg)
      : grammar_(std::move(grammar)), cfg_(cfg) {}
  std::string send(const std::vector<ChatMessage>& messages) override;

 private:
  GrammarSpec grammar_;
  SimulatedBackendConfig cfg_;
};

}  // namespace cotforge
