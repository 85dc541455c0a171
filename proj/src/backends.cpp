#include "cotforge/backends.hpp"

#include <cmath>
#include <cstdlib>
#include <regex>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "cotforge/errors.hpp"
#include "cotforge/rng.hpp"

namespace cotforge {

using nlohmann::json;

std::string_view role_name(Role role) {
  switch (role) {
    case Role::kSystem: return "system";
    case Role::kUser: return "user";
    case Role::kAssistant: return "assistant";
  }
  return "user";
}

namespace {
constexpr std::string_view kTaskPrefix = "task: ";
}  // namespace

std::string task_header(std::string_view task) {
  return std::string(kTaskPrefix) + std::string(task) + "\n";
}

std::string_view parse_task_header(std::string_view content) {
  if (content.substr(0, kTaskPrefix.size()) != kTaskPrefix) return {};
  content.remove_prefix(kTaskPrefix.size());
  return content.substr(0, content.find('\n'));
}

Reply send_with_retry(ChatBackend& backend, const std::vector<ChatMessage>& messages,
                      const RetryPolicy& policy) {
  auto delay = policy.initial_backoff;
  for (int attempt = 0;; ++attempt) {
    try {
      return Reply{backend.send(messages), attempt};
    } catch (const TransportError& e) {
      if (attempt >= policy.max_retries) throw TransportError(e.what(), attempt + 1);
    }
    if (delay.count() > 0) {
      std::this_thread::sleep_for(delay);
      delay = std::min(policy.max_backoff,
                       std::chrono::milliseconds(static_cast<long long>(
                           std::llround(static_cast<double>(delay.count()) * policy.multiplier))));
    }
  }
}

// ---------------------------------------------------------------------------
// Scripted mock

std::vector<ScriptRule> parse_script(std::string_view jsonl) {
  std::vector<ScriptRule> rules;
  std::size_t line_no = 0, start = 0;
  while (start < jsonl.size()) {
    auto end = jsonl.find('\n', start);
    if (end == std::string_view::npos) end = jsonl.size();
    auto line = jsonl.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    const auto where = "mock script line " + std::to_string(line_no) + ": ";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(where + e.what());
    }
    ScriptRule rule;
    if (!j.contains("match")) throw DataError(where + "field \"match\" is missing");
    if (j["match"].is_string())
      rule.match = j["match"].get<std::string>();
    else if (j["match"].is_number_integer())
      rule.match = j["match"].get<long>();
    else
      throw DataError(where + "field \"match\" must be a string or integer");
    if (j.contains("reply")) {
      if (!j["reply"].is_string()) throw DataError(where + "field \"reply\" must be a string");
      rule.reply = j["reply"].get<std::string>();
    }
    if (j.contains("error")) rule.error = j["error"].is_string() ? j["error"].get<std::string>()
                                                                : std::string("injected");
    if (!rule.reply && !rule.error) throw DataError(where + "field \"reply\" is missing");
    rules.push_back(std::move(rule));
  }
  return rules;
}

std::vector<ScriptRule> load_script(const std::filesystem::path& path) {
  return parse_script(read_file(path));
}

std::string ScriptedBackend::send(const std::vector<ChatMessage>& messages) {
  const long ordinal = calls_++;
  std::string_view last_user;
  for (const auto& m : messages)
    if (m.role == Role::kUser) last_user = m.content;
  for (const auto& rule : rules_) {
    const bool hit = std::visit(
        [&](const auto& m) {
          using T = std::decay_t<decltype(m)>;
          if constexpr (std::is_same_v<T, long>)
            return m == ordinal;
          else
            return last_user.find(m) != std::string_view::npos;
        },
        rule.match);
    if (!hit) continue;
    if (rule.error) throw TransportError("scripted failure: " + *rule.error);
    return *rule.reply;
  }
  throw TransportError("mock script has no rule for call " + std::to_string(ordinal));
}

// ---------------------------------------------------------------------------
// HTTP

std::string build_chat_request(const std::vector<ChatMessage>& messages, std::string_view model,
                               double temperature) {
  json body;
  body["model"] = std::string(model);
  body["messages"] = json::array();
  for (const auto& m : messages)
    body["messages"].push_back({{"role", std::string(role_name(m.role))}, {"content", m.content}});
  body["temperature"] = temperature;
  return body.dump();
}

std::string extract_reply(std::string_view body, const std::string& pointer) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::parse_error& e) {
    throw TransportError(std::string("reply is not JSON: ") + e.what());
  }
  try {
    const auto& v = j.at(json::json_pointer(pointer));
    if (!v.is_string()) throw TransportError("reply field " + pointer + " is not a string");
    return v.get<std::string>();
  } catch (const json::exception& e) {
    throw TransportError("reply has no " + pointer + ": " + e.what());
  }
}

HttpChatBackend::HttpChatBackend(HttpBackendConfig cfg) : cfg_(std::move(cfg)) {
  static const std::regex kUrl(R"(^(https?)://([^/:]+)(:\d+)?(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(cfg_.url, m, kUrl))
    throw InvalidArgument("backend url must look like http(s)://host[:port]/path: " + cfg_.url);
  origin_ = m[1].str() + "://" + m[2].str() + m[3].str();
  path_ = m[4].matched ? m[4].str() : "/";
}

std::string HttpChatBackend::send(const std::vector<ChatMessage>& messages) {
  httplib::Client client(origin_);
  const auto secs = static_cast<time_t>(cfg_.timeout.count());
  client.set_connection_timeout(secs, 0);
  client.set_read_timeout(secs, 0);
  client.set_write_timeout(secs, 0);

  httplib::Headers headers;
  if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key)
    headers.emplace("Authorization", std::string("Bearer ") + key);

  const auto body = build_chat_request(messages, cfg_.model, cfg_.temperature);
  auto res = client.Post(path_, headers, body, "application/json");
  if (!res) throw TransportError("POST " + cfg_.url + " failed: " + httplib::to_string(res.error()));
  if (res->status < 200 || res->status >= 300)
    throw TransportError("POST " + cfg_.url + " returned HTTP " + std::to_string(res->status));
  return extract_reply(res->body, cfg_.reply_pointer);
}

// ---------------------------------------------------------------------------
// Simulator

namespace {

std::optional<ContextKey> find_context(std::string_view text) {
  static const std::regex kCtx(R"(condition_id=(\d+)[^\n]*?noise_id=(\d+))");
  std::match_results<std::string_view::const_iterator> m;
  if (!std::regex_search(text.begin(), text.end(), m, kCtx)) return std::nullopt;
  return ContextKey{std::stoi(m[1].str()), std::stoi(m[2].str())};
}

}  // namespace

std::string SimulatedBackend::send(const std::vector<ChatMessage>& messages) {
  std::string_view content;
  for (const auto& m : messages)
    if (m.role == Role::kUser) content = m.content;
  const auto task = parse_task_header(content);
  if (task.empty()) throw TransportError("simulated backend: message has no task header");
  const auto key = find_context(content);
  if (!key || key->condition_id >= grammar_.condition_count() ||
      key->noise_id >= grammar_.paraphrase_count())
    throw TransportError("simulated backend: message names no valid context");

  const std::uint64_t h = derive_seed({cfg_.seed, fnv1a(content)});
  Rng rng(h);
  const int c = key->condition_id;
  const int n_cond = grammar_.condition_count();
  auto other_condition = [&] {
    if (n_cond == 1) return c;
    return (c + 1 + static_cast<int>(rng.below(n_cond - 1))) % n_cond;
  };
  const std::string reference = detokenize(grammar_.report(*key));

  if (task == "filter") {
    const bool consistent =
        content.find(detokenize(grammar_.chains[c])) != std::string_view::npos;
    return consistent ? "CONSISTENT" : "INCONSISTENT";
  }
  if (task == "reformat") {
    const double u = rng.uniform();
    const int chain_cond = u < cfg_.chain_error_rate ? other_condition() : c;
    std::string answer = reference;
    const auto close = content.rfind(kAnswerClose);
    const auto open = close == std::string_view::npos ? close : content.rfind(kAnswerOpen, close);
    if (open != std::string_view::npos)
      answer = std::string(content.substr(open + kAnswerOpen.size(),
                                          close - open - kAnswerOpen.size()));
    return compose_tagged_output(detokenize(grammar_.chains[chain_cond]), answer);
  }

  double accuracy = 0;
  if (task == "init")
    accuracy = cfg_.init_accuracy;
  else if (task == "explore" || task == "backtrack" || task == "verify" || task == "correct")
    accuracy = cfg_.step_accuracy;
  else
    throw TransportError("simulated backend: unknown task '" + std::string(task) + "'");

  const bool right = rng.uniform() < accuracy;
  const int answer_cond = right ? c : other_condition();
  const std::string answer =
      detokenize(grammar_.report({answer_cond, key->noise_id}));
  const std::string think = "applying " + std::string(task) + " : " +
                            detokenize(grammar_.chains[answer_cond]);
  return compose_tagged_output(think, answer);
}

}  // namespace cotforge
