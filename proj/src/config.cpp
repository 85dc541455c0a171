#include "cotforge/config.hpp"

#include <charconv>
#include <cstdio>
#include <functional>
#include <map>
#include <set>

#include "cotforge/errors.hpp"
#include "cotforge/rng.hpp"

namespace cotforge {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& key, std::string_view expected,
                            const std::string& value) {
  throw ConfigError("config key '" + key + "': expected " + std::string(expected) + ", got '" +
                    value + "'");
}

template <typename T>
T parse_number(const std::string& key, const std::string& value, std::string_view what) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) bad_value(key, what, value);
  return out;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

struct KeySpec {
  std::string key;
  bool required;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

// Each accessor returns a reference into a mutable config; getters reuse it
// through a const_cast because they only read.
template <typename Ref>
KeySpec int_key(std::string key, bool required, Ref ref) {
  return {key, required,
          [key, ref](ExperimentConfig& c, const std::string& v) {
            ref(c) = parse_number<int>(key, v, "an integer");
          },
          [ref](const ExperimentConfig& c) {
            return std::to_string(ref(const_cast<ExperimentConfig&>(c)));
          }};
}

template <typename Ref>
KeySpec u64_key(std::string key, bool required, Ref ref) {
  return {key, required,
          [key, ref](ExperimentConfig& c, const std::string& v) {
            ref(c) = parse_number<std::uint64_t>(key, v, "a non-negative integer");
          },
          [ref](const ExperimentConfig& c) {
            return std::to_string(ref(const_cast<ExperimentConfig&>(c)));
          }};
}

template <typename Ref>
KeySpec real_key(std::string key, bool required, Ref ref) {
  return {key, required,
          [key, ref](ExperimentConfig& c, const std::string& v) {
            ref(c) = parse_number<double>(key, v, "a number");
          },
          [ref](const ExperimentConfig& c) {
            return format_double(ref(const_cast<ExperimentConfig&>(c)));
          }};
}

template <typename Ref>
KeySpec str_key(std::string key, bool required, Ref ref) {
  return {key, required, [ref](ExperimentConfig& c, const std::string& v) { ref(c) = v; },
          [ref](const ExperimentConfig& c) { return ref(const_cast<ExperimentConfig&>(c)); }};
}

#define REF(expr) [](ExperimentConfig& c) -> auto& { return c.expr; }

const std::vector<KeySpec>& schema() {
  static const std::vector<KeySpec> keys = [] {
    std::vector<KeySpec> k;
    k.push_back(str_key("corpus.grammar", true, REF(corpus.grammar)));
    k.push_back(str_key("corpus.cross_grammar", true, REF(corpus.cross_grammar)));
    k.push_back(u64_key("corpus.seed", true, REF(corpus.seed)));
    k.push_back(int_key("corpus.n_sft", true, REF(corpus.n_sft)));
    k.push_back(int_key("corpus.n_rft", true, REF(corpus.n_rft)));
    k.push_back(int_key("corpus.n_eval", true, REF(corpus.n_eval)));

    k.push_back(real_key("sft.lr", true, REF(sft.lr)));
    k.push_back(int_key("sft.epochs", true, REF(sft.epochs)));
    k.push_back(int_key("sft.batch_size", true, REF(sft.batch_size)));
    k.push_back(u64_key("sft.seed", true, REF(sft.seed)));
    k.push_back(real_key("sft.cot_lr", true, REF(sft_cot.lr)));
    k.push_back(int_key("sft.cot_epochs", true, REF(sft_cot.epochs)));
    k.push_back(int_key("sft.cot_batch_size", true, REF(sft_cot.batch_size)));

    k.push_back(int_key("cot.T", true, REF(cot.max_attempts)));
    k.push_back(int_key("cot.N", true, REF(cot.max_depth)));
    k.push_back(real_key("cot.tau", true, REF(cot.tau)));
    k.push_back(u64_key("cot.strategy_seed", true, REF(cot.strategy_seed)));
    k.push_back(int_key("cot.max_retries", false, REF(cot.retry.max_retries)));
    k.push_back({"cot.backoff_ms", false,
                 [](ExperimentConfig& c, const std::string& v) {
                   c.cot.retry.initial_backoff = std::chrono::milliseconds(
                       parse_number<long>("cot.backoff_ms", v, "an integer"));
                 },
                 [](const ExperimentConfig& c) {
                   return std::to_string(c.cot.retry.initial_backoff.count());
                 }});
    k.push_back(str_key("cot.templates_dir", false, REF(templates_dir)));

    k.push_back(int_key("grpo.G", true, REF(grpo.G)));
    k.push_back(real_key("grpo.beta", true, REF(grpo.beta)));
    k.push_back(real_key("grpo.epsilon", true, REF(grpo.epsilon)));
    k.push_back(real_key("grpo.lr", true, REF(grpo.lr)));
    k.push_back(real_key("grpo.temperature", true, REF(grpo.temperature)));
    k.push_back(int_key("grpo.max_len", true, REF(grpo.max_len)));
    k.push_back(real_key("grpo.adv_eps", false, REF(grpo.adv_eps)));
    k.push_back(int_key("grpo.steps", true, REF(grpo.steps)));
    k.push_back(u64_key("grpo.seed", true, REF(grpo.seed)));
    k.push_back(int_key("grpo.batch_size", true, REF(grpo.batch_size)));
    k.push_back(int_key("grpo.inner_updates", false, REF(grpo.inner_updates)));

    k.push_back(real_key("reward.format_value", true, REF(reward.format_value)));
    k.push_back(real_key("reward.w_bleu", true, REF(reward.w_bleu)));
    k.push_back(real_key("reward.w_rouge_l", true, REF(reward.w_rouge_l)));
    k.push_back(real_key("reward.w_meteor", true, REF(reward.w_meteor)));
    k.push_back(real_key("reward.w_cider", true, REF(reward.w_cider)));
    k.push_back(real_key("reward.cider_normalizer", false, REF(reward.cider_normalizer)));

    k.push_back({"backend.kind", true,
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v == "simulated") c.backend.kind = BackendKind::kSimulated;
                   else if (v == "mock") c.backend.kind = BackendKind::kMock;
                   else if (v == "http") c.backend.kind = BackendKind::kHttp;
                   else bad_value("backend.kind", "simulated, mock or http", v);
                 },
                 [](const ExperimentConfig& c) {
                   return std::string(backend_kind_name(c.backend.kind));
                 }});
    k.push_back(u64_key("backend.seed", false, REF(backend.simulated.seed)));
    k.push_back(real_key("backend.init_accuracy", false, REF(backend.simulated.init_accuracy)));
    k.push_back(real_key("backend.step_accuracy", false, REF(backend.simulated.step_accuracy)));
    k.push_back(
        real_key("backend.chain_error_rate", false, REF(backend.simulated.chain_error_rate)));
    k.push_back(str_key("backend.teacher_script", false, REF(backend.teacher_script)));
    k.push_back(str_key("backend.expert_script", false, REF(backend.expert_script)));
    k.push_back(str_key("backend.url", false, REF(backend.http.url)));
    k.push_back(str_key("backend.model", false, REF(backend.http.model)));
    k.push_back(str_key("backend.expert_model", false, REF(backend.expert_model)));
    k.push_back(real_key("backend.temperature", false, REF(backend.http.temperature)));
    k.push_back(str_key("backend.reply_pointer", false, REF(backend.http.reply_pointer)));
    k.push_back({"backend.timeout_s", false,
                 [](ExperimentConfig& c, const std::string& v) {
                   c.backend.http.timeout = std::chrono::seconds(
                       parse_number<long>("backend.timeout_s", v, "an integer"));
                 },
                 [](const ExperimentConfig& c) {
                   return std::to_string(c.backend.http.timeout.count());
                 }});
    return k;
  }();
  return keys;
}

#undef REF

const KeySpec* find_key(std::string_view key) {
  for (const auto& k : schema())
    if (k.key == key) return &k;
  return nullptr;
}

void check_unit(const std::string& key, double v) {
  if (!(v >= 0 && v <= 1)) throw ConfigError("config key '" + key + "' must lie in [0, 1]");
}

void check_path(const std::string& key, const std::string& path) {
  if (!path.empty() && !std::filesystem::exists(path))
    throw ConfigError("config key '" + key + "': file not found: " + path);
}

void check_grammar(const std::string& key, const std::string& v) {
  if (v == "default" || v == "cross") return;
  check_path(key, v);
}

}  // namespace

std::string_view backend_kind_name(BackendKind kind) {
  switch (kind) {
    case BackendKind::kSimulated: return "simulated";
    case BackendKind::kMock: return "mock";
    case BackendKind::kHttp: return "http";
  }
  return "?";
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : schema()) out.push_back(k.key);
  return out;
}

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.sft.lr = 0.1;
  c.sft.epochs = 50;
  c.sft.batch_size = 16;
  c.sft.mask = FreezeMask::stage1();
  c.sft_cot.lr = 1.0;
  c.sft_cot.epochs = 200;
  c.sft_cot.batch_size = 16;
  c.sft_cot.mask = FreezeMask::all();
  c.cot.strategy_seed = 7;
  c.grpo.lr = 10.0;
  c.grpo.batch_size = 8;
  c.grpo.seed = 7;
  c.sft.seed = 7;
  c.sft_cot.seed = 7;
  c.backend.simulated.seed = 7;
  return c;
}

ExperimentConfig ExperimentConfig::parse(std::string_view text) {
  auto cfg = defaults();
  std::set<std::string> seen;
  std::size_t line_no = 0, start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos)
      line = line.substr(0, hash);
    const auto stripped = trim(line);
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const auto key = trim(std::string_view(stripped).substr(0, eq));
    const auto value = trim(std::string_view(stripped).substr(eq + 1));
    const auto* spec = find_key(key);
    if (!spec) throw ConfigError("unknown config key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError("duplicate config key '" + key + "'");
    spec->set(cfg, value);
    if (start > text.size()) break;
  }
  for (const auto& k : schema())
    if (k.required && !seen.count(k.key))
      throw ConfigError("missing required config key '" + k.key + "'");
  // Stage 2 always trains every block; stage 1 only the adapter.
  cfg.sft.mask = FreezeMask::stage1();
  cfg.sft_cot.mask = FreezeMask::all();
  cfg.sft_cot.seed = cfg.sft.seed;
  cfg.validate();
  if (!cfg.templates_dir.empty())
    cfg.cot.templates = PromptTemplates::from_directory(cfg.templates_dir);
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw ConfigError("config file not found: " + path.string());
  return parse(read_file(path));
}

std::string ExperimentConfig::to_text() const {
  std::map<std::string, std::string> sorted;
  for (const auto& k : schema()) sorted[k.key] = k.get(*this);
  std::string out;
  for (const auto& [k, v] : sorted) out += k + " = " + v + "\n";
  return out;
}

std::string ExperimentConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_text())));
  return buf;
}

void ExperimentConfig::apply_seed(std::uint64_t seed) {
  corpus.seed = seed;
  sft.seed = seed;
  sft_cot.seed = seed;
  cot.strategy_seed = seed;
  grpo.seed = seed;
  backend.simulated.seed = seed;
}

void ExperimentConfig::validate() const {
  auto wrap = [](auto&& fn) {
    try {
      fn();
    } catch (const InvalidArgument& e) {
      throw ConfigError(e.what());
    }
  };
  check_grammar("corpus.grammar", corpus.grammar);
  check_grammar("corpus.cross_grammar", corpus.cross_grammar);
  if (corpus.n_sft < 1) throw ConfigError("config key 'corpus.n_sft' must be >= 1");
  if (corpus.n_rft < 1) throw ConfigError("config key 'corpus.n_rft' must be >= 1");
  if (corpus.n_eval < 1) throw ConfigError("config key 'corpus.n_eval' must be >= 1");
  wrap([&] { sft.validate(); });
  wrap([&] { sft_cot.validate(); });
  wrap([&] { cot.validate(); });
  wrap([&] { grpo.validate(); });
  wrap([&] { reward.validate(); });
  check_path("cot.templates_dir", templates_dir);
  check_unit("backend.init_accuracy", backend.simulated.init_accuracy);
  check_unit("backend.step_accuracy", backend.simulated.step_accuracy);
  check_unit("backend.chain_error_rate", backend.simulated.chain_error_rate);
  if (backend.kind == BackendKind::kMock) {
    if (backend.teacher_script.empty())
      throw ConfigError("missing required config key 'backend.teacher_script'");
    if (backend.expert_script.empty())
      throw ConfigError("missing required config key 'backend.expert_script'");
    check_path("backend.teacher_script", backend.teacher_script);
    check_path("backend.expert_script", backend.expert_script);
  }
  if (backend.kind == BackendKind::kHttp) {
    if (backend.http.url.empty()) throw ConfigError("missing required config key 'backend.url'");
    if (backend.http.model.empty())
      throw ConfigError("missing required config key 'backend.model'");
  }
}

}  // namespace cotforge
