#include "cotforge/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include <json.hpp>

#include "cotforge/errors.hpp"

namespace cotforge {

using nlohmann::json;

bool PolicyParams::all_finite() const {
  auto finite = [](const Matrix& m) {
    return std::all_of(m.data().begin(), m.data().end(),
                       [](double v) { return std::isfinite(v); });
  };
  return finite(adapter) && finite(decoder);
}

namespace {

void check_context(const PolicyParams& p, const ContextKey& ctx) {
  if (ctx.condition_id < 0 || ctx.condition_id >= p.contexts())
    throw InvalidArgument("condition_id " + std::to_string(ctx.condition_id) +
                          " outside policy contexts");
}

void check_tokens(const PolicyParams& p, std::span<const int> tokens) {
  for (int t : tokens)
    if (t < 0 || t >= p.vocab())
      throw InvalidArgument("out-of-vocabulary token id " + std::to_string(t));
}

}  // namespace

void step_logits(const PolicyParams& p, int condition_id, int prev_token, std::span<double> out) {
  const auto a = p.adapter.row(condition_id);
  const auto d = p.decoder.row(prev_token);
  for (std::size_t v = 0; v < out.size(); ++v) out[v] = a[v] + d[v];
}

double log_softmax_inplace(std::span<double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0;
  for (double v : logits) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  for (double& v : logits) v -= lse;
  return lse;
}

LogProbResult logits_and_logprob(const PolicyParams& p, const ContextKey& ctx,
                                 std::span<const int> tokens) {
  check_context(p, ctx);
  check_tokens(p, tokens);
  LogProbResult out;
  out.logits.reserve(tokens.size());
  out.token_logprobs.reserve(tokens.size());
  std::vector<double> row(p.vocab());
  int prev = Vocabulary::kBosId;
  for (int y : tokens) {
    step_logits(p, ctx.condition_id, prev, row);
    out.logits.push_back(row);
    log_softmax_inplace(row);
    out.token_logprobs.push_back(row[y]);
    out.total += row[y];
    prev = y;
  }
  return out;
}

std::vector<double> token_logprobs(const PolicyParams& p, const ContextKey& ctx,
                                   std::span<const int> tokens) {
  check_context(p, ctx);
  check_tokens(p, tokens);
  std::vector<double> out;
  out.reserve(tokens.size());
  std::vector<double> row(p.vocab());
  int prev = Vocabulary::kBosId;
  for (int y : tokens) {
    step_logits(p, ctx.condition_id, prev, row);
    log_softmax_inplace(row);
    out.push_back(row[y]);
    prev = y;
  }
  return out;
}

double sequence_logprob(const PolicyParams& p, const ContextKey& ctx,
                        std::span<const int> tokens) {
  double total = 0;
  for (double lp : token_logprobs(p, ctx, tokens)) total += lp;
  return total;
}

void accumulate_weighted_grad(const PolicyParams& p, const ContextKey& ctx,
                              std::span<const int> tokens, std::span<const double> weights,
                              const FreezeMask& mask, PolicyGrad& grad) {
  check_context(p, ctx);
  check_tokens(p, tokens);
  if (weights.size() != tokens.size())
    throw InvalidArgument("gradient weights must match token count");
  if (!grad.same_shape(p)) grad = PolicyGrad(p.contexts(), p.vocab());
  if (!mask.any()) return;

  std::vector<double> row(p.vocab());
  int prev = Vocabulary::kBosId;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const int y = tokens[t];
    const double w = weights[t];
    if (w != 0.0) {
      step_logits(p, ctx.condition_id, prev, row);
      log_softmax_inplace(row);
      // d log softmax(z)[y] / dz = onehot(y) - softmax(z)
      auto a = grad.adapter.row(ctx.condition_id);
      auto d = grad.decoder.row(prev);
      for (int v = 0; v < p.vocab(); ++v) {
        const double g = w * ((v == y ? 1.0 : 0.0) - std::exp(row[v]));
        if (mask.adapter_trainable) a[v] += g;
        if (mask.decoder_trainable) d[v] += g;
      }
    }
    prev = y;
  }
}

PolicyGrad grad_log_prob(const PolicyParams& p, const ContextKey& ctx,
                         std::span<const int> tokens, const FreezeMask& mask) {
  PolicyGrad g(p.contexts(), p.vocab());
  const std::vector<double> ones(tokens.size(), 1.0);
  accumulate_weighted_grad(p, ctx, tokens, ones, mask, g);
  return g;
}

void apply_update(PolicyParams& params, const PolicyGrad& grad, double lr,
                  const FreezeMask& mask, UpdateDirection dir) {
  if (!(lr > 0) || !std::isfinite(lr)) throw InvalidArgument("learning rate must be > 0");
  if (!grad.same_shape(params)) throw InvalidArgument("gradient shape mismatch");
  if (!grad.all_finite()) throw InvalidArgument("non-finite gradient");
  const double step = dir == UpdateDirection::kAscent ? lr : -lr;
  auto update = [step](Matrix& m, const Matrix& g) {
    auto& md = m.data();
    const auto& gd = g.data();
    for (std::size_t i = 0; i < md.size(); ++i) md[i] += step * gd[i];
  };
  if (mask.adapter_trainable) update(params.adapter, grad.adapter);
  if (mask.decoder_trainable) update(params.decoder, grad.decoder);
}

std::vector<int> sample_sequence(const PolicyParams& p, const ContextKey& ctx,
                                 double temperature, int max_len, Rng& rng) {
  check_context(p, ctx);
  if (max_len < 1) throw InvalidArgument("max_len must be >= 1");
  const bool greedy = !(temperature > 0);
  std::vector<int> out;
  std::vector<double> row(p.vocab());
  int prev = Vocabulary::kBosId;
  while (static_cast<int>(out.size()) < max_len) {
    step_logits(p, ctx.condition_id, prev, row);
    int next = 0;
    if (greedy) {
      next = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    } else {
      for (double& v : row) v /= temperature;
      log_softmax_inplace(row);
      const double u = rng.uniform();
      double cdf = 0;
      next = p.vocab() - 1;
      for (int v = 0; v < p.vocab(); ++v) {
        cdf += std::exp(row[v]);
        if (u < cdf) {
          next = v;
          break;
        }
      }
    }
    out.push_back(next);
    if (next == Vocabulary::kEosId) break;
    prev = next;
  }
  return out;
}

std::vector<int> sample_sequence(const PolicyParams& p, const ContextKey& ctx,
                                 double temperature, int max_len, std::uint64_t seed) {
  Rng rng(seed);
  return sample_sequence(p, ctx, temperature, max_len, rng);
}

std::vector<int> greedy_decode(const PolicyParams& p, const ContextKey& ctx, int max_len) {
  Rng unused(0);
  return sample_sequence(p, ctx, 0.0, max_len, unused);
}

std::string render_output(const Vocabulary& vocab, std::span<const int> tokens) {
  std::string out;
  for (int t : tokens) {
    if (t == Vocabulary::kBosId || t == Vocabulary::kEosId) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(t);
  }
  return out;
}

ReferencePolicy snapshot_reference(const PolicyParams& params) { return ReferencePolicy(params); }

double mean_kl(const PolicyParams& p, const ReferencePolicy& ref, const ContextKey& ctx,
               std::span<const int> tokens) {
  if (tokens.empty()) return 0.0;
  const auto lp_new = token_logprobs(p, ctx, tokens);
  const auto lp_ref = ref.token_logprobs(ctx, tokens);
  double sum = 0;
  for (std::size_t t = 0; t < tokens.size(); ++t) sum += kl_estimator(lp_new[t], lp_ref[t]);
  return sum / static_cast<double>(tokens.size());
}

// ---------------------------------------------------------------------------
// Checkpoints

std::string vocabulary_hash(const Vocabulary& vocab) {
  std::uint64_t h = fnv1a("cotforge-vocab-v1");
  for (const auto& t : vocab.tokens()) {
    h = fnv1a(t, h);
    h = fnv1a(std::string_view("\x1f", 1), h);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {
constexpr const char* kCheckpointFormat = "cotforge-checkpoint";
constexpr int kCheckpointVersion = 1;
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["stage"] = ck.stage;
  j["grammar_hash"] = ck.grammar_hash;
  j["vocab_hash"] = ck.vocab_hash;
  j["contexts"] = ck.params.contexts();
  j["vocab"] = ck.params.vocab();
  j["adapter"] = ck.params.adapter.data();
  j["decoder"] = ck.params.decoder.data();
  write_file(path, j.dump() + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    const auto j = json::parse(read_file(path));
    if (j.at("format") != kCheckpointFormat)
      throw DataError(path.string() + ": not a checkpoint file");
    if (j.at("version") != kCheckpointVersion)
      throw DataError(path.string() + ": unsupported checkpoint version");
    Checkpoint ck;
    ck.stage = j.at("stage").get<std::string>();
    ck.grammar_hash = j.at("grammar_hash").get<std::string>();
    ck.vocab_hash = j.at("vocab_hash").get<std::string>();
    const int c = j.at("contexts").get<int>();
    const int v = j.at("vocab").get<int>();
    ck.params = PolicyParams(c, v);
    auto adapter = j.at("adapter").get<std::vector<double>>();
    auto decoder = j.at("decoder").get<std::vector<double>>();
    if (adapter.size() != ck.params.adapter.data().size() ||
        decoder.size() != ck.params.decoder.data().size())
      throw DataError(path.string() + ": weight block sizes do not match header");
    ck.params.adapter.data() = std::move(adapter);
    ck.params.decoder.data() = std::move(decoder);
    return ck;
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const GrammarSpec& grammar) {
  auto ck = load_checkpoint(path);
  if (ck.grammar_hash != grammar.hash())
    throw DataError(path.string() + ": grammar hash " + ck.grammar_hash +
                    " does not match " + grammar.hash());
  return ck;
}

}  // namespace cotforge
