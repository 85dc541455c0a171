#include "cotforge/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "cotforge/errors.hpp"
#include "cotforge/rng.hpp"

namespace cotforge {

void GrpoConfig::validate() const {
  if (G < 2) throw InvalidArgument("grpo.G must be >= 2");
  if (!(beta >= 0)) throw InvalidArgument("grpo.beta must be >= 0");
  if (!(epsilon > 0 && epsilon < 1)) throw InvalidArgument("grpo.epsilon must lie in (0, 1)");
  if (!(lr > 0)) throw InvalidArgument("grpo.lr must be > 0");
  if (!(temperature > 0)) throw InvalidArgument("grpo.temperature must be > 0");
  if (max_len < 1) throw InvalidArgument("grpo.max_len must be >= 1");
  if (!(adv_eps > 0)) throw InvalidArgument("grpo.adv_eps must be > 0");
  if (steps < 0) throw InvalidArgument("grpo.steps must be >= 0");
  if (batch_size < 1) throw InvalidArgument("grpo.batch_size must be >= 1");
  if (inner_updates < 1) throw InvalidArgument("grpo.inner_updates must be >= 1");
  if (!mask.any()) throw InvalidArgument("grpo freeze mask leaves nothing trainable");
}

std::vector<double> group_advantages(std::span<const double> rewards, double adv_eps) {
  if (rewards.size() < 2) throw InvalidArgument("group_advantages: need at least two rewards");
  const auto [lo, hi] = std::minmax_element(rewards.begin(), rewards.end());
  // Exact zeros for a flat group; the computed mean can differ from the
  // common value in the last bit.
  if (*lo == *hi) return std::vector<double>(rewards.size(), 0.0);
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double denom = std::sqrt(var / n) + adv_eps;
  std::vector<double> out;
  out.reserve(rewards.size());
  for (double r : rewards) out.push_back((r - mean) / denom);
  return out;
}

double clipped_term(double ratio, double advantage, double epsilon) {
  const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
  return std::min(ratio * advantage, clipped * advantage);
}

ObjectiveResult grpo_objective(const PolicyParams& params, std::span<const RolloutGroup> groups,
                               const GrpoConfig& cfg) {
  if (groups.empty()) throw InvalidArgument("grpo_objective: no groups");
  ObjectiveResult out;
  out.grad = PolicyGrad(params.contexts(), params.vocab());
  const double inv_groups = 1.0 / static_cast<double>(groups.size());
  std::size_t clipped_tokens = 0;
  double kl_sum = 0;

  for (const auto& g : groups) {
    if (g.advantages.size() != g.size() || g.old_logprobs.size() != g.size() ||
        g.ref_logprobs.size() != g.size())
      throw InvalidArgument("grpo_objective: group arrays disagree in length");
    std::size_t n_tok = 0;
    for (const auto& t : g.tokens) n_tok += t.size();
    if (n_tok == 0) throw InvalidArgument("grpo_objective: group has no tokens");
    const double w_tok = inv_groups / static_cast<double>(n_tok);

    for (std::size_t i = 0; i < g.size(); ++i) {
      const auto& toks = g.tokens[i];
      const double a = g.advantages[i];
      const auto logp = token_logprobs(params, g.context, toks);
      std::vector<double> weights(toks.size());
      for (std::size_t t = 0; t < toks.size(); ++t) {
        const double ratio = std::exp(logp[t] - g.old_logprobs[i][t]);
        const double delta = g.ref_logprobs[i][t] - logp[t];
        const double k = kl_estimator(logp[t], g.ref_logprobs[i][t]);
        if (!std::isfinite(ratio) || !std::isfinite(k))
          throw StageError("rft", "non-finite ratio or KL term in the objective");
        out.value += w_tok * (clipped_term(ratio, a, cfg.epsilon) - cfg.beta * k);
        kl_sum += k;

        const bool outside = ratio < 1.0 - cfg.epsilon || ratio > 1.0 + cfg.epsilon;
        if (outside) ++clipped_tokens;
        // The clip branch is constant (zero gradient) when it is the one
        // selected by the min.
        const bool clip_binds =
            (a > 0 && ratio > 1.0 + cfg.epsilon) || (a < 0 && ratio < 1.0 - cfg.epsilon);
        const double d_clip = clip_binds ? 0.0 : ratio * a;
        const double d_kl = cfg.beta * std::expm1(delta);
        weights[t] = w_tok * (d_clip + d_kl);
      }
      accumulate_weighted_grad(params, g.context, toks, weights, cfg.mask, out.grad);
      out.tokens += toks.size();
    }
  }
  if (!std::isfinite(out.value)) throw StageError("rft", "non-finite objective");
  out.clip_fraction = static_cast<double>(clipped_tokens) / static_cast<double>(out.tokens);
  out.mean_kl = kl_sum / static_cast<double>(out.tokens);
  return out;
}

RolloutGroup sample_group(const PolicyParams& params, const ReferencePolicy& ref,
                          const RftRecord& record, const Vocabulary& vocab, const DfStats& df,
                          const RewardConfig& reward_cfg, const GrpoConfig& cfg,
                          std::uint64_t seed) {
  RolloutGroup g;
  g.context = record.context;
  for (int i = 0; i < cfg.G; ++i) {
    auto toks = sample_sequence(params, record.context, cfg.temperature, cfg.max_len,
                                derive_seed({seed, static_cast<std::uint64_t>(i)}));
    auto text = render_output(vocab, toks);
    const auto score = composite_reward(text, record.reference, df, reward_cfg);
    g.old_logprobs.push_back(token_logprobs(params, record.context, toks));
    g.ref_logprobs.push_back(ref.token_logprobs(record.context, toks));
    g.rewards.push_back(score.r_all);
    g.scores.push_back(score);
    g.outputs.push_back(std::move(text));
    g.tokens.push_back(std::move(toks));
  }
  g.advantages = group_advantages(g.rewards, cfg.adv_eps);
  return g;
}

StepStats grpo_step(PolicyParams& params, const ReferencePolicy& ref,
                    std::span<const RftRecord> batch, const Vocabulary& vocab, const DfStats& df,
                    const RewardConfig& reward_cfg, const GrpoConfig& cfg, int step_index) {
  if (batch.empty()) throw InvalidArgument("grpo_step: empty batch");
  StepStats stats;
  std::size_t samples = 0, parsed = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto seed =
        derive_seed({cfg.seed, 0x6e70ULL, static_cast<std::uint64_t>(step_index), b});
    const auto group = sample_group(params, ref, batch[b], vocab, df, reward_cfg, cfg, seed);
    for (const auto& s : group.scores) {
      stats.mean_r_all += s.r_all;
      stats.mean_r_acc += s.r_acc;
      stats.mean_r_format += s.r_format;
      if (s.r_format > 0) ++parsed;
      ++samples;
    }
    for (int u = 0; u < cfg.inner_updates; ++u) {
      auto obj = grpo_objective(params, std::span(&group, 1), cfg);
      if (u == 0) stats.mean_kl += obj.mean_kl;
      if (u + 1 == cfg.inner_updates) stats.clip_fraction += obj.clip_fraction;
      apply_update(params, obj.grad, cfg.lr, cfg.mask, UpdateDirection::kAscent);
    }
  }
  const double n = static_cast<double>(samples);
  const double nb = static_cast<double>(batch.size());
  stats.mean_r_all /= n;
  stats.mean_r_acc /= n;
  stats.mean_r_format /= n;
  stats.format_rate = static_cast<double>(parsed) / n;
  stats.mean_kl /= nb;
  stats.clip_fraction /= nb;
  return stats;
}

RftResult train_rft(PolicyParams params, const std::vector<RftRecord>& dataset,
                    const Vocabulary& vocab, const DfStats& df, const RewardConfig& reward_cfg,
                    const GrpoConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  reward_cfg.validate();
  if (dataset.empty()) throw InvalidArgument("train_rft: empty dataset");
  const auto ref = snapshot_reference(params);
  Rng rng(derive_seed({cfg.seed, 0x7ffULL}));
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::size_t cursor = 0;

  RftResult result;
  std::vector<RftRecord> batch;
  for (int step = 0; step < cfg.steps; ++step) {
    batch.clear();
    for (int k = 0; k < cfg.batch_size; ++k) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(dataset[order[cursor++]]);
    }
    auto stats = grpo_step(params, ref, batch, vocab, df, reward_cfg, cfg, step);
    if (on_step) on_step(step, stats);
    result.curve.push_back(stats);
  }
  result.params = std::move(params);
  return result;
}

std::string reward_curve_csv(const std::vector<StepStats>& curve) {
  std::string out = std::string(kRewardCurveHeader) + "\n";
  char buf[256];
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const auto& s = curve[i];
    std::snprintf(buf, sizeof buf, "%zu,%.10f,%.10f,%.10f,%.10f,%.10f\n", i + 1, s.mean_r_all,
                  s.mean_r_acc, s.mean_r_format, s.mean_kl, s.clip_fraction);
    out += buf;
  }
  return out;
}

}  // namespace cotforge
