#pragma once

// Stage 3: group rollouts, group-relative advantages, the clipped surrogate
// with a KL penalty against a frozen reference, and the training loop.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cotforge/corpus.hpp"
#include "cotforge/metrics.hpp"
#include "cotforge/policy.hpp"
#include "cotforge/rewards.hpp"

namespace cotforge {

struct GrpoConfig {
  int G = 8;
  double beta = 0.05;
  double epsilon = 0.2;
  double lr = 0.5;
  double temperature = 1.0;
  int max_len = 48;
  double adv_eps = 1e-8;
  int steps = 300;
  std::uint64_t seed = 0;
  int batch_size = 4;     // records per step
  int inner_updates = 1;  // ascent updates per sampled group
  FreezeMask mask = FreezeMask::all();

  void validate() const;
};

struct RolloutGroup {
  ContextKey context;
  std::vector<std::string> outputs;              // rendered text, one per sample
  std::vector<std::vector<int>> tokens;          // sampled ids, EOS included if emitted
  std::vector<std::vector<double>> old_logprobs;  // per token under π_old
  std::vector<std::vector<double>> ref_logprobs;  // per token under π_ref
  std::vector<CompositeReward> scores;
  std::vector<double> rewards;  // r_all
  std::vector<double> advantages;

  std::size_t size() const noexcept { return tokens.size(); }
};

/// (r − mean) / (population std + adv_eps). Requires at least two rewards.
std::vector<double> group_advantages(std::span<const double> rewards, double adv_eps);

struct ObjectiveResult {
  double value = 0;
  PolicyGrad grad;
  double clip_fraction = 0;  // share of tokens with ρ outside [1−ε, 1+ε]
  double mean_kl = 0;        // token-weighted mean of the KL estimator
  std::size_t tokens = 0;
};

/// Per-token clipped surrogate minus β·KL, averaged over the pooled tokens
/// of each group and then over groups, with its gradient for unfrozen blocks.
/// Throws StageError on non-finite intermediate values.
ObjectiveResult grpo_objective(const PolicyParams& params, std::span<const RolloutGroup> groups,
                               const GrpoConfig& cfg);

/// Clipped-surrogate value of one token: min(ρA, clip(ρ, 1−ε, 1+ε)·A).
double clipped_term(double ratio, double advantage, double epsilon);

/// Samples G outputs from `params` (which acts as π_old), scores them and
/// fills every field of the group.
RolloutGroup sample_group(const PolicyParams& params, const ReferencePolicy& ref,
                          const RftRecord& record, const Vocabulary& vocab, const DfStats& df,
                          const RewardConfig& reward_cfg, const GrpoConfig& cfg,
                          std::uint64_t seed);

struct StepStats {
  double mean_r_all = 0;
  double mean_r_acc = 0;
  double mean_r_format = 0;
  double mean_kl = 0;
  double clip_fraction = 0;
  double format_rate = 0;  // share of samples that parse
};

/// One step over a batch: for each record, π_old := current params, sample
/// G outputs, compute advantages and apply cfg.inner_updates ascent updates.
StepStats grpo_step(PolicyParams& params, const ReferencePolicy& ref,
                    std::span<const RftRecord> batch, const Vocabulary& vocab, const DfStats& df,
                    const RewardConfig& reward_cfg, const GrpoConfig& cfg, int step_index);

struct RftResult {
  PolicyParams params;
  std::vector<StepStats> curve;  // one row per step
};

using StepCallback = std::function<void(int step, const StepStats&)>;

/// Snapshots π_ref once, then runs cfg.steps steps over seeded reshuffles of
/// the dataset.
RftResult train_rft(PolicyParams params, const std::vector<RftRecord>& dataset,
                    const Vocabulary& vocab, const DfStats& df, const RewardConfig& reward_cfg,
                    const GrpoConfig& cfg, const StepCallback& on_step = {});

inline constexpr const char* kRewardCurveHeader =
    "step,mean_r_all,mean_r_acc,mean_r_format,mean_kl,clip_fraction";
std::string reward_curve_csv(const std::vector<StepStats>& curve);

}  // namespace cotforge
