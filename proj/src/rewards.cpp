#include "cotforge/rewards.hpp"

#include <algorithm>
#include <cmath>

#include "cotforge/errors.hpp"

namespace cotforge {

namespace {
double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }
}  // namespace

void RewardConfig::validate() const {
  if (!(format_value >= 0)) throw InvalidArgument("reward.format_value must be >= 0");
  for (double w : {w_bleu, w_rouge_l, w_meteor, w_cider})
    if (!(w >= 0) || !std::isfinite(w)) throw InvalidArgument("reward weights must be >= 0");
  if (!(w_bleu + w_rouge_l + w_meteor + w_cider > 0))
    throw InvalidArgument("reward weights must not all be zero");
  if (!(cider_normalizer > 0)) throw InvalidArgument("reward.cider_normalizer must be > 0");
}

double format_reward(std::string_view text, const RewardConfig& cfg) {
  return parse_tagged_output(text) ? cfg.format_value : 0.0;
}

PrecisionComponents precision_components(const TokenSequence& answer,
                                         const TokenSequence& reference, const DfStats& df,
                                         const RewardConfig& cfg) {
  if (reference.empty()) throw InvalidArgument("precision_reward: empty reference");
  PrecisionComponents c;
  const auto b = sentence_bleu(answer, reference);
  c.bleu_avg = clamp01((b.bleu[0] + b.bleu[1] + b.bleu[2] + b.bleu[3]) / 4.0);
  c.rouge_l = clamp01(rouge_l(answer, reference));
  c.meteor = clamp01(meteor_exact(answer, reference));
  c.cider_scaled = clamp01(cider_pair(answer, reference, df) / cfg.cider_normalizer);
  return c;
}

double precision_reward(const TokenSequence& answer, const TokenSequence& reference,
                        const DfStats& df, const RewardConfig& cfg) {
  // Skip the component searches entirely when a weight is zero.
  if (reference.empty()) throw InvalidArgument("precision_reward: empty reference");
  double r = 0;
  if (cfg.w_bleu > 0) {
    const auto b = sentence_bleu(answer, reference);
    r += cfg.w_bleu * clamp01((b.bleu[0] + b.bleu[1] + b.bleu[2] + b.bleu[3]) / 4.0);
  }
  if (cfg.w_rouge_l > 0) r += cfg.w_rouge_l * clamp01(rouge_l(answer, reference));
  if (cfg.w_meteor > 0) r += cfg.w_meteor * clamp01(meteor_exact(answer, reference));
  if (cfg.w_cider > 0)
    r += cfg.w_cider * clamp01(cider_pair(answer, reference, df) / cfg.cider_normalizer);
  return r;
}

CompositeReward composite_reward(std::string_view raw_output, const TokenSequence& reference,
                                 const DfStats& df, const RewardConfig& cfg) {
  CompositeReward out;
  const auto parsed = parse_tagged_output(raw_output);
  out.r_format = parsed ? cfg.format_value : 0.0;
  const auto scored = parsed ? tokenize(parsed->answer) : tokenize(raw_output);
  out.r_acc = precision_reward(scored, reference, df, cfg);
  out.r_all = out.r_format + out.r_acc;
  return out;
}

}  // namespace cotforge
