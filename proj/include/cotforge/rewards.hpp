#pragma once

#include <string_view>

#include "cotforge/corpus.hpp"
#include "cotforge/metrics.hpp"

namespace cotforge {

struct RewardConfig {
  double format_value = 1.0;
  double w_bleu = 0.25;     // mean of smoothed sentence BLEU-1..4
  double w_rouge_l = 0.25;
  double w_meteor = 0.25;
  double w_cider = 0.25;    // applied to CIDEr / cider_normalizer
  double cider_normalizer = 10.0;

  /// Throws InvalidArgument on negative weights, zero weight sum, negative
  /// format value or non-positive normalizer.
  void validate() const;
};

/// format_value if the text parses as a tagged output, else 0.
double format_reward(std::string_view text, const RewardConfig& cfg = {});

/// Per-component similarity scores, each clamped to [0, 1].
struct PrecisionComponents {
  double bleu_avg = 0;
  double rouge_l = 0;
  double meteor = 0;
  double cider_scaled = 0;
};

PrecisionComponents precision_components(const TokenSequence& answer,
                                         const TokenSequence& reference, const DfStats& df,
                                         const RewardConfig& cfg);

/// Weighted sum of the clamped components. Reference must be non-empty.
double precision_reward(const TokenSequence& answer, const TokenSequence& reference,
                        const DfStats& df, const RewardConfig& cfg = {});

struct CompositeReward {
  double r_all = 0;
  double r_format = 0;
  double r_acc = 0;
};

/// r_acc scores the answer span of well-formed output and the whole text of
/// malformed output; r_all = r_format + r_acc.
CompositeReward composite_reward(std::string_view raw_output, const TokenSequence& reference,
                                 const DfStats& df, const RewardConfig& cfg = {});

}  // namespace cotforge
