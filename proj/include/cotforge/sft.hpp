#pragma once

// Supervised alignment (stage 1) and chain-of-thought tuning (stage 2).

#include <cstdint>
#include <string>
#include <vector>

#include "cotforge/corpus.hpp"
#include "cotforge/policy.hpp"

namespace cotforge {

struct SftConfig {
  double lr = 0.1;
  int epochs = 50;
  int batch_size = 16;
  std::uint64_t seed = 0;
  FreezeMask mask = FreezeMask::stage1();

  void validate() const;
};

/// Context plus target token ids; the target ends with EOS.
struct TrainingExample {
  ContextKey context;
  std::vector<int> target;
};

/// Report tokens followed by EOS.
TrainingExample make_example(const SftRecord& record, const Vocabulary& vocab);
/// `<think> chain </think> <answer> answer </answer>` followed by EOS.
TrainingExample make_example(const CotRecord& record, const Vocabulary& vocab);

/// Token stream of a tagged chain-of-thought target, without EOS.
TokenSequence cot_target_tokens(const CotRecord& record);

/// Mean per-token negative log-likelihood.
double sft_loss(const PolicyParams& params, const TrainingExample& example);

struct SftResult {
  PolicyParams params;
  std::vector<double> epoch_loss;  // mean batch loss per epoch
};

/// Mini-batch gradient descent with a seeded per-epoch shuffle.
SftResult train_sft(PolicyParams params, const std::vector<TrainingExample>& dataset,
                    const SftConfig& cfg);

/// "epoch,mean_loss" CSV.
std::string loss_curve_csv(const std::vector<double>& epoch_loss);

}  // namespace cotforge
