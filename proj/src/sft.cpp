#include "cotforge/sft.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

#include "cotforge/errors.hpp"
#include "cotforge/rng.hpp"

namespace cotforge {

void SftConfig::validate() const {
  if (!(lr > 0)) throw InvalidArgument("sft lr must be > 0");
  if (epochs < 1) throw InvalidArgument("sft epochs must be >= 1");
  if (batch_size < 1) throw InvalidArgument("sft batch_size must be >= 1");
  if (!mask.any()) throw InvalidArgument("sft freeze mask leaves nothing trainable");
}

TrainingExample make_example(const SftRecord& record, const Vocabulary& vocab) {
  TrainingExample ex{record.context, vocab.encode(record.report)};
  ex.target.push_back(Vocabulary::kEosId);
  return ex;
}

TokenSequence cot_target_tokens(const CotRecord& record) {
  TokenSequence out;
  out.emplace_back(kThinkOpen);
  for (auto& t : tokenize(record.chain)) out.push_back(std::move(t));
  out.emplace_back(kThinkClose);
  out.emplace_back(kAnswerOpen);
  out.insert(out.end(), record.answer.begin(), record.answer.end());
  out.emplace_back(kAnswerClose);
  return out;
}

TrainingExample make_example(const CotRecord& record, const Vocabulary& vocab) {
  TrainingExample ex{record.context, vocab.encode(cot_target_tokens(record))};
  ex.target.push_back(Vocabulary::kEosId);
  return ex;
}

double sft_loss(const PolicyParams& params, const TrainingExample& example) {
  if (example.target.empty()) throw InvalidArgument("sft_loss: empty target");
  return -sequence_logprob(params, example.context, example.target) /
         static_cast<double>(example.target.size());
}

SftResult train_sft(PolicyParams params, const std::vector<TrainingExample>& dataset,
                    const SftConfig& cfg) {
  cfg.validate();
  if (dataset.empty()) throw InvalidArgument("train_sft: empty dataset");

  SftResult result;
  Rng rng(derive_seed({cfg.seed, 0x5f7ULL}));
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  PolicyGrad grad(params.contexts(), params.vocab());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      std::fill(grad.adapter.data().begin(), grad.adapter.data().end(), 0.0);
      std::fill(grad.decoder.data().begin(), grad.decoder.data().end(), 0.0);
      double batch_loss = 0;
      for (std::size_t k = start; k < end; ++k) {
        const auto& ex = dataset[order[k]];
        batch_loss += sft_loss(params, ex);
        // ∇ of mean-per-token NLL is -(1/T) ∇ log-prob; accumulate log-prob
        // gradient with weight 1/(T·B) and descend on its negation.
        const std::vector<double> w(ex.target.size(),
                                    inv_batch / static_cast<double>(ex.target.size()));
        accumulate_weighted_grad(params, ex.context, ex.target, w, cfg.mask, grad);
      }
      apply_update(params, grad, cfg.lr, cfg.mask, UpdateDirection::kAscent);
      loss_sum += batch_loss * inv_batch;
      ++batches;
    }
    result.epoch_loss.push_back(loss_sum / batches);
  }
  result.params = std::move(params);
  return result;
}

std::string loss_curve_csv(const std::vector<double>& epoch_loss) {
  std::string out = "epoch,mean_loss\n";
  char buf[64];
  for (std::size_t i = 0; i < epoch_loss.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.10f\n", i + 1, epoch_loss[i]);
    out += buf;
  }
  return out;
}

}  // namespace cotforge
