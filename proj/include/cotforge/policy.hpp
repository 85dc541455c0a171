#pragma once

// Context-plus-bigram autoregressive policy. Step logits are
//   logits_t = W_adapter[condition_id] + W_decoder[prev_token]
// with an implicit BOS before the first token.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cotforge/corpus.hpp"
#include "cotforge/rng.hpp"

namespace cotforge {

/// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, fill) {}

  int rows() const noexcept { return rows_; }
  int cols() const noexcept { return cols_; }
  double& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  double operator()(int r, int c) const {
    return data_[static_cast<std::size_t>(r) * cols_ + c];
  }
  std::span<double> row(int r) {
    return {data_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)};
  }
  std::span<const double> row(int r) const {
    return {data_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)};
  }
  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

/// Adapter block [C × V] and decoder block [V × V]. Gradients share this
/// shape.
struct PolicyParams {
  Matrix adapter;
  Matrix decoder;

  PolicyParams() = default;
  PolicyParams(int contexts, int vocab) : adapter(contexts, vocab), decoder(vocab, vocab) {}

  int contexts() const noexcept { return adapter.rows(); }
  int vocab() const noexcept { return decoder.rows(); }
  bool same_shape(const PolicyParams& o) const {
    return adapter.rows() == o.adapter.rows() && adapter.cols() == o.adapter.cols() &&
           decoder.rows() == o.decoder.rows();
  }
  bool all_finite() const;

  friend bool operator==(const PolicyParams&, const PolicyParams&) = default;
};

using PolicyGrad = PolicyParams;

struct FreezeMask {
  bool adapter_trainable = true;
  bool decoder_trainable = true;

  static constexpr FreezeMask stage1() { return {true, false}; }
  static constexpr FreezeMask all() { return {true, true}; }
  bool any() const noexcept { return adapter_trainable || decoder_trainable; }
};

/// Logits of one step.
void step_logits(const PolicyParams& p, int condition_id, int prev_token, std::span<double> out);
/// In-place log-softmax; returns log-sum-exp.
double log_softmax_inplace(std::span<double> logits);

struct LogProbResult {
  std::vector<std::vector<double>> logits;  // one row per step
  std::vector<double> token_logprobs;
  double total = 0.0;
};

/// Validates ids and context. Throws InvalidArgument on out-of-range input.
LogProbResult logits_and_logprob(const PolicyParams& p, const ContextKey& ctx,
                                 std::span<const int> tokens);
/// Per-token log-probabilities only.
std::vector<double> token_logprobs(const PolicyParams& p, const ContextKey& ctx,
                                   std::span<const int> tokens);
double sequence_logprob(const PolicyParams& p, const ContextKey& ctx,
                        std::span<const int> tokens);

/// Adds Σ_t weights[t] · ∇ log π(y_t) into `grad` for unfrozen blocks.
void accumulate_weighted_grad(const PolicyParams& p, const ContextKey& ctx,
                              std::span<const int> tokens, std::span<const double> weights,
                              const FreezeMask& mask, PolicyGrad& grad);

/// Gradient of the total log-probability; frozen blocks are zero.
PolicyGrad grad_log_prob(const PolicyParams& p, const ContextKey& ctx,
                         std::span<const int> tokens, const FreezeMask& mask);

enum class UpdateDirection { kDescent, kAscent };

/// params ∓ lr·grad on unfrozen blocks. Frozen blocks are left untouched.
/// Throws InvalidArgument for lr <= 0 or non-finite gradients.
void apply_update(PolicyParams& params, const PolicyGrad& grad, double lr,
                  const FreezeMask& mask, UpdateDirection dir);

/// Ancestral sampling; temperature <= 0 selects greedy argmax (ties to the
/// lowest id). Stops after EOS (included) or max_len tokens.
std::vector<int> sample_sequence(const PolicyParams& p, const ContextKey& ctx,
                                 double temperature, int max_len, Rng& rng);
std::vector<int> sample_sequence(const PolicyParams& p, const ContextKey& ctx,
                                 double temperature, int max_len, std::uint64_t seed);
std::vector<int> greedy_decode(const PolicyParams& p, const ContextKey& ctx, int max_len);

/// Text of a generated sequence: tokens joined by spaces, BOS/EOS dropped.
std::string render_output(const Vocabulary& vocab, std::span<const int> tokens);

/// Frozen copy of the policy taken at the start of reinforcement tuning.
class ReferencePolicy {
 public:
  explicit ReferencePolicy(PolicyParams params) : params_(std::move(params)) {}
  const PolicyParams& params() const noexcept { return params_; }
  std::vector<double> token_logprobs(const ContextKey& ctx, std::span<const int> tokens) const {
    return cotforge::token_logprobs(params_, ctx, tokens);
  }

 private:
  const PolicyParams params_;
};

ReferencePolicy snapshot_reference(const PolicyParams& params);

/// Per-token KL estimator exp(Δ) − Δ − 1 with Δ = logπ_ref − logπ_new.
/// Non-negative; zero iff the two log-probabilities agree.
inline double kl_estimator(double logp_new, double logp_ref) {
  const double d = logp_ref - logp_new;
  return std::expm1(d) - d;
}

/// Mean per-token KL estimate of the policy against the reference on the
/// given sequence.
double mean_kl(const PolicyParams& p, const ReferencePolicy& ref, const ContextKey& ctx,
               std::span<const int> tokens);

struct Checkpoint {
  std::string stage;  // "init", "stage1", "stage2", "stage3"
  std::string grammar_hash;
  std::string vocab_hash;
  PolicyParams params;
};

std::string vocabulary_hash(const Vocabulary& vocab);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Loads and verifies the grammar hash.
Checkpoint load_checkpoint(const std::filesystem::path& path, const GrammarSpec& grammar);

}  // namespace cotforge
