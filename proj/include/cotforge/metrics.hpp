#pragma once

// Report-generation, classification and grounding metrics. Every function is
// a deterministic pure function of its arguments.

#include <array>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cotforge/corpus.hpp"

namespace cotforge {

inline constexpr int kMaxNgram = 4;

using Ngram = std::vector<std::string>;
using NgramCounts = std::map<Ngram, int>;

/// Counts of all n-grams of exactly length n.
NgramCounts count_ngrams(const TokenSequence& tokens, int n);

struct BleuScores {
  std::array<double, kMaxNgram> bleu{};  // bleu[k] is BLEU-(k+1)
};

enum class BleuMode { kCorpus, kSentenceSmoothed };

/// Corpus mode: clipped n-gram precision micro-averaged over the corpus,
/// geometric mean over orders, brevity penalty from summed lengths.
/// Sentence mode: per-pair smoothed BLEU (see sentence_bleu), averaged over pairs.
BleuScores bleu(std::span<const TokenSequence> hyps, std::span<const TokenSequence> refs,
                BleuMode mode);

/// BLEU for a single pair with add-one smoothing on orders 2..4. Unigram
/// precision is unsmoothed, so pairs without a shared token score 0.
BleuScores sentence_bleu(const TokenSequence& hyp, const TokenSequence& ref);

std::size_t lcs_length(const TokenSequence& a, const TokenSequence& b);

inline constexpr double kRougeBeta = 1.2;
double rouge_l(const TokenSequence& hyp, const TokenSequence& ref);

/// Exact-match unigram alignment: maximal match count, then fewest chunks.
struct MeteorAlignment {
  int matches = 0;
  int chunks = 0;
  bool exact = true;  // false if the chunk search hit its node budget
};

MeteorAlignment meteor_align(const TokenSequence& hyp, const TokenSequence& ref);
double meteor_exact(const TokenSequence& hyp, const TokenSequence& ref);
/// Score from precomputed alignment statistics.
double meteor_score(int matches, int chunks, std::size_t hyp_len, std::size_t ref_len);

/// Document frequencies of 1..4-grams over a reference corpus. Immutable
/// after construction.
class DfStats {
 public:
  DfStats() = default;
  explicit DfStats(std::span<const TokenSequence> references);

  std::size_t corpus_size() const noexcept { return corpus_size_; }
  /// Zero for n-grams that were never seen.
  int df(const Ngram& gram) const;
  /// log(M / df), with df clamped to at least 1. A single-document corpus
  /// carries no document-frequency information, so every weight is 1 there.
  double idf(const Ngram& gram) const;

 private:
  std::size_t corpus_size_ = 0;
  std::array<std::map<Ngram, int>, kMaxNgram> df_;
};

/// Cosine similarity of TF-IDF n-gram vectors for order n.
double cider_order(const TokenSequence& hyp, const TokenSequence& ref, const DfStats& df, int n);
/// 10 · mean over n = 1..4 of cider_order, for one pair.
double cider_pair(const TokenSequence& hyp, const TokenSequence& ref, const DfStats& df);
/// Corpus mean of cider_pair.
double cider(std::span<const TokenSequence> hyps, std::span<const TokenSequence> refs,
             const DfStats& df);

struct MetricReport {
  double bleu1 = 0, bleu2 = 0, bleu3 = 0, bleu4 = 0;
  double rouge_l = 0, meteor = 0, cider = 0;
};

/// Corpus BLEU plus mean ROUGE-L / METEOR and CIDEr against `df`.
MetricReport evaluate_corpus(std::span<const TokenSequence> hyps,
                             std::span<const TokenSequence> refs, const DfStats& df);

/// CSV header shared by evaluation and ablation tables.
inline constexpr const char* kMetricCsvHeader =
    "model,bleu1,bleu2,bleu3,bleu4,rouge_l,meteor,cider";
std::string metric_csv_row(const std::string& model, const MetricReport& r);

/// Area under the ROC curve via the Mann–Whitney statistic, average ranks
/// on ties.
double auc(std::span<const int> labels, std::span<const double> scores);

class Box {
 public:
  /// Rejects boxes with zero or negative area.
  Box(double x1, double y1, double x2, double y2);
  double x1() const noexcept { return x1_; }
  double y1() const noexcept { return y1_; }
  double x2() const noexcept { return x2_; }
  double y2() const noexcept { return y2_; }
  double area() const noexcept { return (x2_ - x1_) * (y2_ - y1_); }

 private:
  double x1_, y1_, x2_, y2_;
};

double iou(const Box& a, const Box& b);

struct IouStats {
  double miou = 0;
  double acc = 0;
};

inline constexpr double kDefaultAccIou = 0.5;
IouStats iou_stats(std::span<const Box> preds, std::span<const Box> gts,
                   double acc_threshold = kDefaultAccIou);

}  // namespace cotforge
