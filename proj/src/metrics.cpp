#include "cotforge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <unordered_map>

#include "cotforge/errors.hpp"

namespace cotforge {

NgramCounts count_ngrams(const TokenSequence& tokens, int n) {
  NgramCounts counts;
  if (n <= 0 || tokens.size() < static_cast<std::size_t>(n)) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i)
    ++counts[Ngram(tokens.begin() + i, tokens.begin() + i + n)];
  return counts;
}

namespace {

struct OrderStats {
  std::array<double, kMaxNgram> matches{};
  std::array<double, kMaxNgram> totals{};
};

OrderStats clipped_counts(const TokenSequence& hyp, const TokenSequence& ref) {
  OrderStats s;
  for (int n = 1; n <= kMaxNgram; ++n) {
    const auto h = count_ngrams(hyp, n);
    const auto r = count_ngrams(ref, n);
    double m = 0, t = 0;
    for (const auto& [gram, c] : h) {
      t += c;
      auto it = r.find(gram);
      if (it != r.end()) m += std::min(c, it->second);
    }
    s.matches[n - 1] = m;
    s.totals[n - 1] = t;
  }
  return s;
}

double brevity_penalty(double ref_len, double hyp_len) {
  if (hyp_len <= 0) return 0.0;
  return std::min(1.0, std::exp(1.0 - ref_len / hyp_len));
}

}  // namespace

BleuScores sentence_bleu(const TokenSequence& hyp, const TokenSequence& ref) {
  BleuScores out;
  const auto s = clipped_counts(hyp, ref);
  const double bp = brevity_penalty(static_cast<double>(ref.size()),
                                    static_cast<double>(hyp.size()));
  if (bp == 0.0) return out;
  // Unigram precision is left unsmoothed, so a disjoint pair scores zero.
  if (s.matches[0] == 0) return out;
  double log_sum = 0;
  for (int n = 1; n <= kMaxNgram; ++n) {
    const double add = n == 1 ? 0.0 : 1.0;
    log_sum += std::log((s.matches[n - 1] + add) / (s.totals[n - 1] + add));
    out.bleu[n - 1] = bp * std::exp(log_sum / n);
  }
  return out;
}

BleuScores bleu(std::span<const TokenSequence> hyps, std::span<const TokenSequence> refs,
                BleuMode mode) {
  if (hyps.size() != refs.size())
    throw InvalidArgument("bleu: hypothesis/reference count mismatch");
  if (hyps.empty()) throw InvalidArgument("bleu: empty corpus");

  BleuScores out;
  if (mode == BleuMode::kSentenceSmoothed) {
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      const auto s = sentence_bleu(hyps[i], refs[i]);
      for (int n = 0; n < kMaxNgram; ++n) out.bleu[n] += s.bleu[n];
    }
    for (auto& b : out.bleu) b /= static_cast<double>(hyps.size());
    return out;
  }

  OrderStats total;
  double hyp_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto s = clipped_counts(hyps[i], refs[i]);
    for (int n = 0; n < kMaxNgram; ++n) {
      total.matches[n] += s.matches[n];
      total.totals[n] += s.totals[n];
    }
    hyp_len += static_cast<double>(hyps[i].size());
    ref_len += static_cast<double>(refs[i].size());
  }
  const double bp = brevity_penalty(ref_len, hyp_len);
  double log_sum = 0;
  for (int n = 1; n <= kMaxNgram; ++n) {
    if (total.matches[n - 1] == 0 || total.totals[n - 1] == 0) break;  // rest stay 0
    log_sum += std::log(total.matches[n - 1] / total.totals[n - 1]);
    out.bleu[n - 1] = bp * std::exp(log_sum / n);
  }
  return out;
}

std::size_t lcs_length(const TokenSequence& a, const TokenSequence& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const TokenSequence& hyp, const TokenSequence& ref) {
  if (hyp.empty() || ref.empty()) return 0.0;
  const auto lcs = static_cast<double>(lcs_length(hyp, ref));
  if (lcs == 0) return 0.0;
  const double r = lcs / static_cast<double>(ref.size());
  const double p = lcs / static_cast<double>(hyp.size());
  const double b2 = kRougeBeta * kRougeBeta;
  return (1.0 + b2) * r * p / (r + b2 * p);
}

// ---------------------------------------------------------------------------
// METEOR (exact-match stage)

namespace {

class ChunkSearch {
 public:
  static constexpr long kNodeBudget = 200000;

  ChunkSearch(const TokenSequence& hyp, const TokenSequence& ref) : hyp_len_(hyp.size()) {
    std::unordered_map<std::string, int> word_id;
    auto id_of = [&](const std::string& w) {
      return word_id.emplace(w, static_cast<int>(word_id.size())).first->second;
    };
    hyp_word_.resize(hyp.size());
    for (std::size_t i = 0; i < hyp.size(); ++i) hyp_word_[i] = id_of(hyp[i]);
    ref_word_.resize(ref.size());
    for (std::size_t j = 0; j < ref.size(); ++j) ref_word_[j] = id_of(ref[j]);

    const auto words = word_id.size();
    hyp_left_.assign(words, 0);
    ref_left_.assign(words, 0);
    for (int w : hyp_word_) ++hyp_left_[w];
    for (int w : ref_word_) ++ref_left_[w];
    candidates_.resize(hyp.size());
    for (std::size_t i = 0; i < hyp.size(); ++i)
      for (std::size_t j = 0; j < ref.size(); ++j)
        if (hyp_word_[i] == ref_word_[j]) candidates_[i].push_back(static_cast<int>(j));
    for (std::size_t w = 0; w < words; ++w) target_ += std::min(hyp_left_[w], ref_left_[w]);
    used_.assign(ref.size(), false);
  }

  MeteorAlignment run() {
    MeteorAlignment out;
    out.matches = target_;
    if (target_ == 0) return out;
    dfs(0, 0, 0, -1);
    out.chunks = best_;
    out.exact = nodes_ <= kNodeBudget;
    return out;
  }

 private:
  // Matches still achievable from hyp position i onward equal the sum over
  // words of min(remaining hyp occurrences, unused ref occurrences).
  void dfs(std::size_t i, int matched, int chunks, int prev_ref) {
    if (chunks >= best_) return;
    if (++nodes_ > kNodeBudget && best_ != kUnset) return;
    if (i == hyp_len_) {
      if (matched == target_) best_ = chunks;
      return;
    }
    const int w = hyp_word_[i];
    --hyp_left_[w];

    // Order candidates so the chunk-extending position is tried first.
    auto try_match = [&](int j) {
      if (used_[j]) return;
      used_[j] = true;
      --ref_left_[w];
      const bool extends = prev_ref >= 0 && j == prev_ref + 1;
      dfs(i + 1, matched + 1, chunks + (extends ? 0 : 1), j);
      ++ref_left_[w];
      used_[j] = false;
    };
    if (ref_left_[w] > 0) {
      const int ext = prev_ref >= 0 && prev_ref + 1 < static_cast<int>(used_.size()) &&
                              ref_word_[prev_ref + 1] == w
                          ? prev_ref + 1
                          : -1;
      if (ext >= 0) try_match(ext);
      for (int j : candidates_[i])
        if (j != ext) try_match(j);
    }
    // Leaving position i unmatched must keep the target reachable.
    int reachable = 0;
    for (std::size_t v = 0; v < hyp_left_.size(); ++v)
      reachable += std::min(hyp_left_[v], ref_left_[v]);
    if (matched + reachable >= target_) dfs(i + 1, matched, chunks, -1);
    ++hyp_left_[w];
  }

  static constexpr int kUnset = 1 << 30;
  std::size_t hyp_len_;
  std::vector<int> hyp_word_, ref_word_;
  std::vector<int> hyp_left_, ref_left_;
  std::vector<std::vector<int>> candidates_;
  std::vector<bool> used_;
  int target_ = 0;
  int best_ = kUnset;
  long nodes_ = 0;
};

}  // namespace

MeteorAlignment meteor_align(const TokenSequence& hyp, const TokenSequence& ref) {
  return ChunkSearch(hyp, ref).run();
}

double meteor_score(int matches, int chunks, std::size_t hyp_len, std::size_t ref_len) {
  if (matches == 0 || hyp_len == 0 || ref_len == 0) return 0.0;
  const double m = matches;
  const double p = m / static_cast<double>(hyp_len);
  const double r = m / static_cast<double>(ref_len);
  const double f = 10.0 * p * r / (r + 9.0 * p);
  const double frag = static_cast<double>(chunks) / m;
  const double penalty = 0.5 * frag * frag * frag;
  return f * (1.0 - penalty);
}

double meteor_exact(const TokenSequence& hyp, const TokenSequence& ref) {
  const auto a = meteor_align(hyp, ref);
  return meteor_score(a.matches, a.chunks, hyp.size(), ref.size());
}

// ---------------------------------------------------------------------------
// CIDEr

DfStats::DfStats(std::span<const TokenSequence> references) : corpus_size_(references.size()) {
  for (const auto& ref : references) {
    for (int n = 1; n <= kMaxNgram; ++n)
      for (const auto& kv : count_ngrams(ref, n)) ++df_[n - 1][kv.first];
  }
}

int DfStats::df(const Ngram& gram) const {
  if (gram.empty() || gram.size() > kMaxNgram) return 0;
  const auto& table = df_[gram.size() - 1];
  auto it = table.find(gram);
  return it == table.end() ? 0 : it->second;
}

double DfStats::idf(const Ngram& gram) const {
  if (corpus_size_ == 0) throw InvalidArgument("cider: document-frequency corpus is empty");
  if (corpus_size_ == 1) return 1.0;
  const double d = std::max(1, df(gram));
  return std::log(static_cast<double>(corpus_size_) / d);
}

double cider_order(const TokenSequence& hyp, const TokenSequence& ref, const DfStats& df, int n) {
  const auto h = count_ngrams(hyp, n);
  const auto r = count_ngrams(ref, n);
  double hh = 0, rr = 0, hr = 0;
  for (const auto& [gram, c] : h) {
    const double w = c * df.idf(gram);
    hh += w * w;
    auto it = r.find(gram);
    if (it != r.end()) hr += w * it->second * df.idf(gram);
  }
  for (const auto& [gram, c] : r) {
    const double w = c * df.idf(gram);
    rr += w * w;
  }
  if (hh == 0 || rr == 0) return 0.0;
  return hr / (std::sqrt(hh) * std::sqrt(rr));
}

double cider_pair(const TokenSequence& hyp, const TokenSequence& ref, const DfStats& df) {
  if (df.corpus_size() == 0) throw InvalidArgument("cider: document-frequency corpus is empty");
  double sum = 0;
  for (int n = 1; n <= kMaxNgram; ++n) sum += cider_order(hyp, ref, df, n);
  return 10.0 * sum / kMaxNgram;
}

double cider(std::span<const TokenSequence> hyps, std::span<const TokenSequence> refs,
             const DfStats& df) {
  if (hyps.size() != refs.size()) throw InvalidArgument("cider: size mismatch");
  if (hyps.empty()) throw InvalidArgument("cider: empty corpus");
  double sum = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) sum += cider_pair(hyps[i], refs[i], df);
  return sum / static_cast<double>(hyps.size());
}

MetricReport evaluate_corpus(std::span<const TokenSequence> hyps,
                             std::span<const TokenSequence> refs, const DfStats& df) {
  const auto b = bleu(hyps, refs, BleuMode::kCorpus);
  MetricReport r;
  r.bleu1 = b.bleu[0];
  r.bleu2 = b.bleu[1];
  r.bleu3 = b.bleu[2];
  r.bleu4 = b.bleu[3];
  double rouge = 0, meteor = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    rouge += rouge_l(hyps[i], refs[i]);
    meteor += meteor_exact(hyps[i], refs[i]);
  }
  r.rouge_l = rouge / static_cast<double>(hyps.size());
  r.meteor = meteor / static_cast<double>(hyps.size());
  r.cider = cider(hyps, refs, df);
  return r;
}

std::string metric_csv_row(const std::string& model, const MetricReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", r.bleu1, r.bleu2,
                r.bleu3, r.bleu4, r.rouge_l, r.meteor, r.cider);
  return model + buf;
}

// ---------------------------------------------------------------------------
// Classification and grounding

double auc(std::span<const int> labels, std::span<const double> scores) {
  if (labels.size() != scores.size()) throw InvalidArgument("auc: size mismatch");
  std::size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw InvalidArgument("auc: labels must be 0 or 1");
    pos += static_cast<std::size_t>(l);
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw InvalidArgument("auc: needs both positive and negative labels");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1) pos_rank_sum += avg_rank;
    i = j + 1;
  }
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (pos_rank_sum - p * (p + 1) / 2.0) / (p * n);
}

Box::Box(double x1, double y1, double x2, double y2) : x1_(x1), y1_(y1), x2_(x2), y2_(y2) {
  if (!(x1 < x2) || !(y1 < y2) || !std::isfinite(x1) || !std::isfinite(y1) ||
      !std::isfinite(x2) || !std::isfinite(y2))
    throw InvalidArgument("box must have positive area");
}

double iou(const Box& a, const Box& b) {
  const double w = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double h = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  const double inter = w * h;
  return inter / (a.area() + b.area() - inter);
}

IouStats iou_stats(std::span<const Box> preds, std::span<const Box> gts, double acc_threshold) {
  if (preds.size() != gts.size()) throw InvalidArgument("iou_stats: size mismatch");
  if (preds.empty()) throw InvalidArgument("iou_stats: empty input");
  IouStats s;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double v = iou(preds[i], gts[i]);
    s.miou += v;
    if (v >= acc_threshold) s.acc += 1;
  }
  s.miou /= static_cast<double>(preds.size());
  s.acc /= static_cast<double>(preds.size());
  return s;
}

}  // namespace cotforge
