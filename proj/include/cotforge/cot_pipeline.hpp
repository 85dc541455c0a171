#pragma once

// Chain-of-thought data engine: initialization, reflection strategies,
// verification, reformatting, attempt budgets and expert filtering.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cotforge/backends.hpp"
#include "cotforge/corpus.hpp"
#include "cotforge/metrics.hpp"
#include "cotforge/rng.hpp"

namespace cotforge {

enum class Strategy { kExplore, kBacktrack, kVerify, kCorrect };
inline constexpr std::array<Strategy, 4> kAllStrategies = {
    Strategy::kExplore, Strategy::kBacktrack, Strategy::kVerify, Strategy::kCorrect};
std::string_view strategy_name(Strategy s);

/// Prompt templates with placeholders {context}, {prompt}, {reference},
/// {history}, {backtrack}, {attempt}, {chain}, {answer}.
struct PromptTemplates {
  std::string system;
  std::string init;
  std::string explore;
  std::string backtrack;
  std::string verify;
  std::string correct;
  std::string reformat;
  std::string filter;

  static PromptTemplates defaults();
  /// Overrides each template whose `<name>.txt` exists in `dir`.
  static PromptTemplates from_directory(const std::filesystem::path& dir);
  const std::string& for_strategy(Strategy s) const;
};

/// Replaces `{name}` for every key present; unknown placeholders stay.
std::string render_template(std::string_view tmpl,
                            const std::vector<std::pair<std::string, std::string>>& values);

struct CollectionConfig {
  int max_attempts = 3;  // T
  int max_depth = 3;     // N: generation steps per attempt, init included
  double tau = 0.35;
  std::uint64_t strategy_seed = 0;
  RetryPolicy retry;
  PromptTemplates templates = PromptTemplates::defaults();

  void validate() const;
};

struct SearchStep {
  std::string label;  // "init" or strategy name actually applied
  std::string raw;
  std::string reasoning;  // e_i
  TokenSequence answer;   // y_i
  bool malformed = false;
};

struct SearchState {
  std::vector<SearchStep> history;
  int attempt = 1;
  int depth = 0;  // index of the most recent step in history
};

/// Everything a prompt needs about the record being processed.
struct CollectionItem {
  SftRecord record;
  std::string context_text;  // describe_context(...) of the record
  std::size_t index = 0;     // position in the input dataset
};

/// Sends the init prompt and parses the reply. A malformed reply yields
/// (raw text, empty answer) flagged malformed. `retries` accumulates.
SearchStep init_attempt(ChatBackend& backend, const CollectionItem& item, int attempt,
                        const CollectionConfig& cfg, int* retries = nullptr);

/// Applies one strategy and appends the resulting step to state.history.
/// Backtrack needs a history index j < depth - 1 (chosen uniformly from
/// `rng`); with less history it degrades to Verify.
const SearchStep& apply_strategy(ChatBackend& backend, Strategy strategy, SearchState& state,
                                 const CollectionItem& item, const CollectionConfig& cfg,
                                 Rng& rng, int* retries = nullptr);

/// precision_reward(candidate, reference, df, default weights) >= tau.
bool verify_candidate(const TokenSequence& candidate, const TokenSequence& reference,
                      const DfStats& df, const CollectionConfig& cfg);

enum class CollectStatus { kAccepted, kDiscardedBudget, kDiscardedTransport, kDiscardedReformat };
std::string_view collect_status_name(CollectStatus s);

struct CollectOutcome {
  CollectStatus status = CollectStatus::kDiscardedBudget;
  std::optional<CotRecord> record;
  std::vector<TraceEntry> trace;
  int attempts = 0;  // attempts started
  int retries = 0;
  std::string error;
};

CollectOutcome collect_cot_record(ChatBackend& teacher, const CollectionItem& item,
                                  const DfStats& df, const CollectionConfig& cfg);

enum class FilterVerdict { kKept, kDroppedInconsistent, kDroppedUnparseable };
std::string_view filter_verdict_name(FilterVerdict v);

/// Whole-word CONSISTENT / INCONSISTENT verdict; anything else (neither, or
/// both) is unparseable.
FilterVerdict parse_verdict(std::string_view reply);

FilterVerdict filter_cot_record(ChatBackend& expert, const CotRecord& cot,
                                const CollectionItem& item, const CollectionConfig& cfg,
                                int* retries = nullptr);

struct AuditLog {
  std::size_t kept = 0;
  std::size_t dropped_inconsistent = 0;
  std::size_t dropped_unparseable = 0;
  std::size_t discarded_budget = 0;
  std::size_t discarded_transport = 0;
  std::size_t discarded_reformat = 0;
  std::size_t retries = 0;

  std::size_t total() const noexcept {
    return kept + dropped_inconsistent + dropped_unparseable + discarded_budget +
           discarded_transport + discarded_reformat;
  }
  AuditLog& operator+=(const AuditLog& o);
  std::string to_json() const;
  friend bool operator==(const AuditLog&, const AuditLog&) = default;
};

struct Backends {
  BackendFactory teacher;
  BackendFactory expert;
};

struct RecordStatus {
  std::string status;  // kept, dropped_inconsistent, ..., or "accepted" after collect only
  int attempts = 0;
  int trace_length = 0;
};

struct CollectionResult {
  std::vector<CotRecord> records;      // in input order
  std::vector<RecordStatus> statuses;  // one per input record
  AuditLog audit;
};

/// Collection then filtering; output order equals input order for any
/// worker count.
CollectionResult run_collection(const Backends& backends, const std::vector<SftRecord>& dataset,
                                const GrammarSpec& grammar, const DfStats& df,
                                const CollectionConfig& cfg, int workers);

/// Collection only; records are the accepted (unfiltered) CoT rows.
CollectionResult collect_all(const BackendFactory& teacher, const std::vector<SftRecord>& dataset,
                             const GrammarSpec& grammar, const DfStats& df,
                             const CollectionConfig& cfg, int workers);

/// Filtering of already-collected rows. references[i] belongs to cots[i].
CollectionResult filter_all(const BackendFactory& expert, const std::vector<CotRecord>& cots,
                            const std::vector<SftRecord>& references, const GrammarSpec& grammar,
                            const CollectionConfig& cfg, int workers);

std::string statuses_jsonl(const std::vector<RecordStatus>& statuses);

}  // namespace cotforge
