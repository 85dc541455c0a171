#pragma once

// Data model for the three training stages: tokens, tagged model output,
// the synthetic report grammar, and JSONL persistence.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cotforge {

/// Normalized token list. Tokens are non-empty and contain no whitespace.
using TokenSequence = std::vector<std::string>;

inline constexpr std::string_view kBos = "<bos>";
inline constexpr std::string_view kEos = "<eos>";
inline constexpr std::string_view kThinkOpen = "<think>";
inline constexpr std::string_view kThinkClose = "</think>";
inline constexpr std::string_view kAnswerOpen = "<answer>";
inline constexpr std::string_view kAnswerClose = "</answer>";

/// Lowercases, splits the punctuation characters . , ; : ! ? ( ) into
/// standalone tokens, and splits the rest on whitespace runs.
TokenSequence tokenize(std::string_view text);

/// Joins tokens with single spaces.
std::string detokenize(const TokenSequence& tokens);

struct TaggedOutput {
  std::string think;
  std::string answer;
};

/// Strict parse of `<think>…</think><answer>…</answer>`: exactly one span of
/// each, in that order, only whitespace outside. Returns nullopt (Malformed)
/// otherwise.
std::optional<TaggedOutput> parse_tagged_output(std::string_view text);

/// Inverse of parse_tagged_output for tag-free inputs.
std::string compose_tagged_output(std::string_view think, std::string_view answer);

/// Symbolic stand-in for the input image.
struct ContextKey {
  int condition_id = 0;
  int noise_id = 0;
  friend bool operator==(const ContextKey&, const ContextKey&) = default;
};

struct SftRecord {
  ContextKey context;
  std::string prompt;
  TokenSequence report;
  friend bool operator==(const SftRecord&, const SftRecord&) = default;
};

struct TraceEntry {
  std::string strategy;
  std::string text;
  friend bool operator==(const TraceEntry&, const TraceEntry&) = default;
};

struct CotRecord {
  ContextKey context;
  std::string chain;
  TokenSequence answer;
  std::vector<TraceEntry> trace;
  double verified_score = 0.0;
  friend bool operator==(const CotRecord&, const CotRecord&) = default;
};

struct RftRecord {
  ContextKey context;
  std::string query;
  TokenSequence reference;
  friend bool operator==(const RftRecord&, const RftRecord&) = default;
};

/// Ordered token list with stable ids. Reserved tokens always occupy ids
/// 0..5 in the order BOS, EOS, THINK_OPEN, THINK_CLOSE, ANSWER_OPEN,
/// ANSWER_CLOSE.
class Vocabulary {
 public:
  static constexpr int kBosId = 0;
  static constexpr int kEosId = 1;
  static constexpr int kThinkOpenId = 2;
  static constexpr int kThinkCloseId = 3;
  static constexpr int kAnswerOpenId = 4;
  static constexpr int kAnswerCloseId = 5;
  static constexpr int kReservedCount = 6;

  Vocabulary() = default;
  /// `tokens` must start with the reserved tokens in canonical order.
  explicit Vocabulary(std::vector<std::string> tokens);

  /// Reserved tokens followed by the sorted, de-duplicated `words`.
  static Vocabulary from_words(const std::vector<std::string>& words);

  int size() const noexcept { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  bool contains(std::string_view token) const;
  /// Throws InvalidArgument for out-of-vocabulary tokens.
  int id(std::string_view token) const;

  std::vector<int> encode(const TokenSequence& tokens) const;
  TokenSequence decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Desk-scale report grammar: one reasoning chain and S paraphrase
/// templates per condition.
struct GrammarSpec {
  std::string name;
  std::vector<std::string> condition_names;          // size C
  std::vector<std::vector<TokenSequence>> templates;  // [C][S]
  std::vector<TokenSequence> chains;                  // [C]
  Vocabulary vocabulary;

  int condition_count() const noexcept {
    return static_cast<int>(templates.size());
  }
  int paraphrase_count() const noexcept {
    return templates.empty() ? 0 : static_cast<int>(templates.front().size());
  }
  const TokenSequence& report(const ContextKey& key) const;

  /// Throws InvalidArgument if shapes disagree, C == 0, or a token is missing
  /// from the vocabulary.
  void validate() const;
  /// Stable content hash (hex) used to bind checkpoints to a grammar.
  std::string hash() const;
};

/// Assembles a GrammarSpec and derives its vocabulary from templates and
/// chains (plus `extra_words`).
GrammarSpec make_grammar(std::string name,
                         std::vector<std::string> condition_names,
                         std::vector<std::vector<TokenSequence>> templates,
                         std::vector<TokenSequence> chains,
                         const std::vector<std::string>& extra_words = {});

/// Six chest-film conditions, three paraphrases each.
GrammarSpec default_grammar();
/// Disjoint templates over a vocabulary that overlaps default_grammar().
GrammarSpec cross_grammar();
/// "default", "cross", or a path to a grammar JSON file.
GrammarSpec load_grammar(const std::string& name_or_path);
void save_grammar(const std::filesystem::path& path, const GrammarSpec& spec);

/// Human-readable description of the context, used in prompts.
std::string describe_context(const GrammarSpec& spec, const ContextKey& key);

enum class Split { kSft, kRft, kEval };
Split parse_split(std::string_view name);
std::string_view split_name(Split split);

/// Noise ids reserved for a split. The last paraphrase id belongs to eval;
/// the remaining ids are shared by the sft and rft splits.
std::vector<int> split_noise_ids(const GrammarSpec& spec, Split split);

struct SyntheticDataset {
  Split split = Split::kSft;
  std::vector<SftRecord> sft;  // filled for kSft and kEval
  std::vector<RftRecord> rft;  // filled for kRft
};

/// Deterministic under (spec, seed). Conditions are assigned in seeded
/// blocks of C so any n >= C covers every condition.
SyntheticDataset generate_synthetic_dataset(const GrammarSpec& spec,
                                            std::uint64_t seed, int n,
                                            Split split);

// JSONL persistence. Field names match the published schemas exactly.
void persist_records(const std::filesystem::path& path,
                     const std::vector<SftRecord>& records);
void persist_records(const std::filesystem::path& path,
                     const std::vector<CotRecord>& records);
void persist_records(const std::filesystem::path& path,
                     const std::vector<RftRecord>& records);

std::vector<SftRecord> load_sft_records(const std::filesystem::path& path);
std::vector<CotRecord> load_cot_records(const std::filesystem::path& path);
std::vector<RftRecord> load_rft_records(const std::filesystem::path& path);

std::string to_jsonl_line(const SftRecord& r);
std::string to_jsonl_line(const CotRecord& r);
std::string to_jsonl_line(const RftRecord& r);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);

}  // namespace cotforge
