#include "cotforge/corpus.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cotforge/errors.hpp"
#include "cotforge/rng.hpp"

namespace cotforge {

using nlohmann::json;

namespace {

bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' ||
         c == '\v';
}

bool is_split_punct(char c) {
  switch (c) {
    case '.': case ',': case ';': case ':': case '!': case '?': case '(':
    case ')':
      return true;
    default:
      return false;
  }
}

bool only_space(std::string_view s) {
  return std::all_of(s.begin(), s.end(),
                     [](char c) { return is_space(static_cast<unsigned char>(c)); });
}

}  // namespace

TokenSequence tokenize(std::string_view text) {
  TokenSequence out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (is_space(c)) {
      flush();
    } else if (is_split_punct(raw)) {
      flush();
      out.emplace_back(1, raw);
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : raw);
    }
  }
  flush();
  return out;
}

std::string detokenize(const TokenSequence& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

std::optional<TaggedOutput> parse_tagged_output(std::string_view text) {
  constexpr std::array<std::string_view, 4> kTags = {kThinkOpen, kThinkClose,
                                                     kAnswerOpen, kAnswerClose};
  std::array<std::size_t, 4> pos{};
  for (std::size_t t = 0; t < kTags.size(); ++t) {
    const auto first = text.find(kTags[t]);
    if (first == std::string_view::npos) return std::nullopt;
    if (text.find(kTags[t], first + 1) != std::string_view::npos)
      return std::nullopt;
    pos[t] = first;
  }
  // "</think>" contains no "<think>" substring, so the four searches are
  // independent; ordering rules out interleaving.
  for (std::size_t t = 1; t < pos.size(); ++t) {
    if (pos[t] < pos[t - 1] + kTags[t - 1].size()) return std::nullopt;
  }
  const auto think_begin = pos[0] + kThinkOpen.size();
  const auto answer_begin = pos[2] + kAnswerOpen.size();
  const auto tail_begin = pos[3] + kAnswerClose.size();
  if (!only_space(text.substr(0, pos[0]))) return std::nullopt;
  if (!only_space(text.substr(pos[1] + kThinkClose.size(),
                              pos[2] - pos[1] - kThinkClose.size())))
    return std::nullopt;
  if (!only_space(text.substr(tail_begin))) return std::nullopt;
  return TaggedOutput{std::string(text.substr(think_begin, pos[1] - think_begin)),
                      std::string(text.substr(answer_begin, pos[3] - answer_begin))};
}

std::string compose_tagged_output(std::string_view think, std::string_view answer) {
  std::string out;
  out.reserve(think.size() + answer.size() + 32);
  out += kThinkOpen;
  out += think;
  out += kThinkClose;
  out += kAnswerOpen;
  out += answer;
  out += kAnswerClose;
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  const std::array<std::string_view, kReservedCount> reserved = {
      kBos, kEos, kThinkOpen, kThinkClose, kAnswerOpen, kAnswerClose};
  if (tokens_.size() < reserved.size())
    throw InvalidArgument("vocabulary is missing reserved tokens");
  for (std::size_t i = 0; i < reserved.size(); ++i) {
    if (tokens_[i] != reserved[i])
      throw InvalidArgument("vocabulary reserved token " + std::to_string(i) +
                            " must be " + std::string(reserved[i]));
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const auto& t = tokens_[i];
    if (t.empty() || std::any_of(t.begin(), t.end(), [](char c) {
          return is_space(static_cast<unsigned char>(c));
        }))
      throw InvalidArgument("invalid vocabulary token '" + t + "'");
    if (!index_.emplace(t, static_cast<int>(i)).second)
      throw InvalidArgument("duplicate vocabulary token '" + t + "'");
  }
}

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
  std::vector<std::string> tokens = {std::string(kBos),        std::string(kEos),
                                     std::string(kThinkOpen),  std::string(kThinkClose),
                                     std::string(kAnswerOpen), std::string(kAnswerClose)};
  const std::set<std::string> reserved(tokens.begin(), tokens.end());
  std::set<std::string> sorted;
  for (const auto& w : words)
    if (!reserved.count(w)) sorted.insert(w);
  tokens.insert(tokens.end(), sorted.begin(), sorted.end());
  return Vocabulary(std::move(tokens));
}

bool Vocabulary::contains(std::string_view token) const {
  return index_.find(std::string(token)) != index_.end();
}

int Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end())
    throw InvalidArgument("out-of-vocabulary token '" + std::string(token) + "'");
  return it->second;
}

std::vector<int> Vocabulary::encode(const TokenSequence& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

TokenSequence Vocabulary::decode(const std::vector<int>& ids) const {
  TokenSequence out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

// ---------------------------------------------------------------------------
// Grammar

const TokenSequence& GrammarSpec::report(const ContextKey& key) const {
  if (key.condition_id < 0 || key.condition_id >= condition_count())
    throw InvalidArgument("condition_id " + std::to_string(key.condition_id) +
                          " out of range");
  if (key.noise_id < 0 || key.noise_id >= paraphrase_count())
    throw InvalidArgument("noise_id " + std::to_string(key.noise_id) +
                          " out of range");
  return templates[key.condition_id][key.noise_id];
}

void GrammarSpec::validate() const {
  if (templates.empty()) throw InvalidArgument("grammar has no conditions (C = 0)");
  const auto s = templates.front().size();
  if (s == 0) throw InvalidArgument("grammar has no paraphrases (S = 0)");
  if (condition_names.size() != templates.size() || chains.size() != templates.size())
    throw InvalidArgument("grammar names/chains/templates size mismatch");
  auto check = [&](const TokenSequence& seq, const std::string& where) {
    if (seq.empty()) throw InvalidArgument(where + " is empty");
    for (const auto& t : seq)
      if (!vocabulary.contains(t))
        throw InvalidArgument(where + " token '" + t + "' not in vocabulary");
  };
  for (std::size_t c = 0; c < templates.size(); ++c) {
    if (templates[c].size() != s)
      throw InvalidArgument("every condition needs the same paraphrase count");
    for (std::size_t v = 0; v < s; ++v)
      check(templates[c][v], "template[" + std::to_string(c) + "][" + std::to_string(v) + "]");
    check(chains[c], "chain[" + std::to_string(c) + "]");
  }
}

std::string GrammarSpec::hash() const {
  std::uint64_t h = fnv1a("cotforge-grammar-v1");
  auto feed = [&](std::string_view s) {
    h = fnv1a(s, h);
    h = fnv1a(std::string_view("\x1f", 1), h);
  };
  feed(name);
  for (std::size_t c = 0; c < templates.size(); ++c) {
    feed(condition_names[c]);
    feed(detokenize(chains[c]));
    for (const auto& t : templates[c]) feed(detokenize(t));
  }
  for (const auto& t : vocabulary.tokens()) feed(t);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

GrammarSpec make_grammar(std::string name, std::vector<std::string> condition_names,
                         std::vector<std::vector<TokenSequence>> templates,
                         std::vector<TokenSequence> chains,
                         const std::vector<std::string>& extra_words) {
  std::vector<std::string> words = extra_words;
  for (const auto& per_condition : templates)
    for (const auto& t : per_condition) words.insert(words.end(), t.begin(), t.end());
  for (const auto& c : chains) words.insert(words.end(), c.begin(), c.end());
  GrammarSpec spec{std::move(name), std::move(condition_names), std::move(templates),
                   std::move(chains), Vocabulary::from_words(words)};
  spec.validate();
  return spec;
}

namespace {

struct BuiltinCondition {
  const char* name;
  const char* chain;
  std::array<const char*, 3> templates;
};

// Within a template every token occurs once and "." only closes the report;
// chains use a lexicon disjoint from the reports.
constexpr std::array<BuiltinCondition, 6> kDefaultConditions = {{
    {"normal", "inspect airway breathing circulation ; findings favor unremarkable therefore",
     {"lungs are clear , heart size is normal .",
      "clear lungs bilaterally , normal cardiac silhouette .",
      "no acute cardiopulmonary abnormality ."}},
    {"effusion", "inspect airway breathing circulation ; findings favor pleural-fluid therefore",
     {"small left pleural effusion , heart size is normal .",
      "left effusion with blunting of costophrenic angle .",
      "moderate pleural fluid layering on left ."}},
    {"pneumothorax", "inspect airway breathing circulation ; findings favor pleural-air therefore",
     {"right apical pneumothorax , no effusion .",
      "small right pneumothorax is seen .",
      "visible pleural line at right apex ."}},
    {"cardiomegaly", "inspect airway breathing circulation ; findings favor cardiac-enlargement therefore",
     {"heart size is enlarged , lungs are clear .",
      "cardiomegaly with clear lungs .",
      "enlarged cardiac silhouette without edema ."}},
    {"consolidation", "inspect airway breathing circulation ; findings favor airspace-disease therefore",
     {"right lower lobe consolidation , heart size is normal .",
      "focal opacity in right lower lobe .",
      "airspace consolidation concerning for pneumonia ."}},
    {"edema", "inspect airway breathing circulation ; findings favor fluid-overload therefore",
     {"pulmonary vascular congestion with interstitial edema .",
      "bilateral interstitial opacities , mild edema .",
      "mild pulmonary edema , heart size is enlarged ."}},
}};

constexpr std::array<BuiltinCondition, 6> kCrossConditions = {{
    {"normal", "inspect airway breathing circulation ; findings favor unremarkable therefore",
     {"no focal consolidation or effusion .",
      "normal chest radiograph .",
      "lungs and pleura unremarkable ."}},
    {"effusion", "inspect airway breathing circulation ; findings favor pleural-fluid therefore",
     {"blunted left costophrenic angle suggests effusion .",
      "left basilar pleural effusion noted .",
      "layering fluid in left pleural space ."}},
    {"pneumothorax", "inspect airway breathing circulation ; findings favor pleural-air therefore",
     {"pneumothorax at right apex .",
      "right sided pneumothorax without shift .",
      "thin pleural line in right upper zone ."}},
    {"cardiomegaly", "inspect airway breathing circulation ; findings favor cardiac-enlargement therefore",
     {"cardiac silhouette is enlarged .",
      "enlarged heart without vascular congestion .",
      "moderate cardiomegaly ."}},
    {"consolidation", "inspect airway breathing circulation ; findings favor airspace-disease therefore",
     {"consolidation in right lower lobe .",
      "patchy right basilar opacity suggests pneumonia .",
      "lobar consolidation on right ."}},
    {"edema", "inspect airway breathing circulation ; findings favor fluid-overload therefore",
     {"interstitial edema with vascular congestion .",
      "diffuse bilateral opacities from edema .",
      "pulmonary edema with cardiomegaly ."}},
}};

std::vector<std::string> builtin_words(const std::array<BuiltinCondition, 6>& table) {
  std::vector<std::string> words;
  for (const auto& c : table) {
    auto chain = tokenize(c.chain);
    words.insert(words.end(), chain.begin(), chain.end());
    for (const char* t : c.templates) {
      auto toks = tokenize(t);
      words.insert(words.end(), toks.begin(), toks.end());
    }
  }
  return words;
}

GrammarSpec builtin_grammar(std::string name, const std::array<BuiltinCondition, 6>& table) {
  // Both built-in grammars share one vocabulary so a checkpoint trained on
  // either can be decoded against the other.
  auto shared = builtin_words(kDefaultConditions);
  auto cross = builtin_words(kCrossConditions);
  shared.insert(shared.end(), cross.begin(), cross.end());

  std::vector<std::string> names;
  std::vector<std::vector<TokenSequence>> templates;
  std::vector<TokenSequence> chains;
  for (const auto& c : table) {
    names.emplace_back(c.name);
    chains.push_back(tokenize(c.chain));
    std::vector<TokenSequence> per;
    for (const char* t : c.templates) per.push_back(tokenize(t));
    templates.push_back(std::move(per));
  }
  return make_grammar(std::move(name), std::move(names), std::move(templates),
                      std::move(chains), shared);
}

}  // namespace

GrammarSpec default_grammar() { return builtin_grammar("default", kDefaultConditions); }
GrammarSpec cross_grammar() { return builtin_grammar("cross", kCrossConditions); }

GrammarSpec load_grammar(const std::string& name_or_path) {
  if (name_or_path == "default") return default_grammar();
  if (name_or_path == "cross") return cross_grammar();
  json j;
  try {
    j = json::parse(read_file(name_or_path));
    std::vector<std::string> names;
    std::vector<std::vector<TokenSequence>> templates;
    std::vector<TokenSequence> chains;
    for (const auto& c : j.at("conditions")) {
      names.push_back(c.at("name").get<std::string>());
      chains.push_back(tokenize(c.at("chain").get<std::string>()));
      std::vector<TokenSequence> per;
      for (const auto& t : c.at("templates")) per.push_back(tokenize(t.get<std::string>()));
      templates.push_back(std::move(per));
    }
    std::vector<std::string> extra;
    if (j.contains("vocabulary"))
      extra = j.at("vocabulary").get<std::vector<std::string>>();
    return make_grammar(j.at("name").get<std::string>(), std::move(names),
                        std::move(templates), std::move(chains), extra);
  } catch (const json::exception& e) {
    throw DataError("grammar file " + name_or_path + ": " + e.what());
  }
}

void save_grammar(const std::filesystem::path& path, const GrammarSpec& spec) {
  json j;
  j["name"] = spec.name;
  j["conditions"] = json::array();
  for (int c = 0; c < spec.condition_count(); ++c) {
    json cj;
    cj["name"] = spec.condition_names[c];
    cj["chain"] = detokenize(spec.chains[c]);
    cj["templates"] = json::array();
    for (const auto& t : spec.templates[c]) cj["templates"].push_back(detokenize(t));
    j["conditions"].push_back(std::move(cj));
  }
  std::vector<std::string> words(spec.vocabulary.tokens().begin() + Vocabulary::kReservedCount,
                                 spec.vocabulary.tokens().end());
  j["vocabulary"] = words;
  j["hash"] = spec.hash();
  write_file(path, j.dump(2) + "\n");
}

std::string describe_context(const GrammarSpec& spec, const ContextKey& key) {
  std::string name = key.condition_id >= 0 && key.condition_id < spec.condition_count()
                         ? spec.condition_names[key.condition_id]
                         : std::string("unknown");
  return "condition_id=" + std::to_string(key.condition_id) + " (" + name +
         ") noise_id=" + std::to_string(key.noise_id);
}

Split parse_split(std::string_view name) {
  if (name == "sft") return Split::kSft;
  if (name == "rft") return Split::kRft;
  if (name == "eval") return Split::kEval;
  throw InvalidArgument("unknown split '" + std::string(name) + "'");
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::kSft: return "sft";
    case Split::kRft: return "rft";
    case Split::kEval: return "eval";
  }
  return "?";
}

std::vector<int> split_noise_ids(const GrammarSpec& spec, Split split) {
  const int s = spec.paraphrase_count();
  if (split == Split::kEval) {
    if (s < 2) throw InvalidArgument("eval split needs at least two paraphrases (S >= 2)");
    return {s - 1};
  }
  std::vector<int> ids;
  for (int i = 0; i < std::max(1, s - 1); ++i) ids.push_back(i);
  return ids;
}

namespace {
constexpr const char* kSftPrompt = "Describe the findings of this chest radiograph.";
constexpr const char* kRftQuery =
    "Analyze the radiograph step by step, then write the final report.";
}  // namespace

SyntheticDataset generate_synthetic_dataset(const GrammarSpec& spec, std::uint64_t seed,
                                            int n, Split split) {
  if (spec.condition_count() == 0) throw InvalidArgument("grammar has C = 0");
  if (n <= 0) throw InvalidArgument("dataset size n must be positive");
  const auto noise_ids = split_noise_ids(spec, split);
  const auto c = spec.condition_count();
  Rng rng(derive_seed({seed, static_cast<std::uint64_t>(split), fnv1a(spec.hash())}));

  SyntheticDataset out;
  out.split = split;
  std::vector<int> block(c);
  for (int k = 0; k < n; ++k) {
    if (k % c == 0) {
      for (int i = 0; i < c; ++i) block[i] = i;
      rng.shuffle(block);
    }
    ContextKey key{block[k % c], noise_ids[rng.below(noise_ids.size())]};
    if (split == Split::kRft) {
      out.rft.push_back({key, kRftQuery, spec.report(key)});
    } else {
      out.sft.push_back({key, kSftPrompt, spec.report(key)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

namespace {

std::string to_line(const json& j) { return j.dump(); }

template <typename Record>
void persist_all(const std::filesystem::path& path, const std::vector<Record>& records) {
  std::string buf;
  for (const auto& r : records) {
    buf += to_jsonl_line(r);
    buf.push_back('\n');
  }
  write_file(path, buf);
}

class RowReader {
 public:
  RowReader(const json& row, std::size_t line) : row_(row), line_(line) {}

  [[noreturn]] void fail(const std::string& field, const std::string& what) const {
    throw DataError("line " + std::to_string(line_) + ": field \"" + field + "\" " + what);
  }

  const json& at(const std::string& field) const {
    auto it = row_.find(field);
    if (it == row_.end()) fail(field, "is missing");
    return *it;
  }

  int integer(const std::string& field) const {
    const auto& v = at(field);
    if (!v.is_number_integer()) fail(field, "must be an integer");
    return v.get<int>();
  }

  double real(const std::string& field) const {
    const auto& v = at(field);
    if (!v.is_number()) fail(field, "must be a number");
    return v.get<double>();
  }

  std::string string(const std::string& field) const {
    const auto& v = at(field);
    if (!v.is_string()) fail(field, "must be a string");
    return v.get<std::string>();
  }

  TokenSequence tokens(const std::string& field, bool non_empty) const {
    const auto& v = at(field);
    if (!v.is_array()) fail(field, "must be an array of strings");
    TokenSequence out;
    for (const auto& t : v) {
      if (!t.is_string()) fail(field, "must be an array of strings");
      auto s = t.get<std::string>();
      if (s.empty() || std::any_of(s.begin(), s.end(), [](char c) {
            return is_space(static_cast<unsigned char>(c));
          }))
        fail(field, "contains an empty or whitespace token");
      out.push_back(std::move(s));
    }
    if (non_empty && out.empty()) fail(field, "must be non-empty");
    return out;
  }

  ContextKey context() const {
    ContextKey k{integer("condition_id"), integer("noise_id")};
    if (k.condition_id < 0) fail("condition_id", "must be non-negative");
    if (k.noise_id < 0) fail("noise_id", "must be non-negative");
    return k;
  }

 private:
  const json& row_;
  std::size_t line_;
};

template <typename Record, typename Parse>
std::vector<Record> load_all(const std::filesystem::path& path, Parse parse) {
  const auto text = read_file(path);
  std::vector<Record> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    ++line_no;
    std::string_view line(text.data() + start, end - start);
    start = end + 1;
    if (only_space(line)) continue;
    json row;
    try {
      row = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError("line " + std::to_string(line_no) + ": invalid JSON: " + e.what());
    }
    if (!row.is_object())
      throw DataError("line " + std::to_string(line_no) + ": expected a JSON object");
    out.push_back(parse(RowReader(row, line_no)));
  }
  return out;
}

}  // namespace

std::string to_jsonl_line(const SftRecord& r) {
  json j;
  j["condition_id"] = r.context.condition_id;
  j["noise_id"] = r.context.noise_id;
  j["prompt"] = r.prompt;
  j["report"] = r.report;
  return to_line(j);
}

std::string to_jsonl_line(const CotRecord& r) {
  json j;
  j["condition_id"] = r.context.condition_id;
  j["noise_id"] = r.context.noise_id;
  j["chain"] = r.chain;
  j["answer"] = r.answer;
  j["trace"] = json::array();
  for (const auto& t : r.trace) j["trace"].push_back({{"strategy", t.strategy}, {"text", t.text}});
  j["verified_score"] = r.verified_score;
  return to_line(j);
}

std::string to_jsonl_line(const RftRecord& r) {
  json j;
  j["condition_id"] = r.context.condition_id;
  j["noise_id"] = r.context.noise_id;
  j["query"] = r.query;
  j["reference"] = r.reference;
  return to_line(j);
}

void persist_records(const std::filesystem::path& path, const std::vector<SftRecord>& records) {
  persist_all(path, records);
}
void persist_records(const std::filesystem::path& path, const std::vector<CotRecord>& records) {
  persist_all(path, records);
}
void persist_records(const std::filesystem::path& path, const std::vector<RftRecord>& records) {
  persist_all(path, records);
}

std::vector<SftRecord> load_sft_records(const std::filesystem::path& path) {
  return load_all<SftRecord>(path, [](const RowReader& r) {
    return SftRecord{r.context(), r.string("prompt"), r.tokens("report", true)};
  });
}

std::vector<CotRecord> load_cot_records(const std::filesystem::path& path) {
  return load_all<CotRecord>(path, [](const RowReader& r) {
    CotRecord rec;
    rec.context = r.context();
    rec.chain = r.string("chain");
    rec.answer = r.tokens("answer", false);
    const auto& trace = r.at("trace");
    if (!trace.is_array()) r.fail("trace", "must be an array");
    for (const auto& t : trace) {
      if (!t.is_object() || !t.contains("strategy") || !t.contains("text") ||
          !t["strategy"].is_string() || !t["text"].is_string())
        r.fail("trace", "entries need string \"strategy\" and \"text\"");
      rec.trace.push_back({t["strategy"].get<std::string>(), t["text"].get<std::string>()});
    }
    rec.verified_score = r.real("verified_score");
    return rec;
  });
}

std::vector<RftRecord> load_rft_records(const std::filesystem::path& path) {
  return load_all<RftRecord>(path, [](const RowReader& r) {
    return RftRecord{r.context(), r.string("query"), r.tokens("reference", true)};
  });
}

}  // namespace cotforge
