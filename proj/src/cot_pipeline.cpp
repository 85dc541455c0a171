#include "cotforge/cot_pipeline.hpp"

#include <atomic>
#include <exception>
#include <mutex>
#include <regex>
#include <thread>

#include <json.hpp>

#include "cotforge/errors.hpp"
#include "cotforge/rewards.hpp"

namespace cotforge {

using nlohmann::json;

std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kExplore: return "explore";
    case Strategy::kBacktrack: return "backtrack";
    case Strategy::kVerify: return "verify";
    case Strategy::kCorrect: return "correct";
  }
  return "?";
}

PromptTemplates PromptTemplates::defaults() {
  PromptTemplates t;
  t.system =
      "You are an experienced radiologist. Reason about the chest radiograph before "
      "writing the report.";
  t.init =
      "Image: {context}\n"
      "Request: {prompt}\n"
      "Reference report: {reference}\n"
      "Attempt: {attempt}\n"
      "Examine the film from several perspectives. Put your reasoning inside "
      "<think></think> and the final report inside <answer></answer>.";
  t.explore =
      "Image: {context}\n"
      "Reference report: {reference}\n"
      "Your answer was not verified as correct. Try a new approach that differs from every "
      "reasoning path below, then give a new report. Use <think></think> and "
      "<answer></answer>.\n"
      "Previous reasoning paths:\n{history}";
  t.backtrack =
      "Image: {context}\n"
      "Reference report: {reference}\n"
      "Your answer was not verified as correct. Return to this earlier step and extend "
      "the reasoning from there:\n{backtrack}\n"
      "Use <think></think> and <answer></answer>.\n"
      "Full history:\n{history}";
  t.verify =
      "Image: {context}\n"
      "Reference report: {reference}\n"
      "Your answer was not verified as correct. Check whether the most recent reasoning "
      "is complete and supported by the image, then state the verified conclusion. Use "
      "<think></think> and <answer></answer>.\n"
      "History:\n{history}";
  t.correct =
      "Image: {context}\n"
      "Reference report: {reference}\n"
      "Your answer was not verified as correct. Critique the logic of the most recent "
      "reasoning, fix its errors, and give a revised report. Use <think></think> and "
      "<answer></answer>.\n"
      "History:\n{history}";
  t.reformat =
      "Image: {context}\n"
      "Rewrite the successful reasoning below as one clean chain of thought that "
      "follows how a radiologist reads a film, keeping the final verified report. Put the "
      "chain inside <think></think> and the report inside <answer></answer>.\n"
      "Reasoning history:\n{history}";
  t.filter =
      "Image: {context}\n"
      "Reasoning: {chain}\n"
      "Report: {answer}\n"
      "Reference report: {reference}\n"
      "Does the reasoning agree with the reference report? Reply with exactly one word: "
      "CONSISTENT or INCONSISTENT.";
  return t;
}

PromptTemplates PromptTemplates::from_directory(const std::filesystem::path& dir) {
  auto t = defaults();
  const std::pair<const char*, std::string*> files[] = {
      {"system", &t.system},       {"init", &t.init},       {"explore", &t.explore},
      {"backtrack", &t.backtrack}, {"verify", &t.verify},   {"correct", &t.correct},
      {"reformat", &t.reformat},   {"filter", &t.filter}};
  for (const auto& [name, slot] : files) {
    const auto path = dir / (std::string(name) + ".txt");
    if (std::filesystem::exists(path)) *slot = read_file(path);
  }
  return t;
}

const std::string& PromptTemplates::for_strategy(Strategy s) const {
  switch (s) {
    case Strategy::kExplore: return explore;
    case Strategy::kBacktrack: return backtrack;
    case Strategy::kVerify: return verify;
    case Strategy::kCorrect: return correct;
  }
  return verify;
}

std::string render_template(std::string_view tmpl,
                            const std::vector<std::pair<std::string, std::string>>& values) {
  std::string out;
  out.reserve(tmpl.size() * 2);
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i + 1);
      if (close != std::string_view::npos) {
        const auto name = tmpl.substr(i + 1, close - i - 1);
        bool replaced = false;
        for (const auto& [k, v] : values) {
          if (k == name) {
            out += v;
            replaced = true;
            break;
          }
        }
        if (replaced) {
          i = close + 1;
          continue;
        }
      }
    }
    out.push_back(tmpl[i++]);
  }
  return out;
}

void CollectionConfig::validate() const {
  if (max_attempts < 1) throw InvalidArgument("cot.T must be >= 1");
  if (max_depth < 1) throw InvalidArgument("cot.N must be >= 1");
  if (!(tau > 0 && tau < 1)) throw InvalidArgument("cot.tau must lie in (0, 1)");
  if (retry.max_retries < 0) throw InvalidArgument("cot.max_retries must be >= 0");
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

SearchStep parse_step(std::string label, std::string raw) {
  SearchStep step;
  step.label = std::move(label);
  if (auto parsed = parse_tagged_output(raw)) {
    step.reasoning = trim(parsed->think);
    step.answer = tokenize(parsed->answer);
  } else {
    step.reasoning = raw;
    step.malformed = true;
  }
  step.raw = std::move(raw);
  return step;
}

std::string render_step(std::size_t index, const SearchStep& s) {
  std::string out = "[" + std::to_string(index) + "] " + s.label + "\n";
  out += s.malformed ? s.raw : compose_tagged_output(s.reasoning, detokenize(s.answer));
  out += "\n";
  return out;
}

std::string render_history(const std::vector<SearchStep>& history) {
  std::string out;
  for (std::size_t i = 0; i < history.size(); ++i) out += render_step(i, history[i]);
  return out;
}

std::vector<std::pair<std::string, std::string>> base_values(const CollectionItem& item,
                                                             int attempt) {
  return {{"context", item.context_text},
          {"prompt", item.record.prompt},
          {"reference", detokenize(item.record.report)},
          {"attempt", std::to_string(attempt)}};
}

std::vector<ChatMessage> make_messages(const CollectionConfig& cfg, std::string_view task,
                                       const std::string& body) {
  std::vector<ChatMessage> msgs;
  if (!cfg.templates.system.empty()) msgs.push_back({Role::kSystem, cfg.templates.system});
  msgs.push_back({Role::kUser, task_header(task) + body});
  return msgs;
}

std::string send(ChatBackend& backend, const std::vector<ChatMessage>& msgs,
                 const CollectionConfig& cfg, int* retries) {
  try {
    auto reply = send_with_retry(backend, msgs, cfg.retry);
    if (retries) *retries += reply.retries;
    return std::move(reply.text);
  } catch (const TransportError& e) {
    if (retries) *retries += e.attempts() - 1;
    throw;
  }
}

}  // namespace

SearchStep init_attempt(ChatBackend& backend, const CollectionItem& item, int attempt,
                        const CollectionConfig& cfg, int* retries) {
  const auto body = render_template(cfg.templates.init, base_values(item, attempt));
  return parse_step("init", send(backend, make_messages(cfg, "init", body), cfg, retries));
}

const SearchStep& apply_strategy(ChatBackend& backend, Strategy strategy, SearchState& state,
                                 const CollectionItem& item, const CollectionConfig& cfg,
                                 Rng& rng, int* retries) {
  if (state.history.empty()) throw InvalidArgument("apply_strategy: history is empty");
  if (state.depth + 1 >= cfg.max_depth)
    throw InvalidArgument("apply_strategy: search depth budget exhausted");
  const int i = state.depth + 1;  // depth of the step being generated
  auto values = base_values(item, state.attempt);
  values.emplace_back("history", render_history(state.history));
  if (strategy == Strategy::kBacktrack) {
    if (i - 1 <= 0) {
      strategy = Strategy::kVerify;
    } else {
      const auto j = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i - 1)));
      values.emplace_back("backtrack", render_step(j, state.history[j]));
    }
  }
  const auto name = strategy_name(strategy);
  const auto body = render_template(cfg.templates.for_strategy(strategy), values);
  auto step = parse_step(std::string(name), send(backend, make_messages(cfg, name, body), cfg, retries));
  state.history.push_back(std::move(step));
  state.depth = i;
  return state.history.back();
}

bool verify_candidate(const TokenSequence& candidate, const TokenSequence& reference,
                      const DfStats& df, const CollectionConfig& cfg) {
  return precision_reward(candidate, reference, df, RewardConfig{}) >= cfg.tau;
}

std::string_view collect_status_name(CollectStatus s) {
  switch (s) {
    case CollectStatus::kAccepted: return "accepted";
    case CollectStatus::kDiscardedBudget: return "discarded_budget";
    case CollectStatus::kDiscardedTransport: return "discarded_transport";
    case CollectStatus::kDiscardedReformat: return "discarded_reformat";
  }
  return "?";
}

CollectOutcome collect_cot_record(ChatBackend& teacher, const CollectionItem& item,
                                  const DfStats& df, const CollectionConfig& cfg) {
  cfg.validate();
  CollectOutcome out;
  Rng rng(derive_seed({cfg.strategy_seed, static_cast<std::uint64_t>(item.index)}));
  const auto& reference = item.record.report;

  try {
    for (int attempt = 1; attempt <= cfg.max_attempts; ++attempt) {
      out.attempts = attempt;
      SearchState state;
      state.attempt = attempt;
      state.history.push_back(init_attempt(teacher, item, attempt, cfg, &out.retries));
      out.trace.push_back({"init", state.history.back().raw});
      bool verified = verify_candidate(state.history.back().answer, reference, df, cfg);

      while (!verified && state.depth + 1 < cfg.max_depth) {
        const auto strategy = kAllStrategies[rng.below(kAllStrategies.size())];
        const auto& step = apply_strategy(teacher, strategy, state, item, cfg, rng, &out.retries);
        out.trace.push_back({step.label, step.raw});
        verified = verify_candidate(step.answer, reference, df, cfg);
      }
      if (!verified) continue;

      auto values = base_values(item, attempt);
      values.emplace_back("history", render_history(state.history));
      const auto body = render_template(cfg.templates.reformat, values);
      const auto reply = send(teacher, make_messages(cfg, "reformat", body), cfg, &out.retries);
      const auto parsed = parse_tagged_output(reply);
      if (!parsed) {
        out.status = CollectStatus::kDiscardedReformat;
        out.error = "reformat reply is malformed";
        return out;
      }
      auto answer = tokenize(parsed->answer);
      auto chain = trim(parsed->think);
      // The rewrite may not lose the verified answer or drop the chain.
      if (chain.empty() || !verify_candidate(answer, reference, df, cfg)) {
        out.status = CollectStatus::kDiscardedReformat;
        out.error = "reformatted answer failed re-verification";
        return out;
      }
      CotRecord rec;
      rec.context = item.record.context;
      rec.chain = std::move(chain);
      rec.verified_score = precision_reward(answer, reference, df, RewardConfig{});
      rec.answer = std::move(answer);
      rec.trace = out.trace;
      out.record = std::move(rec);
      out.status = CollectStatus::kAccepted;
      return out;
    }
  } catch (const TransportError& e) {
    out.status = CollectStatus::kDiscardedTransport;
    out.error = e.what();
    return out;
  }
  out.status = CollectStatus::kDiscardedBudget;
  return out;
}

std::string_view filter_verdict_name(FilterVerdict v) {
  switch (v) {
    case FilterVerdict::kKept: return "kept";
    case FilterVerdict::kDroppedInconsistent: return "dropped_inconsistent";
    case FilterVerdict::kDroppedUnparseable: return "dropped_unparseable";
  }
  return "?";
}

FilterVerdict parse_verdict(std::string_view reply) {
  static const std::regex kWord(R"([A-Za-z_]+)");
  bool consistent = false, inconsistent = false;
  const std::string text(reply);
  for (auto it = std::sregex_iterator(text.begin(), text.end(), kWord);
       it != std::sregex_iterator(); ++it) {
    const auto w = it->str();
    if (w == "CONSISTENT") consistent = true;
    if (w == "INCONSISTENT") inconsistent = true;
  }
  if (consistent == inconsistent) return FilterVerdict::kDroppedUnparseable;
  return consistent ? FilterVerdict::kKept : FilterVerdict::kDroppedInconsistent;
}

FilterVerdict filter_cot_record(ChatBackend& expert, const CotRecord& cot,
                                const CollectionItem& item, const CollectionConfig& cfg,
                                int* retries) {
  auto values = base_values(item, 1);
  values.emplace_back("chain", cot.chain);
  values.emplace_back("answer", detokenize(cot.answer));
  const auto body = render_template(cfg.templates.filter, values);
  return parse_verdict(send(expert, make_messages(cfg, "filter", body), cfg, retries));
}

// ---------------------------------------------------------------------------
// Batch drivers

AuditLog& AuditLog::operator+=(const AuditLog& o) {
  kept += o.kept;
  dropped_inconsistent += o.dropped_inconsistent;
  dropped_unparseable += o.dropped_unparseable;
  discarded_budget += o.discarded_budget;
  discarded_transport += o.discarded_transport;
  discarded_reformat += o.discarded_reformat;
  retries += o.retries;
  return *this;
}

std::string AuditLog::to_json() const {
  json j;
  j["kept"] = kept;
  j["dropped_inconsistent"] = dropped_inconsistent;
  j["dropped_unparseable"] = dropped_unparseable;
  j["discarded_budget"] = discarded_budget;
  j["discarded_transport"] = discarded_transport;
  j["discarded_reformat"] = discarded_reformat;
  j["retries"] = retries;
  j["total"] = total();
  return j.dump(2);
}

namespace {

/// Runs fn(i) for i in [0, n) on up to `workers` threads. fn must not throw.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn fn) {
  const auto threads = static_cast<std::size_t>(std::max(1, workers));
  if (threads == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

struct Slot {
  std::optional<CotRecord> record;
  RecordStatus status;
  AuditLog audit;
};

void count(AuditLog& a, std::string_view status) {
  if (status == "kept" || status == "accepted") ++a.kept;
  else if (status == "dropped_inconsistent") ++a.dropped_inconsistent;
  else if (status == "dropped_unparseable") ++a.dropped_unparseable;
  else if (status == "discarded_budget") ++a.discarded_budget;
  else if (status == "discarded_transport") ++a.discarded_transport;
  else if (status == "discarded_reformat") ++a.discarded_reformat;
}

CollectionResult assemble(std::vector<Slot>& slots) {
  CollectionResult out;
  for (auto& s : slots) {
    if (s.record) out.records.push_back(std::move(*s.record));
    out.statuses.push_back(s.status);
    out.audit += s.audit;
  }
  return out;
}

CollectionItem make_item(const SftRecord& r, const GrammarSpec& grammar, std::size_t index) {
  return CollectionItem{r, describe_context(grammar, r.context), index};
}

void check_workers(int workers) {
  if (workers < 1) throw InvalidArgument("workers must be >= 1");
}

}  // namespace

CollectionResult run_collection(const Backends& backends, const std::vector<SftRecord>& dataset,
                                const GrammarSpec& grammar, const DfStats& df,
                                const CollectionConfig& cfg, int workers) {
  check_workers(workers);
  cfg.validate();
  std::vector<Slot> slots(dataset.size());
  parallel_for(dataset.size(), workers, [&](std::size_t i) {
    auto& slot = slots[i];
    const auto item = make_item(dataset[i], grammar, i);
    auto teacher = backends.teacher();
    auto outcome = collect_cot_record(*teacher, item, df, cfg);
    slot.status.attempts = outcome.attempts;
    slot.status.trace_length = static_cast<int>(outcome.trace.size());
    slot.audit.retries += static_cast<std::size_t>(outcome.retries);
    if (outcome.status != CollectStatus::kAccepted) {
      slot.status.status = std::string(collect_status_name(outcome.status));
    } else {
      int retries = 0;
      try {
        auto expert = backends.expert();
        const auto verdict = filter_cot_record(*expert, *outcome.record, item, cfg, &retries);
        slot.status.status = std::string(filter_verdict_name(verdict));
        if (verdict == FilterVerdict::kKept) slot.record = std::move(outcome.record);
      } catch (const TransportError&) {
        slot.status.status = "discarded_transport";
      }
      slot.audit.retries += static_cast<std::size_t>(retries);
    }
    count(slot.audit, slot.status.status);
  });
  return assemble(slots);
}

CollectionResult collect_all(const BackendFactory& teacher, const std::vector<SftRecord>& dataset,
                             const GrammarSpec& grammar, const DfStats& df,
                             const CollectionConfig& cfg, int workers) {
  check_workers(workers);
  cfg.validate();
  std::vector<Slot> slots(dataset.size());
  parallel_for(dataset.size(), workers, [&](std::size_t i) {
    auto& slot = slots[i];
    auto backend = teacher();
    auto outcome = collect_cot_record(*backend, make_item(dataset[i], grammar, i), df, cfg);
    slot.status.status = std::string(collect_status_name(outcome.status));
    slot.status.attempts = outcome.attempts;
    slot.status.trace_length = static_cast<int>(outcome.trace.size());
    slot.audit.retries += static_cast<std::size_t>(outcome.retries);
    slot.record = std::move(outcome.record);
    count(slot.audit, slot.status.status);
  });
  return assemble(slots);
}

CollectionResult filter_all(const BackendFactory& expert, const std::vector<CotRecord>& cots,
                            const std::vector<SftRecord>& references, const GrammarSpec& grammar,
                            const CollectionConfig& cfg, int workers) {
  check_workers(workers);
  if (cots.size() != references.size())
    throw InvalidArgument("filter_all: one reference per CoT record is required");
  std::vector<Slot> slots(cots.size());
  parallel_for(cots.size(), workers, [&](std::size_t i) {
    auto& slot = slots[i];
    slot.status.trace_length = static_cast<int>(cots[i].trace.size());
    int retries = 0;
    try {
      auto backend = expert();
      const auto verdict =
          filter_cot_record(*backend, cots[i], make_item(references[i], grammar, i), cfg, &retries);
      slot.status.status = std::string(filter_verdict_name(verdict));
      if (verdict == FilterVerdict::kKept) slot.record = cots[i];
    } catch (const TransportError&) {
      slot.status.status = "discarded_transport";
    }
    slot.audit.retries += static_cast<std::size_t>(retries);
    count(slot.audit, slot.status.status);
  });
  return assemble(slots);
}

std::string statuses_jsonl(const std::vector<RecordStatus>& statuses) {
  std::string out;
  for (std::size_t i = 0; i < statuses.size(); ++i) {
    json j;
    j["index"] = i;
    j["status"] = statuses[i].status;
    j["attempts"] = statuses[i].attempts;
    j["trace_length"] = statuses[i].trace_length;
    out += j.dump();
    out.push_back('\n');
  }
  return out;
}

}  // namespace cotforge
