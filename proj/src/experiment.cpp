#include "cotforge/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <iostream>
#include <map>

#include <json.hpp>

#include "cotforge/errors.hpp"
#include "cotforge/grpo.hpp"
#include "cotforge/rewards.hpp"
#include "cotforge/rng.hpp"
#include "cotforge/sft.hpp"

namespace cotforge {

using nlohmann::json;

namespace {

std::atomic<bool> g_quiet{false};

void log_line(const std::string& msg) {
  if (!g_quiet) std::cerr << "[cotforge] " << msg << "\n";
}

// Bumped whenever a stage's output for a fixed config would change.
const std::map<std::string, int> kStageVersions = {
    {"gen-corpus", 1}, {"sft", 1}, {"collect-cot", 1}, {"filter-cot", 1},
    {"sft-cot", 1},    {"rft", 1}, {"evaluate", 1}};

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

GrammarSpec grammar_of(const ExperimentConfig& cfg) { return load_grammar(cfg.corpus.grammar); }

DfStats df_of(const std::vector<TokenSequence>& refs) { return DfStats(refs); }

std::vector<TokenSequence> references(const std::vector<SftRecord>& rs) {
  std::vector<TokenSequence> out;
  out.reserve(rs.size());
  for (const auto& r : rs) out.push_back(r.report);
  return out;
}

std::vector<TokenSequence> references(const std::vector<RftRecord>& rs) {
  std::vector<TokenSequence> out;
  out.reserve(rs.size());
  for (const auto& r : rs) out.push_back(r.reference);
  return out;
}

Checkpoint make_checkpoint(std::string stage, const GrammarSpec& g, PolicyParams params) {
  return Checkpoint{std::move(stage), g.hash(), vocabulary_hash(g.vocabulary), std::move(params)};
}

std::vector<TrainingExample> sft_examples(const std::vector<SftRecord>& rs, const Vocabulary& v) {
  std::vector<TrainingExample> out;
  out.reserve(rs.size());
  for (const auto& r : rs) out.push_back(make_example(r, v));
  return out;
}

PolicyParams train_cot(PolicyParams start, const std::vector<CotRecord>& cots,
                       const GrammarSpec& g, const ExperimentConfig& cfg,
                       std::vector<double>* curve) {
  std::size_t skipped = 0;
  const auto examples = cot_examples(cots, g.vocabulary, &skipped);
  if (skipped) log_line("sft-cot: skipped " + std::to_string(skipped) + " out-of-vocabulary rows");
  if (examples.empty()) throw StageError("sft-cot", "no usable chain-of-thought records");
  auto res = train_sft(std::move(start), examples, cfg.sft_cot);
  if (curve) *curve = std::move(res.epoch_loss);
  return std::move(res.params);
}

RftResult train_grpo(PolicyParams start, const std::vector<RftRecord>& data, const GrammarSpec& g,
                     const ExperimentConfig& cfg) {
  const auto df = df_of(references(data));
  return train_rft(std::move(start), data, g.vocabulary, df, cfg.reward, cfg.grpo,
                   [](int step, const StepStats& s) {
                     if ((step + 1) % 50 == 0) {
                       char buf[160];
                       std::snprintf(buf, sizeof buf,
                                     "rft step %d: r_all %.4f r_acc %.4f format %.3f kl %.5f",
                                     step + 1, s.mean_r_all, s.mean_r_acc, s.format_rate,
                                     s.mean_kl);
                       log_line(buf);
                     }
                   });
}

std::string reward_rows_header() { return "model,r_acc,r_format"; }

std::string reward_row(const std::string& model, const EvalResult& e) {
  char buf[128];
  std::snprintf(buf, sizeof buf, ",%.6f,%.6f", e.mean_r_acc, e.mean_r_format);
  return model + buf;
}

}  // namespace

void set_quiet(bool quiet) { g_quiet = quiet; }

void run_stage(const std::string& stage, const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const StageError&) {
    throw;
  } catch (const TransportError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

Backends make_backends(const ExperimentConfig& cfg, const GrammarSpec& grammar) {
  const auto& b = cfg.backend;
  switch (b.kind) {
    case BackendKind::kSimulated: {
      auto make = [grammar, sim = b.simulated] {
        return std::unique_ptr<ChatBackend>(std::make_unique<SimulatedBackend>(grammar, sim));
      };
      return {make, make};
    }
    case BackendKind::kMock: {
      auto teacher_rules = load_script(b.teacher_script);
      auto expert_rules = load_script(b.expert_script);
      return {[teacher_rules] {
                return std::unique_ptr<ChatBackend>(std::make_unique<ScriptedBackend>(teacher_rules));
              },
              [expert_rules] {
                return std::unique_ptr<ChatBackend>(std::make_unique<ScriptedBackend>(expert_rules));
              }};
    }
    case BackendKind::kHttp: {
      auto expert_cfg = b.http;
      if (!b.expert_model.empty()) expert_cfg.model = b.expert_model;
      return {[http = b.http] {
                return std::unique_ptr<ChatBackend>(std::make_unique<HttpChatBackend>(http));
              },
              [expert_cfg] {
                return std::unique_ptr<ChatBackend>(std::make_unique<HttpChatBackend>(expert_cfg));
              }};
    }
  }
  throw ConfigError("unknown backend kind");
}

PolicyParams initial_params(const GrammarSpec& grammar) {
  return PolicyParams(grammar.condition_count(), grammar.vocabulary.size());
}

// ---------------------------------------------------------------------------
// Stages

void stage_gen_corpus(const ExperimentConfig& cfg, const fs::path& out) {
  const ArtifactLayout L{out};
  const auto g = grammar_of(cfg);
  const auto cross = load_grammar(cfg.corpus.cross_grammar);
  const auto seed = cfg.corpus.seed;
  persist_records(L.sft_data(), generate_synthetic_dataset(g, seed, cfg.corpus.n_sft, Split::kSft).sft);
  persist_records(L.rft_data(), generate_synthetic_dataset(g, seed, cfg.corpus.n_rft, Split::kRft).rft);
  persist_records(L.eval_data(),
                  generate_synthetic_dataset(g, seed, cfg.corpus.n_eval, Split::kEval).sft);
  persist_records(L.cross_eval_data(),
                  generate_synthetic_dataset(cross, seed, cfg.corpus.n_eval, Split::kEval).sft);
  save_grammar(L.grammar(), g);
  save_grammar(L.cross_grammar(), cross);
  log_line("gen-corpus: wrote " + std::to_string(cfg.corpus.n_sft) + " sft, " +
           std::to_string(cfg.corpus.n_rft) + " rft, " + std::to_string(cfg.corpus.n_eval) +
           " eval records");
}

void stage_sft(const ExperimentConfig& cfg, const fs::path& out) {
  const ArtifactLayout L{out};
  const auto g = grammar_of(cfg);
  const auto records = load_sft_records(L.sft_data());
  auto res = train_sft(initial_params(g), sft_examples(records, g.vocabulary), cfg.sft);
  write_file(L.curve("sft_stage1"), loss_curve_csv(res.epoch_loss));
  save_checkpoint(L.checkpoint("stage1"), make_checkpoint("stage1", g, std::move(res.params)));
  log_line("sft: final loss " + std::to_string(res.epoch_loss.back()));
}

AuditLog stage_collect_cot(const ExperimentConfig& cfg, const fs::path& out, int workers) {
  const ArtifactLayout L{out};
  const auto g = grammar_of(cfg);
  const auto records = load_sft_records(L.sft_data());
  const auto df = df_of(references(records));
  const auto backends = make_backends(cfg, g);
  auto res = collect_all(backends.teacher, records, g, df, cfg.cot, workers);
  persist_records(L.cot_collected(), res.records);
  write_file(L.collect_status(), statuses_jsonl(res.statuses));
  write_file(L.collect_audit(), res.audit.to_json() + "\n");
  log_line("collect-cot: accepted " + std::to_string(res.records.size()) + " of " +
           std::to_string(records.size()));
  if (res.records.empty() && res.audit.discarded_transport > 0)
    throw TransportError("every record failed in transport during collection");
  return res.audit;
}

AuditLog stage_filter_cot(const ExperimentConfig& cfg, const fs::path& out, int workers) {
  const ArtifactLayout L{out};
  const auto g = grammar_of(cfg);
  const auto records = load_sft_records(L.sft_data());
  const auto cots = load_cot_records(L.cot_collected());
  std::map<std::pair<int, int>, const SftRecord*> by_context;
  for (const auto& r : records)
    by_context.emplace(std::pair{r.context.condition_id, r.context.noise_id}, &r);
  std::vector<SftRecord> refs;
  refs.reserve(cots.size());
  for (const auto& c : cots) {
    const auto it = by_context.find({c.context.condition_id, c.context.noise_id});
    if (it == by_context.end()) throw DataError("collected record has no matching SFT context");
    refs.push_back(*it->second);
  }
  const auto backends = make_backends(cfg, g);
  auto res = filter_all(backends.expert, cots, refs, g, cfg.cot, workers);
  persist_records(L.cot_filtered(), res.records);
  write_file(L.filter_status(), statuses_jsonl(res.statuses));

  // The final audit covers every input record: collection discards plus
  // filter verdicts.
  AuditLog audit = res.audit;
  if (fs::exists(L.collect_audit())) {
    const auto j = json::parse(read_file(L.collect_audit()));
    audit.discarded_budget += j.at("discarded_budget").get<std::size_t>();
    audit.discarded_transport += j.at("discarded_transport").get<std::size_t>();
    audit.discarded_reformat += j.at("discarded_reformat").get<std::size_t>();
    audit.retries += j.at("retries").get<std::size_t>();
  }
  write_file(L.audit(), audit.to_json() + "\n");
  log_line("filter-cot: kept " + std::to_string(res.records.size()) + " of " +
           std::to_string(cots.size()));
  if (res.records.empty() && res.audit.discarded_transport > 0)
    throw TransportError("every record failed in transport during filtering");
  return audit;
}

void stage_sft_cot(const ExperimentConfig& cfg, const fs::path& out) {
  const ArtifactLayout L{out};
  const auto g = grammar_of(cfg);
  auto start = load_checkpoint(L.checkpoint("stage1"), g);
  std::vector<double> curve;
  auto params = train_cot(std::move(start.params), load_cot_records(L.cot_filtered()), g, cfg, &curve);
  write_file(L.curve("sft_stage2"), loss_curve_csv(curve));
  save_checkpoint(L.checkpoint("stage2"), make_checkpoint("stage2", g, std::move(params)));
  log_line("sft-cot: final loss " + std::to_string(curve.back()));
}

void stage_rft(const ExperimentConfig& cfg, const fs::path& out) {
  const ArtifactLayout L{out};
  const auto g = grammar_of(cfg);
  auto start = load_checkpoint(L.checkpoint("stage2"), g);
  auto res = train_grpo(std::move(start.params), load_rft_records(L.rft_data()), g, cfg);
  write_file(L.curve("rft_reward"), reward_curve_csv(res.curve));
  save_checkpoint(L.checkpoint("stage3"), make_checkpoint("stage3", g, std::move(res.params)));
}

std::vector<TrainingExample> cot_examples(const std::vector<CotRecord>& cots,
                                          const Vocabulary& vocab, std::size_t* skipped) {
  std::vector<TrainingExample> out;
  std::size_t skip = 0;
  for (const auto& c : cots) {
    const auto toks = cot_target_tokens(c);
    if (!std::all_of(toks.begin(), toks.end(), [&](const auto& t) { return vocab.contains(t); })) {
      ++skip;
      continue;
    }
    out.push_back(make_example(c, vocab));
  }
  if (skipped) *skipped = skip;
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalResult evaluate_policy(const PolicyParams& params, const Vocabulary& vocab,
                           const std::vector<SftRecord>& records, const RewardConfig& reward_cfg,
                           int max_len) {
  if (records.empty()) throw InvalidArgument("evaluate: empty evaluation set");
  const auto refs = references(records);
  const DfStats df(refs);
  EvalResult res;
  std::vector<TokenSequence> hyps;
  for (const auto& r : records) {
    const auto toks = greedy_decode(params, r.context, max_len);
    auto text = render_output(vocab, toks);
    const auto parsed = parse_tagged_output(text);
    hyps.push_back(tokenize(parsed ? parsed->answer : text));
    const auto score = composite_reward(text, r.report, df, reward_cfg);
    res.mean_r_acc += score.r_acc;
    res.mean_r_format += score.r_format;
    res.outputs.push_back(std::move(text));
  }
  res.mean_r_acc /= static_cast<double>(records.size());
  res.mean_r_format /= static_cast<double>(records.size());
  res.report = evaluate_corpus(hyps, refs, df);
  return res;
}

EvalResult evaluate_checkpoint(const fs::path& checkpoint, const std::vector<SftRecord>& records,
                               const GrammarSpec& grammar, bool cross,
                               const RewardConfig& reward_cfg, int max_len) {
  Checkpoint ck;
  if (!cross) {
    ck = load_checkpoint(checkpoint, grammar);
  } else {
    ck = load_checkpoint(checkpoint);
    if (ck.vocab_hash != vocabulary_hash(grammar.vocabulary))
      throw DataError("checkpoint vocabulary does not match the cross-dataset grammar");
    if (ck.params.contexts() != grammar.condition_count())
      throw DataError("checkpoint condition count does not match the cross-dataset grammar");
  }
  return evaluate_policy(ck.params, grammar.vocabulary, records, reward_cfg, max_len);
}

// ---------------------------------------------------------------------------
// Manifest, pipeline, ablation

std::string write_manifest(const ExperimentConfig& cfg, const fs::path& out) {
  const ArtifactLayout L{out};
  json j;
  j["config_hash"] = cfg.hash();
  j["seeds"] = {{"corpus", cfg.corpus.seed},
                {"sft", cfg.sft.seed},
                {"cot_strategy", cfg.cot.strategy_seed},
                {"grpo", cfg.grpo.seed},
                {"backend", cfg.backend.simulated.seed}};
  j["stage_versions"] = kStageVersions;
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(out))
    if (e.is_regular_file() && e.path() != L.manifest()) files.push_back(e.path());
  std::vector<std::string> rel;
  for (const auto& f : files) rel.push_back(fs::relative(f, out).generic_string());
  std::sort(rel.begin(), rel.end());
  json artifacts = json::object();
  for (const auto& r : rel) artifacts[r] = hex64(fnv1a(read_file(out / r)));
  j["artifacts"] = artifacts;
  const auto text = j.dump(2) + "\n";
  write_file(L.manifest(), text);
  return hex64(fnv1a(text));
}

std::string run_pipeline(const ExperimentConfig& cfg, const fs::path& out, int workers) {
  const ArtifactLayout L{out};
  write_file(L.config(), cfg.to_text());
  run_stage("gen-corpus", [&] { stage_gen_corpus(cfg, out); });
  run_stage("sft", [&] { stage_sft(cfg, out); });
  run_stage("collect-cot", [&] { stage_collect_cot(cfg, out, workers); });
  run_stage("filter-cot", [&] { stage_filter_cot(cfg, out, workers); });
  run_stage("sft-cot", [&] { stage_sft_cot(cfg, out); });
  run_stage("rft", [&] { stage_rft(cfg, out); });
  run_stage("evaluate", [&] {
    const auto g = grammar_of(cfg);
    const auto cross = load_grammar(cfg.corpus.cross_grammar);
    const auto eval = load_sft_records(L.eval_data());
    const auto cross_eval = load_sft_records(L.cross_eval_data());
    std::string csv = std::string(kMetricCsvHeader) + "\n";
    std::string rewards = reward_rows_header() + "\n";
    for (const std::string stage : {"stage1", "stage2", "stage3"}) {
      const auto e = evaluate_checkpoint(L.checkpoint(stage), eval, g, false, cfg.reward,
                                         cfg.grpo.max_len);
      csv += metric_csv_row(stage, e.report) + "\n";
      rewards += reward_row(stage, e) + "\n";
    }
    const auto c = evaluate_checkpoint(L.checkpoint("stage3"), cross_eval, cross, true,
                                       cfg.reward, cfg.grpo.max_len);
    csv += metric_csv_row("stage3_cross", c.report) + "\n";
    rewards += reward_row("stage3_cross", c) + "\n";
    write_file(L.metrics(), csv);
    write_file(L.eval_rewards(), rewards);
  });
  const auto hash = write_manifest(cfg, out);
  log_line("pipeline: manifest " + hash);
  return hash;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg, const fs::path& out,
                                      int workers) {
  const ArtifactLayout L{out};
  write_file(L.config(), cfg.to_text());
  run_stage("gen-corpus", [&] { stage_gen_corpus(cfg, out); });
  run_stage("sft", [&] { stage_sft(cfg, out); });
  run_stage("collect-cot", [&] { stage_collect_cot(cfg, out, workers); });
  run_stage("filter-cot", [&] { stage_filter_cot(cfg, out, workers); });

  const auto g = grammar_of(cfg);
  const auto eval = load_sft_records(L.eval_data());
  const auto rft_data = load_rft_records(L.rft_data());
  const auto cots = load_cot_records(L.cot_filtered());
  const auto stage1 = load_checkpoint(L.checkpoint("stage1"), g).params;
  const auto zero = initial_params(g);

  PolicyParams cot_only, cot_after_sft;
  run_stage("sft-cot", [&] {
    cot_only = train_cot(zero, cots, g, cfg, nullptr);
    cot_after_sft = train_cot(stage1, cots, g, cfg, nullptr);
  });

  struct Variant {
    std::string id, model;
    const PolicyParams* start;
    bool rl;
  };
  const std::vector<Variant> variants = {{"a", "cot_sft", &cot_only, false},
                                         {"b", "rft_only", &zero, true},
                                         {"c", "sft_rft", &stage1, true},
                                         {"d", "cot_sft_rft", &cot_only, true},
                                         {"e", "full", &cot_after_sft, true}};
  std::vector<AblationRow> rows;
  std::string csv = "variant," + std::string(kMetricCsvHeader) + "\n";
  std::string rewards = "variant," + reward_rows_header() + "\n";
  for (const auto& v : variants) {
    PolicyParams params = *v.start;
    if (v.rl) {
      run_stage("rft", [&] {
        auto res = train_grpo(params, rft_data, g, cfg);
        write_file(L.curve("ablation_" + v.id + "_reward"), reward_curve_csv(res.curve));
        params = std::move(res.params);
      });
    }
    AblationRow row{v.id, v.model, {}};
    run_stage("evaluate", [&] {
      row.eval = evaluate_policy(params, g.vocabulary, eval, cfg.reward, cfg.grpo.max_len);
    });
    csv += v.id + "," + metric_csv_row(v.model, row.eval.report) + "\n";
    rewards += v.id + "," + reward_row(v.model, row.eval) + "\n";
    log_line("ablate: variant " + v.id + " (" + v.model + ") r_acc " +
             std::to_string(row.eval.mean_r_acc));
    rows.push_back(std::move(row));
  }
  write_file(out / "ablation.csv", csv);
  write_file(out / "ablation_reward.csv", rewards);
  write_manifest(cfg, out);
  return rows;
}

}  // namespace cotforge
