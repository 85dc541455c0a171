#pragma once

// Stage orchestration over an artifact directory, evaluation, manifests and
// the ablation matrix.

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cotforge/config.hpp"
#include "cotforge/cot_pipeline.hpp"
#include "cotforge/metrics.hpp"
#include "cotforge/policy.hpp"

namespace cotforge {

namespace fs = std::filesystem;

/// Fixed layout of an artifact directory.
struct ArtifactLayout {
  fs::path root;

  fs::path sft_data() const { return root / "data" / "sft.jsonl"; }
  fs::path rft_data() const { return root / "data" / "rft.jsonl"; }
  fs::path eval_data() const { return root / "data" / "eval.jsonl"; }
  fs::path cross_eval_data() const { return root / "data" / "cross_eval.jsonl"; }
  fs::path grammar() const { return root / "data" / "grammar.json"; }
  fs::path cross_grammar() const { return root / "data" / "cross_grammar.json"; }
  fs::path cot_collected() const { return root / "data" / "cot_collected.jsonl"; }
  fs::path cot_filtered() const { return root / "data" / "cot.jsonl"; }
  fs::path collect_status() const { return root / "data" / "cot_collect_status.jsonl"; }
  fs::path filter_status() const { return root / "data" / "cot_filter_status.jsonl"; }
  fs::path collect_audit() const { return root / "audit_collect.json"; }
  fs::path audit() const { return root / "audit.json"; }
  fs::path checkpoint(const std::string& stage) const {
    return root / "checkpoints" / (stage + ".json");
  }
  fs::path curve(const std::string& name) const { return root / "curves" / (name + ".csv"); }
  fs::path metrics() const { return root / "eval" / "metrics.csv"; }
  fs::path eval_rewards() const { return root / "eval" / "rewards.csv"; }
  fs::path config() const { return root / "config.cfg"; }
  fs::path manifest() const { return root / "manifest.json"; }
};

/// Progress lines go to stderr unless silenced.
void set_quiet(bool quiet);

/// Runs `fn`, converting library errors (InvalidArgument, DataError and
/// other runtime errors) into StageError(stage). ConfigError, StageError and
/// TransportError pass through.
void run_stage(const std::string& stage, const std::function<void()>& fn);

/// Teacher and expert factories for the configured backend kind.
Backends make_backends(const ExperimentConfig& cfg, const GrammarSpec& grammar);

/// Zero-initialised policy sized for the grammar.
PolicyParams initial_params(const GrammarSpec& grammar);

// Stages. Each reads its inputs from and writes its outputs to `out`.
void stage_gen_corpus(const ExperimentConfig& cfg, const fs::path& out);
void stage_sft(const ExperimentConfig& cfg, const fs::path& out);
AuditLog stage_collect_cot(const ExperimentConfig& cfg, const fs::path& out, int workers);
AuditLog stage_filter_cot(const ExperimentConfig& cfg, const fs::path& out, int workers);
void stage_sft_cot(const ExperimentConfig& cfg, const fs::path& out);
void stage_rft(const ExperimentConfig& cfg, const fs::path& out);

/// Stage-2 training examples; CoT rows with tokens outside the vocabulary
/// are skipped and counted in `skipped`.
std::vector<TrainingExample> cot_examples(const std::vector<CotRecord>& cots,
                                          const Vocabulary& vocab, std::size_t* skipped = nullptr);

struct EvalResult {
  MetricReport report;
  double mean_r_acc = 0;
  double mean_r_format = 0;
  std::vector<std::string> outputs;
};

/// Greedy-decodes each record, scores the answer span (the whole output when
/// it is malformed) with corpus metrics, and the composite reward against the
/// evaluation references. Throws InvalidArgument on an empty set.
EvalResult evaluate_policy(const PolicyParams& params, const Vocabulary& vocab,
                           const std::vector<SftRecord>& records, const RewardConfig& reward_cfg,
                           int max_len);

/// Loads the checkpoint and checks it against the dataset grammar: the
/// grammar hash for within-dataset evaluation, or the vocabulary hash and
/// condition count for cross-dataset evaluation. Throws DataError on
/// mismatch.
EvalResult evaluate_checkpoint(const fs::path& checkpoint, const std::vector<SftRecord>& records,
                               const GrammarSpec& grammar, bool cross,
                               const RewardConfig& reward_cfg, int max_len);

/// Writes manifest.json (config hash, seeds, stage versions and a hash of
/// every other artifact) and returns its hash.
std::string write_manifest(const ExperimentConfig& cfg, const fs::path& out);

/// Full three-stage run plus evaluation; returns the manifest hash.
std::string run_pipeline(const ExperimentConfig& cfg, const fs::path& out, int workers);

struct AblationRow {
  std::string variant;  // a..e
  std::string model;
  EvalResult eval;
};

/// The five training variants over shared data and seeds. Writes
/// ablation.csv and ablation_reward.csv under `out`.
std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg, const fs::path& out,
                                      int workers);

}  // namespace cotforge
