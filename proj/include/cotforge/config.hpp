#pragma once

// Flat key=value experiment configuration with namespaced keys:
// corpus.*, sft.*, cot.*, grpo.*, reward.*, backend.*.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "cotforge/backends.hpp"
#include "cotforge/cot_pipeline.hpp"
#include "cotforge/grpo.hpp"
#include "cotforge/rewards.hpp"
#include "cotforge/sft.hpp"

namespace cotforge {

struct CorpusSettings {
  std::string grammar = "default";
  std::string cross_grammar = "cross";
  std::uint64_t seed = 7;
  int n_sft = 120;
  int n_rft = 60;
  int n_eval = 60;
};

enum class BackendKind { kSimulated, kMock, kHttp };

struct BackendSettings {
  BackendKind kind = BackendKind::kSimulated;
  SimulatedBackendConfig simulated;
  std::string teacher_script;  // mock
  std::string expert_script;   // mock
  HttpBackendConfig http;      // teacher; expert shares it except for the model
  std::string expert_model;
};

struct ExperimentConfig {
  CorpusSettings corpus;
  SftConfig sft;      // stage 1, adapter only
  SftConfig sft_cot;  // stage 2, all blocks
  CollectionConfig cot;
  std::string templates_dir;
  GrpoConfig grpo;
  RewardConfig reward;
  BackendSettings backend;

  /// Desk defaults. Every required key has a value.
  static ExperimentConfig defaults();

  /// Parses and validates. Throws ConfigError naming the offending key for
  /// unknown, duplicate, missing or malformed keys and for values that break
  /// a module invariant.
  static ExperimentConfig parse(std::string_view text);
  static ExperimentConfig load(const std::filesystem::path& path);

  /// Canonical text: every key, sorted, shortest round-trip numbers.
  std::string to_text() const;
  /// FNV-1a of to_text(), 16 hex digits.
  std::string hash() const;

  /// Replaces every seed (corpus, sft, cot strategy, grpo, backend).
  void apply_seed(std::uint64_t seed);

  /// Module invariants and referenced files; throws ConfigError.
  void validate() const;
};

/// All recognised keys in canonical order.
std::vector<std::string> config_keys();

std::string_view backend_kind_name(BackendKind kind);

}  // namespace cotforge
