// cotforge command-line interface.

#include <cstdio>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "cotforge/config.hpp"
#include "cotforge/errors.hpp"
#include "cotforge/experiment.hpp"
#include "cotforge/metrics.hpp"

using namespace cotforge;
using nlohmann::json;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "artifacts";
  int workers = 1;
  bool quiet = false;

  // evaluate
  std::string checkpoint;
  std::string data;
  std::string grammar;
  bool cross = false;
  std::string output;
  std::string model = "model";

  // metrics
  std::string kind = "text";
  std::string hyp, ref, input, pred, gt;
  double threshold = 0.5;
};

ExperimentConfig load_config(const Options& o) {
  auto cfg = o.config.empty() ? ExperimentConfig::defaults() : ExperimentConfig::load(o.config);
  if (o.seed) cfg.apply_seed(*o.seed);
  return cfg;
}

std::vector<json> read_jsonl(const std::string& path) {
  std::vector<json> rows;
  const auto text = read_file(path);
  std::size_t start = 0, line_no = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    const auto line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw DataError(path + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

// A text row is a JSON string or an object with "text", "report" or
// "reference".
TokenSequence text_row(const json& j) {
  if (j.is_string()) return tokenize(j.get<std::string>());
  for (const char* key : {"text", "report", "reference"})
    if (j.is_object() && j.contains(key) && j[key].is_string())
      return tokenize(j[key].get<std::string>());
  throw DataError("text row needs a string or a \"text\" field");
}

Box box_row(const json& j) {
  const auto& b = j.is_array() ? j : j.at("box");
  return Box(b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
             b.at(3).get<double>());
}

void emit(const Options& o, const std::string& text) {
  std::cout << text;
  if (!o.output.empty()) write_file(o.output, text);
}

void cmd_metrics(const Options& o) {
  char buf[128];
  if (o.kind == "text") {
    std::vector<TokenSequence> hyps, refs;
    for (const auto& j : read_jsonl(o.hyp)) hyps.push_back(text_row(j));
    for (const auto& j : read_jsonl(o.ref)) refs.push_back(text_row(j));
    if (hyps.size() != refs.size())
      throw InvalidArgument("hypothesis and reference files differ in length");
    const DfStats df(refs);
    emit(o, std::string(kMetricCsvHeader) + "\n" +
                metric_csv_row(o.model, evaluate_corpus(hyps, refs, df)) + "\n");
  } else if (o.kind == "auc") {
    std::vector<int> labels;
    std::vector<double> scores;
    for (const auto& j : read_jsonl(o.input)) {
      labels.push_back(j.at("label").get<int>());
      scores.push_back(j.at("score").get<double>());
    }
    std::snprintf(buf, sizeof buf, "auc\n%.6f\n", auc(labels, scores));
    emit(o, buf);
  } else if (o.kind == "iou") {
    std::vector<Box> preds, gts;
    for (const auto& j : read_jsonl(o.pred)) preds.push_back(box_row(j));
    for (const auto& j : read_jsonl(o.gt)) gts.push_back(box_row(j));
    const auto s = iou_stats(preds, gts, o.threshold);
    std::snprintf(buf, sizeof buf, "miou,acc\n%.6f,%.6f\n", s.miou, s.acc);
    emit(o, buf);
  } else {
    throw ConfigError("--kind must be text, auc or iou");
  }
}

void cmd_evaluate(const Options& o) {
  const auto cfg = load_config(o);
  const ArtifactLayout L{o.out};
  const auto grammar =
      load_grammar(o.grammar.empty() ? (o.cross ? cfg.corpus.cross_grammar : cfg.corpus.grammar)
                                     : o.grammar);
  const auto data = o.data.empty() ? (o.cross ? L.cross_eval_data() : L.eval_data())
                                   : fs::path(o.data);
  const auto ck = o.checkpoint.empty() ? L.checkpoint("stage3") : fs::path(o.checkpoint);
  const auto records = load_sft_records(data);
  const auto res =
      evaluate_checkpoint(ck, records, grammar, o.cross, cfg.reward, cfg.grpo.max_len);
  emit(o, std::string(kMetricCsvHeader) + "\n" + metric_csv_row(o.model, res.report) + "\n");
}

int run(CLI::App& app, const Options& o) {
  const auto cfg_for_stage = [&] { return load_config(o); };
  const fs::path out = o.out;
  const std::string name = app.get_subcommands().empty()
                               ? std::string()
                               : app.get_subcommands().front()->get_name();
  if (name.empty()) {
    std::cerr << app.help();
    return 2;
  }
  if (name == "metrics") {
    run_stage("metrics", [&] { cmd_metrics(o); });
    return 0;
  }
  if (name == "evaluate") {
    run_stage("evaluate", [&] { cmd_evaluate(o); });
    return 0;
  }
  const auto cfg = cfg_for_stage();
  if (name == "pipeline") {
    std::cout << run_pipeline(cfg, out, o.workers) << "\n";
    return 0;
  }
  if (name == "ablate") {
    const auto rows = run_ablation(cfg, out, o.workers);
    std::cout << "variant," << kMetricCsvHeader << ",r_acc\n";
    for (const auto& r : rows) {
      char buf[64];
      std::snprintf(buf, sizeof buf, ",%.6f", r.eval.mean_r_acc);
      std::cout << r.variant << "," << metric_csv_row(r.model, r.eval.report) << buf << "\n";
    }
    return 0;
  }
  write_file(ArtifactLayout{out}.config(), cfg.to_text());
  run_stage(name, [&] {
    if (name == "gen-corpus") stage_gen_corpus(cfg, out);
    else if (name == "sft") stage_sft(cfg, out);
    else if (name == "collect-cot") std::cout << stage_collect_cot(cfg, out, o.workers).to_json() << "\n";
    else if (name == "filter-cot") std::cout << stage_filter_cot(cfg, out, o.workers).to_json() << "\n";
    else if (name == "sft-cot") stage_sft_cot(cfg, out);
    else if (name == "rft") stage_rft(cfg, out);
  });
  write_manifest(cfg, out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Three-stage report-generation training at desk scale"};
  Options o;
  app.add_option("--config", o.config, "Experiment config (key = value)");
  app.add_option("--seed", o.seed, "Override every seed in the config");
  app.add_option("--out", o.out, "Artifact directory")->capture_default_str();
  app.add_option("--workers", o.workers, "Worker threads for CoT collection")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_flag("--quiet,-q", o.quiet, "Suppress progress lines");
  app.require_subcommand(1);

  app.add_subcommand("gen-corpus", "Generate the synthetic SFT, RFT and evaluation splits");
  app.add_subcommand("sft", "Stage 1: adapter-only supervised alignment");
  app.add_subcommand("collect-cot", "Stage 2a: collect chain-of-thought records");
  app.add_subcommand("filter-cot", "Stage 2b: expert consistency filtering");
  app.add_subcommand("sft-cot", "Stage 2c: supervised tuning on chain-of-thought targets");
  app.add_subcommand("rft", "Stage 3: GRPO reinforcement fine-tuning");
  app.add_subcommand("pipeline", "Run every stage, evaluate, write the manifest");
  app.add_subcommand("ablate", "Run the five-variant ablation matrix");

  auto* ev = app.add_subcommand("evaluate", "Greedy-decode a checkpoint and score it");
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint (default: <out>/checkpoints/stage3.json)");
  ev->add_option("--data", o.data, "Evaluation JSONL (default: the split under <out>)");
  ev->add_option("--grammar", o.grammar, "Grammar of the dataset: default, cross or a path");
  ev->add_flag("--cross", o.cross, "Cross-dataset evaluation");
  ev->add_option("--output", o.output, "Also write the CSV here");
  ev->add_option("--model", o.model, "Model label in the CSV");

  auto* me = app.add_subcommand("metrics", "Ad-hoc metrics over JSONL files");
  me->add_option("--kind", o.kind, "text, auc or iou")
      ->check(CLI::IsMember({"text", "auc", "iou"}))
      ->capture_default_str();
  me->add_option("--hyp", o.hyp, "Hypothesis texts (text)");
  me->add_option("--ref", o.ref, "Reference texts (text)");
  me->add_option("--input", o.input, "Rows of {label, score} (auc)");
  me->add_option("--pred", o.pred, "Predicted boxes (iou)");
  me->add_option("--gt", o.gt, "Ground-truth boxes (iou)");
  me->add_option("--threshold", o.threshold, "IoU hit threshold (iou)")->capture_default_str();
  me->add_option("--output", o.output, "Also write the CSV here");
  me->add_option("--model", o.model, "Row label (text)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  set_quiet(o.quiet);

  try {
    return run(app, o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const TransportError& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return 4;
  } catch (const StageError& e) {
    std::cerr << "stage " << e.stage() << " failed: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
