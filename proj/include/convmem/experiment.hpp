#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "convmem/corpus.hpp"
#include "convmem/evaluation.hpp"
#include "convmem/model.hpp"
#include "convmem/retrieval.hpp"
#include "convmem/training.hpp"

namespace convmem::exp {

struct BaselineConfig {
  std::vector<std::string> variants;  // subset of {"conv", "sum", "qa"}
  std::vector<int> k_values;
};

struct ExperimentConfig {
  corpus::CorpusConfig corpus;
  model::ModelConfig model;  // vocab_size 0 means "size to the built vocabulary"
  model::LoRAConfig lora;
  train::TrainerConfig train;
  int pretrain_steps = 1200;
  BaselineConfig baselines;
  std::string output_dir = "runs/out";
  double upsample_pos = 0.0;  // extra positive training questions, as a fraction
  double upsample_neg = 0.0;
  bool ood = false;  // swap every question/answer surface to the second template family
};

void validate_config(const ExperimentConfig& cfg);
std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const std::string& text);

// FNV-1a over the canonical config JSON, as a fixed-width hex string.
std::string config_hash(const ExperimentConfig& cfg);

struct BaselineRow {
  std::string label;
  eval::AccuracyReport report;
  int gold_hits = 0;
  int positives = 0;
  int dropped_docs = 0;
};

struct RunArtifacts {
  std::string dir;
  train::Timeline timeline;
  std::vector<train::EpochRecord> log;
  std::vector<eval::EvalRecord> records;
  eval::AccuracyReport overall;
  eval::OverTimeReport over_time;
  eval::RetentionReport retention;
  std::vector<BaselineRow> baselines;
  double pretrain_final_loss = 0.0;
  bool pretrain_cached = false;
  std::string metrics_json;  // exact bytes of metrics.json, for rerun comparisons
};

// Full pipeline: corpus, vocabulary, pretrained base, sequential adapter run,
// evaluation, optional retrieval baselines. Writes every artifact plus a
// manifest into cfg.output_dir; a non-empty cache directory memoizes the
// pretrained base across runs sharing a model/vocab/pretrain setup.
RunArtifacts run_experiment(const ExperimentConfig& cfg,
                            const std::string& pretrain_cache_dir = "");

// Knob name -> list of values, each value spelled the way the CLI would
// (e.g. "10", "0.5", "attention_only", "true", "pos:0.25").
using SweepGrid = std::map<std::string, std::vector<std::string>>;

extern const char* const kSweepKnobs[11];

struct ReportBundle {
  std::vector<std::pair<std::string, eval::AccuracyReport>> ablation_table;
  std::vector<std::pair<std::string, eval::OverTimeReport>> over_time_table;
  std::vector<BaselineRow> baseline_table;
  std::string base_config_hash;
  std::vector<uint64_t> seeds;
};

// Cartesian product of the grid over the base config, one run per point,
// rows labeled the way the result tables name their setups. An empty grid
// runs the base config once.
ReportBundle ablation_sweep(const ExperimentConfig& base, const SweepGrid& grid,
                            const std::string& pretrain_cache_dir = "");

enum class ReportFormat { Markdown, Csv, Json };

// Renders the bundle into out_dir; returns the written file paths.
std::vector<std::string> emit_report(const ReportBundle& bundle, ReportFormat format,
                                     const std::string& out_dir);

// Reads back the CSV flavor of emit_report (series data lives in the JSON
// flavor only, so a parse-emit cycle reproduces the CSV files byte for byte).
ReportBundle parse_report_csv(const std::string& dir);

}  // namespace convmem::exp
