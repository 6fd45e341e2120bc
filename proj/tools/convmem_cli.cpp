#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "convmem/experiment.hpp"

namespace {

using namespace convmem;

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

struct Cli {
  std::string config_path;
  std::string out_dir;
  std::string cache_dir;
  std::optional<int> epochs, batch, rank, pretrain_steps, convs;
  std::optional<double> lambda_v, alpha_v, upsample_pos, upsample_neg;
  std::optional<std::string> loss_mode, placement;
  std::optional<uint64_t> seed, corpus_seed;
  int with_sys = -1;  // -1 unset, else 0/1
  bool ood = false;
  std::vector<int> k_values;
  std::vector<std::string> variants;

  void add_options(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config JSON file");
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--cache", cache_dir, "pretrained-base cache directory");
    cmd->add_option("--epochs", epochs, "finetuning epochs per conversation");
    cmd->add_option("--batch", batch, "finetuning batch size");
    cmd->add_option("--lambda", lambda_v, "question/answer loss weight");
    cmd->add_option("--loss-mode", loss_mode, "loss variant name");
    cmd->add_flag("--with-sys,!--without-sys",
                  [this](int64_t v) { with_sys = v > 0 ? 1 : 0; },
                  "include the system span in training and prompts");
    cmd->add_option("--rank", rank, "adapter rank");
    cmd->add_option("--alpha", alpha_v, "adapter scaling numerator");
    cmd->add_option("--placement", placement, "adapter placement (all_linear | attention_only)");
    cmd->add_option("--seed", seed, "model init and training seed");
    cmd->add_option("--corpus-seed", corpus_seed, "corpus generator seed");
    cmd->add_option("--convs", convs, "number of conversations");
    cmd->add_option("--pretrain-steps", pretrain_steps, "base pretraining steps");
    cmd->add_option("--k", k_values, "retrieval depth(s) for the RAG baselines");
    cmd->add_option("--variant", variants, "baseline index variant(s): conv, sum, qa");
    cmd->add_flag("--ood", ood, "render questions through the second template family");
    cmd->add_option("--upsample-pos", upsample_pos, "extra positive question fraction");
    cmd->add_option("--upsample-neg", upsample_neg, "extra negative question fraction");
  }

  exp::ExperimentConfig assemble() const {
    exp::ExperimentConfig cfg;
    if (!config_path.empty()) cfg = exp::config_from_json(slurp(config_path));
    if (const char* env = std::getenv("CONVMEM_OUTPUT_DIR"); env && *env) cfg.output_dir = env;
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    if (epochs) cfg.train.epochs = *epochs;
    if (batch) cfg.train.batch_size = *batch;
    if (lambda_v) cfg.train.lambda = *lambda_v;
    if (loss_mode) cfg.train.mode = train::loss_mode_from_string(*loss_mode);
    if (with_sys != -1) cfg.train.include_sys = with_sys == 1;
    if (rank) cfg.lora.rank = *rank;
    if (alpha_v) cfg.lora.alpha = *alpha_v;
    if (placement) cfg.lora.placement = model::placement_from_string(*placement);
    if (seed) {
      cfg.train.seed = *seed;
      cfg.model.seed = *seed;
    }
    if (corpus_seed) cfg.corpus.seed = *corpus_seed;
    if (convs) cfg.corpus.num_conversations = *convs;
    if (pretrain_steps) cfg.pretrain_steps = *pretrain_steps;
    if (!k_values.empty()) cfg.baselines.k_values = k_values;
    if (!variants.empty()) cfg.baselines.variants = variants;
    if (ood) cfg.ood = true;
    if (upsample_pos) cfg.upsample_pos = *upsample_pos;
    if (upsample_neg) cfg.upsample_neg = *upsample_neg;
    return cfg;
  }
};

void warn_on_thread_env() {
  if (const char* env = std::getenv("CONVMEM_THREADS"); env && *env) {
    int n = std::atoi(env);
    if (n > 1)
      std::cerr << "note: CONVMEM_THREADS=" << env
                << " requested; this build computes serially\n";
  }
}

void print_report(const std::string& label, const eval::AccuracyReport& r) {
  std::printf("%-24s yes %6.1f  no %6.1f  overall %6.1f\n", label.c_str(), r.yes_acc, r.no_acc,
              r.overall);
}

int cmd_gen_corpus(const Cli& cli) {
  exp::ExperimentConfig cfg = cli.assemble();
  corpus::validate_config(cfg.corpus);
  corpus::Corpus corp = corpus::generate_corpus(cfg.corpus);
  if (cfg.ood) corp = corpus::ood_variant(corp, cfg.corpus.seed);
  std::filesystem::create_directories(cfg.output_dir);
  corpus::save_corpus(corp, cfg.output_dir + "/corpus.jsonl");
  tok::Vocab vocab = tok::build_vocab(corp, true);
  tok::save_vocab(vocab, cfg.output_dir + "/vocab.json");
  std::printf("wrote %s/corpus.jsonl: %d conversations, %zu samples, %d vocab tokens\n",
              cfg.output_dir.c_str(), static_cast<int>(corp.conversations.size()),
              corp.total_samples(), vocab.size());
  return 0;
}

int cmd_pretrain(const Cli& cli) {
  exp::ExperimentConfig cfg = cli.assemble();
  corpus::Corpus corp = corpus::generate_corpus(cfg.corpus);
  tok::Vocab vocab = tok::build_vocab(corp, true);
  model::ModelConfig mcfg = cfg.model;
  if (mcfg.vocab_size == 0) mcfg.vocab_size = vocab.size();
  model::Model base = model::init_model(mcfg);
  train::PretrainConfig pcfg;
  pcfg.steps = cfg.pretrain_steps;
  pcfg.seed = cfg.train.seed;
  double final_loss = train::pretrain_base(base, vocab, pcfg);
  std::filesystem::create_directories(cfg.output_dir);
  model::save_model(base, cfg.output_dir + "/base_model.json");
  std::printf("pretrained %d steps, final loss %.4f, wrote %s/base_model.json\n", pcfg.steps,
              final_loss, cfg.output_dir.c_str());
  return 0;
}

int cmd_run(const Cli& cli) {
  exp::ExperimentConfig cfg = cli.assemble();
  exp::RunArtifacts art = exp::run_experiment(cfg, cli.cache_dir);
  std::printf("run complete in %s%s\n", art.dir.c_str(),
              art.pretrain_cached ? " (pretrained base from cache)" : "");
  print_report("holdout", art.overall);
  std::printf("%-24s combined %.1f ± %.1f over %zu steps\n", "over-time",
              art.over_time.combined.mean, art.over_time.combined.std_dev,
              art.over_time.combined.series.size());
  std::printf("%-24s base %.3f adapted %.3f delta %+.4f\n", "generic perplexity",
              art.retention.ppl_base, art.retention.ppl_adapted, art.retention.relative_delta);
  for (const exp::BaselineRow& row : art.baselines) print_report(row.label, row.report);
  return 0;
}

int cmd_baselines(const Cli& cli) {
  Cli with_defaults = cli;
  if (with_defaults.variants.empty()) with_defaults.variants = {"conv", "sum", "qa"};
  if (with_defaults.k_values.empty()) with_defaults.k_values = {1, 3};
  return cmd_run(with_defaults);
}

int cmd_sweep(const Cli& cli, const std::vector<std::string>& sets, const std::string& format) {
  exp::SweepGrid grid;
  for (const std::string& s : sets) {
    size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("--set expects knob=v1,v2,...; got \"" + s + "\"");
    std::string knob = s.substr(0, eq);
    std::vector<std::string>& values = grid[knob];
    std::stringstream ss(s.substr(eq + 1));
    std::string v;
    while (std::getline(ss, v, ','))
      if (!v.empty()) values.push_back(v);
    if (values.empty())
      throw std::invalid_argument("--set " + knob + " lists no values");
  }
  exp::ExperimentConfig base = cli.assemble();
  exp::ReportBundle bundle = exp::ablation_sweep(base, grid, cli.cache_dir);
  exp::ReportFormat fmt = exp::ReportFormat::Markdown;
  if (format == "csv")
    fmt = exp::ReportFormat::Csv;
  else if (format == "json")
    fmt = exp::ReportFormat::Json;
  else if (format != "md" && format != "markdown")
    throw std::invalid_argument("unknown report format \"" + format + "\"");
  std::vector<std::string> files = exp::emit_report(bundle, fmt, base.output_dir + "/report");
  for (const auto& [label, report] : bundle.ablation_table) print_report(label, report);
  for (const std::string& f : files) std::printf("wrote %s\n", f.c_str());
  return 0;
}

int cmd_report(const std::string& from, const std::string& to, const std::string& format) {
  exp::ReportBundle bundle = exp::parse_report_csv(from);
  exp::ReportFormat fmt = exp::ReportFormat::Markdown;
  if (format == "csv")
    fmt = exp::ReportFormat::Csv;
  else if (format == "json")
    fmt = exp::ReportFormat::Json;
  else if (format != "md" && format != "markdown")
    throw std::invalid_argument("unknown report format \"" + format + "\"");
  std::vector<std::string> files = exp::emit_report(bundle, fmt, to);
  for (const std::string& f : files) std::printf("wrote %s\n", f.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"conversation-memory finetuning testbed"};
  app.require_subcommand(1);
  warn_on_thread_env();

  Cli cli;
  std::vector<std::string> sets;
  std::string format = "md";
  std::string report_from, report_to = "report";

  CLI::App* gen = app.add_subcommand("gen-corpus", "generate the synthetic conversation corpus");
  cli.add_options(gen);
  CLI::App* pre = app.add_subcommand("pretrain", "pretrain a base model on the format stream");
  cli.add_options(pre);
  CLI::App* run = app.add_subcommand("run", "full pipeline: corpus, pretrain, finetune, evaluate");
  cli.add_options(run);
  CLI::App* sweep = app.add_subcommand("sweep", "grid of runs with result tables");
  cli.add_options(sweep);
  sweep->add_option("--set", sets, "grid axis, knob=v1,v2,... (repeatable)");
  sweep->add_option("--format", format, "report format: md, csv, json");
  CLI::App* base = app.add_subcommand("baselines", "retrieval baselines against the pretrained base");
  cli.add_options(base);
  CLI::App* rep = app.add_subcommand("report", "re-render tables from a sweep's CSV output");
  rep->add_option("--from", report_from, "directory holding the sweep CSV files")->required();
  rep->add_option("--to", report_to, "directory to write the rendered report into");
  rep->add_option("--format", format, "report format: md, csv, json");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_corpus(cli);
    if (pre->parsed()) return cmd_pretrain(cli);
    if (run->parsed()) return cmd_run(cli);
    if (sweep->parsed()) return cmd_sweep(cli, sets, format);
    if (base->parsed()) return cmd_baselines(cli);
    if (rep->parsed()) return cmd_report(report_from, report_to, format);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
