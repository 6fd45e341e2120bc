#include "convmem/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace convmem::exp {
namespace {

constexpr int kEvalMaxNew = 12;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  out.flush();
  if (!out) throw std::runtime_error("short write to " + path);
}

std::string fnv1a_hex(const std::string& data) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

const char* family_name(corpus::GeneratorFamily f) {
  return f == corpus::GeneratorFamily::InDist ? "in_dist" : "out_of_dist";
}

corpus::GeneratorFamily family_from_name(const std::string& s) {
  if (s == "in_dist") return corpus::GeneratorFamily::InDist;
  if (s == "out_of_dist") return corpus::GeneratorFamily::OutOfDist;
  throw std::invalid_argument("unknown generator family \"" + s + "\"");
}

ordered_json config_json(const ExperimentConfig& cfg) {
  ordered_json j;
  j["corpus"] = {{"num_conversations", cfg.corpus.num_conversations},
                 {"seed", cfg.corpus.seed},
                 {"generator_family", family_name(cfg.corpus.generator_family)},
                 {"questions_per_conversation_target", cfg.corpus.questions_per_conversation_target},
                 {"topic_pool_size", cfg.corpus.topic_pool_size}};
  j["model"] = {{"layers", cfg.model.layers},   {"heads", cfg.model.heads},
                {"d_model", cfg.model.d_model}, {"d_ff", cfg.model.d_ff},
                {"vocab_size", cfg.model.vocab_size}, {"max_seq", cfg.model.max_seq},
                {"seed", cfg.model.seed}};
  j["lora"] = {{"rank", cfg.lora.rank},
               {"alpha", cfg.lora.alpha},
               {"placement", model::to_string(cfg.lora.placement)}};
  j["train"] = {{"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size},
                {"lambda", cfg.train.lambda},
                {"loss_mode", train::to_string(cfg.train.mode)},
                {"include_sys", cfg.train.include_sys},
                {"lr", cfg.train.lr},
                {"beta1", cfg.train.beta1},
                {"beta2", cfg.train.beta2},
                {"eps", cfg.train.eps},
                {"seed", cfg.train.seed}};
  j["pretrain_steps"] = cfg.pretrain_steps;
  j["baselines"] = {{"variants", cfg.baselines.variants}, {"k_values", cfg.baselines.k_values}};
  j["output_dir"] = cfg.output_dir;
  j["upsample_pos"] = cfg.upsample_pos;
  j["upsample_neg"] = cfg.upsample_neg;
  j["ood"] = cfg.ood;
  return j;
}

std::string config_file_text(const ExperimentConfig& cfg) { return config_json(cfg).dump(2) + "\n"; }

ordered_json report_json(const eval::AccuracyReport& r) {
  return {{"yes_acc", r.yes_acc},     {"no_acc", r.no_acc},
          {"overall", r.overall},     {"yes_total", r.yes_total},
          {"no_total", r.no_total},   {"invalid_rate", r.invalid_rate}};
}

ordered_json series_json(const eval::OverTimeSeries& s) {
  return {{"mean", s.mean}, {"std", s.std_dev}, {"series", s.series}};
}

std::string matrix_csv(const eval::ConsistencyMatrix& m, int num_convs) {
  std::string out = "step";
  for (int c = 0; c < num_convs; ++c) out += ",conv_" + std::to_string(c);
  out += "\n";
  for (size_t t = 0; t < m.grid.size(); ++t) {
    out += std::to_string(t);
    for (const eval::CellStatus s : m.grid[t]) out += "," + eval::cell_to_string(s);
    out += "\n";
  }
  return out;
}

struct VariantInfo {
  std::string rag_label;      // "Conv. RAG"
  std::string perfect_label;  // "Perfect Conv. Recall"; empty when undefined
  std::vector<retrieval::Document> (*docs)(const corpus::Corpus&);
};

VariantInfo variant_info(const std::string& name) {
  if (name == "conv")
    return {"Conv. RAG", "Perfect Conv. Recall", &retrieval::conversation_docs};
  if (name == "sum") return {"Sum. RAG", "Perfect Sum. Recall", &retrieval::summary_docs};
  if (name == "qa") return {"QA RAG", "", &retrieval::qa_pair_docs};
  throw std::invalid_argument("unknown baseline variant \"" + name + "\"");
}

BaselineRow rag_row(std::string label, const retrieval::RagEvalResult& res) {
  BaselineRow row;
  row.label = std::move(label);
  row.report = res.report;
  row.gold_hits = res.gold_hits;
  row.positives = res.positives;
  row.dropped_docs = res.dropped_docs;
  return row;
}

ordered_json baseline_json(const BaselineRow& row) {
  ordered_json j = report_json(row.report);
  ordered_json out;
  out["label"] = row.label;
  for (auto& [k, v] : j.items()) out[k] = v;
  out["gold_hits"] = row.gold_hits;
  out["positives"] = row.positives;
  out["dropped_docs"] = row.dropped_docs;
  return out;
}

// ---------------------------------------------------------------------------
// Sweep knobs

int parse_int(const std::string& knob, const std::string& v) {
  try {
    size_t pos = 0;
    int x = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return x;
  } catch (...) {
    throw std::invalid_argument("knob " + knob + ": expected an integer, got \"" + v + "\"");
  }
}

double parse_double(const std::string& knob, const std::string& v) {
  try {
    size_t pos = 0;
    double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return x;
  } catch (...) {
    throw std::invalid_argument("knob " + knob + ": expected a number, got \"" + v + "\"");
  }
}

bool parse_bool(const std::string& knob, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("knob " + knob + ": expected true or false, got \"" + v + "\"");
}

uint64_t parse_seed(const std::string& knob, const std::string& v) {
  try {
    size_t pos = 0;
    unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return x;
  } catch (...) {
    throw std::invalid_argument("knob " + knob + ": expected a seed, got \"" + v + "\"");
  }
}

void parse_upsample(ExperimentConfig& cfg, const std::string& v) {
  cfg.upsample_pos = 0.0;
  cfg.upsample_neg = 0.0;
  std::stringstream ss(v);
  std::string part;
  bool any = false;
  while (std::getline(ss, part, ',')) {
    size_t colon = part.find(':');
    if (colon == std::string::npos)
      throw std::invalid_argument("knob upsample: expected pos:<frac> or neg:<frac>, got \"" + v +
                                  "\"");
    std::string side = part.substr(0, colon);
    double frac = parse_double("upsample", part.substr(colon + 1));
    if (side == "pos")
      cfg.upsample_pos = frac;
    else if (side == "neg")
      cfg.upsample_neg = frac;
    else
      throw std::invalid_argument("knob upsample: side must be pos or neg, got \"" + side + "\"");
    any = true;
  }
  if (!any)
    throw std::invalid_argument("knob upsample: expected pos:<frac> or neg:<frac>, got \"" + v +
                                "\"");
}

std::string valid_knob_list() {
  std::string out;
  for (const char* k : kSweepKnobs) {
    if (!out.empty()) out += ", ";
    out += k;
  }
  return out;
}

void apply_knob(ExperimentConfig& cfg, const std::string& knob, const std::string& value) {
  if (knob == "e")
    cfg.train.epochs = parse_int(knob, value);
  else if (knob == "b")
    cfg.train.batch_size = parse_int(knob, value);
  else if (knob == "lambda")
    cfg.train.lambda = parse_double(knob, value);
  else if (knob == "loss_mode")
    cfg.train.mode = train::loss_mode_from_string(value);
  else if (knob == "include_sys")
    cfg.train.include_sys = parse_bool(knob, value);
  else if (knob == "rank")
    cfg.lora.rank = parse_int(knob, value);
  else if (knob == "alpha")
    cfg.lora.alpha = parse_double(knob, value);
  else if (knob == "placement")
    cfg.lora.placement = model::placement_from_string(value);
  else if (knob == "seed")
    cfg.train.seed = parse_seed(knob, value);
  else if (knob == "upsample")
    parse_upsample(cfg, value);
  else if (knob == "ood")
    cfg.ood = parse_bool(knob, value);
  else
    throw std::invalid_argument("unknown sweep knob \"" + knob +
                                "\"; valid knobs: " + valid_knob_list());
}

std::string trim_number(double x) {
  // %g with enough digits for sweep-label fractions, no trailing zeros
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", x);
  return buf;
}

std::string mode_label(train::LossMode m) {
  switch (m) {
    case train::LossMode::WeightedFull: return "weighted";
    case train::LossMode::StandardCE: return "CE";
    case train::LossMode::QAOnlyCE: return "CE (q/a only)";
    case train::LossMode::QAOnlyWeighted: return "weighted (q/a only)";
    case train::LossMode::AnswerOnlyWeighted: return "weighted (answer only)";
  }
  return "weighted";
}

std::string knob_label(const ExperimentConfig& row, const std::string& knob,
                       const std::string& value, bool sys_in_grid) {
  if (knob == "e") {
    std::string lab = "e=" + value;
    if (!sys_in_grid) lab += row.train.include_sys ? " (w/ sys.)" : " (w/o sys.)";
    return lab;
  }
  if (knob == "b") return "b=" + value;
  if (knob == "lambda") return "λ=" + value;
  if (knob == "loss_mode") return mode_label(row.train.mode);
  if (knob == "include_sys") return row.train.include_sys ? "w/ sys." : "w/o sys.";
  if (knob == "rank") return "r=" + value;
  if (knob == "alpha") return "α=" + value;
  if (knob == "placement")
    return row.lora.placement == model::Placement::AllLinear ? "all-linear" : "$a_i$-only";
  if (knob == "seed") return "s=" + value;
  if (knob == "upsample") {
    std::string lab;
    if (row.upsample_pos > 0) lab += "+" + trim_number(row.upsample_pos * 100.0) + "% pos.";
    if (row.upsample_neg > 0) {
      if (!lab.empty()) lab += ", ";
      lab += "+" + trim_number(row.upsample_neg * 100.0) + "% neg.";
    }
    return lab.empty() ? "no upsampling" : lab;
  }
  if (knob == "ood") return row.ood ? "ood questions" : "in-dist questions";
  return knob + "=" + value;
}

std::string slug_part(const std::string& text) {
  std::string out;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c)) || c == '.')
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    else if (!out.empty() && out.back() != '-')
      out += '-';
  }
  while (!out.empty() && out.back() == '-') out.pop_back();
  return out;
}

// ---------------------------------------------------------------------------
// Report rendering

std::string fmt1(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.1f", x);
  return buf;
}

std::string num(double x) { return json(x).dump(); }

std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    out += c;
    if (c == '"') out += '"';
  }
  out += "\"";
  return out;
}

// Splits one CSV line; only the leading field may be quoted.
std::vector<std::string> csv_fields(const std::string& line) {
  std::vector<std::string> out;
  size_t i = 0;
  if (!line.empty() && line[0] == '"') {
    std::string field;
    i = 1;
    while (i < line.size()) {
      if (line[i] == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field += '"';
          i += 2;
        } else {
          ++i;
          break;
        }
      } else {
        field += line[i++];
      }
    }
    out.push_back(field);
    if (i < line.size() && line[i] == ',') ++i;
  }
  std::string field;
  for (; i < line.size(); ++i) {
    if (line[i] == ',') {
      out.push_back(field);
      field.clear();
    } else {
      field += line[i];
    }
  }
  out.push_back(field);
  return out;
}

std::vector<std::string> csv_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

double field_num(const std::vector<std::string>& fields, size_t i, const std::string& file) {
  if (i >= fields.size()) throw std::runtime_error(file + ": short row");
  try {
    return std::stod(fields[i]);
  } catch (...) {
    throw std::runtime_error(file + ": bad number \"" + fields[i] + "\"");
  }
}

std::string md_row(const std::string& setup, const std::string& yes, const std::string& no,
                   const std::string& overall) {
  return "| " + setup + " | " + yes + " | " + no + " | " + overall + " |\n";
}

const char* kMdHeader = "| Setup | Yes | No | Overall |\n| --- | --- | --- | --- |\n";

}  // namespace

const char* const kSweepKnobs[11] = {"e",     "b",         "lambda", "loss_mode",
                                     "include_sys", "rank", "alpha",  "placement",
                                     "seed",  "upsample",  "ood"};

void validate_config(const ExperimentConfig& cfg) {
  corpus::validate_config(cfg.corpus);
  train::validate_trainer_config(cfg.train);
  model::ModelConfig probe = cfg.model;
  if (probe.vocab_size == 0) probe.vocab_size = 8;  // sized later, off the built vocabulary
  model::validate_config(probe);
  if (cfg.lora.rank < 1) throw std::invalid_argument("lora.rank must be at least 1");
  if (!(cfg.lora.alpha > 0)) throw std::invalid_argument("lora.alpha must be positive");
  if (cfg.pretrain_steps < 0) throw std::invalid_argument("pretrain_steps must be non-negative");
  if (!(cfg.upsample_pos >= 0) || !(cfg.upsample_neg >= 0))
    throw std::invalid_argument("upsample fractions must be non-negative");
  std::set<std::string> seen;
  for (const std::string& v : cfg.baselines.variants) {
    variant_info(v);
    if (!seen.insert(v).second)
      throw std::invalid_argument("baseline variant \"" + v + "\" listed twice");
  }
  if (!cfg.baselines.variants.empty()) {
    if (cfg.baselines.k_values.empty())
      throw std::invalid_argument("baselines.k_values must not be empty when variants are enabled");
    for (int k : cfg.baselines.k_values)
      if (k < 1) throw std::invalid_argument("baselines.k_values entries must be at least 1");
  }
  if (cfg.output_dir.empty()) throw std::invalid_argument("output_dir must not be empty");
}

std::string config_to_json(const ExperimentConfig& cfg) { return config_file_text(cfg); }

ExperimentConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  static const std::set<std::string> known = {"corpus",         "model",     "lora",
                                             "train",          "pretrain_steps", "baselines",
                                             "output_dir",     "upsample_pos",   "upsample_neg",
                                             "ood"};
  for (auto& [key, value] : j.items()) {
    (void)value;
    if (!known.count(key)) throw std::invalid_argument("config: unknown key \"" + key + "\"");
  }
  ExperimentConfig cfg;
  if (j.contains("corpus")) {
    const json& c = j["corpus"];
    cfg.corpus.num_conversations = c.value("num_conversations", cfg.corpus.num_conversations);
    cfg.corpus.seed = c.value("seed", cfg.corpus.seed);
    if (c.contains("generator_family"))
      cfg.corpus.generator_family = family_from_name(c["generator_family"].get<std::string>());
    cfg.corpus.questions_per_conversation_target =
        c.value("questions_per_conversation_target", cfg.corpus.questions_per_conversation_target);
    cfg.corpus.topic_pool_size = c.value("topic_pool_size", cfg.corpus.topic_pool_size);
  }
  if (j.contains("model")) {
    const json& m = j["model"];
    cfg.model.layers = m.value("layers", cfg.model.layers);
    cfg.model.heads = m.value("heads", cfg.model.heads);
    cfg.model.d_model = m.value("d_model", cfg.model.d_model);
    cfg.model.d_ff = m.value("d_ff", cfg.model.d_ff);
    cfg.model.vocab_size = m.value("vocab_size", cfg.model.vocab_size);
    cfg.model.max_seq = m.value("max_seq", cfg.model.max_seq);
    cfg.model.seed = m.value("seed", cfg.model.seed);
  }
  if (j.contains("lora")) {
    const json& l = j["lora"];
    cfg.lora.rank = l.value("rank", cfg.lora.rank);
    cfg.lora.alpha = l.value("alpha", cfg.lora.alpha);
    if (l.contains("placement"))
      cfg.lora.placement = model::placement_from_string(l["placement"].get<std::string>());
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    cfg.train.epochs = t.value("epochs", cfg.train.epochs);
    cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
    cfg.train.lambda = t.value("lambda", cfg.train.lambda);
    if (t.contains("loss_mode"))
      cfg.train.mode = train::loss_mode_from_string(t["loss_mode"].get<std::string>());
    cfg.train.include_sys = t.value("include_sys", cfg.train.include_sys);
    cfg.train.lr = t.value("lr", cfg.train.lr);
    cfg.train.beta1 = t.value("beta1", cfg.train.beta1);
    cfg.train.beta2 = t.value("beta2", cfg.train.beta2);
    cfg.train.eps = t.value("eps", cfg.train.eps);
    cfg.train.seed = t.value("seed", cfg.train.seed);
  }
  cfg.pretrain_steps = j.value("pretrain_steps", cfg.pretrain_steps);
  if (j.contains("baselines")) {
    const json& b = j["baselines"];
    if (b.contains("variants"))
      cfg.baselines.variants = b["variants"].get<std::vector<std::string>>();
    if (b.contains("k_values")) cfg.baselines.k_values = b["k_values"].get<std::vector<int>>();
  }
  cfg.output_dir = j.value("output_dir", cfg.output_dir);
  cfg.upsample_pos = j.value("upsample_pos", cfg.upsample_pos);
  cfg.upsample_neg = j.value("upsample_neg", cfg.upsample_neg);
  cfg.ood = j.value("ood", cfg.ood);
  return cfg;
}

std::string config_hash(const ExperimentConfig& cfg) { return fnv1a_hex(config_file_text(cfg)); }

RunArtifacts run_experiment(const ExperimentConfig& cfg, const std::string& pretrain_cache_dir) {
  std::string stage = "config";
  RunArtifacts out;
  std::map<std::string, std::string> hashes;
  bool dir_ready = false;
  auto emit = [&](const std::string& name, const std::string& content) {
    write_file(out.dir + "/" + name, content);
    hashes[name] = fnv1a_hex(content);
  };
  try {
    validate_config(cfg);
    out.dir = cfg.output_dir;
    fs::create_directories(out.dir);
    dir_ready = true;
    emit("config.json", config_file_text(cfg));

    stage = "corpus";
    corpus::Corpus corp = corpus::generate_corpus(cfg.corpus);
    if (cfg.ood) corp = corpus::ood_variant(corp, cfg.corpus.seed);
    if (cfg.upsample_pos > 0.0 || cfg.upsample_neg > 0.0) {
      for (const corpus::Conversation& conv : corp.conversations) {
        std::vector<corpus::QASample> pool = corp.train_samples(conv.id);
        std::vector<corpus::QASample>& all = corp.samples[conv.id];
        auto grow = [&](corpus::Polarity pol, double frac) {
          if (frac <= 0.0) return;
          std::vector<corpus::QASample> grown =
              corpus::upsample(conv, pool, pol, frac, corp.family);
          all.insert(all.end(), grown.begin() + static_cast<long>(pool.size()), grown.end());
          pool = std::move(grown);
        };
        grow(corpus::Polarity::Positive, cfg.upsample_pos);
        grow(corpus::Polarity::Negative, cfg.upsample_neg);
      }
    }
    emit("corpus.jsonl", corpus::to_jsonl(corp));

    stage = "vocab";
    tok::Vocab vocab = tok::build_vocab(corp, true);
    emit("vocab.json", tok::vocab_to_json(vocab));
    model::ModelConfig mcfg = cfg.model;
    if (mcfg.vocab_size == 0)
      mcfg.vocab_size = vocab.size();
    else if (mcfg.vocab_size != vocab.size())
      throw std::invalid_argument("model.vocab_size " + std::to_string(mcfg.vocab_size) +
                                  " does not match the built vocabulary (" +
                                  std::to_string(vocab.size()) + " tokens); use 0 to auto-size");

    stage = "pretrain";
    train::PretrainConfig pcfg;
    pcfg.steps = cfg.pretrain_steps;
    pcfg.seed = cfg.model.seed;  // base identity: finetuning seeds share one pretrained model
    ordered_json pkey = {{"model",
                          {{"layers", mcfg.layers},
                           {"heads", mcfg.heads},
                           {"d_model", mcfg.d_model},
                           {"d_ff", mcfg.d_ff},
                           {"vocab_size", mcfg.vocab_size},
                           {"max_seq", mcfg.max_seq},
                           {"seed", mcfg.seed}}},
                         {"pretrain",
                          {{"steps", pcfg.steps},
                           {"batch_size", pcfg.batch_size},
                           {"lr", pcfg.lr},
                           {"beta1", pcfg.beta1},
                           {"beta2", pcfg.beta2},
                           {"eps", pcfg.eps},
                           {"seed", pcfg.seed}}}};
    std::string cache_key = fnv1a_hex(pkey.dump() + tok::vocab_to_json(vocab));
    model::Model base;
    std::string cache_path =
        pretrain_cache_dir.empty() ? "" : pretrain_cache_dir + "/base_" + cache_key + ".json";
    if (!cache_path.empty() && fs::exists(cache_path)) {
      json cached = json::parse(read_file(cache_path));
      base = model::model_from_json(cached.at("model").get<std::string>());
      out.pretrain_final_loss = cached.at("final_loss").get<double>();
      out.pretrain_cached = true;
    } else {
      base = model::init_model(mcfg);
      out.pretrain_final_loss = train::pretrain_base(base, vocab, pcfg);
      if (!cache_path.empty()) {
        fs::create_directories(pretrain_cache_dir);
        json cached = {{"final_loss", out.pretrain_final_loss},
                       {"model", model::model_to_json(base)}};
        write_file(cache_path, cached.dump());
      }
    }
    ordered_json pj = {{"config", pkey}, {"final_loss", out.pretrain_final_loss}};
    emit("pretrain.json", pj.dump(2) + "\n");

    stage = "train";
    model::AdaptedModel am = model::attach_lora(base, cfg.lora);
    out.timeline = train::run_sequential(am, corp, vocab, cfg.train, &out.log);
    std::string steps_text;
    for (const train::EpochRecord& r : out.log) {
      ordered_json sj = {{"conversation", r.conversation},
                         {"epoch", r.epoch},
                         {"steps", r.steps},
                         {"global_step", r.global_step},
                         {"examples", r.examples},
                         {"mean_loss", r.mean_loss},
                         {"sys_loss", r.sys_loss},
                         {"ins_loss", r.ins_loss},
                         {"question_loss", r.question_loss},
                         {"answer_loss", r.answer_loss}};
      steps_text += sj.dump() + "\n";
    }
    emit("steps.jsonl", steps_text);
    emit("adapter_final.json", model::adapter_to_json(am.adapters));

    stage = "evaluate";
    const std::vector<corpus::QASample> holdout = corp.holdout_samples();
    eval::EvalContext ctx{&vocab, cfg.train.include_sys, kEvalMaxNew};
    out.records = eval::evaluate_grid(out.timeline, ctx, holdout);
    ordered_json recs = ordered_json::array();
    for (const eval::EvalRecord& r : out.records)
      recs.push_back({{"step", r.step},
                      {"conv", r.conv_id},
                      {"polarity", corpus::to_string(r.polarity)},
                      {"predicted", eval::verdict_to_string(r.predicted)},
                      {"correct", r.correct},
                      {"seen", r.seen}});
    emit("records.json", recs.dump(2) + "\n");
    const int n_convs = out.timeline.snapshot_count() - 1;
    out.over_time = eval::over_time_from_records(out.records);
    out.overall = eval::overall_from_records(out.records, n_convs);
    model::AdaptedModel final_model = train::snapshot_model(out.timeline, n_convs);
    out.retention = eval::retention_check(out.timeline.base, final_model,
                                          corpus::generic_pretrain_texts(), vocab);
    for (corpus::Polarity pol : {corpus::Polarity::Positive, corpus::Polarity::Negative})
      for (eval::SeenVariant var : {eval::SeenVariant::Seen, eval::SeenVariant::Unseen}) {
        eval::ConsistencyMatrix m = eval::matrix_from_records(out.records, pol, var);
        std::string name = std::string("matrix_") + eval::variant_to_string(var) + "_" +
                           (pol == corpus::Polarity::Positive ? "positive" : "negative") + ".csv";
        emit(name, matrix_csv(m, n_convs));
      }
    ordered_json metrics;
    metrics["overall"] = report_json(out.overall);
    metrics["over_time"] = {{"positive", series_json(out.over_time.positive)},
                            {"negative", series_json(out.over_time.negative)},
                            {"combined", series_json(out.over_time.combined)}};
    metrics["retention"] = {{"ppl_base", out.retention.ppl_base},
                            {"ppl_adapted", out.retention.ppl_adapted},
                            {"relative_delta", out.retention.relative_delta}};
    metrics["train"] = {{"conversations", n_convs},
                        {"epoch_records", out.log.size()},
                        {"final_mean_loss", out.log.empty() ? 0.0 : out.log.back().mean_loss},
                        {"pretrain_final_loss", out.pretrain_final_loss}};
    out.metrics_json = metrics.dump(2) + "\n";
    emit("metrics.json", out.metrics_json);

    if (!cfg.baselines.variants.empty()) {
      stage = "baselines";
      model::AdaptedModel zero_shot = train::snapshot_model(out.timeline, 0);
      BaselineRow zs;
      zs.label = "0-shot";
      zs.report = eval::evaluate_overall(zero_shot, ctx, holdout);
      for (const corpus::QASample& q : holdout)
        if (q.polarity == corpus::Polarity::Positive) ++zs.positives;
      out.baselines.push_back(zs);
      for (const std::string& v : cfg.baselines.variants) {
        VariantInfo info = variant_info(v);
        std::vector<retrieval::Document> docs = info.docs(corp);
        retrieval::BM25Index index = retrieval::build_index(docs);
        for (int k : cfg.baselines.k_values) {
          retrieval::RagEvalResult res = retrieval::evaluate_rag(zero_shot, ctx, index, holdout, k);
          out.baselines.push_back(rag_row(info.rag_label + " (k=" + std::to_string(k) + ")", res));
        }
      }
      for (const std::string& v : cfg.baselines.variants) {
        VariantInfo info = variant_info(v);
        if (info.perfect_label.empty()) continue;
        std::vector<retrieval::Document> docs = info.docs(corp);
        retrieval::RagEvalResult res = retrieval::evaluate_perfect_recall(zero_shot, ctx, docs, holdout);
        out.baselines.push_back(rag_row(info.perfect_label, res));
      }
      ordered_json bj = ordered_json::array();
      for (const BaselineRow& row : out.baselines) bj.push_back(baseline_json(row));
      emit("baselines.json", bj.dump(2) + "\n");
    }

    stage = "manifest";
    ordered_json man;
    man["status"] = "ok";
    man["config_hash"] = hashes.at("config.json");
    man["files"] = ordered_json::object();
    for (const auto& [name, hash] : hashes) man["files"][name] = hash;
    write_file(out.dir + "/manifest.json", man.dump(2) + "\n");
  } catch (const std::exception& e) {
    if (dir_ready) {
      try {
        ordered_json man;
        man["status"] = "failed";
        man["stage"] = stage;
        man["error"] = e.what();
        man["files"] = ordered_json::object();
        for (const auto& [name, hash] : hashes) man["files"][name] = hash;
        write_file(out.dir + "/manifest.json", man.dump(2) + "\n");
      } catch (...) {
      }
    }
    throw std::runtime_error("stage " + stage + ": " + e.what());
  }
  return out;
}

ReportBundle ablation_sweep(const ExperimentConfig& base, const SweepGrid& grid,
                            const std::string& pretrain_cache_dir) {
  for (const auto& [knob, values] : grid) {
    bool known = false;
    for (const char* k : kSweepKnobs) known = known || knob == k;
    if (!known)
      throw std::invalid_argument("unknown sweep knob \"" + knob +
                                  "\"; valid knobs: " + valid_knob_list());
    if (values.empty())
      throw std::invalid_argument("sweep knob \"" + knob + "\" has no values");
  }
  const bool sys_in_grid = grid.count("include_sys") > 0;
  std::vector<std::pair<std::string, std::vector<std::string>>> axes(grid.begin(), grid.end());

  ReportBundle bundle;
  bundle.base_config_hash = config_hash(base);
  std::set<uint64_t> seeds;

  std::vector<size_t> idx(axes.size(), 0);
  bool done = false;
  while (!done) {
    ExperimentConfig cfg = base;
    std::string label, slug;
    for (size_t a = 0; a < axes.size(); ++a) {
      const std::string& knob = axes[a].first;
      const std::string& value = axes[a].second[idx[a]];
      apply_knob(cfg, knob, value);
      if (!slug.empty()) slug += "_";
      slug += slug_part(knob) + "-" + slug_part(value);
    }
    for (size_t a = 0; a < axes.size(); ++a) {
      std::string part =
          knob_label(cfg, axes[a].first, axes[a].second[idx[a]], sys_in_grid);
      if (!label.empty()) label += ", ";
      label += part;
    }
    if (axes.empty()) {
      label = "default";
      slug = "default";
    }
    cfg.output_dir = base.output_dir + "/" + slug;
    RunArtifacts art = run_experiment(cfg, pretrain_cache_dir);
    bundle.ablation_table.emplace_back(label, art.overall);
    bundle.over_time_table.emplace_back(label, art.over_time);
    if (bundle.baseline_table.empty() && !art.baselines.empty())
      bundle.baseline_table = art.baselines;
    seeds.insert(cfg.train.seed);

    if (axes.empty()) break;
    size_t a = 0;
    while (a < axes.size()) {
      if (++idx[a] < axes[a].second.size()) break;
      idx[a] = 0;
      ++a;
    }
    done = a == axes.size();
  }
  bundle.seeds.assign(seeds.begin(), seeds.end());
  return bundle;
}

std::vector<std::string> emit_report(const ReportBundle& bundle, ReportFormat format,
                                     const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::vector<std::string> written;
  auto put = [&](const std::string& name, const std::string& content) {
    std::string path = out_dir + "/" + name;
    write_file(path, content);
    written.push_back(path);
  };

  if (format == ReportFormat::Markdown) {
    std::string md = "# Results\n\n## Holdout accuracy\n\n";
    md += kMdHeader;
    for (const auto& [setup, r] : bundle.ablation_table)
      md += md_row(setup, fmt1(r.yes_acc), fmt1(r.no_acc), fmt1(r.overall));
    md += "\n## Accuracy over absorbed conversations (mean ± std)\n\n";
    md += kMdHeader;
    for (const auto& [setup, r] : bundle.over_time_table)
      md += md_row(setup, fmt1(r.positive.mean) + " ± " + fmt1(r.positive.std_dev),
                   fmt1(r.negative.mean) + " ± " + fmt1(r.negative.std_dev),
                   fmt1(r.combined.mean) + " ± " + fmt1(r.combined.std_dev));
    if (!bundle.baseline_table.empty()) {
      md += "\n## Retrieval baselines\n\n";
      md += kMdHeader;
      for (const BaselineRow& row : bundle.baseline_table)
        md += md_row(row.label, fmt1(row.report.yes_acc), fmt1(row.report.no_acc),
                     fmt1(row.report.overall));
    }
    md += "\nConfig " + bundle.base_config_hash;
    if (!bundle.seeds.empty()) {
      md += ", seeds ";
      for (size_t i = 0; i < bundle.seeds.size(); ++i)
        md += (i ? ", " : "") + std::to_string(bundle.seeds[i]);
    }
    md += ".\n";
    put("report.md", md);
    return written;
  }

  if (format == ReportFormat::Csv) {
    std::string ab = "setup,yes,no,overall,yes_total,no_total,invalid_rate\n";
    for (const auto& [setup, r] : bundle.ablation_table)
      ab += csv_quote(setup) + "," + num(r.yes_acc) + "," + num(r.no_acc) + "," + num(r.overall) +
            "," + std::to_string(r.yes_total) + "," + std::to_string(r.no_total) + "," +
            num(r.invalid_rate) + "\n";
    put("ablation.csv", ab);

    std::string ot = "setup,yes_mean,yes_std,no_mean,no_std,overall_mean,overall_std\n";
    for (const auto& [setup, r] : bundle.over_time_table)
      ot += csv_quote(setup) + "," + num(r.positive.mean) + "," + num(r.positive.std_dev) + "," +
            num(r.negative.mean) + "," + num(r.negative.std_dev) + "," + num(r.combined.mean) +
            "," + num(r.combined.std_dev) + "\n";
    put("over_time.csv", ot);

    std::string bl =
        "setup,yes,no,overall,yes_total,no_total,invalid_rate,gold_hits,positives,dropped_docs\n";
    for (const BaselineRow& row : bundle.baseline_table)
      bl += csv_quote(row.label) + "," + num(row.report.yes_acc) + "," + num(row.report.no_acc) +
            "," + num(row.report.overall) + "," + std::to_string(row.report.yes_total) + "," +
            std::to_string(row.report.no_total) + "," + num(row.report.invalid_rate) + "," +
            std::to_string(row.gold_hits) + "," + std::to_string(row.positives) + "," +
            std::to_string(row.dropped_docs) + "\n";
    put("baselines.csv", bl);

    std::string pv = "config_hash,seeds\n" + csv_quote(bundle.base_config_hash) + ",\"";
    for (size_t i = 0; i < bundle.seeds.size(); ++i)
      pv += (i ? ";" : "") + std::to_string(bundle.seeds[i]);
    pv += "\"\n";
    put("provenance.csv", pv);
    return written;
  }

  ordered_json j;
  j["ablation"] = ordered_json::array();
  for (const auto& [setup, r] : bundle.ablation_table) {
    ordered_json row = report_json(r);
    ordered_json with_label;
    with_label["setup"] = setup;
    for (auto& [k, v] : row.items()) with_label[k] = v;
    j["ablation"].push_back(with_label);
  }
  j["over_time"] = ordered_json::array();
  for (const auto& [setup, r] : bundle.over_time_table)
    j["over_time"].push_back({{"setup", setup},
                              {"positive", series_json(r.positive)},
                              {"negative", series_json(r.negative)},
                              {"combined", series_json(r.combined)}});
  j["baselines"] = ordered_json::array();
  for (const BaselineRow& row : bundle.baseline_table) j["baselines"].push_back(baseline_json(row));
  j["provenance"] = {{"config_hash", bundle.base_config_hash}, {"seeds", bundle.seeds}};
  put("report.json", j.dump(2) + "\n");
  return written;
}

ReportBundle parse_report_csv(const std::string& dir) {
  ReportBundle bundle;
  {
    const std::string file = dir + "/ablation.csv";
    std::vector<std::string> lines = csv_lines(read_file(file));
    for (size_t i = 1; i < lines.size(); ++i) {
      std::vector<std::string> f = csv_fields(lines[i]);
      eval::AccuracyReport r;
      r.yes_acc = field_num(f, 1, file);
      r.no_acc = field_num(f, 2, file);
      r.overall = field_num(f, 3, file);
      r.yes_total = static_cast<int>(field_num(f, 4, file));
      r.no_total = static_cast<int>(field_num(f, 5, file));
      r.invalid_rate = field_num(f, 6, file);
      bundle.ablation_table.emplace_back(f.at(0), r);
    }
  }
  {
    const std::string file = dir + "/over_time.csv";
    std::vector<std::string> lines = csv_lines(read_file(file));
    for (size_t i = 1; i < lines.size(); ++i) {
      std::vector<std::string> f = csv_fields(lines[i]);
      eval::OverTimeReport r;
      r.positive.mean = field_num(f, 1, file);
      r.positive.std_dev = field_num(f, 2, file);
      r.negative.mean = field_num(f, 3, file);
      r.negative.std_dev = field_num(f, 4, file);
      r.combined.mean = field_num(f, 5, file);
      r.combined.std_dev = field_num(f, 6, file);
      bundle.over_time_table.emplace_back(f.at(0), r);
    }
  }
  {
    const std::string file = dir + "/baselines.csv";
    std::vector<std::string> lines = csv_lines(read_file(file));
    for (size_t i = 1; i < lines.size(); ++i) {
      std::vector<std::string> f = csv_fields(lines[i]);
      BaselineRow row;
      row.label = f.at(0);
      row.report.yes_acc = field_num(f, 1, file);
      row.report.no_acc = field_num(f, 2, file);
      row.report.overall = field_num(f, 3, file);
      row.report.yes_total = static_cast<int>(field_num(f, 4, file));
      row.report.no_total = static_cast<int>(field_num(f, 5, file));
      row.report.invalid_rate = field_num(f, 6, file);
      row.gold_hits = static_cast<int>(field_num(f, 7, file));
      row.positives = static_cast<int>(field_num(f, 8, file));
      row.dropped_docs = static_cast<int>(field_num(f, 9, file));
      bundle.baseline_table.push_back(row);
    }
  }
  {
    const std::string file = dir + "/provenance.csv";
    std::vector<std::string> lines = csv_lines(read_file(file));
    if (lines.size() < 2) throw std::runtime_error(file + ": missing data row");
    std::vector<std::string> f = csv_fields(lines[1]);
    bundle.base_config_hash = f.at(0);
    if (f.size() > 1 && !f[1].empty()) {
      std::string seeds = f[1];
      if (seeds.size() >= 2 && seeds.front() == '"' && seeds.back() == '"')
        seeds = seeds.substr(1, seeds.size() - 2);
      std::stringstream ss(seeds);
      std::string part;
      while (std::getline(ss, part, ';'))
        if (!part.empty()) bundle.seeds.push_back(std::stoull(part));
    }
  }
  return bundle;
}

}  // namespace convmem::exp
