#include "convmem/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <stdexcept>

namespace convmem::eval {
namespace {

double pct(long num, long den) {
  return den == 0 ? 0.0 : 100.0 * static_cast<double>(num) / static_cast<double>(den);
}

// Closed holdout questions keyed by conversation, one per polarity.
struct HoldoutView {
  std::map<int, const corpus::QASample*> positive;
  std::map<int, const corpus::QASample*> negative;
  int num_convs = 0;
};

HoldoutView closed_view(const std::vector<corpus::QASample>& holdout) {
  HoldoutView v;
  for (const auto& s : holdout) {
    if (s.form != corpus::Form::Closed) continue;
    auto& side = s.polarity == corpus::Polarity::Positive ? v.positive : v.negative;
    if (!side.emplace(s.conv_id, &s).second)
      throw std::invalid_argument("holdout carries duplicate closed questions for conversation " +
                                  std::to_string(s.conv_id));
  }
  v.num_convs = static_cast<int>(v.positive.size());
  for (int c = 0; c < v.num_convs; ++c)
    if (v.positive.count(c) == 0 || v.negative.count(c) == 0)
      throw std::invalid_argument("holdout must cover conversations 0..N-1 with one closed "
                                  "question per polarity; conversation " +
                                  std::to_string(c) + " is incomplete");
  if (v.negative.size() != v.positive.size())
    throw std::invalid_argument("holdout polarities are unbalanced");
  return v;
}

void require_timeline_covers(const train::Timeline& timeline, int num_convs) {
  if (timeline.snapshot_count() != num_convs + 1)
    throw std::invalid_argument("timeline holds " + std::to_string(timeline.snapshot_count()) +
                                " snapshots but the holdout spans " + std::to_string(num_convs) +
                                " conversations");
  for (int i = 0; i < num_convs; ++i)
    if (timeline.steps[static_cast<size_t>(i)].conv_id != i)
      throw std::invalid_argument("timeline step " + std::to_string(i) +
                                  " trained conversation " +
                                  std::to_string(timeline.steps[static_cast<size_t>(i)].conv_id) +
                                  "; expected id order");
}

EvalRecord score_one(const model::AdaptedModel& m, const EvalContext& ctx,
                     const corpus::QASample& q, int step) {
  EvalRecord r;
  r.step = step;
  r.conv_id = q.conv_id;
  r.polarity = q.polarity;
  r.predicted = classify_answer(generate_answer(m, ctx, {}, q.question));
  r.correct = (r.predicted == Verdict::Yes && q.polarity == corpus::Polarity::Positive) ||
              (r.predicted == Verdict::No && q.polarity == corpus::Polarity::Negative);
  r.seen = q.conv_id < step;
  return r;
}

void finalize_series(OverTimeSeries& s) {
  if (s.series.empty()) return;
  double sum = 0.0;
  for (double v : s.series) sum += v;
  s.mean = sum / static_cast<double>(s.series.size());
  double sq = 0.0;
  for (double v : s.series) sq += (v - s.mean) * (v - s.mean);
  s.std_dev = std::sqrt(sq / static_cast<double>(s.series.size()));
}

int grid_steps(const std::vector<EvalRecord>& records) {
  int n = 0;
  for (const auto& r : records) n = std::max(n, r.step);
  return n;
}

}  // namespace

std::string verdict_to_string(Verdict v) {
  switch (v) {
    case Verdict::Yes: return "yes";
    case Verdict::No: return "no";
    case Verdict::Invalid: return "invalid";
  }
  return "invalid";
}

Verdict classify_answer(const std::string& text) {
  size_t i = 0;
  while (i < text.size() && !std::isalpha(static_cast<unsigned char>(text[i]))) ++i;
  std::string word;
  while (i < text.size() && std::isalpha(static_cast<unsigned char>(text[i]))) {
    word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(text[i]))));
    ++i;
  }
  if (word == "yes") return Verdict::Yes;
  if (word == "no") return Verdict::No;
  return Verdict::Invalid;
}

std::string generate_answer(const model::AdaptedModel& m, const EvalContext& ctx,
                            const std::vector<std::string>& context_docs,
                            const std::string& question) {
  if (ctx.vocab == nullptr) throw std::invalid_argument("eval context has no vocabulary");
  std::vector<int> prompt =
      tok::encode_prompt(ctx.include_sys ? corpus::run_sys_text() : std::string(),
                         corpus::run_ins_text(), context_docs, question, *ctx.vocab);
  std::vector<int> continuation = model::generate(m, prompt, ctx.max_new, tok::kEos);
  return tok::decode(continuation, *ctx.vocab);
}

AccuracyReport accuracy_from_records(const std::vector<EvalRecord>& records) {
  long yes_n = 0, yes_ok = 0, no_n = 0, no_ok = 0, invalid = 0;
  for (const auto& r : records) {
    if (r.polarity == corpus::Polarity::Positive) {
      ++yes_n;
      yes_ok += r.correct ? 1 : 0;
    } else {
      ++no_n;
      no_ok += r.correct ? 1 : 0;
    }
    invalid += r.predicted == Verdict::Invalid ? 1 : 0;
  }
  AccuracyReport rep;
  rep.yes_total = static_cast<int>(yes_n);
  rep.no_total = static_cast<int>(no_n);
  rep.yes_acc = pct(yes_ok, yes_n);
  rep.no_acc = pct(no_ok, no_n);
  rep.overall = pct(yes_ok + no_ok, yes_n + no_n);
  rep.invalid_rate = pct(invalid, yes_n + no_n);
  return rep;
}

AccuracyReport evaluate_overall(const model::AdaptedModel& m, const EvalContext& ctx,
                                const std::vector<corpus::QASample>& holdout,
                                std::vector<EvalRecord>* records, int step) {
  std::vector<EvalRecord> local;
  for (const auto& q : holdout) local.push_back(score_one(m, ctx, q, step));
  if (records) records->insert(records->end(), local.begin(), local.end());
  return accuracy_from_records(local);
}

OverTimeReport evaluate_over_time(const train::Timeline& timeline, const EvalContext& ctx,
                                  const std::vector<corpus::QASample>& holdout,
                                  std::vector<EvalRecord>* records) {
  HoldoutView v = closed_view(holdout);
  require_timeline_covers(timeline, v.num_convs);
  OverTimeReport rep;
  for (int t = 1; t <= v.num_convs; ++t) {
    model::AdaptedModel snap = train::snapshot_model(timeline, t);
    long pos_ok = 0, neg_ok = 0;
    for (int c = 0; c < t; ++c) {
      EvalRecord rp = score_one(snap, ctx, *v.positive.at(c), t);
      EvalRecord rn = score_one(snap, ctx, *v.negative.at(c), t);
      pos_ok += rp.correct ? 1 : 0;
      neg_ok += rn.correct ? 1 : 0;
      if (records) {
        records->push_back(rp);
        records->push_back(rn);
      }
    }
    rep.positive.series.push_back(pct(pos_ok, t));
    rep.negative.series.push_back(pct(neg_ok, t));
    rep.combined.series.push_back(pct(pos_ok + neg_ok, 2L * t));
  }
  finalize_series(rep.positive);
  finalize_series(rep.negative);
  finalize_series(rep.combined);
  return rep;
}

std::string cell_to_string(CellStatus s) {
  switch (s) {
    case CellStatus::Correct: return "correct";
    case CellStatus::Incorrect: return "incorrect";
    case CellStatus::NotYetSeen: return "not_yet_seen";
  }
  return "not_yet_seen";
}

std::string variant_to_string(SeenVariant v) {
  return v == SeenVariant::Seen ? "seen" : "unseen";
}

ConsistencyMatrix consistency_matrix(const train::Timeline& timeline, const EvalContext& ctx,
                                     const std::vector<corpus::QASample>& holdout,
                                     corpus::Polarity polarity, SeenVariant variant) {
  HoldoutView v = closed_view(holdout);
  require_timeline_covers(timeline, v.num_convs);
  const auto& side = polarity == corpus::Polarity::Positive ? v.positive : v.negative;
  ConsistencyMatrix m;
  m.polarity = polarity;
  m.variant = variant;
  for (int t = 0; t <= v.num_convs; ++t) {
    model::AdaptedModel snap = train::snapshot_model(timeline, t);
    std::vector<CellStatus> row(static_cast<size_t>(v.num_convs), CellStatus::NotYetSeen);
    for (int c = 0; c < v.num_convs; ++c) {
      if (variant == SeenVariant::Seen && c >= t) continue;
      EvalRecord r = score_one(snap, ctx, *side.at(c), t);
      row[static_cast<size_t>(c)] = r.correct ? CellStatus::Correct : CellStatus::Incorrect;
    }
    m.grid.push_back(std::move(row));
  }
  return m;
}

std::vector<EvalRecord> evaluate_grid(const train::Timeline& timeline, const EvalContext& ctx,
                                      const std::vector<corpus::QASample>& holdout) {
  HoldoutView v = closed_view(holdout);
  require_timeline_covers(timeline, v.num_convs);
  std::vector<EvalRecord> out;
  for (int t = 0; t <= v.num_convs; ++t) {
    model::AdaptedModel snap = train::snapshot_model(timeline, t);
    for (int c = 0; c < v.num_convs; ++c) {
      out.push_back(score_one(snap, ctx, *v.positive.at(c), t));
      out.push_back(score_one(snap, ctx, *v.negative.at(c), t));
    }
  }
  return out;
}

OverTimeReport over_time_from_records(const std::vector<EvalRecord>& records) {
  int n = grid_steps(records);
  std::vector<long> pos_ok(static_cast<size_t>(n) + 1, 0), neg_ok(static_cast<size_t>(n) + 1, 0);
  for (const auto& r : records) {
    if (!r.seen || !r.correct) continue;
    auto& side = r.polarity == corpus::Polarity::Positive ? pos_ok : neg_ok;
    ++side[static_cast<size_t>(r.step)];
  }
  OverTimeReport rep;
  for (int t = 1; t <= n; ++t) {
    rep.positive.series.push_back(pct(pos_ok[static_cast<size_t>(t)], t));
    rep.negative.series.push_back(pct(neg_ok[static_cast<size_t>(t)], t));
    rep.combined.series.push_back(
        pct(pos_ok[static_cast<size_t>(t)] + neg_ok[static_cast<size_t>(t)], 2L * t));
  }
  finalize_series(rep.positive);
  finalize_series(rep.negative);
  finalize_series(rep.combined);
  return rep;
}

ConsistencyMatrix matrix_from_records(const std::vector<EvalRecord>& records,
                                      corpus::Polarity polarity, SeenVariant variant) {
  int n = grid_steps(records);
  ConsistencyMatrix m;
  m.polarity = polarity;
  m.variant = variant;
  m.grid.assign(static_cast<size_t>(n) + 1,
                std::vector<CellStatus>(static_cast<size_t>(n), CellStatus::NotYetSeen));
  for (const auto& r : records) {
    if (r.polarity != polarity) continue;
    if (variant == SeenVariant::Seen && r.conv_id >= r.step) continue;
    m.grid[static_cast<size_t>(r.step)][static_cast<size_t>(r.conv_id)] =
        r.correct ? CellStatus::Correct : CellStatus::Incorrect;
  }
  return m;
}

AccuracyReport overall_from_records(const std::vector<EvalRecord>& records, int step) {
  std::vector<EvalRecord> subset;
  for (const auto& r : records)
    if (r.step == step) subset.push_back(r);
  return accuracy_from_records(subset);
}

RetentionReport retention_check(const model::Model& base, const model::AdaptedModel& adapted,
                                const std::vector<std::string>& generic_set,
                                const tok::Vocab& vocab) {
  if (generic_set.empty())
    throw std::invalid_argument("retention check needs at least one held-out text");
  double ce_base = 0.0, ce_adapted = 0.0;
  long positions = 0;
  for (const auto& text : generic_set) {
    tok::TrainingExample ex = tok::assemble_example("", "", {}, "", text, vocab);
    Matrix logits_b = model::forward(base, ex.tokens);
    Matrix logits_a = model::forward(adapted, ex.tokens);
    train::LossBreakdown lb = train::weighted_ce_loss(logits_b, ex, train::LossMode::StandardCE, 1.0);
    train::LossBreakdown la = train::weighted_ce_loss(logits_a, ex, train::LossMode::StandardCE, 1.0);
    ce_base += lb.loss;
    ce_adapted += la.loss;
    positions += lb.positions();
  }
  if (positions == 0) throw std::invalid_argument("retention texts contain no scored tokens");
  RetentionReport rep;
  rep.ppl_base = std::exp(ce_base / static_cast<double>(positions));
  rep.ppl_adapted = std::exp(ce_adapted / static_cast<double>(positions));
  rep.relative_delta = (rep.ppl_adapted - rep.ppl_base) / rep.ppl_base;
  return rep;
}

}  // namespace convmem::eval
