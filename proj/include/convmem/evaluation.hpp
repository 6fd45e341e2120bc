#pragma once

#include <string>
#include <vector>

#include "convmem/corpus.hpp"
#include "convmem/model.hpp"
#include "convmem/tokenizer.hpp"
#include "convmem/training.hpp"

namespace convmem::eval {

enum class Verdict { Yes, No, Invalid };

std::string verdict_to_string(Verdict v);

// First alphabetic word of the text, case-insensitively: "yes" / "no" map to
// the verdicts, anything else (including empty output) is Invalid.
Verdict classify_answer(const std::string& text);

struct EvalRecord {
  int step = 0;     // conversations trained before this evaluation
  int conv_id = 0;  // conversation the question probes
  corpus::Polarity polarity = corpus::Polarity::Positive;
  Verdict predicted = Verdict::Invalid;
  bool correct = false;
  bool seen = false;  // conv_id < step
};

struct AccuracyReport {
  double yes_acc = 0.0;  // percentages
  double no_acc = 0.0;
  double overall = 0.0;
  int yes_total = 0;
  int no_total = 0;
  double invalid_rate = 0.0;
};

struct EvalContext {
  const tok::Vocab* vocab = nullptr;
  bool include_sys = true;
  int max_new = 12;
};

// Renders sys/ins (+ optional context docs) + question, greedy-decodes to EOS
// or max_new, and returns the detokenized continuation.
std::string generate_answer(const model::AdaptedModel& m, const EvalContext& ctx,
                            const std::vector<std::string>& context_docs,
                            const std::string& question);

AccuracyReport accuracy_from_records(const std::vector<EvalRecord>& records);

// One generation per holdout question against a single frozen model. When
// records is given, one EvalRecord per question is appended with the given
// step index.
AccuracyReport evaluate_overall(const model::AdaptedModel& m, const EvalContext& ctx,
                                const std::vector<corpus::QASample>& holdout,
                                std::vector<EvalRecord>* records = nullptr, int step = -1);

struct OverTimeSeries {
  std::vector<double> series;  // accuracy at steps t = 1..N over conversations 0..t-1
  double mean = 0.0;
  double std_dev = 0.0;  // population convention
};

struct OverTimeReport {
  OverTimeSeries positive;
  OverTimeSeries negative;
  OverTimeSeries combined;
};

// Walks the timeline: snapshot t answers the closed holdout questions of the
// t conversations already absorbed. Throws when the timeline is missing
// snapshots for the holdout's conversations.
OverTimeReport evaluate_over_time(const train::Timeline& timeline, const EvalContext& ctx,
                                  const std::vector<corpus::QASample>& holdout,
                                  std::vector<EvalRecord>* records = nullptr);

enum class CellStatus { Correct, Incorrect, NotYetSeen };
enum class SeenVariant { Seen, Unseen };

std::string cell_to_string(CellStatus s);
std::string variant_to_string(SeenVariant v);

struct ConsistencyMatrix {
  corpus::Polarity polarity = corpus::Polarity::Positive;
  SeenVariant variant = SeenVariant::Seen;
  // grid[t][c]: snapshot after t conversations vs conversation c's closed
  // holdout question. The Seen variant leaves c >= t untouched as NotYetSeen;
  // the Unseen variant answers every cell.
  std::vector<std::vector<CellStatus>> grid;
};

ConsistencyMatrix consistency_matrix(const train::Timeline& timeline, const EvalContext& ctx,
                                     const std::vector<corpus::QASample>& holdout,
                                     corpus::Polarity polarity, SeenVariant variant);

// Every snapshot against every closed holdout question, both polarities.
// Ordered snapshot-major, then conversation, positive before negative; the
// over-time, matrix, and overall views below slice this one cube so a full
// report costs a single generation pass.
std::vector<EvalRecord> evaluate_grid(const train::Timeline& timeline, const EvalContext& ctx,
                                      const std::vector<corpus::QASample>& holdout);

OverTimeReport over_time_from_records(const std::vector<EvalRecord>& records);
ConsistencyMatrix matrix_from_records(const std::vector<EvalRecord>& records,
                                      corpus::Polarity polarity, SeenVariant variant);
AccuracyReport overall_from_records(const std::vector<EvalRecord>& records, int step);

struct RetentionReport {
  double ppl_base = 0.0;
  double ppl_adapted = 0.0;
  double relative_delta = 0.0;  // (ppl_adapted - ppl_base) / ppl_base
};

// Token-level perplexity of both models over held-out plain text.
RetentionReport retention_check(const model::Model& base, const model::AdaptedModel& adapted,
                                const std::vector<std::string>& generic_set,
                                const tok::Vocab& vocab);

}  // namespace convmem::eval
