#pragma once
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "convmem/corpus.hpp"
#include "convmem/matrix.hpp"
#include "convmem/model.hpp"
#include "convmem/tokenizer.hpp"

namespace convmem::train {

// Which rendered segments contribute to the loss, and at what weight.
enum class LossMode {
  WeightedFull,        // preamble at 1, question+answer at lambda
  StandardCE,          // everything at 1
  QAOnlyCE,            // question+answer at 1, preamble dropped
  QAOnlyWeighted,      // question+answer at lambda, preamble dropped
  AnswerOnlyWeighted,  // answer alone boosted to lambda
};
const char* to_string(LossMode m);
LossMode loss_mode_from_string(const std::string& s);

struct SegmentWeights {
  double sys = 1.0;
  double ins = 1.0;
  double question = 1.0;
  double answer = 1.0;
};
SegmentWeights segment_weights(LossMode mode, double lambda);

// Weighted sum over next-token predictions plus the unweighted per-segment
// cross-entropy totals. A position contributes only when the token it
// predicts falls inside one of the four spans, so the trailing EOS target
// never enters the loss under any mode.
struct LossBreakdown {
  double loss = 0.0;
  double sys_sum = 0.0, ins_sum = 0.0, question_sum = 0.0, answer_sum = 0.0;
  int sys_n = 0, ins_n = 0, question_n = 0, answer_n = 0;
  int positions() const { return sys_n + ins_n + question_n + answer_n; }
};

LossBreakdown weighted_ce_loss(const Matrix& logits, const tok::TrainingExample& ex,
                               LossMode mode, double lambda, Matrix* dlogits = nullptr);

// Adam with bias correction. Moment buffers are allocated on the first
// update and keyed by position in the parameter list, so the same optimizer
// can carry state across every conversation of a run.
class AdamOptimizer {
 public:
  AdamOptimizer(double lr = 0.001, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void update(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads);
  long long steps() const { return step_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long long step_ = 0;
  std::vector<Matrix> m_, v_;
};

std::vector<Matrix*> adapter_params(model::AdaptedModel& model);
std::vector<const Matrix*> adapter_grads(const model::GradientSet& grads);

struct TrainerConfig {
  int epochs = 10;
  int batch_size = 8;
  double lambda = 10.0;
  LossMode mode = LossMode::WeightedFull;
  bool include_sys = true;
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  uint64_t seed = 42;
};
void validate_trainer_config(const TrainerConfig& cfg);

// One log line per epoch; loss figures are means over the epoch's examples,
// the segment entries being the unweighted per-segment CE sums.
struct EpochRecord {
  int conversation = -1;
  int epoch = 0;
  int steps = 0;            // optimizer steps this epoch
  long long global_step = 0;  // cumulative optimizer steps after the epoch
  int examples = 0;
  double mean_loss = 0.0;
  double sys_loss = 0.0, ins_loss = 0.0, question_loss = 0.0, answer_loss = 0.0;
};

// One conversation's worth of adapter updates: epochs x shuffled batches.
// The shuffle is seeded from (cfg.seed, conv_id, epoch) so runs replay
// exactly, and the base weights are never touched.
void train_on_conversation(model::AdaptedModel& model,
                           const std::vector<tok::TrainingExample>& examples,
                           const TrainerConfig& cfg, int conv_id, AdamOptimizer& opt,
                           std::vector<EpochRecord>* log = nullptr);

// Hands out each conversation's encoded training samples exactly once;
// the sequential loop consumes a conversation and moves on for good.
class SampleStore {
 public:
  SampleStore(const corpus::Corpus& corpus, const tok::Vocab& vocab, bool include_sys);

  std::vector<tok::TrainingExample> take(int conv_id);
  bool taken(int conv_id) const { return consumed_.count(conv_id) > 0; }

 private:
  std::map<int, std::vector<tok::TrainingExample>> pending_;
  std::set<int> consumed_;
};

// The run's replayable state: frozen base weights plus the adapter as it
// stood before training and after each conversation.
struct Timeline {
  model::Model base;
  model::AdapterSet initial;
  struct Step {
    int conv_id = -1;
    model::AdapterSet adapters;
  };
  std::vector<Step> steps;

  int snapshot_count() const { return static_cast<int>(steps.size()) + 1; }
};

// t = 0 is the untrained attach point; t = k is the state after k conversations.
model::AdaptedModel snapshot_model(const Timeline& timeline, int t);

using ConversationHook = std::function<void(int conv_index, const model::AdaptedModel& model)>;

// Conversations in id order, one finetuning pass each, optimizer state
// carried through, each conversation's samples consumed for good once
// trained; after_each fires once a conversation has been absorbed.
Timeline run_sequential(model::AdaptedModel& model, const corpus::Corpus& corpus,
                        const tok::Vocab& vocab, const TrainerConfig& cfg,
                        std::vector<EpochRecord>* log = nullptr,
                        const ConversationHook& after_each = nullptr);

struct PretrainConfig {
  int steps = 1200;
  int batch_size = 8;
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  uint64_t seed = 42;
};

// Full-parameter language-model training on a synthetic stream of formatted
// documents, questions and plain text. Loss and gradients are normalized per
// predicted token since example lengths vary a lot. Returns the final step's
// loss (0 when no steps ran); losses, when given, receives one entry per step.
double pretrain_base(model::Model& model, const tok::Vocab& vocab, const PretrainConfig& cfg,
                     std::vector<double>* losses = nullptr);

}  // namespace convmem::train
