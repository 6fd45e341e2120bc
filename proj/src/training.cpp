#include "convmem/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "convmem/rng.hpp"

namespace convmem::train {
namespace {

void scale_gradients(model::GradientSet& g, double factor) {
  auto scale = [factor](Matrix& m) {
    for (double& v : m.d) v *= factor;
  };
  scale(g.tok_emb);
  scale(g.pos_emb);
  for (auto& L : g.layers) {
    scale(L.ln1_g);
    scale(L.ln1_b);
    scale(L.wq);
    scale(L.wk);
    scale(L.wv);
    scale(L.wo);
    scale(L.ln2_g);
    scale(L.ln2_b);
    scale(L.w1);
    scale(L.w2);
  }
  scale(g.lnf_g);
  scale(g.lnf_b);
  scale(g.w_head);
  for (auto& f : g.lora) {
    scale(f.a);
    scale(f.b);
  }
}

void collect_full(model::Model& m, model::GradientSet& g, std::vector<Matrix*>& params,
                  std::vector<const Matrix*>& grads) {
  auto take = [&](Matrix& p, const Matrix& gr) {
    params.push_back(&p);
    grads.push_back(&gr);
  };
  take(m.tok_emb, g.tok_emb);
  take(m.pos_emb, g.pos_emb);
  for (size_t i = 0; i < m.layers.size(); ++i) {
    take(m.layers[i].ln1_g, g.layers[i].ln1_g);
    take(m.layers[i].ln1_b, g.layers[i].ln1_b);
    take(m.layers[i].wq, g.layers[i].wq);
    take(m.layers[i].wk, g.layers[i].wk);
    take(m.layers[i].wv, g.layers[i].wv);
    take(m.layers[i].wo, g.layers[i].wo);
    take(m.layers[i].ln2_g, g.layers[i].ln2_g);
    take(m.layers[i].ln2_b, g.layers[i].ln2_b);
    take(m.layers[i].w1, g.layers[i].w1);
    take(m.layers[i].w2, g.layers[i].w2);
  }
  take(m.lnf_g, g.lnf_g);
  take(m.lnf_b, g.lnf_b);
  take(m.w_head, g.w_head);
}

tok::TrainingExample draw_format_example(Rng& rng, const tok::Vocab& vocab) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    corpus::FormatSample fs = corpus::make_format_sample(rng);
    std::string sys, ins;
    if (!fs.question.empty()) {
      if (rng.chance(0.65)) {
        sys = rng.pick(corpus::pretrain_sys_bank());
        // Vary system-prose length so long multi-sentence preambles are familiar.
        while (rng.chance(0.5)) sys += " " + rng.pick(corpus::pretrain_sys_more_bank());
      }
      if (rng.chance(0.5)) ins = rng.pick(corpus::pretrain_ins_bank());
    }
    try {
      return tok::assemble_example(sys, ins, fs.context_docs, fs.question, fs.answer, vocab);
    } catch (const std::length_error&) {
      // Rare oversized draw; take the next one.
    }
  }
  throw std::runtime_error("could not draw a pretraining example under the token limit");
}

}  // namespace

const char* to_string(LossMode m) {
  switch (m) {
    case LossMode::WeightedFull: return "weighted_full";
    case LossMode::StandardCE: return "standard_ce";
    case LossMode::QAOnlyCE: return "qa_only_ce";
    case LossMode::QAOnlyWeighted: return "qa_only_weighted";
    case LossMode::AnswerOnlyWeighted: return "answer_only_weighted";
  }
  return "weighted_full";
}

LossMode loss_mode_from_string(const std::string& s) {
  if (s == "weighted_full") return LossMode::WeightedFull;
  if (s == "standard_ce") return LossMode::StandardCE;
  if (s == "qa_only_ce") return LossMode::QAOnlyCE;
  if (s == "qa_only_weighted") return LossMode::QAOnlyWeighted;
  if (s == "answer_only_weighted") return LossMode::AnswerOnlyWeighted;
  throw std::invalid_argument("unknown loss mode: " + s);
}

SegmentWeights segment_weights(LossMode mode, double lambda) {
  switch (mode) {
    case LossMode::WeightedFull: return {1.0, 1.0, lambda, lambda};
    case LossMode::StandardCE: return {1.0, 1.0, 1.0, 1.0};
    case LossMode::QAOnlyCE: return {0.0, 0.0, 1.0, 1.0};
    case LossMode::QAOnlyWeighted: return {0.0, 0.0, lambda, lambda};
    case LossMode::AnswerOnlyWeighted: return {1.0, 1.0, 1.0, lambda};
  }
  return {};
}

LossBreakdown weighted_ce_loss(const Matrix& logits, const tok::TrainingExample& ex,
                               LossMode mode, double lambda, Matrix* dlogits) {
  const int N = static_cast<int>(ex.tokens.size());
  if (logits.rows != N)
    throw std::invalid_argument("logit rows " + std::to_string(logits.rows) +
                                " do not match " + std::to_string(N) + " tokens");
  SegmentWeights w = segment_weights(mode, lambda);
  if (dlogits) *dlogits = Matrix(logits.rows, logits.cols);

  LossBreakdown out;
  for (int t = 0; t + 1 < N; ++t) {
    const int u = t + 1;  // the token this position predicts
    double weight;
    double* sum;
    int* count;
    if (u >= ex.sys.begin && u < ex.sys.end) {
      weight = w.sys;
      sum = &out.sys_sum;
      count = &out.sys_n;
    } else if (u >= ex.ins.begin && u < ex.ins.end) {
      weight = w.ins;
      sum = &out.ins_sum;
      count = &out.ins_n;
    } else if (u >= ex.question.begin && u < ex.question.end) {
      weight = w.question;
      sum = &out.question_sum;
      count = &out.question_n;
    } else if (u >= ex.answer.begin && u < ex.answer.end) {
      weight = w.answer;
      sum = &out.answer_sum;
      count = &out.answer_n;
    } else {
      continue;  // target is the trailing EOS
    }

    const double* row = logits.row(t);
    double best = row[0];
    for (int c = 1; c < logits.cols; ++c) best = std::max(best, row[c]);
    double denom = 0.0;
    for (int c = 0; c < logits.cols; ++c) denom += std::exp(row[c] - best);
    const int target = ex.tokens[static_cast<size_t>(u)];
    double ce = best + std::log(denom) - row[target];

    out.loss += weight * ce;
    *sum += ce;
    ++*count;

    if (dlogits && weight != 0.0) {
      double* g = dlogits->row(t);
      double inv = 1.0 / denom;
      for (int c = 0; c < logits.cols; ++c) g[c] = weight * std::exp(row[c] - best) * inv;
      g[target] -= weight;
    }
  }
  return out;
}

AdamOptimizer::AdamOptimizer(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamOptimizer::update(const std::vector<Matrix*>& params,
                           const std::vector<const Matrix*>& grads) {
  if (params.size() != grads.size())
    throw std::invalid_argument("parameter and gradient lists differ in length");
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i] = Matrix(params[i]->rows, params[i]->cols);
      v_[i] = Matrix(params[i]->rows, params[i]->cols);
    }
  }
  if (m_.size() != params.size())
    throw std::invalid_argument("optimizer was built for a different parameter list");

  ++step_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    const Matrix& g = *grads[i];
    if (!p.same_shape(g) || !p.same_shape(m_[i]))
      throw std::invalid_argument("parameter shapes changed between optimizer steps");
    for (size_t j = 0; j < p.d.size(); ++j) {
      double gj = g.d[j];
      double& mj = m_[i].d[j];
      double& vj = v_[i].d[j];
      mj = beta1_ * mj + (1.0 - beta1_) * gj;
      vj = beta2_ * vj + (1.0 - beta2_) * gj * gj;
      p.d[j] -= lr_ * (mj / bc1) / (std::sqrt(vj / bc2) + eps_);
    }
  }
}

std::vector<Matrix*> adapter_params(model::AdaptedModel& m) {
  std::vector<Matrix*> out;
  for (auto& f : m.adapters.factors) {
    if (!f.active()) continue;
    out.push_back(&f.a);
    out.push_back(&f.b);
  }
  return out;
}

std::vector<const Matrix*> adapter_grads(const model::GradientSet& grads) {
  std::vector<const Matrix*> out;
  for (const auto& f : grads.lora) {
    if (!f.active()) continue;
    out.push_back(&f.a);
    out.push_back(&f.b);
  }
  return out;
}

void validate_trainer_config(const TrainerConfig& cfg) {
  if (cfg.epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (cfg.batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (cfg.lambda < 1.0) throw std::invalid_argument("lambda must be >= 1");
  if (cfg.lr <= 0.0) throw std::invalid_argument("learning rate must be positive");
  if (cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 < 0.0 || cfg.beta2 >= 1.0)
    throw std::invalid_argument("adam betas must lie in [0, 1)");
  if (cfg.eps <= 0.0) throw std::invalid_argument("adam epsilon must be positive");
}

void train_on_conversation(model::AdaptedModel& m,
                           const std::vector<tok::TrainingExample>& examples,
                           const TrainerConfig& cfg, int conv_id, AdamOptimizer& opt,
                           std::vector<EpochRecord>* log) {
  validate_trainer_config(cfg);
  if (examples.empty())
    throw std::invalid_argument("conversation " + std::to_string(conv_id) +
                                " has no training samples");
  auto params = adapter_params(m);
  if (params.empty()) throw std::invalid_argument("model has no active adapters to train");

  model::GradientSet grads;
  grads.init_like(m, /*adapter_only_grads=*/true);
  auto gptrs = adapter_grads(grads);

  std::vector<size_t> order(examples.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), size_t{0});
    Rng shuffler(mix_seed(cfg.seed, static_cast<uint64_t>(conv_id), static_cast<uint64_t>(epoch)));
    shuffler.shuffle(order);

    EpochRecord rec;
    rec.conversation = conv_id;
    rec.epoch = epoch;
    rec.examples = static_cast<int>(examples.size());
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      grads.zero();
      for (size_t i = start; i < stop; ++i) {
        const tok::TrainingExample& ex = examples[order[i]];
        model::ForwardCache cache;
        Matrix logits = model::forward(m, ex.tokens, &cache);
        Matrix dlogits;
        LossBreakdown lb = weighted_ce_loss(logits, ex, cfg.mode, cfg.lambda, &dlogits);
        rec.mean_loss += lb.loss;
        rec.sys_loss += lb.sys_sum;
        rec.ins_loss += lb.ins_sum;
        rec.question_loss += lb.question_sum;
        rec.answer_loss += lb.answer_sum;
        model::backward(m, cache, dlogits, grads);
      }
      scale_gradients(grads, 1.0 / static_cast<double>(stop - start));
      opt.update(params, gptrs);
      ++rec.steps;
    }
    if (log) {
      const double inv = 1.0 / static_cast<double>(examples.size());
      rec.mean_loss *= inv;
      rec.sys_loss *= inv;
      rec.ins_loss *= inv;
      rec.question_loss *= inv;
      rec.answer_loss *= inv;
      rec.global_step = opt.steps();
      log->push_back(rec);
    }
  }
}

SampleStore::SampleStore(const corpus::Corpus& corpus, const tok::Vocab& vocab,
                         bool include_sys) {
  for (const auto& conv : corpus.conversations) {
    std::vector<tok::TrainingExample> encoded;
    for (const auto& s : corpus.train_samples(conv.id))
      encoded.push_back(tok::encode_example(s, include_sys, vocab));
    pending_.emplace(conv.id, std::move(encoded));
  }
}

std::vector<tok::TrainingExample> SampleStore::take(int conv_id) {
  auto it = pending_.find(conv_id);
  if (it == pending_.end()) {
    if (consumed_.count(conv_id))
      throw std::runtime_error("training samples for conversation " + std::to_string(conv_id) +
                               " were already consumed");
    throw std::invalid_argument("no such conversation: " + std::to_string(conv_id));
  }
  std::vector<tok::TrainingExample> out = std::move(it->second);
  pending_.erase(it);
  consumed_.insert(conv_id);
  return out;
}

model::AdaptedModel snapshot_model(const Timeline& timeline, int t) {
  if (t < 0 || t >= timeline.snapshot_count())
    throw std::out_of_range("timeline has no snapshot " + std::to_string(t));
  model::AdaptedModel out;
  out.base = timeline.base;
  out.adapters = t == 0 ? timeline.initial : timeline.steps[static_cast<size_t>(t) - 1].adapters;
  return out;
}

Timeline run_sequential(model::AdaptedModel& m, const corpus::Corpus& corpus,
                        const tok::Vocab& vocab, const TrainerConfig& cfg,
                        std::vector<EpochRecord>* log, const ConversationHook& after_each) {
  validate_trainer_config(cfg);
  Timeline timeline;
  timeline.base = m.base;
  timeline.initial = m.adapters;
  SampleStore store(corpus, vocab, cfg.include_sys);
  AdamOptimizer opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
  for (const auto& conv : corpus.conversations) {
    std::vector<tok::TrainingExample> examples = store.take(conv.id);
    train_on_conversation(m, examples, cfg, conv.id, opt, log);
    timeline.steps.push_back({conv.id, m.adapters});
    if (after_each) after_each(conv.id, m);
  }
  return timeline;
}

double pretrain_base(model::Model& base, const tok::Vocab& vocab, const PretrainConfig& cfg,
                     std::vector<double>* losses) {
  if (cfg.steps < 0) throw std::invalid_argument("pretrain steps must be >= 0");
  if (cfg.batch_size < 1) throw std::invalid_argument("pretrain batch size must be >= 1");
  if (cfg.steps == 0) return 0.0;

  model::AdaptedModel wrap;
  wrap.base = base;
  wrap.adapters.factors.resize(static_cast<size_t>(model::linear_slot_count(base.cfg)));

  model::GradientSet grads;
  grads.init_like(wrap, /*adapter_only_grads=*/false);
  std::vector<Matrix*> params;
  std::vector<const Matrix*> gptrs;
  collect_full(wrap.base, grads, params, gptrs);

  AdamOptimizer opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
  Rng rng(mix_seed(cfg.seed, 0xF06Dull));
  double last = 0.0;
  for (int step = 0; step < cfg.steps; ++step) {
    grads.zero();
    double batch_ce = 0.0;
    long long batch_positions = 0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      tok::TrainingExample ex = draw_format_example(rng, vocab);
      model::ForwardCache cache;
      Matrix logits = model::forward(wrap, ex.tokens, &cache);
      Matrix dlogits;
      LossBreakdown lb = weighted_ce_loss(logits, ex, LossMode::StandardCE, 1.0, &dlogits);
      batch_ce += lb.loss;
      batch_positions += lb.positions();
      model::backward(wrap, cache, dlogits, grads);
    }
    // Examples vary a lot in length here, so both the step loss and the
    // gradient are normalized per predicted token rather than per example.
    scale_gradients(grads, 1.0 / static_cast<double>(batch_positions));
    opt.update(params, gptrs);
    last = batch_ce / static_cast<double>(batch_positions);
    if (losses) losses->push_back(last);
  }
  base = std::move(wrap.base);
  return last;
}

}  // namespace convmem::train
