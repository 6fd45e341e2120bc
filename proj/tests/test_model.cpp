#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <string>
#include <vector>

#include "convmem/matrix.hpp"
#include "convmem/model.hpp"
#include "convmem/rng.hpp"
#include "doctest.h"

using namespace convmem;
using namespace convmem::model;

namespace {

// Reference forward pass written with plain nested loops and materialized
// effective weights (W + s·B·A), independent of the library's low-rank path
// and of the Matrix helpers. Used as the numeric oracle below.
using Vec = std::vector<double>;
using Grid = std::vector<Vec>;

Grid effective_weight(const Matrix& w, const LoraFactors& f, double s) {
  Grid out(size_t(w.rows), Vec(size_t(w.cols), 0.0));
  for (int r = 0; r < w.rows; ++r)
    for (int c = 0; c < w.cols; ++c) out[size_t(r)][size_t(c)] = w.at(r, c);
  if (f.active()) {
    for (int r = 0; r < w.rows; ++r)
      for (int c = 0; c < w.cols; ++c) {
        double delta = 0.0;
        for (int k = 0; k < f.a.rows; ++k) delta += f.b.at(r, k) * f.a.at(k, c);
        out[size_t(r)][size_t(c)] += s * delta;
      }
  }
  return out;
}

Vec ref_linear(const Grid& w, const Vec& x) {
  Vec y(w.size(), 0.0);
  for (size_t r = 0; r < w.size(); ++r) {
    double acc = 0.0;
    for (size_t c = 0; c < x.size(); ++c) acc += w[r][c] * x[c];
    y[r] = acc;
  }
  return y;
}

Vec ref_layernorm(const Vec& x, const Matrix& g, const Matrix& b) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= double(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= double(x.size());
  double rstd = 1.0 / std::sqrt(var + 1e-5);
  Vec out(x.size());
  for (size_t c = 0; c < x.size(); ++c)
    out[c] = (x[c] - mean) * rstd * g.d[c] + b.d[c];
  return out;
}

double ref_gelu(double x) {
  double u = std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

Grid reference_forward(const Model& m, const AdapterSet* ad, const std::vector<int>& tokens) {
  const ModelConfig& cfg = m.cfg;
  const int T = int(tokens.size());
  const int d = cfg.d_model;
  const int hd = d / cfg.heads;
  const size_t sT = tokens.size();
  const size_t sd = static_cast<size_t>(d);
  double s = ad ? ad->cfg.alpha / ad->cfg.rank : 0.0;
  LoraFactors none;
  auto fac = [&](int slot) -> const LoraFactors& {
    return ad ? ad->factors[size_t(slot)] : none;
  };

  Grid x(sT, Vec(sd, 0.0));
  for (int t = 0; t < T; ++t)
    for (int c = 0; c < d; ++c)
      x[size_t(t)][size_t(c)] = m.tok_emb.at(tokens[size_t(t)], c) + m.pos_emb.at(t, c);

  for (int li = 0; li < cfg.layers; ++li) {
    const LayerWeights& L = m.layers[size_t(li)];
    int b = 6 * li;
    Grid wq = effective_weight(L.wq, fac(b + 0), s);
    Grid wk = effective_weight(L.wk, fac(b + 1), s);
    Grid wv = effective_weight(L.wv, fac(b + 2), s);
    Grid wo = effective_weight(L.wo, fac(b + 3), s);
    Grid w1 = effective_weight(L.w1, fac(b + 4), s);
    Grid w2 = effective_weight(L.w2, fac(b + 5), s);

    Grid xn(sT), q(sT), k(sT), v(sT);
    for (int t = 0; t < T; ++t) {
      xn[size_t(t)] = ref_layernorm(x[size_t(t)], L.ln1_g, L.ln1_b);
      q[size_t(t)] = ref_linear(wq, xn[size_t(t)]);
      k[size_t(t)] = ref_linear(wk, xn[size_t(t)]);
      v[size_t(t)] = ref_linear(wv, xn[size_t(t)]);
    }
    Grid att(sT, Vec(sd, 0.0));
    for (int h = 0; h < cfg.heads; ++h) {
      int c0 = h * hd;
      for (int i = 0; i < T; ++i) {
        Vec scores(size_t(i) + 1, 0.0);
        double best = -1e300;
        for (int j = 0; j <= i; ++j) {
          double sc = 0.0;
          for (int c = 0; c < hd; ++c) sc += q[size_t(i)][size_t(c0 + c)] * k[size_t(j)][size_t(c0 + c)];
          sc /= std::sqrt(double(hd));
          scores[size_t(j)] = sc;
          best = std::max(best, sc);
        }
        double denom = 0.0;
        for (int j = 0; j <= i; ++j) denom += std::exp(scores[size_t(j)] - best);
        for (int j = 0; j <= i; ++j) {
          double p = std::exp(scores[size_t(j)] - best) / denom;
          for (int c = 0; c < hd; ++c) att[size_t(i)][size_t(c0 + c)] += p * v[size_t(j)][size_t(c0 + c)];
        }
      }
    }
    for (int t = 0; t < T; ++t) {
      Vec att_out = ref_linear(wo, att[size_t(t)]);
      for (int c = 0; c < d; ++c) x[size_t(t)][size_t(c)] += att_out[size_t(c)];
    }
    for (int t = 0; t < T; ++t) {
      Vec xn2 = ref_layernorm(x[size_t(t)], L.ln2_g, L.ln2_b);
      Vec h1 = ref_linear(w1, xn2);
      for (double& hv : h1) hv = ref_gelu(hv);
      Vec ff = ref_linear(w2, h1);
      for (int c = 0; c < d; ++c) x[size_t(t)][size_t(c)] += ff[size_t(c)];
    }
  }

  Grid wh = effective_weight(m.w_head, fac(6 * cfg.layers), s);
  Grid logits(sT);
  for (int t = 0; t < T; ++t)
    logits[size_t(t)] = ref_linear(wh, ref_layernorm(x[size_t(t)], m.lnf_g, m.lnf_b));
  return logits;
}

double max_diff_vs_ref(const Matrix& lib, const Grid& ref) {
  double worst = 0.0;
  for (int r = 0; r < lib.rows; ++r)
    for (int c = 0; c < lib.cols; ++c)
      worst = std::max(worst, std::abs(lib.at(r, c) - ref[size_t(r)][size_t(c)]));
  return worst;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.vocab_size = 23;
  cfg.max_seq = 24;
  cfg.seed = 11;
  return cfg;
}

std::vector<int> tiny_tokens(const ModelConfig& cfg, int T, uint64_t seed) {
  Rng rng(seed);
  std::vector<int> toks(static_cast<size_t>(T));
  for (int& t : toks) t = int(rng.below(size_t(cfg.vocab_size)));
  return toks;
}

void randomize_factors(AdaptedModel& m, uint64_t seed) {
  Rng rng(seed);
  for (auto& f : m.adapters.factors) {
    if (!f.active()) continue;
    for (double& v : f.a.d) v = rng.normal(0.0, 0.05);
    for (double& v : f.b.d) v = rng.normal(0.0, 0.05);
  }
}

}  // namespace

TEST_CASE("parameter count matches a hand-summed shape list") {
  ModelConfig cfg = tiny_config();
  // Summed shape by shape, independently of param_count's algebra.
  long long expect = 0;
  expect += 23 * 8;       // token embedding
  expect += 24 * 8;       // position embedding
  for (int l = 0; l < 2; ++l) {
    expect += 8 + 8;      // ln1 gain + bias
    expect += 4 * 8 * 8;  // wq wk wv wo
    expect += 8 + 8;      // ln2 gain + bias
    expect += 16 * 8;     // w1
    expect += 8 * 16;     // w2
  }
  expect += 8 + 8;        // final norm
  expect += 23 * 8;       // head
  CHECK(param_count(cfg) == expect);
  Model m = init_model(cfg);
  CHECK(actual_param_count(m) == expect);

  ModelConfig deflt;
  deflt.vocab_size = 500;
  Model dm = init_model(deflt);
  CHECK(actual_param_count(dm) == param_count(deflt));
}

TEST_CASE("init is deterministic in the seed and sets norm params exactly") {
  ModelConfig cfg = tiny_config();
  Model a = init_model(cfg);
  Model b = init_model(cfg);
  CHECK(param_checksum(a) == param_checksum(b));

  cfg.seed = 12;
  Model c = init_model(cfg);
  CHECK(param_checksum(a) != param_checksum(c));

  for (const auto& L : a.layers) {
    for (double v : L.ln1_g.d) CHECK(v == 1.0);
    for (double v : L.ln1_b.d) CHECK(v == 0.0);
    for (double v : L.ln2_g.d) CHECK(v == 1.0);
    for (double v : L.ln2_b.d) CHECK(v == 0.0);
  }
  for (double v : a.lnf_g.d) CHECK(v == 1.0);
  for (double v : a.lnf_b.d) CHECK(v == 0.0);

  double wq_norm = 0.0;
  for (double v : a.layers[0].wq.d) wq_norm += v * v;
  CHECK(wq_norm > 0.0);
}

TEST_CASE("config validation rejects bad shapes") {
  ModelConfig cfg = tiny_config();
  cfg.heads = 3;  // 8 % 3 != 0
  CHECK_THROWS_AS(init_model(cfg), std::invalid_argument);
  cfg = tiny_config();
  cfg.vocab_size = 0;
  CHECK_THROWS_AS(init_model(cfg), std::invalid_argument);
}

TEST_CASE("forward matches the reference implementation") {
  ModelConfig cfg = tiny_config();
  Model m = init_model(cfg);
  for (int T : {1, 2, 7, 16}) {
    std::vector<int> toks = tiny_tokens(cfg, T, 100 + uint64_t(T));
    Matrix logits = forward(m, toks);
    REQUIRE(logits.rows == T);
    REQUIRE(logits.cols == cfg.vocab_size);
    Grid ref = reference_forward(m, nullptr, toks);
    CHECK(max_diff_vs_ref(logits, ref) < 1e-10);
  }
}

TEST_CASE("forward with active adapters matches the effective-weight reference") {
  ModelConfig cfg = tiny_config();
  LoRAConfig lora;
  lora.rank = 3;
  lora.alpha = 6.0;
  for (Placement p : {Placement::AllLinear, Placement::AttentionOnly}) {
    lora.placement = p;
    AdaptedModel am = attach_lora(init_model(cfg), lora);
    randomize_factors(am, 555);
    std::vector<int> toks = tiny_tokens(cfg, 9, 17);
    Matrix logits = forward(am, toks);
    Grid ref = reference_forward(am.base, &am.adapters, toks);
    CHECK(max_diff_vs_ref(logits, ref) < 1e-10);
  }
}

TEST_CASE("zero-initialized adapters leave the forward pass bit-identical") {
  ModelConfig cfg = tiny_config();
  Model base = init_model(cfg);
  AdaptedModel am = attach_lora(base, LoRAConfig{});
  std::vector<int> toks = tiny_tokens(cfg, 12, 3);
  Matrix plain = forward(base, toks);
  Matrix adapted = forward(am, toks);
  CHECK(max_abs_diff(plain, adapted) == 0.0);
}

TEST_CASE("attention is causal: a token cannot influence earlier logits") {
  ModelConfig cfg = tiny_config();
  Model m = init_model(cfg);
  std::vector<int> toks = tiny_tokens(cfg, 10, 4);
  Matrix before = forward(m, toks);

  std::vector<int> bumped = toks;
  bumped[6] = (bumped[6] + 1) % cfg.vocab_size;
  Matrix after = forward(m, bumped);

  for (int t = 0; t < 6; ++t)
    for (int c = 0; c < cfg.vocab_size; ++c)
      CHECK(before.at(t, c) == after.at(t, c));
  double tail_change = 0.0;
  for (int t = 6; t < 10; ++t)
    for (int c = 0; c < cfg.vocab_size; ++c)
      tail_change = std::max(tail_change, std::abs(before.at(t, c) - after.at(t, c)));
  CHECK(tail_change > 0.0);
}

TEST_CASE("last-position fast path equals the full forward's final row") {
  ModelConfig cfg = tiny_config();
  AdaptedModel am = attach_lora(init_model(cfg), LoRAConfig{});
  randomize_factors(am, 90);
  std::vector<int> toks = tiny_tokens(cfg, 11, 5);
  Matrix full = forward(am, toks);
  Matrix last = forward_last_logits(am, toks);
  REQUIRE(last.rows == 1);
  for (int c = 0; c < cfg.vocab_size; ++c) CHECK(last.at(0, c) == full.at(10, c));
}

TEST_CASE("adapter bookkeeping: slot counts, scaling, rank limits") {
  ModelConfig cfg = tiny_config();
  CHECK(linear_slot_count(cfg) == 13);

  AdaptedModel all = attach_lora(init_model(cfg), LoRAConfig{});
  CHECK(adapted_matrix_count(all) == 13);  // (4+2)·layers + head

  LoRAConfig attn;
  attn.placement = Placement::AttentionOnly;
  AdaptedModel only = attach_lora(init_model(cfg), attn);
  CHECK(adapted_matrix_count(only) == 8);  // 4·layers
  CHECK_FALSE(only.adapters.factors[4].active());   // layer0.w1
  CHECK_FALSE(only.adapters.factors[12].active());  // head
  CHECK(only.adapters.factors[6].active());         // layer1.wq

  LoRAConfig paper;
  paper.rank = 16;
  paper.alpha = 64.0;
  CHECK(lora_scaling(paper) == 4.0);
  CHECK(lora_scaling(LoRAConfig{}) == 4.0);

  LoRAConfig wide;
  wide.rank = 9;  // exceeds d_model = 8
  CHECK_THROWS_AS(attach_lora(init_model(cfg), wide), std::invalid_argument);
  wide.placement = Placement::AttentionOnly;
  CHECK_THROWS_AS(attach_lora(init_model(cfg), wide), std::invalid_argument);
  wide.rank = 0;
  CHECK_THROWS_AS(attach_lora(init_model(cfg), wide), std::invalid_argument);
}

TEST_CASE("adapter A factors draw deterministically and B starts at zero") {
  ModelConfig cfg = tiny_config();
  AdaptedModel a = attach_lora(init_model(cfg), LoRAConfig{});
  AdaptedModel b = attach_lora(init_model(cfg), LoRAConfig{});
  for (size_t i = 0; i < a.adapters.factors.size(); ++i) {
    REQUIRE(a.adapters.factors[i].active());
    CHECK(max_abs_diff(a.adapters.factors[i].a, b.adapters.factors[i].a) == 0.0);
    for (double v : a.adapters.factors[i].b.d) CHECK(v == 0.0);
    double norm = 0.0;
    for (double v : a.adapters.factors[i].a.d) norm += v * v;
    CHECK(norm > 0.0);
  }
}

TEST_CASE("merging folds adapters into the base within 1e-8") {
  ModelConfig cfg = tiny_config();
  LoRAConfig lora;
  lora.rank = 2;
  lora.alpha = 8.0;
  AdaptedModel am = attach_lora(init_model(cfg), lora);
  randomize_factors(am, 321);
  Model merged = merge_lora(am);

  std::vector<int> toks = tiny_tokens(cfg, 14, 8);
  Matrix adapted = forward(am, toks);
  Matrix folded = forward(merged, toks);
  CHECK(max_abs_diff(adapted, folded) <= 1e-8);
  CHECK(max_abs_diff(adapted, forward(am.base, toks)) > 1e-6);
}

TEST_CASE("merging zero adapters reproduces the base bit for bit") {
  ModelConfig cfg = tiny_config();
  Model base = init_model(cfg);
  uint64_t before = param_checksum(base);
  AdaptedModel am = attach_lora(base, LoRAConfig{});
  CHECK(param_checksum(merge_lora(am)) == before);
  CHECK(param_checksum(am.base) == before);
}

TEST_CASE("attention-only merge touches only attention weights") {
  ModelConfig cfg = tiny_config();
  LoRAConfig lora;
  lora.placement = Placement::AttentionOnly;
  AdaptedModel am = attach_lora(init_model(cfg), lora);
  randomize_factors(am, 77);
  Model merged = merge_lora(am);
  for (size_t l = 0; l < am.base.layers.size(); ++l) {
    CHECK(max_abs_diff(am.base.layers[l].wq, merged.layers[l].wq) > 0.0);
    CHECK(max_abs_diff(am.base.layers[l].wo, merged.layers[l].wo) > 0.0);
    CHECK(max_abs_diff(am.base.layers[l].w1, merged.layers[l].w1) == 0.0);
    CHECK(max_abs_diff(am.base.layers[l].w2, merged.layers[l].w2) == 0.0);
  }
  CHECK(max_abs_diff(am.base.w_head, merged.w_head) == 0.0);
  CHECK(max_abs_diff(am.base.tok_emb, merged.tok_emb) == 0.0);
}

TEST_CASE("backward gradients agree with central finite differences") {
  ModelConfig cfg = tiny_config();
  cfg.layers = 2;
  LoRAConfig lora;
  lora.rank = 2;
  lora.alpha = 4.0;
  AdaptedModel am = attach_lora(init_model(cfg), lora);
  randomize_factors(am, 99);
  std::vector<int> toks = tiny_tokens(cfg, 6, 12);

  // Scalar objective: fixed random weighting of every logit.
  Matrix lw(6, cfg.vocab_size);
  Rng wrng(31);
  for (double& v : lw.d) v = wrng.normal(0.0, 1.0);
  auto objective = [&](const AdaptedModel& model) {
    Matrix logits = forward(model, toks);
    double total = 0.0;
    for (size_t i = 0; i < logits.d.size(); ++i) total += lw.d[i] * logits.d[i];
    return total;
  };

  ForwardCache cache;
  forward(am, toks, &cache);
  GradientSet grads;
  grads.init_like(am, /*adapter_only_grads=*/false);
  backward(am, cache, lw, grads);

  const double step = 1e-5;
  auto check_coord = [&](double* param, double analytic) {
    double saved = *param;
    *param = saved + step;
    double up = objective(am);
    *param = saved - step;
    double down = objective(am);
    *param = saved;
    double fd = (up - down) / (2.0 * step);
    double denom = std::max({std::abs(fd), std::abs(analytic), 1e-8});
    CHECK(std::abs(fd - analytic) / denom < 1e-4);
  };

  Rng pick(7);
  auto sample_matrix = [&](Matrix& param, Matrix& grad, int count) {
    REQUIRE(param.same_shape(grad));
    for (int i = 0; i < count; ++i) {
      size_t idx = pick.below(param.d.size());
      check_coord(&param.d[idx], grad.d[idx]);
    }
  };

  sample_matrix(am.base.tok_emb, grads.tok_emb, 4);
  sample_matrix(am.base.pos_emb, grads.pos_emb, 4);
  for (size_t l = 0; l < am.base.layers.size(); ++l) {
    sample_matrix(am.base.layers[l].ln1_g, grads.layers[l].ln1_g, 2);
    sample_matrix(am.base.layers[l].ln1_b, grads.layers[l].ln1_b, 2);
    sample_matrix(am.base.layers[l].wq, grads.layers[l].wq, 3);
    sample_matrix(am.base.layers[l].wk, grads.layers[l].wk, 3);
    sample_matrix(am.base.layers[l].wv, grads.layers[l].wv, 3);
    sample_matrix(am.base.layers[l].wo, grads.layers[l].wo, 3);
    sample_matrix(am.base.layers[l].ln2_g, grads.layers[l].ln2_g, 2);
    sample_matrix(am.base.layers[l].ln2_b, grads.layers[l].ln2_b, 2);
    sample_matrix(am.base.layers[l].w1, grads.layers[l].w1, 3);
    sample_matrix(am.base.layers[l].w2, grads.layers[l].w2, 3);
  }
  sample_matrix(am.base.lnf_g, grads.lnf_g, 2);
  sample_matrix(am.base.lnf_b, grads.lnf_b, 2);
  sample_matrix(am.base.w_head, grads.w_head, 4);
  for (size_t slot = 0; slot < am.adapters.factors.size(); ++slot) {
    sample_matrix(am.adapters.factors[slot].a, grads.lora[slot].a, 2);
    sample_matrix(am.adapters.factors[slot].b, grads.lora[slot].b, 2);
  }
}

TEST_CASE("adapter-only gradients match finite differences and skip the base") {
  ModelConfig cfg = tiny_config();
  LoRAConfig lora;
  lora.rank = 2;
  lora.alpha = 4.0;
  AdaptedModel am = attach_lora(init_model(cfg), lora);
  randomize_factors(am, 13);
  std::vector<int> toks = tiny_tokens(cfg, 5, 29);

  Matrix lw(5, cfg.vocab_size);
  Rng wrng(41);
  for (double& v : lw.d) v = wrng.normal(0.0, 1.0);

  ForwardCache cache;
  forward(am, toks, &cache);
  GradientSet grads;
  grads.init_like(am, /*adapter_only_grads=*/true);
  CHECK(grads.layers.empty());
  CHECK(grads.tok_emb.empty());
  backward(am, cache, lw, grads);

  auto objective = [&]() {
    Matrix logits = forward(am, toks);
    double total = 0.0;
    for (size_t i = 0; i < logits.d.size(); ++i) total += lw.d[i] * logits.d[i];
    return total;
  };
  const double step = 1e-5;
  Rng pick(3);
  for (size_t slot = 0; slot < am.adapters.factors.size(); ++slot) {
    for (Matrix LoraFactors::* mem : {&LoraFactors::a, &LoraFactors::b}) {
      Matrix& param = am.adapters.factors[slot].*mem;
      Matrix& grad = grads.lora[slot].*mem;
      size_t idx = pick.below(param.d.size());
      double saved = param.d[idx];
      param.d[idx] = saved + step;
      double up = objective();
      param.d[idx] = saved - step;
      double down = objective();
      param.d[idx] = saved;
      double fd = (up - down) / (2.0 * step);
      double denom = std::max({std::abs(fd), std::abs(grad.d[idx]), 1e-8});
      CHECK(std::abs(fd - grad.d[idx]) / denom < 1e-4);
    }
  }
}

TEST_CASE("gradient accumulation: two backward calls double the gradients") {
  ModelConfig cfg = tiny_config();
  AdaptedModel am = attach_lora(init_model(cfg), LoRAConfig{});
  randomize_factors(am, 2);
  std::vector<int> toks = tiny_tokens(cfg, 4, 44);
  Matrix lw(4, cfg.vocab_size);
  Rng wrng(45);
  for (double& v : lw.d) v = wrng.normal(0.0, 1.0);

  ForwardCache cache;
  forward(am, toks, &cache);
  GradientSet once;
  once.init_like(am, true);
  backward(am, cache, lw, once);
  GradientSet twice;
  twice.init_like(am, true);
  backward(am, cache, lw, twice);
  backward(am, cache, lw, twice);
  for (size_t slot = 0; slot < once.lora.size(); ++slot) {
    for (size_t i = 0; i < once.lora[slot].a.d.size(); ++i)
      CHECK(twice.lora[slot].a.d[i] == doctest::Approx(2.0 * once.lora[slot].a.d[i]).epsilon(1e-12));
    for (size_t i = 0; i < once.lora[slot].b.d.size(); ++i)
      CHECK(twice.lora[slot].b.d[i] == doctest::Approx(2.0 * once.lora[slot].b.d[i]).epsilon(1e-12));
  }
  twice.zero();
  for (const auto& f : twice.lora) {
    for (double v : f.a.d) CHECK(v == 0.0);
    for (double v : f.b.d) CHECK(v == 0.0);
  }
}

TEST_CASE("greedy decoding is deterministic and respects limits") {
  ModelConfig cfg = tiny_config();
  AdaptedModel am = attach_lora(init_model(cfg), LoRAConfig{});
  std::vector<int> prompt = tiny_tokens(cfg, 4, 6);

  std::vector<int> a = generate(am, prompt, 8, /*eos_id=*/2);
  std::vector<int> b = generate(am, prompt, 8, /*eos_id=*/2);
  CHECK(a == b);
  CHECK(a.size() <= 8);

  CHECK(generate(am, prompt, 0, 2).empty());

  // Declaring the model's own first choice as the stop token makes the
  // continuation exactly that one token, and it stays in the output.
  Matrix logits = forward_last_logits(am, prompt);
  int best = 0;
  for (int c = 1; c < logits.cols; ++c)
    if (logits.at(0, c) > logits.at(0, best)) best = c;
  std::vector<int> stopped = generate(am, prompt, 8, best);
  REQUIRE(stopped.size() == 1);
  CHECK(stopped[0] == best);

  std::vector<int> none;
  CHECK_THROWS_AS(generate(am, none, 4, 2), std::invalid_argument);
  std::vector<int> longp = tiny_tokens(cfg, cfg.max_seq, 9);
  CHECK_THROWS_AS(generate(am, longp, 1, 2), std::invalid_argument);
}

TEST_CASE("forward input validation") {
  ModelConfig cfg = tiny_config();
  Model m = init_model(cfg);
  CHECK_THROWS_AS(forward(m, {}), std::invalid_argument);
  CHECK_THROWS_AS(forward(m, {0, cfg.vocab_size}), std::invalid_argument);
  CHECK_THROWS_AS(forward(m, {-1}), std::invalid_argument);
  std::vector<int> toolong(size_t(cfg.max_seq) + 1, 1);
  CHECK_THROWS_AS(forward(m, toolong), std::invalid_argument);
}

TEST_CASE("model JSON round trip preserves every parameter") {
  ModelConfig cfg = tiny_config();
  Model m = init_model(cfg);
  Model back = model_from_json(model_to_json(m));
  CHECK(back.cfg.layers == cfg.layers);
  CHECK(back.cfg.heads == cfg.heads);
  CHECK(back.cfg.d_model == cfg.d_model);
  CHECK(back.cfg.vocab_size == cfg.vocab_size);
  CHECK(back.cfg.seed == cfg.seed);
  CHECK(param_checksum(back) == param_checksum(m));

  std::string path = "/tmp/convmem_model_roundtrip.json";
  save_model(m, path);
  Model loaded = load_model(path);
  CHECK(param_checksum(loaded) == param_checksum(m));
}

TEST_CASE("adapter JSON round trip preserves factors and placement") {
  ModelConfig cfg = tiny_config();
  LoRAConfig lora;
  lora.rank = 2;
  lora.alpha = 5.0;
  lora.placement = Placement::AttentionOnly;
  AdaptedModel am = attach_lora(init_model(cfg), lora);
  randomize_factors(am, 64);

  AdapterSet back = adapter_from_json(adapter_to_json(am.adapters));
  CHECK(back.cfg.rank == 2);
  CHECK(back.cfg.alpha == 5.0);
  CHECK(back.cfg.placement == Placement::AttentionOnly);
  REQUIRE(back.factors.size() == am.adapters.factors.size());
  for (size_t i = 0; i < back.factors.size(); ++i) {
    CHECK(back.factors[i].active() == am.adapters.factors[i].active());
    if (back.factors[i].active()) {
      CHECK(max_abs_diff(back.factors[i].a, am.adapters.factors[i].a) == 0.0);
      CHECK(max_abs_diff(back.factors[i].b, am.adapters.factors[i].b) == 0.0);
    }
  }
  CHECK_THROWS_AS(placement_from_string("everything"), std::invalid_argument);
}
