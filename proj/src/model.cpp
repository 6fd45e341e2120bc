#include "convmem/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "convmem/rng.hpp"
#include "json.hpp"

namespace convmem::model {
namespace {

using nlohmann::ordered_json;

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu(double x) {
  double u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
  double u = kGeluC * (x + kGeluA * x * x * x);
  double t = std::tanh(u);
  double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

void add_scaled(Matrix& dst, const Matrix& src, double s) {
  for (size_t i = 0; i < dst.d.size(); ++i) dst.d[i] += s * src.d[i];
}

void scale_in_place(Matrix& m, double s) {
  for (double& v : m.d) v *= s;
}

Matrix col_slice(const Matrix& m, int c0, int width) {
  Matrix out(m.rows, width);
  for (int r = 0; r < m.rows; ++r) {
    const double* src = m.row(r) + c0;
    double* dst = out.row(r);
    for (int c = 0; c < width; ++c) dst[c] = src[c];
  }
  return out;
}

void place_cols(Matrix& dst, const Matrix& src, int c0) {
  for (int r = 0; r < src.rows; ++r) {
    const double* s = src.row(r);
    double* d = dst.row(r) + c0;
    for (int c = 0; c < src.cols; ++c) d[c] = s[c];
  }
}

// out = x·wᵀ (+ s·(x·aᵀ)·bᵀ when factors are attached); caches u = x·aᵀ.
void apply_linear(const Matrix& x, const Matrix& w, const LoraFactors* f, double s, Matrix& out,
                  Matrix* u_cache) {
  matmul_nt(x, w, out);
  if (f && f->active()) {
    Matrix u;
    matmul_nt(x, f->a, u);
    Matrix delta;
    matmul_nt(u, f->b, delta);
    add_scaled(out, delta, s);
    if (u_cache) *u_cache = std::move(u);
  } else if (u_cache) {
    *u_cache = Matrix();
  }
}

// dx += dy·w (+ lora path); dw += dyᵀ·x; da/db updated when factors attached.
void linear_backward(const Matrix& dy, const Matrix& x, const Matrix& w, const LoraFactors* f,
                     double s, const Matrix* u, Matrix* dw, LoraFactors* df, Matrix& dx) {
  matmul_nn(dy, w, dx, /*accumulate=*/true);
  if (dw) matmul_tn(dy, x, *dw, /*accumulate=*/true);
  if (f && f->active() && df) {
    Matrix db_raw;
    matmul_tn(dy, *u, db_raw);  // d_out x r
    add_scaled(df->b, db_raw, s);
    Matrix du;
    matmul_nn(dy, f->b, du);  // T x r
    scale_in_place(du, s);
    matmul_tn(du, x, df->a, /*accumulate=*/true);
    matmul_nn(du, f->a, dx, /*accumulate=*/true);
  }
}

void ln_forward(const Matrix& x, const Matrix& g, const Matrix& b, Matrix& out,
                std::vector<double>& mu, std::vector<double>& rstd) {
  const int C = x.cols;
  out.rows = x.rows;
  out.cols = C;
  out.d.resize(x.d.size());
  mu.resize(static_cast<size_t>(x.rows));
  rstd.resize(static_cast<size_t>(x.rows));
  for (int r = 0; r < x.rows; ++r) {
    const double* xr = x.row(r);
    double m = 0.0;
    for (int c = 0; c < C; ++c) m += xr[c];
    m /= C;
    double var = 0.0;
    for (int c = 0; c < C; ++c) var += (xr[c] - m) * (xr[c] - m);
    var /= C;
    double rs = 1.0 / std::sqrt(var + kLnEps);
    mu[static_cast<size_t>(r)] = m;
    rstd[static_cast<size_t>(r)] = rs;
    double* outr = out.row(r);
    for (int c = 0; c < C; ++c) outr[c] = (xr[c] - m) * rs * g.d[static_cast<size_t>(c)] + b.d[static_cast<size_t>(c)];
  }
}

void ln_backward(const Matrix& x, const std::vector<double>& mu, const std::vector<double>& rstd,
                 const Matrix& g, const Matrix& dy, Matrix& dx, Matrix* dg, Matrix* db) {
  const int C = x.cols;
  for (int r = 0; r < x.rows; ++r) {
    const double* xr = x.row(r);
    const double* dyr = dy.row(r);
    double* dxr = dx.row(r);
    double m = mu[static_cast<size_t>(r)];
    double rs = rstd[static_cast<size_t>(r)];
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (int c = 0; c < C; ++c) {
      double xhat = (xr[c] - m) * rs;
      double dxhat = dyr[c] * g.d[static_cast<size_t>(c)];
      mean_dxhat += dxhat;
      mean_dxhat_xhat += dxhat * xhat;
      if (dg) dg->d[static_cast<size_t>(c)] += dyr[c] * xhat;
      if (db) db->d[static_cast<size_t>(c)] += dyr[c];
    }
    mean_dxhat /= C;
    mean_dxhat_xhat /= C;
    for (int c = 0; c < C; ++c) {
      double xhat = (xr[c] - m) * rs;
      double dxhat = dyr[c] * g.d[static_cast<size_t>(c)];
      dxr[c] += rs * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
    }
  }
}

struct SlotInfo {
  int out;
  int in;
};

SlotInfo slot_dims(const ModelConfig& cfg, int slot) {
  int per_layer = slot % 6;
  if (slot == 6 * cfg.layers) return {cfg.vocab_size, cfg.d_model};
  switch (per_layer) {
    case 4: return {cfg.d_ff, cfg.d_model};   // w1
    case 5: return {cfg.d_model, cfg.d_ff};   // w2
    default: return {cfg.d_model, cfg.d_model};
  }
}

bool slot_targeted(const LoRAConfig& lora, int slot, int layers) {
  if (lora.placement == Placement::AllLinear) return true;
  if (slot == 6 * layers) return false;
  return slot % 6 <= 3;
}

ordered_json mat_to_json(const Matrix& m) {
  ordered_json j;
  j["rows"] = m.rows;
  j["cols"] = m.cols;
  j["data"] = m.d;
  return j;
}

Matrix mat_from_json(const ordered_json& j) {
  Matrix m(j.at("rows").get<int>(), j.at("cols").get<int>());
  const auto& data = j.at("data");
  if (data.size() != m.d.size())
    throw std::invalid_argument("matrix data length mismatch");
  for (size_t i = 0; i < m.d.size(); ++i) m.d[i] = data[i].get<double>();
  return m;
}

template <class ModelT, class Fn>
void walk_params(ModelT& m, const Fn& fn) {
  fn("tok_emb", m.tok_emb);
  fn("pos_emb", m.pos_emb);
  for (size_t i = 0; i < m.layers.size(); ++i) {
    auto& L = m.layers[i];
    std::string p = "layer" + std::to_string(i) + ".";
    fn(p + "ln1_g", L.ln1_g);
    fn(p + "ln1_b", L.ln1_b);
    fn(p + "wq", L.wq);
    fn(p + "wk", L.wk);
    fn(p + "wv", L.wv);
    fn(p + "wo", L.wo);
    fn(p + "ln2_g", L.ln2_g);
    fn(p + "ln2_b", L.ln2_b);
    fn(p + "w1", L.w1);
    fn(p + "w2", L.w2);
  }
  fn("lnf_g", m.lnf_g);
  fn("lnf_b", m.lnf_b);
  fn("w_head", m.w_head);
}

}  // namespace

void validate_config(const ModelConfig& c) {
  if (c.layers < 1 || c.heads < 1 || c.d_model < 1 || c.d_ff < 1 || c.vocab_size < 1 ||
      c.max_seq < 1)
    throw std::invalid_argument("model config fields must all be >= 1");
  if (c.d_model % c.heads != 0)
    throw std::invalid_argument("d_model " + std::to_string(c.d_model) +
                                " is not divisible by heads " + std::to_string(c.heads));
}

Model init_model(const ModelConfig& config) {
  validate_config(config);
  Model m;
  m.cfg = config;
  int d = config.d_model;
  m.tok_emb = Matrix(config.vocab_size, d);
  m.pos_emb = Matrix(config.max_seq, d);
  m.layers.resize(static_cast<size_t>(config.layers));
  for (auto& L : m.layers) {
    L.ln1_g = Matrix(1, d);
    L.ln1_b = Matrix(1, d);
    L.wq = Matrix(d, d);
    L.wk = Matrix(d, d);
    L.wv = Matrix(d, d);
    L.wo = Matrix(d, d);
    L.ln2_g = Matrix(1, d);
    L.ln2_b = Matrix(1, d);
    L.w1 = Matrix(config.d_ff, d);
    L.w2 = Matrix(d, config.d_ff);
  }
  m.lnf_g = Matrix(1, d);
  m.lnf_b = Matrix(1, d);
  m.w_head = Matrix(config.vocab_size, d);

  Rng rng(config.seed);
  for_each_param(m, [&rng](const std::string& name, Matrix& p) {
    bool is_gain = name.size() >= 2 && name.compare(name.size() - 2, 2, "_g") == 0;
    bool is_bias = name.size() >= 2 && name.compare(name.size() - 2, 2, "_b") == 0;
    if (is_gain) {
      std::fill(p.d.begin(), p.d.end(), 1.0);
    } else if (is_bias) {
      p.zero();
    } else {
      for (double& v : p.d) v = rng.normal(0.0, 0.02);
    }
  });
  return m;
}

long long param_count(const ModelConfig& c) {
  long long d = c.d_model;
  long long per_layer = 4 * d * d + 2 * d * static_cast<long long>(c.d_ff) + 4 * d;
  return static_cast<long long>(c.vocab_size) * d      // token embedding
         + static_cast<long long>(c.max_seq) * d       // positions
         + c.layers * per_layer                        // blocks (incl. both LN gain+bias)
         + 2 * d                                       // final LN
         + static_cast<long long>(c.vocab_size) * d;   // head
}

long long actual_param_count(const Model& model) {
  long long n = 0;
  for_each_param(model, [&n](const std::string&, const Matrix& p) {
    n += static_cast<long long>(p.size());
  });
  return n;
}

void for_each_param(Model& model, const std::function<void(const std::string&, Matrix&)>& fn) {
  walk_params(model, fn);
}

void for_each_param(const Model& model,
                    const std::function<void(const std::string&, const Matrix&)>& fn) {
  walk_params(model, fn);
}

uint64_t param_checksum(const Model& model) {
  uint64_t h = 0xcbf29ce484222325ull;
  for_each_param(model, [&h](const std::string&, const Matrix& p) {
    const unsigned char* bytes = reinterpret_cast<const unsigned char*>(p.d.data());
    size_t n = p.d.size() * sizeof(double);
    for (size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ull;
    }
  });
  return h;
}

const char* to_string(Placement p) {
  return p == Placement::AllLinear ? "all_linear" : "attention_only";
}

Placement placement_from_string(const std::string& s) {
  if (s == "all_linear") return Placement::AllLinear;
  if (s == "attention_only") return Placement::AttentionOnly;
  throw std::invalid_argument("unknown placement: " + s);
}

double lora_scaling(const LoRAConfig& cfg) { return cfg.alpha / cfg.rank; }

int linear_slot_count(const ModelConfig& config) { return 6 * config.layers + 1; }

int adapted_matrix_count(const AdaptedModel& model) {
  int n = 0;
  for (const auto& f : model.adapters.factors)
    if (f.active()) ++n;
  return n;
}

AdaptedModel attach_lora(Model base, const LoRAConfig& lora) {
  if (lora.rank < 1) throw std::invalid_argument("lora rank must be >= 1");
  if (lora.alpha <= 0) throw std::invalid_argument("lora alpha must be > 0");
  const ModelConfig& cfg = base.cfg;
  int slots = linear_slot_count(cfg);
  for (int s = 0; s < slots; ++s) {
    if (!slot_targeted(lora, s, cfg.layers)) continue;
    SlotInfo dims = slot_dims(cfg, s);
    if (lora.rank > std::min(dims.out, dims.in))
      throw std::invalid_argument("lora rank " + std::to_string(lora.rank) +
                                  " exceeds the smaller dimension of a " +
                                  std::to_string(dims.out) + "x" + std::to_string(dims.in) +
                                  " weight");
  }
  AdaptedModel m;
  m.adapters.cfg = lora;
  m.adapters.factors.resize(static_cast<size_t>(slots));
  Rng rng(mix_seed(cfg.seed, 0xAD0ull));
  for (int s = 0; s < slots; ++s) {
    if (!slot_targeted(lora, s, cfg.layers)) continue;
    SlotInfo dims = slot_dims(cfg, s);
    LoraFactors& f = m.adapters.factors[static_cast<size_t>(s)];
    f.a = Matrix(lora.rank, dims.in);
    for (double& v : f.a.d) v = rng.normal(0.0, 0.02);
    f.b = Matrix(dims.out, lora.rank);  // zero: adapter starts as the identity
  }
  m.base = std::move(base);
  return m;
}

Model merge_lora(const AdaptedModel& model) {
  Model merged = model.base;
  double s = lora_scaling(model.adapters.cfg);
  auto fold = [&s](Matrix& w, const LoraFactors& f) {
    if (!f.active()) return;
    Matrix delta;
    matmul_nn(f.b, f.a, delta);  // out x in
    add_scaled(w, delta, s);
  };
  const auto& factors = model.adapters.factors;
  for (size_t i = 0; i < merged.layers.size(); ++i) {
    auto& L = merged.layers[i];
    size_t b = 6 * i;
    fold(L.wq, factors[b + 0]);
    fold(L.wk, factors[b + 1]);
    fold(L.wv, factors[b + 2]);
    fold(L.wo, factors[b + 3]);
    fold(L.w1, factors[b + 4]);
    fold(L.w2, factors[b + 5]);
  }
  fold(merged.w_head, factors[6 * merged.layers.size()]);
  return merged;
}

namespace {

Matrix forward_core(const Model& base, const AdapterSet* adapters,
                    const std::vector<int>& tokens, ForwardCache* cache, int logits_from) {
  const ModelConfig& cfg = base.cfg;
  const int T = static_cast<int>(tokens.size());
  if (T == 0) throw std::invalid_argument("forward needs at least one token");
  if (T > cfg.max_seq)
    throw std::invalid_argument("sequence of " + std::to_string(T) +
                                " tokens exceeds max_seq " + std::to_string(cfg.max_seq));
  for (int id : tokens)
    if (id < 0 || id >= cfg.vocab_size)
      throw std::invalid_argument("token id " + std::to_string(id) + " outside vocab");

  const int d = cfg.d_model;
  const int heads = cfg.heads;
  const int hd = d / heads;
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  double s = adapters ? lora_scaling(adapters->cfg) : 0.0;
  auto factor = [&](int slot) -> const LoraFactors* {
    if (!adapters) return nullptr;
    const LoraFactors& f = adapters->factors[static_cast<size_t>(slot)];
    return f.active() ? &f : nullptr;
  };

  Matrix x(T, d);
  for (int t = 0; t < T; ++t) {
    const double* te = base.tok_emb.row(tokens[t]);
    const double* pe = base.pos_emb.row(t);
    double* xr = x.row(t);
    for (int c = 0; c < d; ++c) xr[c] = te[c] + pe[c];
  }
  if (cache) {
    cache->tokens = tokens;
    cache->layers.assign(static_cast<size_t>(cfg.layers), LayerCache{});
  }

  Matrix xn1, q, k, v, att(T, d), att_out, xn2, h1, hg, ff;
  std::vector<double> mu1, rstd1, mu2, rstd2;
  for (int li = 0; li < cfg.layers; ++li) {
    const LayerWeights& L = base.layers[static_cast<size_t>(li)];
    LayerCache* lc = cache ? &cache->layers[static_cast<size_t>(li)] : nullptr;
    int b = 6 * li;
    if (lc) lc->x_in = x;

    ln_forward(x, L.ln1_g, L.ln1_b, xn1, mu1, rstd1);
    apply_linear(xn1, L.wq, factor(b + 0), s, q, lc ? &lc->u_q : nullptr);
    apply_linear(xn1, L.wk, factor(b + 1), s, k, lc ? &lc->u_k : nullptr);
    apply_linear(xn1, L.wv, factor(b + 2), s, v, lc ? &lc->u_v : nullptr);

    if (lc) lc->probs.assign(static_cast<size_t>(heads), Matrix());
    for (int h = 0; h < heads; ++h) {
      Matrix q_h = col_slice(q, h * hd, hd);
      Matrix k_h = col_slice(k, h * hd, hd);
      Matrix v_h = col_slice(v, h * hd, hd);
      Matrix probs(T, T);
      for (int i = 0; i < T; ++i) {
        const double* qi = q_h.row(i);
        double best = -1e300;
        std::vector<double> scores(static_cast<size_t>(i) + 1);
        for (int j = 0; j <= i; ++j) {
          const double* kj = k_h.row(j);
          double sc = 0.0;
          for (int c = 0; c < hd; ++c) sc += qi[c] * kj[c];
          sc *= inv_sqrt_hd;
          scores[static_cast<size_t>(j)] = sc;
          best = std::max(best, sc);
        }
        double denom = 0.0;
        for (int j = 0; j <= i; ++j) {
          double e = std::exp(scores[static_cast<size_t>(j)] - best);
          probs.at(i, j) = e;
          denom += e;
        }
        double inv = 1.0 / denom;
        for (int j = 0; j <= i; ++j) probs.at(i, j) *= inv;
      }
      Matrix att_h;
      matmul_nn(probs, v_h, att_h);
      place_cols(att, att_h, h * hd);
      if (lc) lc->probs[static_cast<size_t>(h)] = std::move(probs);
    }
    apply_linear(att, L.wo, factor(b + 3), s, att_out, lc ? &lc->u_o : nullptr);
    for (size_t i = 0; i < x.d.size(); ++i) x.d[i] += att_out.d[i];
    if (lc) {
      lc->xn1 = xn1;
      lc->mu1 = mu1;
      lc->rstd1 = rstd1;
      lc->q = q;
      lc->k = k;
      lc->v = v;
      lc->att = att;
      lc->x_mid = x;
    }

    ln_forward(x, L.ln2_g, L.ln2_b, xn2, mu2, rstd2);
    apply_linear(xn2, L.w1, factor(b + 4), s, h1, lc ? &lc->u_1 : nullptr);
    hg.rows = h1.rows;
    hg.cols = h1.cols;
    hg.d.resize(h1.d.size());
    for (size_t i = 0; i < h1.d.size(); ++i) hg.d[i] = gelu(h1.d[i]);
    apply_linear(hg, L.w2, factor(b + 5), s, ff, lc ? &lc->u_2 : nullptr);
    for (size_t i = 0; i < x.d.size(); ++i) x.d[i] += ff.d[i];
    if (lc) {
      lc->xn2 = xn2;
      lc->mu2 = mu2;
      lc->rstd2 = rstd2;
      lc->h1 = h1;
      lc->hg = hg;
    }
  }

  Matrix xnf;
  std::vector<double> muf, rstdf;
  ln_forward(x, base.lnf_g, base.lnf_b, xnf, muf, rstdf);
  if (cache) {
    cache->x_last = x;
    cache->xnf = xnf;
    cache->muf = muf;
    cache->rstdf = rstdf;
  }

  const LoraFactors* fh = factor(6 * cfg.layers);
  if (logits_from <= 0) {
    Matrix logits;
    apply_linear(xnf, base.w_head, fh, s, logits, cache ? &cache->u_head : nullptr);
    return logits;
  }
  Matrix tail(T - logits_from, d);
  for (int r = logits_from; r < T; ++r)
    for (int c = 0; c < d; ++c) tail.at(r - logits_from, c) = xnf.at(r, c);
  Matrix logits;
  apply_linear(tail, base.w_head, fh, s, logits, nullptr);
  return logits;
}

}  // namespace

Matrix forward(const AdaptedModel& model, const std::vector<int>& tokens, ForwardCache* cache) {
  return forward_core(model.base, &model.adapters, tokens, cache, 0);
}

Matrix forward(const Model& model, const std::vector<int>& tokens) {
  return forward_core(model, nullptr, tokens, nullptr, 0);
}

Matrix forward_last_logits(const AdaptedModel& model, const std::vector<int>& tokens) {
  return forward_core(model.base, &model.adapters, tokens,
                      nullptr, static_cast<int>(tokens.size()) - 1);
}

void GradientSet::init_like(const AdaptedModel& model, bool adapter_only_grads) {
  adapter_only = adapter_only_grads;
  const Model& base = model.base;
  lora.clear();
  lora.resize(model.adapters.factors.size());
  for (size_t i = 0; i < lora.size(); ++i) {
    const LoraFactors& f = model.adapters.factors[i];
    if (!f.active()) continue;
    lora[i].a = Matrix(f.a.rows, f.a.cols);
    lora[i].b = Matrix(f.b.rows, f.b.cols);
  }
  if (adapter_only) {
    layers.clear();
    tok_emb = pos_emb = lnf_g = lnf_b = w_head = Matrix();
    return;
  }
  tok_emb = Matrix(base.tok_emb.rows, base.tok_emb.cols);
  pos_emb = Matrix(base.pos_emb.rows, base.pos_emb.cols);
  layers.assign(base.layers.size(), LayerWeights{});
  for (size_t i = 0; i < base.layers.size(); ++i) {
    const LayerWeights& L = base.layers[i];
    LayerWeights& G = layers[i];
    G.ln1_g = Matrix(1, L.ln1_g.cols);
    G.ln1_b = Matrix(1, L.ln1_b.cols);
    G.wq = Matrix(L.wq.rows, L.wq.cols);
    G.wk = Matrix(L.wk.rows, L.wk.cols);
    G.wv = Matrix(L.wv.rows, L.wv.cols);
    G.wo = Matrix(L.wo.rows, L.wo.cols);
    G.ln2_g = Matrix(1, L.ln2_g.cols);
    G.ln2_b = Matrix(1, L.ln2_b.cols);
    G.w1 = Matrix(L.w1.rows, L.w1.cols);
    G.w2 = Matrix(L.w2.rows, L.w2.cols);
  }
  lnf_g = Matrix(1, base.lnf_g.cols);
  lnf_b = Matrix(1, base.lnf_b.cols);
  w_head = Matrix(base.w_head.rows, base.w_head.cols);
}

void GradientSet::zero() {
  auto z = [](Matrix& m) { m.zero(); };
  z(tok_emb);
  z(pos_emb);
  for (auto& L : layers) {
    z(L.ln1_g);
    z(L.ln1_b);
    z(L.wq);
    z(L.wk);
    z(L.wv);
    z(L.wo);
    z(L.ln2_g);
    z(L.ln2_b);
    z(L.w1);
    z(L.w2);
  }
  z(lnf_g);
  z(lnf_b);
  z(w_head);
  for (auto& f : lora) {
    z(f.a);
    z(f.b);
  }
}

void backward(const AdaptedModel& model, const ForwardCache& cache, const Matrix& dlogits,
              GradientSet& grads) {
  const Model& base = model.base;
  const ModelConfig& cfg = base.cfg;
  const int T = static_cast<int>(cache.tokens.size());
  const int d = cfg.d_model;
  const int heads = cfg.heads;
  const int hd = d / heads;
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  const double s = lora_scaling(model.adapters.cfg);
  const bool adapter_only = grads.adapter_only;

  auto factor = [&](int slot) -> const LoraFactors* {
    const LoraFactors& f = model.adapters.factors[static_cast<size_t>(slot)];
    return f.active() ? &f : nullptr;
  };
  auto gfactor = [&](int slot) -> LoraFactors* {
    LoraFactors& f = grads.lora[static_cast<size_t>(slot)];
    return f.active() ? &f : nullptr;
  };

  // Head and final norm.
  Matrix dxnf(T, d);
  linear_backward(dlogits, cache.xnf, base.w_head, factor(6 * cfg.layers), s, &cache.u_head,
                  adapter_only ? nullptr : &grads.w_head, gfactor(6 * cfg.layers), dxnf);
  Matrix dx(T, d);
  ln_backward(cache.x_last, cache.muf, cache.rstdf, base.lnf_g, dxnf, dx,
              adapter_only ? nullptr : &grads.lnf_g, adapter_only ? nullptr : &grads.lnf_b);

  for (int li = cfg.layers - 1; li >= 0; --li) {
    const LayerWeights& L = base.layers[static_cast<size_t>(li)];
    const LayerCache& lc = cache.layers[static_cast<size_t>(li)];
    LayerWeights* G = adapter_only ? nullptr : &grads.layers[static_cast<size_t>(li)];
    int b = 6 * li;

    // Feed-forward half: x_out = x_mid + w2(gelu(w1(ln2(x_mid)))).
    Matrix dhg(T, cfg.d_ff);
    linear_backward(dx, lc.hg, L.w2, factor(b + 5), s, &lc.u_2, G ? &G->w2 : nullptr,
                    gfactor(b + 5), dhg);
    Matrix dh1(T, cfg.d_ff);
    for (size_t i = 0; i < dh1.d.size(); ++i) dh1.d[i] = dhg.d[i] * gelu_grad(lc.h1.d[i]);
    Matrix dxn2(T, d);
    linear_backward(dh1, lc.xn2, L.w1, factor(b + 4), s, &lc.u_1, G ? &G->w1 : nullptr,
                    gfactor(b + 4), dxn2);
    // dx currently holds d(x_out); accumulate the LN2 path into it to get d(x_mid).
    ln_backward(lc.x_mid, lc.mu2, lc.rstd2, L.ln2_g, dxn2, dx, G ? &G->ln2_g : nullptr,
                G ? &G->ln2_b : nullptr);

    // Attention half: x_mid = x_in + wo(attend(ln1(x_in))).
    Matrix datt(T, d);
    linear_backward(dx, lc.att, L.wo, factor(b + 3), s, &lc.u_o, G ? &G->wo : nullptr,
                    gfactor(b + 3), datt);

    Matrix dq(T, d), dk(T, d), dv(T, d);
    for (int h = 0; h < heads; ++h) {
      Matrix datt_h = col_slice(datt, h * hd, hd);
      Matrix q_h = col_slice(lc.q, h * hd, hd);
      Matrix k_h = col_slice(lc.k, h * hd, hd);
      Matrix v_h = col_slice(lc.v, h * hd, hd);
      const Matrix& probs = lc.probs[static_cast<size_t>(h)];

      Matrix dprobs;
      matmul_nt(datt_h, v_h, dprobs);
      Matrix dv_h;
      matmul_tn(probs, datt_h, dv_h);

      Matrix dscores(T, T);
      for (int i = 0; i < T; ++i) {
        double rowdot = 0.0;
        for (int j = 0; j <= i; ++j) rowdot += dprobs.at(i, j) * probs.at(i, j);
        for (int j = 0; j <= i; ++j)
          dscores.at(i, j) = probs.at(i, j) * (dprobs.at(i, j) - rowdot);
      }
      Matrix dq_h;
      matmul_nn(dscores, k_h, dq_h);
      scale_in_place(dq_h, inv_sqrt_hd);
      Matrix dk_h;
      matmul_tn(dscores, q_h, dk_h);
      scale_in_place(dk_h, inv_sqrt_hd);

      place_cols(dq, dq_h, h * hd);
      place_cols(dk, dk_h, h * hd);
      place_cols(dv, dv_h, h * hd);
    }

    Matrix dxn1(T, d);
    linear_backward(dq, lc.xn1, L.wq, factor(b + 0), s, &lc.u_q, G ? &G->wq : nullptr,
                    gfactor(b + 0), dxn1);
    linear_backward(dk, lc.xn1, L.wk, factor(b + 1), s, &lc.u_k, G ? &G->wk : nullptr,
                    gfactor(b + 1), dxn1);
    linear_backward(dv, lc.xn1, L.wv, factor(b + 2), s, &lc.u_v, G ? &G->wv : nullptr,
                    gfactor(b + 2), dxn1);
    // dx holds d(x_mid); add the LN1 path to form d(x_in) for the layer below.
    ln_backward(lc.x_in, lc.mu1, lc.rstd1, L.ln1_g, dxn1, dx, G ? &G->ln1_g : nullptr,
                G ? &G->ln1_b : nullptr);
  }

  if (!adapter_only) {
    for (int t = 0; t < T; ++t) {
      const double* dxr = dx.row(t);
      double* te = grads.tok_emb.row(cache.tokens[static_cast<size_t>(t)]);
      double* pe = grads.pos_emb.row(t);
      for (int c = 0; c < d; ++c) {
        te[c] += dxr[c];
        pe[c] += dxr[c];
      }
    }
  }
}

std::vector<int> generate(const AdaptedModel& model, const std::vector<int>& prompt, int max_new,
                          int eos_id) {
  if (prompt.empty()) throw std::invalid_argument("generate needs a non-empty prompt");
  if (static_cast<int>(prompt.size()) + max_new > model.base.cfg.max_seq)
    throw std::invalid_argument("prompt of " + std::to_string(prompt.size()) +
                                " tokens plus max_new " + std::to_string(max_new) +
                                " exceeds max_seq " + std::to_string(model.base.cfg.max_seq));
  std::vector<int> cur = prompt;
  std::vector<int> out;
  for (int step = 0; step < max_new; ++step) {
    Matrix logits = forward_last_logits(model, cur);
    const double* row = logits.row(0);
    int best = 0;
    for (int i = 1; i < logits.cols; ++i)
      if (row[i] > row[best]) best = i;
    out.push_back(best);
    cur.push_back(best);
    if (best == eos_id) break;
  }
  return out;
}

std::string model_to_json(const Model& model) {
  ordered_json j;
  j["config"] = {{"layers", model.cfg.layers},   {"heads", model.cfg.heads},
                 {"d_model", model.cfg.d_model}, {"d_ff", model.cfg.d_ff},
                 {"vocab_size", model.cfg.vocab_size}, {"max_seq", model.cfg.max_seq},
                 {"seed", model.cfg.seed}};
  ordered_json params;
  for_each_param(model, [&params](const std::string& name, const Matrix& p) {
    params[name] = mat_to_json(p);
  });
  j["params"] = std::move(params);
  return j.dump();
}

Model model_from_json(const std::string& text) {
  ordered_json j = ordered_json::parse(text);
  const auto& c = j.at("config");
  ModelConfig cfg;
  cfg.layers = c.at("layers").get<int>();
  cfg.heads = c.at("heads").get<int>();
  cfg.d_model = c.at("d_model").get<int>();
  cfg.d_ff = c.at("d_ff").get<int>();
  cfg.vocab_size = c.at("vocab_size").get<int>();
  cfg.max_seq = c.at("max_seq").get<int>();
  cfg.seed = c.at("seed").get<uint64_t>();
  Model m = init_model(cfg);
  const auto& params = j.at("params");
  for_each_param(m, [&params](const std::string& name, Matrix& p) {
    Matrix loaded = mat_from_json(params.at(name));
    if (!loaded.same_shape(p))
      throw std::invalid_argument("parameter " + name + " has unexpected shape");
    p = std::move(loaded);
  });
  return m;
}

void save_model(const Model& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << model_to_json(model) << "\n";
}

Model load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return model_from_json(buf.str());
}

std::string adapter_to_json(const AdapterSet& adapters) {
  ordered_json j;
  j["rank"] = adapters.cfg.rank;
  j["alpha"] = adapters.cfg.alpha;
  j["placement"] = to_string(adapters.cfg.placement);
  ordered_json factors = ordered_json::array();
  for (const auto& f : adapters.factors) {
    if (!f.active()) {
      factors.push_back(nullptr);
    } else {
      ordered_json pair;
      pair["a"] = mat_to_json(f.a);
      pair["b"] = mat_to_json(f.b);
      factors.push_back(std::move(pair));
    }
  }
  j["factors"] = std::move(factors);
  return j.dump();
}

AdapterSet adapter_from_json(const std::string& text) {
  ordered_json j = ordered_json::parse(text);
  AdapterSet out;
  out.cfg.rank = j.at("rank").get<int>();
  out.cfg.alpha = j.at("alpha").get<double>();
  out.cfg.placement = placement_from_string(j.at("placement").get<std::string>());
  for (const auto& f : j.at("factors")) {
    LoraFactors lf;
    if (!f.is_null()) {
      lf.a = mat_from_json(f.at("a"));
      lf.b = mat_from_json(f.at("b"));
    }
    out.factors.push_back(std::move(lf));
  }
  return out;
}

}  // namespace convmem::model
