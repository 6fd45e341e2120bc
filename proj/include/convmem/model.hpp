#pragma once
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "convmem/matrix.hpp"

namespace convmem::model {

struct ModelConfig {
  int layers = 2;
  int heads = 4;
  int d_model = 64;
  int d_ff = 256;
  int vocab_size = 0;
  int max_seq = 256;
  uint64_t seed = 42;
};

void validate_config(const ModelConfig& config);

struct LayerWeights {
  Matrix ln1_g, ln1_b;
  Matrix wq, wk, wv, wo;  // d_model x d_model
  Matrix ln2_g, ln2_b;
  Matrix w1;  // d_ff x d_model
  Matrix w2;  // d_model x d_ff
};

struct Model {
  ModelConfig cfg;
  Matrix tok_emb;  // vocab x d_model
  Matrix pos_emb;  // max_seq x d_model
  std::vector<LayerWeights> layers;
  Matrix lnf_g, lnf_b;
  Matrix w_head;  // vocab x d_model
};

Model init_model(const ModelConfig& config);

// Closed-form parameter count for a config; init_model's tensors sum to this.
long long param_count(const ModelConfig& config);
long long actual_param_count(const Model& model);

// Canonical parameter walk used by init, checksums and serialization.
void for_each_param(Model& model, const std::function<void(const std::string&, Matrix&)>& fn);
void for_each_param(const Model& model,
                    const std::function<void(const std::string&, const Matrix&)>& fn);

uint64_t param_checksum(const Model& model);

// --- LoRA -------------------------------------------------------------------

enum class Placement { AllLinear, AttentionOnly };
const char* to_string(Placement p);
Placement placement_from_string(const std::string& s);

struct LoRAConfig {
  int rank = 4;
  double alpha = 16.0;
  Placement placement = Placement::AllLinear;
};

double lora_scaling(const LoRAConfig& cfg);  // alpha / rank

struct LoraFactors {
  Matrix a;  // rank x d_in
  Matrix b;  // d_out x rank
  bool active() const { return a.rows > 0; }
};

// One slot per linear weight: per layer [wq, wk, wv, wo, w1, w2], then the
// head. Inactive slots hold empty factors.
struct AdapterSet {
  LoRAConfig cfg;
  std::vector<LoraFactors> factors;
};

struct AdaptedModel {
  Model base;
  AdapterSet adapters;
};

int linear_slot_count(const ModelConfig& config);  // 6 * layers + 1
int adapted_matrix_count(const AdaptedModel& model);

AdaptedModel attach_lora(Model base, const LoRAConfig& lora);
Model merge_lora(const AdaptedModel& model);

// --- forward / backward -----------------------------------------------------

struct LayerCache {
  Matrix x_in, xn1;
  std::vector<double> mu1, rstd1;
  Matrix q, k, v;               // post-adapter projections
  std::vector<Matrix> probs;    // per head, T x T
  Matrix att;                   // concatenated head outputs
  Matrix x_mid, xn2;
  std::vector<double> mu2, rstd2;
  Matrix h1, hg;                // pre/post activation
  Matrix u_q, u_k, u_v, u_o, u_1, u_2;  // x·Aᵀ per adapted slot
};

struct ForwardCache {
  std::vector<int> tokens;
  std::vector<LayerCache> layers;
  Matrix x_last, xnf;
  std::vector<double> muf, rstdf;
  Matrix u_head;
};

// Full T x vocab logits; pass a cache to enable backward().
Matrix forward(const AdaptedModel& model, const std::vector<int>& tokens,
               ForwardCache* cache = nullptr);
Matrix forward(const Model& model, const std::vector<int>& tokens);

// 1 x vocab logits of the final position only (generation fast path).
Matrix forward_last_logits(const AdaptedModel& model, const std::vector<int>& tokens);

struct GradientSet {
  bool adapter_only = false;
  Matrix tok_emb, pos_emb;
  std::vector<LayerWeights> layers;
  Matrix lnf_g, lnf_b, w_head;
  std::vector<LoraFactors> lora;

  void init_like(const AdaptedModel& model, bool adapter_only_grads);
  void zero();
};

// Accumulates parameter gradients for d(loss)/d(logits) into grads.
void backward(const AdaptedModel& model, const ForwardCache& cache, const Matrix& dlogits,
              GradientSet& grads);

// Greedy decode; returns the continuation (EOS included when emitted).
std::vector<int> generate(const AdaptedModel& model, const std::vector<int>& prompt,
                          int max_new, int eos_id);

// --- serialization ----------------------------------------------------------

std::string model_to_json(const Model& model);
Model model_from_json(const std::string& text);
void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

std::string adapter_to_json(const AdapterSet& adapters);
AdapterSet adapter_from_json(const std::string& text);

}  // namespace convmem::model
