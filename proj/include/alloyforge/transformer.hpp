#pragma once

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "alloyforge/checkpoint.hpp"

namespace alloyforge {

// Parameter naming convention (shapes in row-major (rows, cols)):
//   tok_embed                 (vocab_size, d_model)
//   layers.<i>.attn.norm      (d_model)
//   layers.<i>.attn.wq        (d_model, d_model)
//   layers.<i>.attn.wk        (d_model, kv_dim)
//   layers.<i>.attn.wv        (d_model, kv_dim)
//   layers.<i>.attn.wo        (d_model, d_model)
//   layers.<i>.ffn.norm       (d_model)
//   layers.<i>.ffn.w_gate     (d_model, d_ffn)
//   layers.<i>.ffn.w_up       (d_model, d_ffn)
//   layers.<i>.ffn.w_down     (d_ffn, d_model)
//   final.norm                (d_model)
//   output.w                  (vocab_size, d_model), only when untied

struct RopeCache {
  int head_dim = 0;
  int max_pos = 0;
  std::vector<double> cos_tab;  // (max_pos, head_dim/2)
  std::vector<double> sin_tab;

  static RopeCache build(double rope_theta, int head_dim, int max_pos);
};

using GradMap = std::unordered_map<std::string, std::vector<double>>;

struct LayerActs {
  std::vector<double> x_in;        // (T, d) residual stream entering the layer
  std::vector<double> attn_normed; // (T, d)
  std::vector<double> q, k, v;     // q: (T, d) post-rope; k, v: (T, kv_dim)
  std::vector<double> attn_probs;  // (n_heads, T, T)
  std::vector<double> attn_ctx;    // (T, d) heads concatenated, pre-wo
  std::vector<double> x_mid;       // (T, d) after attention residual
  std::vector<double> ffn_normed;  // (T, d)
  std::vector<double> gate_pre;    // (T, d_ffn) pre-activation
  std::vector<double> up;          // (T, d_ffn)
  std::vector<double> ffn_act;     // (T, d_ffn) swish(gate) * up
};

struct ForwardCache {
  std::vector<int> tokens;
  std::vector<LayerActs> layers;
  std::vector<double> x_final;      // (T, d) pre final norm
  std::vector<double> final_normed; // (T, d)
};

class ToyModel {
 public:
  ToyModel() = default;
  explicit ToyModel(Checkpoint params);

  static ToyModel random_init(const ModelConfig& cfg, std::uint64_t seed,
                              double scale = 0.08);

  const ModelConfig& config() const { return params_.config; }
  const Checkpoint& parameters() const { return params_; }
  Checkpoint& parameters() { return params_; }

  // Logits (T, vocab); cache is filled for backward when non-null.
  std::vector<double> forward(const std::vector<int>& tokens,
                              ForwardCache* cache = nullptr) const;

  double sequence_log_prob(const std::vector<int>& prompt,
                           const std::vector<int>& response) const;

  // d(loss)/d(parameters) given d(loss)/d(logits); cache must come from a
  // forward over the same tokens.
  GradMap backward(const ForwardCache& cache,
                   const std::vector<double>& dlogits) const;

  void apply_gradients(const GradMap& grads, double lr);

  // Autoregressive sampling; temperature 0 means greedy.
  std::vector<int> generate(const std::vector<int>& prompt, int max_new,
                            double temperature, Rng& rng) const;

 private:
  Checkpoint params_;
  RopeCache rope_;
};

// Standalone pieces, exposed for unit tests.
std::vector<double> rmsnorm(std::span<const double> x,
                            std::span<const double> gain, double eps);

std::vector<double> swiglu_ffn(std::span<const double> x,
                               std::span<const double> w_gate,
                               std::span<const double> w_up,
                               std::span<const double> w_down, int d_model,
                               int d_ffn, double beta = 1.0);

// heads: (seq, n_heads, head_dim) flattened; rotates each dim pair in place.
void rope_apply(std::vector<double>& heads, int seq, int n_heads, int head_dim,
                const std::vector<int>& positions, const RopeCache& cache);

// q: (seq, n_heads, hd), k/v: (seq, n_kv_heads, hd); returns (seq, n_heads, hd).
std::vector<double> gqa_attention(const std::vector<double>& q,
                                  const std::vector<double>& k,
                                  const std::vector<double>& v, int seq,
                                  int n_heads, int n_kv_heads, int head_dim,
                                  bool causal,
                                  std::vector<double>* probs_out = nullptr);

GradMap zero_grads_like(const Checkpoint& params);
void grad_accumulate(GradMap& into, const GradMap& from, double scale = 1.0);

}  // namespace alloyforge
