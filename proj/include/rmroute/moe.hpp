#pragma once

// Sparse mixture-of-experts reward head: noisy top-k gate over expert FFNs,
// layer norms before the mixture and before the regression layer, and a
// coefficient-of-variation load-balance penalty.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rmroute/rng.hpp"
#include "rmroute/tensor.hpp"

namespace rmroute {

struct MoEConfig {
  int num_experts = 5;  // one expert per domain by default
  int top_k = 2;
  int expert_dim = 128;
  bool noise_enabled = true;
  float load_balance_coeff = 0.0f;

  void validate() const {
    if (num_experts < 1) throw std::invalid_argument("moe config: need at least one expert");
    if (top_k < 1 || top_k > num_experts)
      throw std::invalid_argument("moe config: top_k " + std::to_string(top_k) +
                                  " outside [1, " + std::to_string(num_experts) + "]");
    if (expert_dim < 1) throw std::invalid_argument("moe config: expert_dim must be positive");
    if (load_balance_coeff < 0.0f)
      throw std::invalid_argument("moe config: load-balance coefficient must be >= 0");
  }

  std::string summary() const {
    std::ostringstream o;
    o << "experts=" << num_experts << " top_k=" << top_k << " expert_dim=" << expert_dim
      << " noise=" << (noise_enabled ? 1 : 0) << " lb_coeff=" << load_balance_coeff;
    return o.str();
  }
};

struct GateDecision {
  std::vector<int> indices;          // k distinct experts, strongest first
  std::vector<float> weights;        // same order, positive, sum to 1
  std::vector<float> noisy_logits;   // full-width raw H values
  TensorPtr weight_row;              // [1, num_experts] graph node, zeros off the top-k
};

// moe.* tensors: gate matrices, per-expert FFNs, the two layer norms, and the
// regression layer that follows the mixture.
inline NamedTensors init_moe_weights(int hidden, const MoEConfig& cfg, uint64_t seed) {
  cfg.validate();
  NamedTensors w;
  auto add_tensor = [&](const std::string& name, std::vector<int> shape, float fill,
                        bool random, Rng& root) {
    auto t = make_tensor(std::move(shape), true);
    if (random) {
      Rng r = root.split(name);
      for (auto& v : t->data) v = r.trunc_normal(0.02f);
    } else if (fill != 0.0f) {
      std::fill(t->data.begin(), t->data.end(), fill);
    }
    w[name] = t;
  };
  Rng root(seed);
  add_tensor("moe.gate.Wg", {hidden, cfg.num_experts}, 0, true, root);
  add_tensor("moe.gate.Wnoise", {hidden, cfg.num_experts}, 0, true, root);
  for (const char* ln : {"moe.ln1", "moe.ln2"}) {
    add_tensor(std::string(ln) + ".gain", {hidden}, 1.0f, false, root);
    add_tensor(std::string(ln) + ".bias", {hidden}, 0, false, root);
  }
  for (int i = 0; i < cfg.num_experts; ++i) {
    const std::string p = "moe.expert." + std::to_string(i) + ".";
    add_tensor(p + "w1", {cfg.expert_dim, hidden}, 0, true, root);
    add_tensor(p + "w1.bias", {cfg.expert_dim}, 0, false, root);
    add_tensor(p + "w2", {hidden, cfg.expert_dim}, 0, true, root);
    add_tensor(p + "w2.bias", {hidden}, 0, false, root);
  }
  add_tensor("moe.head.weight", {1, hidden}, 0, true, root);
  add_tensor("moe.head.bias", {1}, 0, false, root);
  return w;
}

// H_i = (xW_g)_i + ε_i · softplus((xW_noise)_i) in training with noise on,
// else the clean logits; keep the top-k (ties to the lower index), softmax
// over the kept entries only.
inline GateDecision gate(const TensorPtr& x, const NamedTensors& w, const MoEConfig& cfg,
                         bool train = false, Rng* rng = nullptr) {
  cfg.validate();
  const auto& wg = w.at("moe.gate.Wg");
  if (x->shape.size() != 2 || x->shape[0] != 1 || x->shape[1] != wg->shape[0])
    throw std::invalid_argument("gate: expected pooled input [1," +
                                std::to_string(wg->shape[0]) + "], got " + shape_str(x->shape));
  auto h = matmul(x, wg);  // [1, n_e]
  if (train && cfg.noise_enabled) {
    if (!rng) throw std::invalid_argument("gate: rng required for noisy training gate");
    auto noise_scale = softplus(matmul(x, w.at("moe.gate.Wnoise")));
    auto eps = make_tensor({1, cfg.num_experts});
    for (auto& v : eps->data) v = static_cast<float>(rng->normal());
    h = add(h, mul(eps, noise_scale));
  }

  std::vector<int> order(cfg.num_experts);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return h->data[a] > h->data[b];  // stable: equal logits keep the lower index first
  });
  GateDecision d;
  d.noisy_logits = h->data;
  d.indices.assign(order.begin(), order.begin() + cfg.top_k);
  auto kept = gather_cols(h, d.indices);
  auto soft = softmax_rows(kept);
  d.weights = soft->data;
  d.weight_row = scatter_cols(soft, d.indices, cfg.num_experts);
  return d;
}

// Two-layer FFN hidden -> expert_dim -> hidden with GELU; no residual here.
inline TensorPtr expert_forward(const TensorPtr& x, const NamedTensors& w, int expert_index) {
  const std::string p = "moe.expert." + std::to_string(expert_index) + ".";
  auto f = gelu(add_row_bias(matmul_nt(x, w.at(p + "w1")), w.at(p + "w1.bias")));
  return add_row_bias(matmul_nt(f, w.at(p + "w2")), w.at(p + "w2.bias"));
}

struct MoEOutput {
  TensorPtr reward;   // [1,1]
  TensorPtr aux;      // coefficient × per-sample load-balance term, [1,1]
  GateDecision decision;
};

// Batch-level load-balance penalty: CV² of per-expert importance, where
// importance is the summed gate weight each expert received.
inline TensorPtr load_balance_loss_graph(const std::vector<GateDecision>& batch, int n_e) {
  if (batch.empty()) throw std::invalid_argument("load_balance_loss: empty batch");
  TensorPtr importance = batch[0].weight_row;
  for (size_t i = 1; i < batch.size(); ++i) importance = add(importance, batch[i].weight_row);
  if (importance->cols() != n_e)
    throw std::invalid_argument("load_balance_loss: decision width " +
                                std::to_string(importance->cols()) + " != num experts " +
                                std::to_string(n_e));
  auto m = mean_all(importance);
  auto m2 = mean_all(mul(importance, importance));
  auto var = sub(m2, mul(m, m));  // population variance
  return div_elem(var, mul(m, m));
}

inline float load_balance_loss(const std::vector<GateDecision>& batch, int n_e) {
  if (batch.empty()) throw std::invalid_argument("load_balance_loss: empty batch");
  std::vector<double> importance(n_e, 0.0);
  for (const auto& d : batch)
    for (size_t j = 0; j < d.indices.size(); ++j) importance[d.indices[j]] += d.weights[j];
  double mean = 0.0;
  for (double v : importance) mean += v;
  mean /= n_e;
  double var = 0.0;
  for (double v : importance) var += (v - mean) * (v - mean);
  var /= n_e;
  return static_cast<float>(var / (mean * mean));
}

// Full sparse head: y = Σ_{i∈topk} w_i · expert_i(LN1(x)); reward through a
// second layer norm and the regression layer. Unselected experts are never
// evaluated, so their tensors receive no gradient.
inline MoEOutput moe_head(const TensorPtr& x, const NamedTensors& w, const MoEConfig& cfg,
                          bool train = false, Rng* rng = nullptr) {
  auto u = layer_norm_rows(x, w.at("moe.ln1.gain"), w.at("moe.ln1.bias"));
  MoEOutput out;
  out.decision = gate(u, w, cfg, train, rng);
  TensorPtr y;
  for (size_t j = 0; j < out.decision.indices.size(); ++j) {
    auto wj = gather_cols(out.decision.weight_row, {out.decision.indices[j]});
    auto term = mul_by_scalar(expert_forward(u, w, out.decision.indices[j]), wj);
    y = y ? add(y, term) : term;
  }
  auto z = layer_norm_rows(y, w.at("moe.ln2.gain"), w.at("moe.ln2.bias"));
  out.reward = add_row_bias(matmul_nt(z, w.at("moe.head.weight")), w.at("moe.head.bias"));
  out.aux = scale(load_balance_loss_graph({out.decision}, cfg.num_experts),
                  cfg.load_balance_coeff);
  return out;
}

}  // namespace rmroute
