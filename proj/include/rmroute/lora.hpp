#pragma once

// Low-rank adapters for designated backbone linear layers: creation, the
// adapted-linear forward path, parameter counting, and an offline merge used
// as a correctness oracle. y = Wx + b + (alpha/r)·B(A·drop(x)).

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "rmroute/rng.hpp"
#include "rmroute/tensor.hpp"

namespace rmroute {

struct AdapterSpec {
  int rank = 12;
  float alpha = 768.0f;
  float dropout = 0.1f;
  std::vector<std::string> targets;  // full weight names, e.g. "layer.0.attn.query"

  float scaling() const { return alpha / static_cast<float>(rank); }

  void validate() const {
    if (rank < 1) throw std::invalid_argument("adapter spec: rank must be >= 1");
    if (alpha <= 0.0f) throw std::invalid_argument("adapter spec: alpha must be positive");
    if (dropout < 0.0f || dropout >= 1.0f)
      throw std::invalid_argument("adapter spec: dropout must be in [0,1)");
    if (targets.empty()) throw std::invalid_argument("adapter spec: no target layers");
  }
};

struct AdapterWeights {
  std::string id;
  AdapterSpec spec;
  NamedTensors tensors;  // "adapter.{target}.A" [r,in] and "adapter.{target}.B" [out,r]

  bool has(const std::string& target) const {
    return tensors.count("adapter." + target + ".A") > 0;
  }
  const TensorPtr& A(const std::string& target) const {
    return tensors.at("adapter." + target + ".A");
  }
  const TensorPtr& B(const std::string& target) const {
    return tensors.at("adapter." + target + ".B");
  }
};

// Fresh adapter on `backbone`: A ~ trunc-normal(0.02), B = 0, backbone untouched.
inline AdapterWeights attach_adapter(const NamedTensors& backbone, const AdapterSpec& spec,
                                     uint64_t seed, const std::string& id = "adapter") {
  spec.validate();
  AdapterWeights aw;
  aw.id = id;
  aw.spec = spec;
  Rng root(seed);
  for (const auto& target : spec.targets) {
    auto it = backbone.find(target);
    if (it == backbone.end() || it->second->shape.size() != 2) {
      std::string valid;
      for (const auto& [name, t] : backbone)
        if (t->shape.size() == 2 && name.rfind("embed.", 0) != 0)
          valid += (valid.empty() ? "" : ", ") + name;
      throw std::invalid_argument("attach_adapter: unknown target '" + target +
                                  "'; valid linear layers: " + valid);
    }
    const int out_dim = it->second->shape[0];
    const int in_dim = it->second->shape[1];
    auto A = make_tensor({spec.rank, in_dim}, true);
    auto B = make_tensor({out_dim, spec.rank}, true);  // zeros: adapter starts as identity
    Rng r = root.split("adapter." + target + ".A");
    for (auto& v : A->data) v = r.trunc_normal(0.02f);
    aw.tensors["adapter." + target + ".A"] = A;
    aw.tensors["adapter." + target + ".B"] = B;
  }
  return aw;
}

// Low-rank path only: (alpha/r)·B(A·drop(x)) for x of shape [t, in].
inline TensorPtr lora_delta(const TensorPtr& x, const TensorPtr& A, const TensorPtr& B,
                            const AdapterSpec& spec, bool train = false, Rng* rng = nullptr) {
  auto h = dropout(x, spec.dropout, train, rng);
  auto u = matmul_nt(h, A);   // [t, r]
  auto d = matmul_nt(u, B);   // [t, out]
  return scale(d, spec.scaling());
}

// Full adapted linear: base Wx+b plus the low-rank correction.
inline TensorPtr apply_lora_linear(const TensorPtr& x, const TensorPtr& W, const TensorPtr& b,
                                   const TensorPtr& A, const TensorPtr& B,
                                   const AdapterSpec& spec, bool train = false,
                                   Rng* rng = nullptr) {
  auto y = add_row_bias(matmul_nt(x, W), b);
  return add(y, lora_delta(x, A, B, spec, train, rng));
}

// sum over targets of r·(in_dim + out_dim), resolved against the backbone
inline long count_adapter_params(const AdapterSpec& spec, const NamedTensors& backbone) {
  spec.validate();
  long total = 0;
  for (const auto& target : spec.targets) {
    auto it = backbone.find(target);
    if (it == backbone.end() || it->second->shape.size() != 2)
      throw std::invalid_argument("count_adapter_params: unknown target '" + target + "'");
    total += static_cast<long>(spec.rank) * (it->second->shape[0] + it->second->shape[1]);
  }
  return total;
}

// Offline merge oracle: W' = W + (alpha/r)·B·A on every target, double
// accumulation. Returns a deep copy; the live path never merges.
inline NamedTensors merge_adapter(const NamedTensors& backbone, const AdapterWeights& aw) {
  NamedTensors merged;
  for (const auto& [name, t] : backbone)
    merged[name] = make_tensor(t->shape, t->data, false);
  const double s = aw.spec.scaling();
  for (const auto& target : aw.spec.targets) {
    const auto& A = aw.A(target);
    const auto& B = aw.B(target);
    auto& W = merged.at(target);
    const int out_dim = W->shape[0], in_dim = W->shape[1], r = aw.spec.rank;
    for (int o = 0; o < out_dim; ++o)
      for (int i = 0; i < in_dim; ++i) {
        double acc = 0.0;
        for (int k = 0; k < r; ++k)
          acc += static_cast<double>(B->data[o * r + k]) * A->data[k * in_dim + i];
        W->data[o * in_dim + i] += static_cast<float>(s * acc);
      }
  }
  return merged;
}

}  // namespace rmroute
