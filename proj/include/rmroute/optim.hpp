#pragma once

// AdamW with decoupled weight decay. Moment buffers are keyed by parameter
// name so the same optimizer instance can be stepped across epochs while the
// graph is rebuilt every batch.

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "rmroute/tensor.hpp"

namespace rmroute {

struct AdamWConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  int64_t step_count() const { return step_; }
  void set_lr(float lr) { cfg_.lr = lr; }

  // One update over every parameter in the map, in name order.
  void step(NamedTensors& params) {
    ++step_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(step_));
    for (auto& [name, p] : params) {
      if (p->grad.size() != p->data.size())
        throw std::runtime_error("adamw: parameter '" + name + "' has no gradient buffer");
      auto& m = moments_m_[name];
      auto& v = moments_v_[name];
      if (m.empty()) {
        m.assign(p->data.size(), 0.0f);
        v.assign(p->data.size(), 0.0f);
      } else if (m.size() != p->data.size()) {
        throw std::runtime_error("adamw: parameter '" + name + "' changed size mid-run");
      }
      for (size_t i = 0; i < p->data.size(); ++i) {
        const float g = p->grad[i];
        m[i] = cfg_.beta1 * m[i] + (1.0f - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0f - cfg_.beta2) * g * g;
        const float mhat = static_cast<float>(m[i] / bc1);
        const float vhat = static_cast<float>(v[i] / bc2);
        p->data[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps)) +
                      cfg_.lr * cfg_.weight_decay * p->data[i];
      }
    }
  }

  static void zero_grad(NamedTensors& params) {
    for (auto& [name, p] : params) p->zero_grad();
  }

 private:
  AdamWConfig cfg_;
  int64_t step_ = 0;
  std::map<std::string, std::vector<float>> moments_m_;
  std::map<std::string, std::vector<float>> moments_v_;
};

}  // namespace rmroute
