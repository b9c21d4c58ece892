#pragma once

// Reverse-mode differentiable tensor engine. Every op builds a node that
// remembers its parents and a backprop closure; backward() walks the graph
// in reverse topological order and accumulates gradients into the
// requires_grad leaves. Data is row-major float32 throughout.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "rmroute/rng.hpp"

namespace rmroute {

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;
using NamedTensors = std::map<std::string, TensorPtr>;

struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty means "all zero / not materialized"
  bool requires_grad = false;

  // graph links, populated by ops; leaves have no parents
  bool needs_grad = false;  // requires_grad, or depends on something that does
  std::vector<TensorPtr> parents;
  std::function<void()> backprop;

  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  size_t size() const { return data.size(); }

  float item() const {
    if (data.size() != 1) throw std::invalid_argument("item: tensor is not scalar");
    return data[0];
  }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }
  void zero_grad() { grad.assign(data.size(), 0.0f); }
};

inline size_t numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor shape has non-positive dimension");
    n *= static_cast<size_t>(d);
  }
  return n;
}

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream o;
  o << "[";
  for (size_t i = 0; i < s.size(); ++i) o << (i ? "," : "") << s[i];
  o << "]";
  return o.str();
}

inline TensorPtr make_tensor(std::vector<int> shape, bool requires_grad = false) {
  auto t = std::make_shared<Tensor>();
  t->data.assign(numel(shape), 0.0f);
  t->shape = std::move(shape);
  t->requires_grad = requires_grad;
  t->needs_grad = requires_grad;
  if (requires_grad) t->ensure_grad();
  return t;
}

inline TensorPtr make_tensor(std::vector<int> shape, std::vector<float> values,
                             bool requires_grad = false) {
  if (numel(shape) != values.size())
    throw std::invalid_argument("make_tensor: " + shape_str(shape) + " does not hold " +
                                std::to_string(values.size()) + " values");
  auto t = make_tensor(std::move(shape), requires_grad);
  t->data = std::move(values);
  return t;
}

inline TensorPtr make_tensor(std::vector<int> shape, std::initializer_list<float> values,
                             bool requires_grad = false) {
  return make_tensor(std::move(shape), std::vector<float>(values), requires_grad);
}

inline TensorPtr scalar_tensor(float v, bool requires_grad = false) {
  return make_tensor(std::move(std::vector<int>{1, 1}), std::vector<float>{v}, requires_grad);
}

namespace detail {

inline TensorPtr node(std::vector<int> shape, std::vector<TensorPtr> parents) {
  auto t = std::make_shared<Tensor>();
  t->data.assign(numel(shape), 0.0f);
  t->shape = std::move(shape);
  for (const auto& p : parents) t->needs_grad = t->needs_grad || p->needs_grad;
  t->parents = std::move(parents);
  return t;
}

inline void check_2d(const Tensor& t, const char* op) {
  if (t.shape.size() != 2)
    throw std::invalid_argument(std::string(op) + ": expected 2-d tensor, got " +
                                shape_str(t.shape));
}

[[noreturn]] inline void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                              " vs " + shape_str(b.shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matrix products

// [m,k] x [k,n] -> [m,n]
inline TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
  detail::check_2d(*a, "matmul");
  detail::check_2d(*b, "matmul");
  if (a->shape[1] != b->shape[0]) detail::shape_error("matmul", *a, *b);
  const int m = a->shape[0], k = a->shape[1], n = b->shape[1];
  auto out = detail::node({m, n}, {a, b});
  const float* A = a->data.data();
  const float* B = b->data.data();
  float* C = out->data.data();
  for (int i = 0; i < m; ++i)
    for (int kk = 0; kk < k; ++kk) {
      const float av = A[i * k + kk];
      const float* Br = B + kk * n;
      float* Cr = C + i * n;
      for (int j = 0; j < n; ++j) Cr[j] += av * Br[j];
    }
  out->backprop = [self = out.get(), pa = a.get(), pb = b.get(), m, k, n]() {
    const float* G = self->grad.data();
    if (pa->needs_grad) {
      float* dA = pa->grad.data();
      const float* B = pb->data.data();
      for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
          const float* Gr = G + i * n;
          const float* Br = B + kk * n;
          float acc = 0.0f;
          for (int j = 0; j < n; ++j) acc += Gr[j] * Br[j];
          dA[i * k + kk] += acc;
        }
    }
    if (pb->needs_grad) {
      float* dB = pb->grad.data();
      const float* A = pa->data.data();
      for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
          const float av = A[i * k + kk];
          const float* Gr = G + i * n;
          float* dBr = dB + kk * n;
          for (int j = 0; j < n; ++j) dBr[j] += av * Gr[j];
        }
    }
  };
  return out;
}

// [m,k] x [n,k]^T -> [m,n]; the natural layout for [out,in] linear weights
inline TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b) {
  detail::check_2d(*a, "matmul_nt");
  detail::check_2d(*b, "matmul_nt");
  if (a->shape[1] != b->shape[1]) detail::shape_error("matmul_nt", *a, *b);
  const int m = a->shape[0], k = a->shape[1], n = b->shape[0];
  auto out = detail::node({m, n}, {a, b});
  const float* A = a->data.data();
  const float* B = b->data.data();
  float* C = out->data.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      const float* Ar = A + i * k;
      const float* Br = B + j * k;
      float acc = 0.0f;
      for (int kk = 0; kk < k; ++kk) acc += Ar[kk] * Br[kk];
      C[i * n + j] = acc;
    }
  out->backprop = [self = out.get(), pa = a.get(), pb = b.get(), m, k, n]() {
    const float* G = self->grad.data();
    if (pa->needs_grad) {
      float* dA = pa->grad.data();
      const float* B = pb->data.data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          const float gv = G[i * n + j];
          const float* Br = B + j * k;
          float* dAr = dA + i * k;
          for (int kk = 0; kk < k; ++kk) dAr[kk] += gv * Br[kk];
        }
    }
    if (pb->needs_grad) {
      float* dB = pb->grad.data();
      const float* A = pa->data.data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          const float gv = G[i * n + j];
          const float* Ar = A + i * k;
          float* dBr = dB + j * k;
          for (int kk = 0; kk < k; ++kk) dBr[kk] += gv * Ar[kk];
        }
    }
  };
  return out;
}

// ---------------------------------------------------------------------------
// elementwise

namespace detail {

template <class Fwd, class Bwd>
TensorPtr unary_op(const char* /*name*/, const TensorPtr& x, Fwd fwd, Bwd bwd) {
  auto out = node(x->shape, {x});
  for (size_t i = 0; i < x->data.size(); ++i) out->data[i] = fwd(x->data[i]);
  out->backprop = [self = out.get(), px = x.get(), bwd]() {
    if (!px->needs_grad) return;
    for (size_t i = 0; i < self->data.size(); ++i)
      px->grad[i] += self->grad[i] * bwd(px->data[i], self->data[i]);
  };
  return out;
}

}  // namespace detail

inline TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape) detail::shape_error("add", *a, *b);
  auto out = detail::node(a->shape, {a, b});
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
  out->backprop = [self = out.get(), pa = a.get(), pb = b.get()]() {
    if (pa->needs_grad)
      for (size_t i = 0; i < self->grad.size(); ++i) pa->grad[i] += self->grad[i];
    if (pb->needs_grad)
      for (size_t i = 0; i < self->grad.size(); ++i) pb->grad[i] += self->grad[i];
  };
  return out;
}

inline TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape) detail::shape_error("sub", *a, *b);
  auto out = detail::node(a->shape, {a, b});
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] - b->data[i];
  out->backprop = [self = out.get(), pa = a.get(), pb = b.get()]() {
    if (pa->needs_grad)
      for (size_t i = 0; i < self->grad.size(); ++i) pa->grad[i] += self->grad[i];
    if (pb->needs_grad)
      for (size_t i = 0; i < self->grad.size(); ++i) pb->grad[i] -= self->grad[i];
  };
  return out;
}

inline TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape) detail::shape_error("mul", *a, *b);
  auto out = detail::node(a->shape, {a, b});
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * b->data[i];
  out->backprop = [self = out.get(), pa = a.get(), pb = b.get()]() {
    if (pa->needs_grad)
      for (size_t i = 0; i < self->grad.size(); ++i) pa->grad[i] += self->grad[i] * pb->data[i];
    if (pb->needs_grad)
      for (size_t i = 0; i < self->grad.size(); ++i) pb->grad[i] += self->grad[i] * pa->data[i];
  };
  return out;
}

inline TensorPtr div_elem(const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape) detail::shape_error("div", *a, *b);
  auto out = detail::node(a->shape, {a, b});
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] / b->data[i];
  out->backprop = [self = out.get(), pa = a.get(), pb = b.get()]() {
    if (pa->needs_grad)
      for (size_t i = 0; i < self->grad.size(); ++i) pa->grad[i] += self->grad[i] / pb->data[i];
    if (pb->needs_grad)
      for (size_t i = 0; i < self->grad.size(); ++i)
        pb->grad[i] -= self->grad[i] * pa->data[i] / (pb->data[i] * pb->data[i]);
  };
  return out;
}

inline TensorPtr scale(const TensorPtr& x, float c) {
  auto out = detail::node(x->shape, {x});
  for (size_t i = 0; i < x->data.size(); ++i) out->data[i] = x->data[i] * c;
  out->backprop = [self = out.get(), px = x.get(), c]() {
    if (!px->needs_grad) return;
    for (size_t i = 0; i < self->grad.size(); ++i) px->grad[i] += self->grad[i] * c;
  };
  return out;
}

inline TensorPtr neg(const TensorPtr& x) { return scale(x, -1.0f); }

// x * s where s is a [1,1] graph node (gradient flows into both factors)
inline TensorPtr mul_by_scalar(const TensorPtr& x, const TensorPtr& s) {
  if (s->data.size() != 1)
    throw std::invalid_argument("mul_by_scalar: scale operand is not scalar, got " +
                                shape_str(s->shape));
  auto out = detail::node(x->shape, {x, s});
  const float sv = s->data[0];
  for (size_t i = 0; i < x->data.size(); ++i) out->data[i] = x->data[i] * sv;
  out->backprop = [self = out.get(), px = x.get(), ps = s.get()]() {
    const float sv = ps->data[0];
    if (px->needs_grad)
      for (size_t i = 0; i < self->grad.size(); ++i) px->grad[i] += self->grad[i] * sv;
    if (ps->needs_grad) {
      float acc = 0.0f;
      for (size_t i = 0; i < self->grad.size(); ++i) acc += self->grad[i] * px->data[i];
      ps->grad[0] += acc;
    }
  };
  return out;
}

inline TensorPtr add_const(const TensorPtr& x, float c) {
  auto out = detail::node(x->shape, {x});
  for (size_t i = 0; i < x->data.size(); ++i) out->data[i] = x->data[i] + c;
  out->backprop = [self = out.get(), px = x.get()]() {
    if (!px->needs_grad) return;
    for (size_t i = 0; i < self->grad.size(); ++i) px->grad[i] += self->grad[i];
  };
  return out;
}

inline TensorPtr sigmoid(const TensorPtr& x) {
  return detail::unary_op(
      "sigmoid", x,
      [](float v) {
        if (v >= 0.0f) return 1.0f / (1.0f + std::exp(-v));
        const float e = std::exp(v);
        return e / (1.0f + e);
      },
      [](float, float y) { return y * (1.0f - y); });
}

inline TensorPtr log_elem(const TensorPtr& x) {
  for (float v : x->data)
    if (v <= 0.0f) throw std::invalid_argument("log: non-positive input " + std::to_string(v));
  return detail::unary_op(
      "log", x, [](float v) { return std::log(v); },
      [](float v, float) { return 1.0f / v; });
}

inline TensorPtr softplus(const TensorPtr& x) {
  // log(1 + e^x) without overflow at either tail
  return detail::unary_op(
      "softplus", x,
      [](float v) {
        if (v > 20.0f) return v;
        if (v < -20.0f) return std::exp(v);
        return std::log1p(std::exp(v));
      },
      [](float v, float) {
        if (v >= 0.0f) return 1.0f / (1.0f + std::exp(-v));
        const float e = std::exp(v);
        return e / (1.0f + e);
      });
}

inline TensorPtr gelu(const TensorPtr& x) {
  // tanh approximation
  constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
  constexpr float kA = 0.044715f;
  return detail::unary_op(
      "gelu", x,
      [](float v) {
        const float u = kC * (v + kA * v * v * v);
        return 0.5f * v * (1.0f + std::tanh(u));
      },
      [](float v, float) {
        const float u = kC * (v + kA * v * v * v);
        const float t = std::tanh(u);
        const float du = kC * (1.0f + 3.0f * kA * v * v);
        return 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du;
      });
}

// ---------------------------------------------------------------------------
// reductions and row ops

inline TensorPtr sum_all(const TensorPtr& x) {
  auto out = detail::node({1, 1}, {x});
  double acc = 0.0;
  for (float v : x->data) acc += v;
  out->data[0] = static_cast<float>(acc);
  out->backprop = [self = out.get(), px = x.get()]() {
    if (!px->needs_grad) return;
    const float g = self->grad[0];
    for (size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += g;
  };
  return out;
}

inline TensorPtr mean_all(const TensorPtr& x) {
  return scale(sum_all(x), 1.0f / static_cast<float>(x->data.size()));
}

// [m,n] + [n] broadcast over rows
inline TensorPtr add_row_bias(const TensorPtr& x, const TensorPtr& b) {
  detail::check_2d(*x, "add_row_bias");
  const int m = x->shape[0], n = x->shape[1];
  if (static_cast<int>(b->data.size()) != n) detail::shape_error("add_row_bias", *x, *b);
  auto out = detail::node(x->shape, {x, b});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out->data[i * n + j] = x->data[i * n + j] + b->data[j];
  out->backprop = [self = out.get(), px = x.get(), pb = b.get(), m, n]() {
    if (px->needs_grad)
      for (size_t i = 0; i < self->grad.size(); ++i) px->grad[i] += self->grad[i];
    if (pb->needs_grad)
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) pb->grad[j] += self->grad[i * n + j];
  };
  return out;
}

inline TensorPtr softmax_rows(const TensorPtr& x) {
  detail::check_2d(*x, "softmax");
  const int m = x->shape[0], n = x->shape[1];
  auto out = detail::node(x->shape, {x});
  for (int i = 0; i < m; ++i) {
    const float* xr = x->data.data() + i * n;
    float* yr = out->data.data() + i * n;
    float mx = xr[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    float z = 0.0f;
    for (int j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      z += yr[j];
    }
    for (int j = 0; j < n; ++j) yr[j] /= z;
  }
  out->backprop = [self = out.get(), px = x.get(), m, n]() {
    if (!px->needs_grad) return;
    for (int i = 0; i < m; ++i) {
      const float* y = self->data.data() + i * n;
      const float* g = self->grad.data() + i * n;
      float dot = 0.0f;
      for (int j = 0; j < n; ++j) dot += y[j] * g[j];
      float* dx = px->grad.data() + i * n;
      for (int j = 0; j < n; ++j) dx[j] += y[j] * (g[j] - dot);
    }
  };
  return out;
}

// per-row layer norm with population variance: y = gain * (x - mu)/sqrt(var + eps) + bias
inline TensorPtr layer_norm_rows(const TensorPtr& x, const TensorPtr& gain,
                                 const TensorPtr& bias, float eps = 1e-5f) {
  detail::check_2d(*x, "layernorm");
  const int m = x->shape[0], n = x->shape[1];
  if (static_cast<int>(gain->data.size()) != n) detail::shape_error("layernorm", *x, *gain);
  if (static_cast<int>(bias->data.size()) != n) detail::shape_error("layernorm", *x, *bias);
  auto out = detail::node(x->shape, {x, gain, bias});
  auto inv_std = std::make_shared<std::vector<float>>(m);
  auto xhat = std::make_shared<std::vector<float>>(static_cast<size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    const float* xr = x->data.data() + i * n;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += xr[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double d = xr[j] - mu;
      var += d * d;
    }
    var /= n;
    const float is = 1.0f / std::sqrt(static_cast<float>(var) + eps);
    (*inv_std)[i] = is;
    for (int j = 0; j < n; ++j) {
      const float xh = (xr[j] - static_cast<float>(mu)) * is;
      (*xhat)[i * n + j] = xh;
      out->data[i * n + j] = gain->data[j] * xh + bias->data[j];
    }
  }
  out->backprop = [self = out.get(), px = x.get(), pg = gain.get(), pb = bias.get(), inv_std,
                   xhat, m, n]() {
    for (int i = 0; i < m; ++i) {
      const float* g = self->grad.data() + i * n;
      const float* xh = xhat->data() + i * n;
      if (pg->needs_grad)
        for (int j = 0; j < n; ++j) pg->grad[j] += g[j] * xh[j];
      if (pb->needs_grad)
        for (int j = 0; j < n; ++j) pb->grad[j] += g[j];
      if (px->needs_grad) {
        float sum_dxh = 0.0f, sum_dxh_xh = 0.0f;
        for (int j = 0; j < n; ++j) {
          const float dxh = g[j] * pg->data[j];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xh[j];
        }
        const float is = (*inv_std)[i];
        float* dx = px->grad.data() + i * n;
        for (int j = 0; j < n; ++j) {
          const float dxh = g[j] * pg->data[j];
          dx[j] += is * (dxh - sum_dxh / n - xh[j] * sum_dxh_xh / n);
        }
      }
    }
  };
  return out;
}

// ---------------------------------------------------------------------------
// structural ops

inline TensorPtr row(const TensorPtr& x, int i) {
  detail::check_2d(*x, "row");
  const int m = x->shape[0], n = x->shape[1];
  if (i < 0 || i >= m)
    throw std::invalid_argument("row: index " + std::to_string(i) + " out of " + shape_str(x->shape));
  auto out = detail::node({1, n}, {x});
  std::copy_n(x->data.data() + i * n, n, out->data.data());
  out->backprop = [self = out.get(), px = x.get(), i, n]() {
    if (!px->needs_grad) return;
    for (int j = 0; j < n; ++j) px->grad[i * n + j] += self->grad[j];
  };
  return out;
}

inline TensorPtr slice_cols(const TensorPtr& x, int start, int len) {
  detail::check_2d(*x, "slice_cols");
  const int m = x->shape[0], n = x->shape[1];
  if (start < 0 || len <= 0 || start + len > n)
    throw std::invalid_argument("slice_cols: [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") out of " + shape_str(x->shape));
  auto out = detail::node({m, len}, {x});
  for (int i = 0; i < m; ++i)
    std::copy_n(x->data.data() + i * n + start, len, out->data.data() + i * len);
  out->backprop = [self = out.get(), px = x.get(), start, len, m, n]() {
    if (!px->needs_grad) return;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < len; ++j) px->grad[i * n + start + j] += self->grad[i * len + j];
  };
  return out;
}

inline TensorPtr concat_cols(const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  const int m = parts[0]->shape[0];
  int n = 0;
  for (const auto& p : parts) {
    detail::check_2d(*p, "concat_cols");
    if (p->shape[0] != m) detail::shape_error("concat_cols", *parts[0], *p);
    n += p->shape[1];
  }
  auto out = detail::node({m, n}, parts);
  int off = 0;
  for (const auto& p : parts) {
    const int w = p->shape[1];
    for (int i = 0; i < m; ++i)
      std::copy_n(p->data.data() + i * w, w, out->data.data() + i * n + off);
    off += w;
  }
  out->backprop = [self = out.get(), m, n]() {
    int off = 0;
    for (const auto& p : self->parents) {
      const int w = p->shape[1];
      if (p->needs_grad)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < w; ++j) p->grad[i * w + j] += self->grad[i * n + off + j];
      off += w;
    }
  };
  return out;
}

// pick columns of a [1,n] row; used for top-k gate logits
inline TensorPtr gather_cols(const TensorPtr& x, const std::vector<int>& idx) {
  detail::check_2d(*x, "gather_cols");
  if (x->shape[0] != 1) throw std::invalid_argument("gather_cols: expected [1,n] row");
  const int n = x->shape[1];
  auto out = detail::node({1, static_cast<int>(idx.size())}, {x});
  for (size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] < 0 || idx[j] >= n)
      throw std::invalid_argument("gather_cols: index " + std::to_string(idx[j]) + " out of " +
                                  shape_str(x->shape));
    out->data[j] = x->data[idx[j]];
  }
  out->backprop = [self = out.get(), px = x.get(), idx]() {
    if (!px->needs_grad) return;
    for (size_t j = 0; j < idx.size(); ++j) px->grad[idx[j]] += self->grad[j];
  };
  return out;
}

// inverse of gather_cols: scatter a [1,k] row into [1,n] zeros
inline TensorPtr scatter_cols(const TensorPtr& x, const std::vector<int>& idx, int n) {
  detail::check_2d(*x, "scatter_cols");
  if (x->shape[0] != 1 || static_cast<size_t>(x->shape[1]) != idx.size())
    throw std::invalid_argument("scatter_cols: value/index length mismatch");
  auto out = detail::node({1, n}, {x});
  for (size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] < 0 || idx[j] >= n)
      throw std::invalid_argument("scatter_cols: index " + std::to_string(idx[j]) +
                                  " out of [1," + std::to_string(n) + "]");
    out->data[idx[j]] = x->data[j];
  }
  out->backprop = [self = out.get(), px = x.get(), idx]() {
    if (!px->needs_grad) return;
    for (size_t j = 0; j < idx.size(); ++j) px->grad[j] += self->grad[idx[j]];
  };
  return out;
}

inline TensorPtr embedding_lookup(const TensorPtr& table, const std::vector<int>& ids) {
  detail::check_2d(*table, "embedding");
  const int v = table->shape[0], h = table->shape[1];
  const int t = static_cast<int>(ids.size());
  if (t == 0) throw std::invalid_argument("embedding: empty id list");
  for (int id : ids)
    if (id < 0 || id >= v)
      throw std::invalid_argument("embedding: id " + std::to_string(id) + " out of vocab " +
                                  std::to_string(v));
  auto out = detail::node({t, h}, {table});
  for (int i = 0; i < t; ++i)
    std::copy_n(table->data.data() + ids[i] * h, h, out->data.data() + i * h);
  out->backprop = [self = out.get(), pt = table.get(), ids, h]() {
    if (!pt->needs_grad) return;
    for (size_t i = 0; i < ids.size(); ++i)
      for (int j = 0; j < h; ++j) pt->grad[ids[i] * h + j] += self->grad[i * h + j];
  };
  return out;
}

// inverted dropout; identity when train is off or rate is 0
inline TensorPtr dropout(const TensorPtr& x, float rate, bool train, Rng* rng) {
  if (!train || rate <= 0.0f) return x;
  if (rate >= 1.0f) throw std::invalid_argument("dropout: rate must be < 1");
  if (!rng) throw std::invalid_argument("dropout: rng required in training mode");
  auto mask = std::make_shared<std::vector<float>>(x->data.size());
  const float keep = 1.0f - rate;
  for (auto& mv : *mask) mv = (rng->uniform() < keep) ? 1.0f / keep : 0.0f;
  auto out = detail::node(x->shape, {x});
  for (size_t i = 0; i < x->data.size(); ++i) out->data[i] = x->data[i] * (*mask)[i];
  out->backprop = [self = out.get(), px = x.get(), mask]() {
    if (!px->needs_grad) return;
    for (size_t i = 0; i < self->grad.size(); ++i) px->grad[i] += self->grad[i] * (*mask)[i];
  };
  return out;
}

// scalar cross entropy of a [1,n] logit row against a class index
inline TensorPtr cross_entropy_logits(const TensorPtr& logits, int label) {
  detail::check_2d(*logits, "cross_entropy");
  if (logits->shape[0] != 1) throw std::invalid_argument("cross_entropy: expected [1,n] logits");
  const int n = logits->shape[1];
  if (label < 0 || label >= n)
    throw std::invalid_argument("cross_entropy: label " + std::to_string(label) + " out of " +
                                std::to_string(n) + " classes");
  auto out = detail::node({1, 1}, {logits});
  const float* l = logits->data.data();
  float mx = l[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, l[j]);
  double z = 0.0;
  for (int j = 0; j < n; ++j) z += std::exp(static_cast<double>(l[j]) - mx);
  const double lse = mx + std::log(z);
  out->data[0] = static_cast<float>(lse - l[label]);
  out->backprop = [self = out.get(), pl = logits.get(), label, n, mx, z]() {
    if (!pl->needs_grad) return;
    const float g = self->grad[0];
    for (int j = 0; j < n; ++j) {
      const float p = static_cast<float>(std::exp(static_cast<double>(pl->data[j]) - mx) / z);
      pl->grad[j] += g * (p - (j == label ? 1.0f : 0.0f));
    }
  };
  return out;
}

// ---------------------------------------------------------------------------
// backward

inline void backward(const TensorPtr& loss) {
  if (!loss) throw std::invalid_argument("backward: null loss");
  if (loss->data.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss->shape));
  if (!loss->needs_grad) return;  // constant graph, nothing to do

  // reverse topological order over the needs_grad subgraph
  std::vector<Tensor*> order;
  std::vector<std::pair<Tensor*, size_t>> stack;
  std::unordered_set<Tensor*> seen;
  order.reserve(256);
  stack.emplace_back(loss.get(), 0);
  seen.insert(loss.get());
  while (!stack.empty()) {
    bool descended = false;
    {
      auto& [t, i] = stack.back();
      Tensor* child = nullptr;
      while (i < t->parents.size()) {
        Tensor* p = t->parents[i++].get();
        if (p->needs_grad && !seen.count(p)) {
          child = p;
          break;
        }
      }
      if (child) {
        seen.insert(child);
        stack.emplace_back(child, 0);  // invalidates t/i; re-fetched next iteration
        descended = true;
      }
    }
    if (!descended) {
      order.push_back(stack.back().first);
      stack.pop_back();
    }
  }

  for (Tensor* t : order) t->ensure_grad();
  loss->grad[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor* t = *it;
    for (const auto& p : t->parents)
      if (p->needs_grad) p->ensure_grad();
    if (t->backprop) t->backprop();
  }
}

}  // namespace rmroute
