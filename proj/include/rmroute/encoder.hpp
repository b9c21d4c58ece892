#pragma once

// Tiny transformer text encoder with a scalar regression head. Post-layernorm
// blocks, learned absolute positions, first-position pooling. Linear layers
// use [out,in] weights applied via matmul_nt; an optional adapter adds its
// low-rank correction at designated layers.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rmroute/lora.hpp"
#include "rmroute/rng.hpp"
#include "rmroute/tensor.hpp"
#include "rmroute/text.hpp"

namespace rmroute {

struct EncoderConfig {
  int vocab_size = 512;
  int max_len = 64;
  int hidden = 64;
  int layers = 2;
  int heads = 4;
  int ffn = 128;
  float dropout = 0.1f;

  void validate() const {
    if (vocab_size < 4 || max_len < 1 || hidden < 1 || layers < 1 || heads < 1 || ffn < 1)
      throw std::invalid_argument("encoder config: all dimensions must be positive");
    if (hidden % heads != 0)
      throw std::invalid_argument("encoder config: hidden " + std::to_string(hidden) +
                                  " not divisible by heads " + std::to_string(heads));
    if (dropout < 0.0f || dropout >= 1.0f)
      throw std::invalid_argument("encoder config: dropout must be in [0,1)");
  }

  std::string summary() const {
    std::ostringstream o;
    o << "vocab=" << vocab_size << " max_len=" << max_len << " hidden=" << hidden
      << " layers=" << layers << " heads=" << heads << " ffn=" << ffn
      << " dropout=" << dropout;
    return o.str();
  }

  uint64_t hash() const { return detail::fnv1a(summary()); }
};

inline std::vector<std::string> encoder_weight_names(const EncoderConfig& cfg) {
  std::vector<std::string> names = {"embed.tok", "embed.pos", "embed.ln.gain", "embed.ln.bias"};
  for (int i = 0; i < cfg.layers; ++i) {
    const std::string p = "layer." + std::to_string(i) + ".";
    for (const char* site : {"attn.query", "attn.key", "attn.value", "attn.dense"}) {
      names.push_back(p + site);
      names.push_back(p + site + std::string(".bias"));
    }
    names.push_back(p + "attn.ln.gain");
    names.push_back(p + "attn.ln.bias");
    names.push_back(p + "ffn.w1");
    names.push_back(p + "ffn.w1.bias");
    names.push_back(p + "ffn.w2");
    names.push_back(p + "ffn.w2.bias");
    names.push_back(p + "ffn.ln.gain");
    names.push_back(p + "ffn.ln.bias");
  }
  names.push_back("head.weight");
  names.push_back("head.bias");
  return names;
}

// Default adapter attachment sites: every attention projection and its output
// dense layer, in every block.
inline std::vector<std::string> default_adapter_targets(const EncoderConfig& cfg) {
  std::vector<std::string> t;
  for (int i = 0; i < cfg.layers; ++i)
    for (const char* site : {"attn.query", "attn.key", "attn.value", "attn.dense"})
      t.push_back("layer." + std::to_string(i) + "." + site);
  return t;
}

namespace detail {

inline std::vector<int> weight_shape(const std::string& name, const EncoderConfig& cfg) {
  auto ends_with = [&](const char* suf) {
    const std::string s(suf);
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  if (name == "embed.tok") return {cfg.vocab_size, cfg.hidden};
  if (name == "embed.pos") return {cfg.max_len, cfg.hidden};
  if (name == "head.weight") return {1, cfg.hidden};
  if (name == "head.bias") return {1};
  if (ends_with("ffn.w1")) return {cfg.ffn, cfg.hidden};
  if (ends_with("ffn.w1.bias")) return {cfg.ffn};
  if (ends_with("ffn.w2")) return {cfg.hidden, cfg.ffn};
  if (ends_with(".gain") || ends_with("ln.bias") || ends_with("ffn.w2.bias")) return {cfg.hidden};
  if (ends_with(".bias")) return {cfg.hidden};       // attention projection biases
  return {cfg.hidden, cfg.hidden};                   // attention projection weights
}

inline const TensorPtr& weight(const NamedTensors& w, const std::string& name) {
  auto it = w.find(name);
  if (it == w.end()) throw std::runtime_error("encoder: missing weight '" + name + "'");
  return it->second;
}

}  // namespace detail

// Truncated-normal(0.02) matrices, zero biases, unit layer-norm gains; each
// tensor drawn from a stream keyed by its name, so results are independent of
// construction order and bit-identical per seed.
inline NamedTensors init_weights(const EncoderConfig& cfg, uint64_t seed) {
  cfg.validate();
  NamedTensors w;
  Rng root(seed);
  for (const auto& name : encoder_weight_names(cfg)) {
    auto t = make_tensor(detail::weight_shape(name, cfg), true);
    const bool is_gain = name.size() > 5 && name.compare(name.size() - 5, 5, ".gain") == 0;
    const bool is_bias = name.size() > 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
    if (is_gain) {
      for (auto& v : t->data) v = 1.0f;
    } else if (!is_bias) {
      Rng r = root.split(name);
      for (auto& v : t->data) v = r.trunc_normal(0.02f);
    }
    w[name] = t;
  }
  return w;
}

namespace detail {

inline TensorPtr encoder_linear(const TensorPtr& x, const NamedTensors& w,
                                const std::string& name, const AdapterWeights* adapter,
                                bool train, Rng* rng) {
  auto y = add_row_bias(matmul_nt(x, weight(w, name)), weight(w, name + ".bias"));
  if (adapter && adapter->has(name))
    y = add(y, lora_delta(x, adapter->A(name), adapter->B(name), adapter->spec, train, rng));
  return y;
}

}  // namespace detail

// Full encoder stack; returns the [1, hidden] pooled state at position 0.
inline TensorPtr encode(const TokenSequence& seq, const NamedTensors& w,
                        const EncoderConfig& cfg, bool train = false, Rng* rng = nullptr,
                        const AdapterWeights* adapter = nullptr) {
  const int t = seq.length();
  if (t == 0) throw std::invalid_argument("encode: empty token sequence");
  if (t > cfg.max_len)
    throw std::invalid_argument("encode: sequence length " + std::to_string(t) +
                                " exceeds max " + std::to_string(cfg.max_len));
  if (seq.mask.size() != seq.ids.size())
    throw std::invalid_argument("encode: mask length does not match ids");

  std::vector<int> positions(t);
  for (int i = 0; i < t; ++i) positions[i] = i;
  auto x = add(embedding_lookup(detail::weight(w, "embed.tok"), seq.ids),
               embedding_lookup(detail::weight(w, "embed.pos"), positions));
  x = layer_norm_rows(x, detail::weight(w, "embed.ln.gain"), detail::weight(w, "embed.ln.bias"));
  x = dropout(x, cfg.dropout, train, rng);

  // additive attention bias: 0 on real key positions, -1e9 on padding
  auto mask_bias = make_tensor({t, t});
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < t; ++j)
      mask_bias->data[i * t + j] = seq.mask[j] > 0.0f ? 0.0f : -1e9f;

  const int dh = cfg.hidden / cfg.heads;
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));
  for (int li = 0; li < cfg.layers; ++li) {
    const std::string p = "layer." + std::to_string(li) + ".";
    auto q = detail::encoder_linear(x, w, p + "attn.query", adapter, train, rng);
    auto k = detail::encoder_linear(x, w, p + "attn.key", adapter, train, rng);
    auto v = detail::encoder_linear(x, w, p + "attn.value", adapter, train, rng);
    std::vector<TensorPtr> head_outs;
    for (int h = 0; h < cfg.heads; ++h) {
      auto qh = slice_cols(q, h * dh, dh);
      auto kh = slice_cols(k, h * dh, dh);
      auto vh = slice_cols(v, h * dh, dh);
      auto scores = add(scale(matmul_nt(qh, kh), att_scale), mask_bias);
      head_outs.push_back(matmul(softmax_rows(scores), vh));
    }
    auto o = detail::encoder_linear(concat_cols(head_outs), w, p + "attn.dense", adapter,
                                    train, rng);
    o = dropout(o, cfg.dropout, train, rng);
    x = layer_norm_rows(add(x, o), detail::weight(w, p + "attn.ln.gain"),
                        detail::weight(w, p + "attn.ln.bias"));

    auto f = gelu(detail::encoder_linear(x, w, p + "ffn.w1", adapter, train, rng));
    auto f2 = detail::encoder_linear(f, w, p + "ffn.w2", adapter, train, rng);
    f2 = dropout(f2, cfg.dropout, train, rng);
    x = layer_norm_rows(add(x, f2), detail::weight(w, p + "ffn.ln.gain"),
                        detail::weight(w, p + "ffn.ln.bias"));
  }
  return row(x, 0);
}

// Affine map from pooled state to one scalar; no activation.
inline TensorPtr reward_head(const TensorPtr& pooled, const NamedTensors& w) {
  return add_row_bias(matmul_nt(pooled, detail::weight(w, "head.weight")),
                      detail::weight(w, "head.bias"));
}

inline TensorPtr score_graph(const TokenSequence& seq, const NamedTensors& w,
                             const EncoderConfig& cfg, bool train = false, Rng* rng = nullptr,
                             const AdapterWeights* adapter = nullptr) {
  return reward_head(encode(seq, w, cfg, train, rng, adapter), w);
}

// Eval-mode scalar score (no dropout, no graph retained by the caller).
inline float score(const TokenSequence& seq, const NamedTensors& w, const EncoderConfig& cfg,
                   const AdapterWeights* adapter = nullptr) {
  return score_graph(seq, w, cfg, false, nullptr, adapter)->item();
}

inline long count_params(const NamedTensors& w) {
  long total = 0;
  for (const auto& [name, t] : w) total += static_cast<long>(t->data.size());
  return total;
}

}  // namespace rmroute
