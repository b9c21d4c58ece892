#pragma once

// Pairwise preference training: Bradley–Terry loss over reward differences,
// reward-model containers (full, adapter-based, and sparse-MoE-headed),
// per-domain registries, and the domain-classification router trainer.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "rmroute/data.hpp"
#include "rmroute/encoder.hpp"
#include "rmroute/moe.hpp"
#include "rmroute/optim.hpp"
#include "rmroute/text.hpp"

namespace rmroute {

// ---------------------------------------------------------------------------
// loss

// −log σ(r_chosen − r_rejected); double precision, stable for |Δ| up to 1e4
inline double pairwise_loss(double r_chosen, double r_rejected) {
  if (!std::isfinite(r_chosen) || !std::isfinite(r_rejected))
    throw std::invalid_argument("pairwise_loss: non-finite reward input");
  const double x = -(r_chosen - r_rejected);  // loss = softplus(-Δ)
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

// float graph version used in training: softplus(−(r_c − r_r))
inline TensorPtr pairwise_loss_graph(const TensorPtr& r_chosen, const TensorPtr& r_rejected) {
  return softplus(neg(sub(r_chosen, r_rejected)));
}

// ---------------------------------------------------------------------------
// configuration

struct TrainConfig {
  float lr = 1e-3f;
  int batch_size = 16;
  int epochs = 3;
  uint64_t seed = 0;
  std::string method = "baseline";  // informational tag recorded in artifacts
  AdamWConfig optim;                // lr inside is overridden by the field above
  // When true, the chosen and rejected sequences of a pair draw their dropout
  // masks from one reseeded stream instead of two independent ones.
  bool shared_pair_dropout = false;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train config: batch size must be >= 1");
    if (!(lr >= 0.0f)) throw std::invalid_argument("train config: learning rate must be >= 0");
  }
};

inline TrainConfig desk_preset() {
  TrainConfig cfg;
  cfg.lr = 1e-3f;
  cfg.batch_size = 16;
  cfg.epochs = 3;
  return cfg;
}

inline TrainConfig paper_preset() {
  TrainConfig cfg;
  cfg.lr = 5e-6f;
  cfg.batch_size = 32;
  cfg.epochs = 3;
  return cfg;
}

struct EpochMetrics {
  int epoch = 0;         // 1-based
  double mean_loss = 0;  // mean pairwise loss over the epoch (aux term excluded)
  double seconds = 0;
};

struct TrainReport {
  std::string method;
  std::vector<EpochMetrics> epochs;
  double total_seconds = 0;

  std::string metrics_log() const {
    std::ostringstream o;
    for (const auto& e : epochs)
      o << "epoch=" << e.epoch << " mean_loss=" << e.mean_loss << " seconds=" << e.seconds
        << "\n";
    return o.str();
  }
};

// ---------------------------------------------------------------------------
// model containers

struct RewardModel {
  EncoderConfig cfg;
  MoEConfig moe_cfg;
  bool use_moe = false;
  std::shared_ptr<NamedTensors> backbone;  // encoder stack; also head.* / moe.* for full models
  std::optional<AdapterWeights> adapter;   // low-rank deltas (backbone frozen)
  NamedTensors adapter_head;               // head.{weight,bias} owned by the adapter variant
  Vocab vocab;
};

// Idempotent, and write-free once frozen: concurrent per-domain adapter
// training shares one frozen backbone, so the repeat calls must not touch it.
inline void freeze(NamedTensors& w) {
  for (auto& [name, t] : w) {
    if (t->requires_grad) t->requires_grad = false;
    if (t->needs_grad) t->needs_grad = false;
    if (!t->grad.empty()) t->grad.clear();
  }
}

// Fully trainable encoder + plain regression head.
inline RewardModel make_full_reward_model(const EncoderConfig& cfg, const Vocab& vocab,
                                          uint64_t seed) {
  RewardModel m;
  m.cfg = cfg;
  m.vocab = vocab;
  m.backbone = std::make_shared<NamedTensors>(init_weights(cfg, seed));
  return m;
}

// Fully trainable encoder with the sparse-MoE head in place of the plain one.
inline RewardModel make_moe_reward_model(const EncoderConfig& cfg, const MoEConfig& moe,
                                         const Vocab& vocab, uint64_t seed) {
  RewardModel m;
  m.cfg = cfg;
  m.moe_cfg = moe;
  m.use_moe = true;
  m.vocab = vocab;
  auto w = init_weights(cfg, seed);
  w.erase("head.weight");  // the mixture carries its own regression layer
  w.erase("head.bias");
  auto moe_w = init_moe_weights(cfg.hidden, moe, detail::mix64(seed ^ 0x6d6f65ull));
  w.insert(moe_w.begin(), moe_w.end());
  m.backbone = std::make_shared<NamedTensors>(std::move(w));
  return m;
}

// Frozen shared backbone + fresh adapter + trainable private head.
inline RewardModel make_lora_reward_model(std::shared_ptr<NamedTensors> frozen_backbone,
                                          const EncoderConfig& cfg, const AdapterSpec& spec,
                                          const Vocab& vocab, uint64_t seed,
                                          const std::string& adapter_id) {
  if (!frozen_backbone) throw std::invalid_argument("lora model: null backbone");
  RewardModel m;
  m.cfg = cfg;
  m.vocab = vocab;
  m.backbone = std::move(frozen_backbone);
  freeze(*m.backbone);
  m.adapter = attach_adapter(*m.backbone, spec, seed, adapter_id);
  Rng r = Rng(seed).split("head.weight");
  auto hw = make_tensor({1, cfg.hidden}, true);
  for (auto& v : hw->data) v = r.trunc_normal(0.02f);
  m.adapter_head["head.weight"] = hw;
  m.adapter_head["head.bias"] = make_tensor({1}, true);
  return m;
}

struct ScoreOut {
  TensorPtr reward;  // [1,1]
  TensorPtr aux;     // MoE load-balance term × coefficient, null otherwise
  GateDecision decision;
  bool has_decision = false;
};

inline ScoreOut model_score_graph(const RewardModel& m, const std::string& prompt,
                                  const std::string& response, bool train = false,
                                  Rng* rng = nullptr) {
  auto seq = tokenize(prompt, response, m.vocab, m.cfg.max_len);
  auto pooled = encode(seq, *m.backbone, m.cfg, train, rng,
                       m.adapter ? &*m.adapter : nullptr);
  ScoreOut out;
  if (m.use_moe) {
    auto moe_out = moe_head(pooled, *m.backbone, m.moe_cfg, train, rng);
    out.reward = moe_out.reward;
    out.aux = moe_out.aux;
    out.decision = std::move(moe_out.decision);
    out.has_decision = true;
  } else {
    const NamedTensors& head_src = m.adapter_head.empty() ? *m.backbone : m.adapter_head;
    out.reward = reward_head(pooled, head_src);
  }
  return out;
}

inline float model_score(const RewardModel& m, const std::string& prompt,
                         const std::string& response) {
  return model_score_graph(m, prompt, response).reward->item();
}

inline NamedTensors trainable_params(const RewardModel& m) {
  NamedTensors p;
  if (m.adapter) {
    p.insert(m.adapter->tensors.begin(), m.adapter->tensors.end());
    p.insert(m.adapter_head.begin(), m.adapter_head.end());
  } else {
    p = *m.backbone;
  }
  return p;
}

// ---------------------------------------------------------------------------
// training loops

namespace detail {

inline TensorPtr mean_of(const std::vector<TensorPtr>& terms) {
  TensorPtr total = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  return scale(total, 1.0f / static_cast<float>(terms.size()));
}

}  // namespace detail

// Mini-batch AdamW over the mean pairwise loss (+ the MoE aux term when its
// coefficient is nonzero). Shuffling, dropout, and gate noise all derive from
// cfg.seed, so a run is bit-reproducible.
inline TrainReport train_reward_model(RewardModel& model,
                                      const std::vector<RewardExample>& data,
                                      const TrainConfig& cfg,
                                      bool require_single_domain = false) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_reward_model: empty dataset");
  if (require_single_domain) {
    for (const auto& ex : data)
      if (ex.domain != data.front().domain)
        throw std::invalid_argument(
            "train_reward_model: domain mixture passed to a per-domain run ('" +
            data.front().domain + "' vs '" + ex.domain + "')");
  }

  auto params = trainable_params(model);
  AdamWConfig ocfg = cfg.optim;
  ocfg.lr = cfg.lr;
  AdamW opt(ocfg);
  Rng run_rng(cfg.seed);

  TrainReport report;
  report.method = cfg.method;
  std::vector<int> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng shuffle_rng = run_rng.split("shuffle").split(static_cast<uint64_t>(epoch));
    shuffle_rng.shuffle(order);
    Rng drop_rng = run_rng.split("dropout").split(static_cast<uint64_t>(epoch));

    double loss_sum = 0.0;
    long pair_count = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t end = std::min(order.size(), start + cfg.batch_size);
      AdamW::zero_grad(params);
      std::vector<TensorPtr> terms;
      std::vector<GateDecision> decisions;
      for (size_t b = start; b < end; ++b) {
        const auto& ex = data[order[b]];
        Rng pair_rng = drop_rng.split(static_cast<uint64_t>(order[b]));
        Rng chosen_rng = pair_rng.split("chosen");
        Rng rejected_rng =
            cfg.shared_pair_dropout ? pair_rng.split("chosen") : pair_rng.split("rejected");
        auto c = model_score_graph(model, ex.prompt, ex.chosen, true, &chosen_rng);
        auto r = model_score_graph(model, ex.prompt, ex.rejected, true, &rejected_rng);
        terms.push_back(pairwise_loss_graph(c.reward, r.reward));
        if (c.has_decision) {
          decisions.push_back(std::move(c.decision));
          decisions.push_back(std::move(r.decision));
        }
      }
      auto batch_loss = detail::mean_of(terms);
      auto objective = batch_loss;
      if (model.use_moe && model.moe_cfg.load_balance_coeff > 0.0f)
        objective = add(objective,
                        scale(load_balance_loss_graph(decisions, model.moe_cfg.num_experts),
                              model.moe_cfg.load_balance_coeff));
      backward(objective);
      opt.step(params);
      loss_sum += static_cast<double>(batch_loss->item()) * static_cast<double>(terms.size());
      pair_count += static_cast<long>(terms.size());
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back({epoch, loss_sum / static_cast<double>(pair_count), secs});
    report.total_seconds += secs;
  }
  return report;
}

// ---------------------------------------------------------------------------
// per-domain registry

struct DomainRegistry {
  std::vector<std::string> domains;  // sorted; index = training-seed offset
  std::map<std::string, RewardModel> models;
  std::map<std::string, TrainReport> reports;
};

inline std::map<std::string, std::vector<RewardExample>> group_by_domain(
    const std::vector<RewardExample>& data) {
  std::map<std::string, std::vector<RewardExample>> groups;
  for (const auto& ex : data) groups[ex.domain].push_back(ex);
  return groups;
}

inline Vocab vocab_from_examples(const std::vector<RewardExample>& data, int max_size) {
  std::vector<std::string> corpus;
  corpus.reserve(data.size() * 3);
  for (const auto& ex : data) {
    corpus.push_back(ex.prompt);
    corpus.push_back(ex.chosen);
    corpus.push_back(ex.rejected);
  }
  return build_vocab(corpus, max_size);
}

// One independent model (or adapter) per domain, seeded seed + domain index.
// Full variant when `adapter_spec` is absent; otherwise adapters on the given
// frozen shared backbone. `expected_domains`, when non-empty, must each have
// training data. With jobs > 1 the per-domain runs execute on worker threads;
// every run is self-contained and seeded, so the trained weights are identical
// for any job count (only the recorded wall-clock timings vary).
inline DomainRegistry train_all_domains(
    const std::vector<RewardExample>& data, const TrainConfig& cfg, const EncoderConfig& ecfg,
    const std::optional<AdapterSpec>& adapter_spec = std::nullopt,
    std::shared_ptr<NamedTensors> shared_backbone = nullptr,
    const std::vector<std::string>& expected_domains = {}, int jobs = 1) {
  if (adapter_spec && !shared_backbone)
    throw std::invalid_argument("train_all_domains: adapter runs need a shared backbone");
  if (jobs < 1) throw std::invalid_argument("train_all_domains: jobs must be positive");
  auto groups = group_by_domain(data);
  if (groups.empty()) throw std::invalid_argument("train_all_domains: empty dataset");
  for (const auto& d : expected_domains)
    if (!groups.count(d) || groups.at(d).empty())
      throw std::invalid_argument("train_all_domains: empty domain partition '" + d + "'");
  // freeze up front: workers then only read the backbone's flags and weights
  if (shared_backbone) freeze(*shared_backbone);

  DomainRegistry reg;
  for (const auto& [domain, part] : groups) reg.domains.push_back(domain);
  const size_t n = reg.domains.size();
  std::vector<RewardModel> models(n);
  std::vector<TrainReport> reports(n);

  auto run_one = [&](size_t i) {
    const auto& domain = reg.domains[i];
    const auto& part = groups.at(domain);
    TrainConfig dcfg = cfg;
    dcfg.seed = cfg.seed + i;
    dcfg.method = adapter_spec ? "per-domain-lora" : "per-domain";
    auto vocab = vocab_from_examples(part, ecfg.vocab_size);
    RewardModel model =
        adapter_spec ? make_lora_reward_model(shared_backbone, ecfg, *adapter_spec, vocab,
                                              dcfg.seed, domain)
                     : make_full_reward_model(ecfg, vocab, dcfg.seed);
    reports[i] = train_reward_model(model, part, dcfg, /*require_single_domain=*/true);
    models[i] = std::move(model);
  };

  const int workers = static_cast<int>(std::min<size_t>(static_cast<size_t>(jobs), n));
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) run_one(i);
  } else {
    std::atomic<size_t> next{0};
    std::mutex err_mutex;
    std::exception_ptr first_error;
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
          try {
            run_one(i);
          } catch (...) {
            std::lock_guard<std::mutex> lock(err_mutex);
            if (!first_error) first_error = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  for (size_t i = 0; i < n; ++i) {
    reg.reports[reg.domains[i]] = std::move(reports[i]);
    reg.models.emplace(reg.domains[i], std::move(models[i]));
  }
  return reg;
}

// ---------------------------------------------------------------------------
// router

struct RouterDecision {
  std::string domain;
  std::vector<float> probabilities;  // over the router's domain list, sums to 1
};

struct RouterModel {
  EncoderConfig cfg;
  std::shared_ptr<NamedTensors> backbone;  // carries the [n,hidden] head when full
  std::optional<AdapterWeights> adapter;
  NamedTensors adapter_head;  // [n,hidden] head owned by the adapter variant
  Vocab vocab;
  std::vector<std::string> domains;  // class order

  int domain_index(const std::string& d) const {
    for (size_t i = 0; i < domains.size(); ++i)
      if (domains[i] == d) return static_cast<int>(i);
    throw std::invalid_argument("router: unknown domain '" + d + "'");
  }
};

// The router reads the prompt only.
inline TensorPtr router_logits(const RouterModel& r, const std::string& prompt,
                               bool train = false, Rng* rng = nullptr) {
  auto seq = tokenize(prompt, "", r.vocab, r.cfg.max_len);
  auto pooled = encode(seq, *r.backbone, r.cfg, train, rng, r.adapter ? &*r.adapter : nullptr);
  const NamedTensors& head_src = r.adapter_head.empty() ? *r.backbone : r.adapter_head;
  return add_row_bias(matmul_nt(pooled, head_src.at("head.weight")),
                      head_src.at("head.bias"));
}

inline RouterDecision route(const RouterModel& r, const std::string& prompt) {
  auto probs = softmax_rows(router_logits(r, prompt));
  RouterDecision d;
  d.probabilities = probs->data;
  int best = 0;
  for (size_t j = 1; j < d.probabilities.size(); ++j)
    if (d.probabilities[j] > d.probabilities[best]) best = static_cast<int>(j);  // ties: lowest
  d.domain = r.domains[best];
  return d;
}

namespace detail {

inline void set_router_head(NamedTensors& head, int n_domains, int hidden, uint64_t seed) {
  Rng r = Rng(seed).split("router.head");
  auto hw = make_tensor({n_domains, hidden}, true);
  for (auto& v : hw->data) v = r.trunc_normal(0.02f);
  head["head.weight"] = hw;
  head["head.bias"] = make_tensor({n_domains}, true);
}

}  // namespace detail

// Encoder + n-way classification head, cross-entropy on prompts. Full-model
// variant owns its backbone; adapter variant trains only adapter + head on a
// frozen shared backbone.
inline std::pair<RouterModel, TrainReport> train_router(
    const std::vector<RewardExample>& data, const TrainConfig& cfg, const EncoderConfig& ecfg,
    const std::optional<AdapterSpec>& adapter_spec = std::nullopt,
    std::shared_ptr<NamedTensors> shared_backbone = nullptr) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_router: empty dataset");
  std::set<std::string> domain_set;
  for (const auto& ex : data) domain_set.insert(ex.domain);
  if (domain_set.size() < 2)
    throw std::invalid_argument("train_router: need at least 2 domains, got " +
                                std::to_string(domain_set.size()));
  if (adapter_spec && !shared_backbone)
    throw std::invalid_argument("train_router: adapter run needs a shared backbone");

  RouterModel router;
  router.cfg = ecfg;
  router.domains.assign(domain_set.begin(), domain_set.end());
  {
    std::vector<std::string> prompts;
    for (const auto& ex : data) prompts.push_back(ex.prompt);
    router.vocab = build_vocab(prompts, ecfg.vocab_size);
  }
  const int n = static_cast<int>(router.domains.size());
  NamedTensors params;
  if (adapter_spec) {
    router.backbone = shared_backbone;
    freeze(*router.backbone);
    router.adapter = attach_adapter(*router.backbone, *adapter_spec, cfg.seed, "router");
    detail::set_router_head(router.adapter_head, n, ecfg.hidden, cfg.seed);
    params.insert(router.adapter->tensors.begin(), router.adapter->tensors.end());
    params.insert(router.adapter_head.begin(), router.adapter_head.end());
  } else {
    auto w = init_weights(ecfg, cfg.seed);
    w.erase("head.weight");
    w.erase("head.bias");
    NamedTensors head;
    detail::set_router_head(head, n, ecfg.hidden, cfg.seed);
    w.insert(head.begin(), head.end());
    router.backbone = std::make_shared<NamedTensors>(std::move(w));
    params = *router.backbone;
  }

  AdamWConfig ocfg = cfg.optim;
  ocfg.lr = cfg.lr;
  AdamW opt(ocfg);
  Rng run_rng(cfg.seed);
  std::vector<int> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  TrainReport report;
  report.method = "router";
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng shuffle_rng = run_rng.split("shuffle").split(static_cast<uint64_t>(epoch));
    shuffle_rng.shuffle(order);
    Rng drop_rng = run_rng.split("dropout").split(static_cast<uint64_t>(epoch));
    double loss_sum = 0.0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t end = std::min(order.size(), start + cfg.batch_size);
      AdamW::zero_grad(params);
      std::vector<TensorPtr> terms;
      for (size_t b = start; b < end; ++b) {
        const auto& ex = data[order[b]];
        Rng ex_rng = drop_rng.split(static_cast<uint64_t>(order[b]));
        auto logits = router_logits(router, ex.prompt, true, &ex_rng);
        terms.push_back(cross_entropy_logits(logits, router.domain_index(ex.domain)));
      }
      auto batch_loss = detail::mean_of(terms);
      backward(batch_loss);
      opt.step(params);
      loss_sum += static_cast<double>(batch_loss->item()) * static_cast<double>(terms.size());
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(
        {epoch, loss_sum / static_cast<double>(data.size()), secs});
    report.total_seconds += secs;
  }
  return {std::move(router), std::move(report)};
}

}  // namespace rmroute
