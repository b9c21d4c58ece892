#pragma once

// Method assemblies: the runnable scoring systems for each architecture
// (single model, single model + adapter, sparse-MoE head, router + n full
// models, router + n hot-swapped adapters on one shared backbone), plus
// parameter accounting and manifest-based persistence.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rmroute/checkpoint.hpp"
#include "rmroute/train.hpp"

namespace rmroute {

inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> m = {"baseline", "base-lora", "more", "rodos",
                                            "arliss"};
  return m;
}

inline void check_method(const std::string& method) {
  const auto& ms = known_methods();
  if (std::find(ms.begin(), ms.end(), method) == ms.end())
    throw std::invalid_argument("unknown method '" + method +
                                "' (expected baseline|base-lora|more|rodos|arliss)");
}

// ---------------------------------------------------------------------------
// parameter accounting

inline long long encoder_param_count(const EncoderConfig& cfg) {
  long long total = 0;
  for (const auto& name : encoder_weight_names(cfg))
    total += static_cast<long long>(numel(detail::weight_shape(name, cfg)));
  return total;
}

inline long long moe_param_count(int hidden, const MoEConfig& moe) {
  const long long h = hidden, e = moe.expert_dim, n = moe.num_experts;
  const long long gate = 2 * h * n;               // selection + noise projections
  const long long norms = 4 * h;                  // two layer norms, gain + bias
  const long long experts = n * (2 * h * e + e + h);
  const long long head = h + 1;
  return gate + norms + experts + head;
}

inline long long head_param_count(int hidden, int ways) {
  return static_cast<long long>(ways) * hidden + ways;
}

inline AdapterSpec with_default_targets(AdapterSpec spec, const EncoderConfig& cfg) {
  if (spec.targets.empty()) spec.targets = default_adapter_targets(cfg);
  return spec;
}

// Low-rank tensors only (private heads counted separately).
inline long long adapter_lora_count(const EncoderConfig& cfg, const AdapterSpec& spec_in) {
  const AdapterSpec spec = with_default_targets(spec_in, cfg);
  long long total = 0;
  for (const auto& target : spec.targets) {
    const auto s = detail::weight_shape(target, cfg);
    total += static_cast<long long>(spec.rank) * (s[0] + s[1]);
  }
  return total;
}

struct ParamComponent {
  std::string name;
  long long params = 0;
};

struct ParamReport {
  std::string method;
  std::vector<ParamComponent> components;
  long long total = 0;
  long long reference_total = 0;
  double percent_of_reference = 0;

  void finalize() {
    total = 0;
    for (const auto& c : components) total += c.params;
    percent_of_reference =
        reference_total > 0 ? 100.0 * static_cast<double>(total) /
                                  static_cast<double>(reference_total)
                            : 0.0;
  }

  std::string table() const {
    std::ostringstream o;
    size_t width = 9;
    for (const auto& c : components) width = std::max(width, c.name.size());
    o << "method: " << method << "\n";
    for (const auto& c : components) {
      o << "  " << c.name;
      for (size_t i = c.name.size(); i < width + 2; ++i) o << ' ';
      o << c.params << "\n";
    }
    o << "  total";
    for (size_t i = 5; i < width + 2; ++i) o << ' ';
    o << total << "  (" << percent_of_reference << "% of reference " << reference_total
      << ")\n";
    return o.str();
  }
};

// Coarse arithmetic over given lump sizes: one number per model, one per
// adapter. Mirrors back-of-envelope totals like "(n+1) models" exactly.
inline ParamReport parameter_report_from_counts(const std::string& method,
                                                long long model_params,
                                                long long adapter_params, int n_domains,
                                                long long reference_total) {
  check_method(method);
  if (n_domains < 1) throw std::invalid_argument("parameter report: need >= 1 domain");
  ParamReport r;
  r.method = method;
  r.reference_total = reference_total;
  if (method == "baseline" || method == "more") {
    r.components = {{"model", model_params}};
  } else if (method == "base-lora") {
    r.components = {{"backbone", model_params}, {"adapter", adapter_params}};
  } else if (method == "rodos") {
    r.components = {{"reward-models", static_cast<long long>(n_domains) * model_params},
                    {"router", model_params}};
  } else {  // arliss
    r.components = {{"backbone", model_params},
                    {"reward-adapters", static_cast<long long>(n_domains) * adapter_params},
                    {"router-adapter", adapter_params}};
  }
  r.finalize();
  return r;
}

// Exact accounting from configs; equals a brute-force count of the tensors the
// method serializes (routers carry an n-way head instead of the scalar one,
// and every adapter carries its own private head).
inline ParamReport parameter_report(const std::string& method, const EncoderConfig& ecfg,
                                    const MoEConfig& moecfg, const AdapterSpec& spec,
                                    int n_domains, const EncoderConfig& reference) {
  check_method(method);
  if (n_domains < 1) throw std::invalid_argument("parameter report: need >= 1 domain");
  const long long m = encoder_param_count(ecfg);
  const long long head1 = head_param_count(ecfg.hidden, 1);
  const long long headn = head_param_count(ecfg.hidden, n_domains);
  ParamReport r;
  r.method = method;
  r.reference_total = encoder_param_count(reference);
  if (method == "baseline") {
    r.components = {{"model", m}};
  } else if (method == "more") {
    r.components = {{"encoder", m - head1}, {"moe-head", moe_param_count(ecfg.hidden, moecfg)}};
  } else if (method == "base-lora") {
    r.components = {{"backbone", m}, {"adapter", adapter_lora_count(ecfg, spec) + head1}};
  } else if (method == "rodos") {
    r.components = {{"reward-models", n_domains * m}, {"router", m - head1 + headn}};
  } else {  // arliss
    const long long a = adapter_lora_count(ecfg, spec);
    r.components = {{"backbone", m},
                    {"reward-adapters", n_domains * (a + head1)},
                    {"router-adapter", a + headn}};
  }
  r.finalize();
  return r;
}

// ---------------------------------------------------------------------------
// adapter host: one frozen backbone, resident adapters, one active slot

// The router adapter is *not* managed here: it stays permanently bound inside
// the router model (its own slot), so only reward-adapter rebinds are counted
// and timed. A swap deep-copies the adapter tensors, head, and vocabulary into
// the active slot — the desk-scale analog of loading adapter weights into a
// serving slot — which is what makes switch latency real and measurable.
class AdapterHost {
 public:
  struct Entry {
    AdapterWeights weights;
    NamedTensors head;
    Vocab vocab;
  };

  AdapterHost(EncoderConfig cfg, std::shared_ptr<NamedTensors> backbone)
      : cfg_(std::move(cfg)), backbone_(std::move(backbone)) {
    if (!backbone_) throw std::invalid_argument("adapter host: null backbone");
    freeze(*backbone_);
  }

  void add(const std::string& id, AdapterWeights weights, NamedTensors head, Vocab vocab) {
    if (id.empty()) throw std::invalid_argument("adapter host: empty adapter id");
    if (registry_.count(id))
      throw std::invalid_argument("adapter host: duplicate adapter id '" + id + "'");
    registry_.emplace(id, Entry{std::move(weights), std::move(head), std::move(vocab)});
  }

  bool has(const std::string& id) const { return registry_.count(id) > 0; }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& [id, e] : registry_) out.push_back(id);
    return out;
  }

  // Rebinds the active slot; returns the seconds the rebind took. Calling with
  // the already-active id is the no-op fast path: no copy, no counter change.
  double swap_to(const std::string& id) {
    if (in_flight_)
      throw std::runtime_error("adapter host: swap requested during an in-flight scoring call");
    if (id == active_id_) return 0.0;
    auto it = registry_.find(id);
    if (it == registry_.end()) {
      std::string known;
      for (const auto& [k, e] : registry_) known += (known.empty() ? "" : ", ") + k;
      throw std::runtime_error("adapter host: no adapter registered for '" + id +
                               "' (known: " + known + ")");
    }
    const auto t0 = std::chrono::steady_clock::now();
    active_.weights.id = it->second.weights.id;
    active_.weights.spec = it->second.weights.spec;
    active_.weights.tensors = copy_tensors(it->second.weights.tensors);
    active_.head = copy_tensors(it->second.head);
    active_.vocab = it->second.vocab;
    active_id_ = id;
    ++swap_count_;
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    swap_seconds_total_ += secs;
    return secs;
  }

  float score_active(const std::string& prompt, const std::string& response) {
    if (active_id_.empty())
      throw std::runtime_error("adapter host: no adapter bound; call swap_to first");
    struct Guard {
      bool& flag;
      explicit Guard(bool& f) : flag(f) { flag = true; }
      ~Guard() { flag = false; }
    } guard(in_flight_);
    auto seq = tokenize(prompt, response, active_.vocab, cfg_.max_len);
    auto pooled = encode(seq, *backbone_, cfg_, false, nullptr, &active_.weights);
    return reward_head(pooled, active_.head)->item();
  }

  const EncoderConfig& cfg() const { return cfg_; }
  const std::shared_ptr<NamedTensors>& backbone() const { return backbone_; }
  const std::map<std::string, Entry>& registry() const { return registry_; }
  const std::string& active_id() const { return active_id_; }
  long swap_count() const { return swap_count_; }
  double swap_seconds_total() const { return swap_seconds_total_; }
  void reset_counters() {
    swap_count_ = 0;
    swap_seconds_total_ = 0;
  }
  std::mutex& call_mutex() { return call_mutex_; }

 private:
  static NamedTensors copy_tensors(const NamedTensors& src) {
    NamedTensors out;
    for (const auto& [k, t] : src) out[k] = make_tensor(t->shape, t->data, false);
    return out;
  }

  EncoderConfig cfg_;
  std::shared_ptr<NamedTensors> backbone_;
  std::map<std::string, Entry> registry_;
  Entry active_;
  std::string active_id_;
  long swap_count_ = 0;
  double swap_seconds_total_ = 0;
  bool in_flight_ = false;
  std::mutex call_mutex_;
};

// ---------------------------------------------------------------------------
// method assembly

struct MethodAssembly {
  std::string method;
  std::vector<std::string> domains;  // sorted
  EncoderConfig encoder;
  MoEConfig moe;           // used by "more"
  AdapterSpec adapter_spec;  // used by "base-lora" and "arliss"
  EncoderConfig reference;   // baseline config percentages are reported against
  TrainConfig train_cfg;

  std::optional<RewardModel> single;             // baseline | base-lora | more
  std::map<std::string, RewardModel> per_domain; // rodos
  std::optional<RouterModel> router;             // rodos | arliss
  std::shared_ptr<AdapterHost> host;             // arliss

  std::map<std::string, TrainReport> training_reports;  // component -> metrics
};

inline void validate_assembly(const MethodAssembly& a) {
  check_method(a.method);
  if (a.domains.empty()) throw std::runtime_error("assembly: empty domain list");
  const bool routed = a.method == "rodos" || a.method == "arliss";
  if (routed) {
    if (a.single) throw std::runtime_error("assembly: routed method with a pooled model");
    if (!a.router) throw std::runtime_error("assembly: routed method without a router");
    if (a.router->domains != a.domains)
      throw std::runtime_error("assembly: router domain list diverges from assembly");
  } else {
    if (!a.single) throw std::runtime_error("assembly: missing model");
    if (a.router || a.host || !a.per_domain.empty())
      throw std::runtime_error("assembly: single-model method with routing components");
  }
  if (a.method == "rodos") {
    if (a.host) throw std::runtime_error("assembly: rodos does not use an adapter host");
    if (a.per_domain.size() != a.domains.size())
      throw std::runtime_error("assembly: rodos needs exactly one model per domain");
    for (const auto& d : a.domains)
      if (!a.per_domain.count(d))
        throw std::runtime_error("assembly: rodos missing model for domain '" + d + "'");
  }
  if (a.method == "arliss") {
    if (!a.per_domain.empty())
      throw std::runtime_error("assembly: arliss keeps adapters, not full models");
    if (!a.host) throw std::runtime_error("assembly: arliss needs an adapter host");
    if (a.host->registry().size() != a.domains.size())
      throw std::runtime_error("assembly: arliss needs exactly one adapter per domain");
    for (const auto& d : a.domains)
      if (!a.host->has(d))
        throw std::runtime_error("assembly: arliss missing adapter for domain '" + d + "'");
    if (!a.router->adapter)
      throw std::runtime_error("assembly: arliss router must be adapter-based");
  }
}

// ---------------------------------------------------------------------------
// building (training plans per method)

struct BuildOptions {
  EncoderConfig encoder;
  MoEConfig moe;
  AdapterSpec adapter;               // targets auto-filled from the encoder
  TrainConfig train;
  std::optional<EncoderConfig> reference;  // defaults to `encoder`
  int jobs = 1;  // worker threads for the independent per-domain runs
};

inline MethodAssembly build_assembly(const std::string& method,
                                     const std::vector<RewardExample>& data,
                                     const BuildOptions& opts) {
  check_method(method);
  opts.encoder.validate();
  opts.train.validate();
  if (data.empty()) throw std::invalid_argument("build_assembly: empty training data");
  if (opts.jobs < 1) throw std::invalid_argument("build_assembly: jobs must be positive");

  MethodAssembly a;
  a.method = method;
  a.encoder = opts.encoder;
  a.moe = opts.moe;
  a.adapter_spec = with_default_targets(opts.adapter, opts.encoder);
  a.reference = opts.reference.value_or(opts.encoder);
  a.train_cfg = opts.train;
  a.train_cfg.method = method;
  {
    std::set<std::string> ds;
    for (const auto& ex : data) ds.insert(ex.domain);
    a.domains.assign(ds.begin(), ds.end());
  }

  if (method == "baseline" || method == "more" || method == "base-lora") {
    auto vocab = vocab_from_examples(data, opts.encoder.vocab_size);
    TrainConfig cfg = a.train_cfg;
    RewardModel model;
    if (method == "baseline") {
      model = make_full_reward_model(opts.encoder, vocab, cfg.seed);
    } else if (method == "more") {
      model = make_moe_reward_model(opts.encoder, opts.moe, vocab, cfg.seed);
    } else {
      auto backbone = std::make_shared<NamedTensors>(init_weights(opts.encoder, cfg.seed));
      model = make_lora_reward_model(backbone, opts.encoder, a.adapter_spec, vocab, cfg.seed,
                                     "base");
    }
    a.training_reports["model"] = train_reward_model(model, data, cfg);
    a.single = std::move(model);
  } else if (method == "rodos") {
    auto reg = train_all_domains(data, a.train_cfg, opts.encoder, std::nullopt, nullptr, {},
                                 opts.jobs);
    a.per_domain = std::move(reg.models);
    for (auto& [d, rep] : reg.reports) a.training_reports["model." + d] = std::move(rep);
    auto [router, rep] = train_router(data, a.train_cfg, opts.encoder);
    a.router = std::move(router);
    a.training_reports["router"] = std::move(rep);
  } else {  // arliss
    auto backbone =
        std::make_shared<NamedTensors>(init_weights(opts.encoder, a.train_cfg.seed));
    auto reg = train_all_domains(data, a.train_cfg, opts.encoder, a.adapter_spec, backbone, {},
                                 opts.jobs);
    a.host = std::make_shared<AdapterHost>(opts.encoder, backbone);
    for (auto& [d, model] : reg.models)
      a.host->add(d, std::move(*model.adapter), std::move(model.adapter_head),
                  std::move(model.vocab));
    for (auto& [d, rep] : reg.reports) a.training_reports["adapter." + d] = std::move(rep);
    auto [router, rep] =
        train_router(data, a.train_cfg, opts.encoder, a.adapter_spec, backbone);
    a.router = std::move(router);
    a.training_reports["router"] = std::move(rep);
  }
  validate_assembly(a);
  return a;
}

// ---------------------------------------------------------------------------
// scoring

struct RoutedScore {
  float reward = 0;
  RouterDecision decision;  // meaningful when routed == true
  bool routed = false;
  double swap_seconds = 0;
  bool swapped = false;
};

// Route (or honor a forced domain), then score with exactly one resident
// model. The assembly is immutable here, so concurrent calls are safe.
inline RoutedScore rodos_score(const MethodAssembly& a, const std::string& prompt,
                               const std::string& response,
                               const std::string& forced_domain = "") {
  if (a.method != "rodos") throw std::invalid_argument("rodos_score: assembly is not rodos");
  RoutedScore out;
  std::string domain = forced_domain;
  if (domain.empty()) {
    out.decision = route(*a.router, prompt);
    out.routed = true;
    domain = out.decision.domain;
  }
  auto it = a.per_domain.find(domain);
  if (it == a.per_domain.end())
    throw std::runtime_error("rodos dispatch: no reward model registered for domain '" +
                             domain + "'");
  out.reward = model_score(it->second, prompt, response);
  return out;
}

// Resident router adapter routes, then the reward adapter for the routed
// domain is bound into the active slot (a measured copy, skipped when already
// active) and scores. Calls are serialized: the swap mutates the binding.
inline RoutedScore arliss_score(MethodAssembly& a, const std::string& prompt,
                                const std::string& response,
                                const std::string& forced_domain = "") {
  if (a.method != "arliss")
    throw std::invalid_argument("arliss_score: assembly is not arliss");
  std::lock_guard<std::mutex> lock(a.host->call_mutex());
  RoutedScore out;
  std::string domain = forced_domain;
  if (domain.empty()) {
    out.decision = route(*a.router, prompt);
    out.routed = true;
    domain = out.decision.domain;
  }
  out.swapped = domain != a.host->active_id();
  out.swap_seconds = a.host->swap_to(domain);
  out.reward = a.host->score_active(prompt, response);
  return out;
}

// Throughput path: route everything first, then visit items grouped by routed
// domain so each adapter is bound at most once per batch. Results come back in
// input order.
inline std::vector<RoutedScore> arliss_score_grouped(
    MethodAssembly& a, const std::vector<std::pair<std::string, std::string>>& items) {
  if (a.method != "arliss")
    throw std::invalid_argument("arliss_score_grouped: assembly is not arliss");
  std::lock_guard<std::mutex> lock(a.host->call_mutex());
  std::vector<RoutedScore> out(items.size());
  std::vector<size_t> order(items.size());
  for (size_t i = 0; i < items.size(); ++i) {
    order[i] = i;
    out[i].decision = route(*a.router, items[i].first);
    out[i].routed = true;
  }
  std::stable_sort(order.begin(), order.end(), [&](size_t x, size_t y) {
    return out[x].decision.domain < out[y].decision.domain;
  });
  for (size_t i : order) {
    const auto& domain = out[i].decision.domain;
    out[i].swapped = domain != a.host->active_id();
    out[i].swap_seconds = a.host->swap_to(domain);
    out[i].reward = a.host->score_active(items[i].first, items[i].second);
  }
  return out;
}

inline RoutedScore assembly_score(MethodAssembly& a, const std::string& prompt,
                                  const std::string& response) {
  if (a.method == "rodos") return rodos_score(a, prompt, response);
  if (a.method == "arliss") return arliss_score(a, prompt, response);
  RoutedScore out;
  out.reward = model_score(*a.single, prompt, response);
  return out;
}

// ---------------------------------------------------------------------------
// config serialization

inline json encoder_to_json(const EncoderConfig& c) {
  return json{{"vocab_size", c.vocab_size}, {"max_len", c.max_len},  {"hidden", c.hidden},
              {"layers", c.layers},         {"heads", c.heads},      {"ffn", c.ffn},
              {"dropout", c.dropout}};
}

inline EncoderConfig encoder_from_json(const json& j) {
  EncoderConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ffn = j.at("ffn").get<int>();
  c.dropout = j.at("dropout").get<float>();
  return c;
}

inline json moe_to_json(const MoEConfig& c) {
  return json{{"num_experts", c.num_experts},
              {"top_k", c.top_k},
              {"expert_dim", c.expert_dim},
              {"noise_enabled", c.noise_enabled},
              {"load_balance_coeff", c.load_balance_coeff}};
}

inline MoEConfig moe_from_json(const json& j) {
  MoEConfig c;
  c.num_experts = j.at("num_experts").get<int>();
  c.top_k = j.at("top_k").get<int>();
  c.expert_dim = j.at("expert_dim").get<int>();
  c.noise_enabled = j.at("noise_enabled").get<bool>();
  c.load_balance_coeff = j.at("load_balance_coeff").get<float>();
  return c;
}

inline json adapter_to_json(const AdapterSpec& c) {
  return json{
      {"rank", c.rank}, {"alpha", c.alpha}, {"dropout", c.dropout}, {"targets", c.targets}};
}

inline AdapterSpec adapter_from_json(const json& j) {
  AdapterSpec c;
  c.rank = j.at("rank").get<int>();
  c.alpha = j.at("alpha").get<float>();
  c.dropout = j.at("dropout").get<float>();
  c.targets = j.at("targets").get<std::vector<std::string>>();
  return c;
}

inline json train_to_json(const TrainConfig& c) {
  return json{{"lr", c.lr},     {"batch_size", c.batch_size},
              {"epochs", c.epochs}, {"seed", c.seed},
              {"method", c.method}, {"shared_pair_dropout", c.shared_pair_dropout}};
}

inline TrainConfig train_from_json(const json& j) {
  TrainConfig c;
  c.lr = j.at("lr").get<float>();
  c.batch_size = j.at("batch_size").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  c.method = j.at("method").get<std::string>();
  c.shared_pair_dropout = j.at("shared_pair_dropout").get<bool>();
  return c;
}

inline json train_report_to_json(const TrainReport& r) {
  json epochs = json::array();
  for (const auto& e : r.epochs)
    epochs.push_back(
        {{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"seconds", e.seconds}});
  return json{{"method", r.method}, {"epochs", epochs}, {"total_seconds", r.total_seconds}};
}

inline TrainReport train_report_from_json(const json& j) {
  TrainReport r;
  r.method = j.at("method").get<std::string>();
  r.total_seconds = j.at("total_seconds").get<double>();
  for (const auto& e : j.at("epochs"))
    r.epochs.push_back({e.at("epoch").get<int>(), e.at("mean_loss").get<double>(),
                        e.at("seconds").get<double>()});
  return r;
}

// ---------------------------------------------------------------------------
// persistence

namespace detail {

inline std::string join_lines(const std::vector<std::string>& parts) {
  std::string out;
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i) out += '\n';
    out += parts[i];
  }
  return out;
}

inline std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

inline Checkpoint component_checkpoint(const MethodAssembly& a, const NamedTensors& tensors,
                                       const std::map<std::string, std::string>& extra) {
  Checkpoint ck;
  ck.meta.config_hash = a.encoder.hash();
  ck.meta.seed = a.train_cfg.seed;
  ck.meta.method = a.method;
  ck.meta.extra = extra;
  ck.tensors = tensors;
  return ck;
}

}  // namespace detail

// Writes one checkpoint per component plus assembly.json; returns the manifest
// path. Byte-deterministic given the same assembly contents.
inline std::string save_assembly(const MethodAssembly& a, const std::string& dir) {
  validate_assembly(a);
  std::filesystem::create_directories(dir);
  std::map<std::string, std::string> files;  // component -> file name

  auto write = [&](const std::string& component, const NamedTensors& tensors,
                   std::map<std::string, std::string> extra) {
    extra["component"] = component;
    const std::string fname = component + ".ckpt";
    save_checkpoint((std::filesystem::path(dir) / fname).string(),
                    detail::component_checkpoint(a, tensors, extra));
    files[component] = fname;
  };

  if (a.single) {
    if (a.single->adapter) {  // base-lora: frozen backbone + adapter-with-head
      write("backbone", *a.single->backbone, {});
      NamedTensors t = a.single->adapter->tensors;
      t.insert(a.single->adapter_head.begin(), a.single->adapter_head.end());
      write("adapter.base", t,
            {{"vocab", a.single->vocab.to_lines()}, {"adapter_id", a.single->adapter->id}});
    } else {
      write("model", *a.single->backbone, {{"vocab", a.single->vocab.to_lines()}});
    }
  }
  for (const auto& [domain, model] : a.per_domain)
    write("model." + domain, *model.backbone,
          {{"vocab", model.vocab.to_lines()}, {"domain", domain}});
  if (a.host) {
    write("backbone", *a.host->backbone(), {});
    for (const auto& [domain, entry] : a.host->registry()) {
      NamedTensors t = entry.weights.tensors;
      t.insert(entry.head.begin(), entry.head.end());
      write("adapter." + domain, t,
            {{"vocab", entry.vocab.to_lines()}, {"domain", domain}});
    }
  }
  if (a.router) {
    std::map<std::string, std::string> extra = {
        {"vocab", a.router->vocab.to_lines()},
        {"domains", detail::join_lines(a.router->domains)}};
    if (a.router->adapter) {
      NamedTensors t = a.router->adapter->tensors;
      t.insert(a.router->adapter_head.begin(), a.router->adapter_head.end());
      write("router", t, extra);
    } else {
      write("router", *a.router->backbone, extra);
    }
  }

  json manifest;
  manifest["method"] = a.method;
  manifest["domains"] = a.domains;
  manifest["encoder"] = encoder_to_json(a.encoder);
  manifest["moe"] = moe_to_json(a.moe);
  manifest["adapter"] = adapter_to_json(a.adapter_spec);
  manifest["reference"] = encoder_to_json(a.reference);
  manifest["train"] = train_to_json(a.train_cfg);
  manifest["checkpoints"] = files;
  json reports;
  for (const auto& [component, rep] : a.training_reports)
    reports[component] = train_report_to_json(rep);
  manifest["training_reports"] = reports;

  const std::string mpath = (std::filesystem::path(dir) / "assembly.json").string();
  std::ofstream out(mpath, std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw std::runtime_error("save_assembly: cannot write '" + mpath + "'");
  return mpath;
}

namespace detail {

inline Checkpoint load_component(const json& manifest, const std::filesystem::path& dir,
                                 const std::string& component) {
  const auto& files = manifest.at("checkpoints");
  if (!files.contains(component))
    throw std::runtime_error("assembly manifest: missing component '" + component + "'");
  const std::string path = (dir / files.at(component).get<std::string>()).string();
  if (!std::filesystem::exists(path))
    throw std::runtime_error("assembly: missing checkpoint file '" + path + "'");
  return load_checkpoint(path);  // validates magic, index, and payload hash
}

// Splits an adapter-style checkpoint (low-rank tensors + private head).
inline void split_adapter_tensors(const Checkpoint& ck, const AdapterSpec& spec,
                                  const std::string& id, AdapterWeights& weights,
                                  NamedTensors& head) {
  weights.id = id;
  weights.spec = spec;
  for (const auto& [name, t] : ck.tensors) {
    if (name.rfind("adapter.", 0) == 0)
      weights.tensors[name] = t;
    else
      head[name] = t;
  }
}

}  // namespace detail

inline MethodAssembly load_assembly(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("assembly: cannot open manifest '" + manifest_path + "'");
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("assembly manifest '" + manifest_path +
                             "': " + std::string(e.what()));
  }
  const auto dir = std::filesystem::path(manifest_path).parent_path();

  MethodAssembly a;
  a.method = manifest.at("method").get<std::string>();
  check_method(a.method);
  a.domains = manifest.at("domains").get<std::vector<std::string>>();
  a.encoder = encoder_from_json(manifest.at("encoder"));
  a.moe = moe_from_json(manifest.at("moe"));
  a.adapter_spec = adapter_from_json(manifest.at("adapter"));
  a.reference = encoder_from_json(manifest.at("reference"));
  a.train_cfg = train_from_json(manifest.at("train"));
  if (manifest.contains("training_reports"))
    for (const auto& [component, rep] : manifest.at("training_reports").items())
      a.training_reports[component] = train_report_from_json(rep);

  auto make_model_from = [&](const Checkpoint& ck) {
    RewardModel m;
    m.cfg = a.encoder;
    m.vocab = Vocab::from_lines(ck.meta.extra.at("vocab"));
    m.backbone = std::make_shared<NamedTensors>(ck.tensors);
    return m;
  };

  if (a.method == "baseline" || a.method == "more") {
    auto ck = detail::load_component(manifest, dir, "model");
    auto m = make_model_from(ck);
    if (a.method == "more") {
      m.use_moe = true;
      m.moe_cfg = a.moe;
    }
    a.single = std::move(m);
  } else if (a.method == "base-lora") {
    auto bk = detail::load_component(manifest, dir, "backbone");
    auto ak = detail::load_component(manifest, dir, "adapter.base");
    RewardModel m;
    m.cfg = a.encoder;
    m.vocab = Vocab::from_lines(ak.meta.extra.at("vocab"));
    m.backbone = std::make_shared<NamedTensors>(bk.tensors);
    freeze(*m.backbone);
    AdapterWeights w;
    detail::split_adapter_tensors(ak, a.adapter_spec, ak.meta.extra.at("adapter_id"), w,
                                  m.adapter_head);
    m.adapter = std::move(w);
    a.single = std::move(m);
  } else if (a.method == "rodos") {
    for (const auto& domain : a.domains) {
      auto ck = detail::load_component(manifest, dir, "model." + domain);
      a.per_domain.emplace(domain, make_model_from(ck));
    }
  } else {  // arliss
    auto bk = detail::load_component(manifest, dir, "backbone");
    auto backbone = std::make_shared<NamedTensors>(bk.tensors);
    a.host = std::make_shared<AdapterHost>(a.encoder, backbone);
    for (const auto& domain : a.domains) {
      auto ck = detail::load_component(manifest, dir, "adapter." + domain);
      AdapterWeights w;
      NamedTensors head;
      detail::split_adapter_tensors(ck, a.adapter_spec, domain, w, head);
      a.host->add(domain, std::move(w), std::move(head),
                  Vocab::from_lines(ck.meta.extra.at("vocab")));
    }
  }

  if (a.method == "rodos" || a.method == "arliss") {
    auto rk = detail::load_component(manifest, dir, "router");
    RouterModel r;
    r.cfg = a.encoder;
    r.vocab = Vocab::from_lines(rk.meta.extra.at("vocab"));
    r.domains = detail::split_lines(rk.meta.extra.at("domains"));
    if (a.method == "arliss") {
      r.backbone = a.host->backbone();
      AdapterWeights w;
      detail::split_adapter_tensors(rk, a.adapter_spec, "router", w, r.adapter_head);
      r.adapter = std::move(w);
    } else {
      r.backbone = std::make_shared<NamedTensors>(rk.tensors);
    }
    a.router = std::move(r);
  }
  validate_assembly(a);
  return a;
}

// Brute-force total over every tensor in every checkpoint the manifest lists.
inline long long serialized_param_count(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("assembly: cannot open manifest '" + manifest_path + "'");
  const json manifest = json::parse(in);
  const auto dir = std::filesystem::path(manifest_path).parent_path();
  long long total = 0;
  for (const auto& [component, fname] : manifest.at("checkpoints").items()) {
    auto ck = load_checkpoint((dir / fname.get<std::string>()).string());
    for (const auto& [name, t] : ck.tensors) total += static_cast<long long>(t->data.size());
  }
  return total;
}

inline ParamReport assembly_parameter_report(const MethodAssembly& a) {
  return parameter_report(a.method, a.encoder, a.moe, a.adapter_spec,
                          static_cast<int>(a.domains.size()), a.reference);
}

// ---------------------------------------------------------------------------
// incremental extension

// Trains components only for domains that are new in `data`, then retrains the
// router over all domains. Existing reward models/adapters are not touched, so
// their serialized bytes stay identical.
inline void extend_assembly(MethodAssembly& a, const std::vector<RewardExample>& data) {
  validate_assembly(a);
  if (a.method != "rodos" && a.method != "arliss")
    throw std::invalid_argument("extend_assembly: only routed assemblies grow by domain");
  auto groups = group_by_domain(data);
  for (const auto& d : a.domains)
    if (!groups.count(d))
      throw std::invalid_argument("extend_assembly: data lacks existing domain '" + d +
                                  "' needed to retrain the router");
  std::vector<std::string> fresh;
  for (const auto& [d, part] : groups)
    if (std::find(a.domains.begin(), a.domains.end(), d) == a.domains.end())
      fresh.push_back(d);
  if (fresh.empty())
    throw std::invalid_argument("extend_assembly: no new domains in the data");

  const size_t base_index = a.domains.size();
  for (size_t i = 0; i < fresh.size(); ++i) {
    const auto& domain = fresh[i];
    const auto& part = groups.at(domain);
    TrainConfig dcfg = a.train_cfg;
    dcfg.seed = a.train_cfg.seed + base_index + i;
    auto vocab = vocab_from_examples(part, a.encoder.vocab_size);
    if (a.method == "rodos") {
      dcfg.method = "per-domain";
      auto model = make_full_reward_model(a.encoder, vocab, dcfg.seed);
      a.training_reports["model." + domain] =
          train_reward_model(model, part, dcfg, /*require_single_domain=*/true);
      a.per_domain.emplace(domain, std::move(model));
    } else {
      dcfg.method = "per-domain-lora";
      auto model = make_lora_reward_model(a.host->backbone(), a.encoder, a.adapter_spec,
                                          vocab, dcfg.seed, domain);
      a.training_reports["adapter." + domain] =
          train_reward_model(model, part, dcfg, /*require_single_domain=*/true);
      a.host->add(domain, std::move(*model.adapter), std::move(model.adapter_head),
                  std::move(model.vocab));
    }
    a.domains.push_back(domain);
  }
  std::sort(a.domains.begin(), a.domains.end());

  auto [router, rep] =
      a.method == "arliss"
          ? train_router(data, a.train_cfg, a.encoder, a.adapter_spec, a.host->backbone())
          : train_router(data, a.train_cfg, a.encoder);
  a.router = std::move(router);
  a.training_reports["router"] = std::move(rep);
  validate_assembly(a);
}

}  // namespace rmroute
