#pragma once

// Binary preference accuracy, multi-seed aggregation, and timing harnesses:
// per-domain accuracy grids with mean ± sample-σ across seeds, per-component
// training-time tables, and per-call inference benchmarks with swap counters.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "rmroute/dispatch.hpp"

namespace rmroute {

// ---------------------------------------------------------------------------
// binary accuracy

using ScoreFn = std::function<float(const std::string& prompt, const std::string& response)>;

struct TieOptions {
  // Strict ">" counts ties as wrong (the default). With half-credit enabled,
  // pairs whose reward gap is below epsilon score 0.5 — a sensitivity knob,
  // not the headline metric.
  bool half_credit_ties = false;
  float tie_epsilon = 0.0f;
};

struct AccuracyBreakdown {
  std::map<std::string, double> per_domain;
  std::map<std::string, long> counts;
  double overall = 0;  // weighted by example count
  double macro = 0;    // unweighted mean over domains
  long total = 0;
};

inline AccuracyBreakdown binary_accuracy(const ScoreFn& score,
                                         const std::vector<RewardExample>& examples,
                                         const TieOptions& ties = {}) {
  if (examples.empty()) throw std::invalid_argument("binary_accuracy: empty example set");
  std::map<std::string, double> credit;
  AccuracyBreakdown out;
  for (const auto& ex : examples) {
    const float rc = score(ex.prompt, ex.chosen);
    const float rr = score(ex.prompt, ex.rejected);
    double c = rc > rr ? 1.0 : 0.0;  // a tie is not an "exceeds"
    if (ties.half_credit_ties && std::fabs(rc - rr) < ties.tie_epsilon) c = 0.5;
    credit[ex.domain] += c;
    ++out.counts[ex.domain];
  }
  double won = 0;
  for (const auto& [domain, n] : out.counts) {
    out.per_domain[domain] = credit[domain] / static_cast<double>(n);
    out.macro += out.per_domain[domain];
    won += credit[domain];
    out.total += n;
  }
  out.macro /= static_cast<double>(out.counts.size());
  out.overall = won / static_cast<double>(out.total);
  return out;
}

// ---------------------------------------------------------------------------
// multi-seed aggregation

namespace detail {

inline double mean_of_values(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of_values(v);
  double acc = 0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::string fmt(double x, int prec = 4) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(prec) << x;
  return o.str();
}

}  // namespace detail

struct SeedEval {
  uint64_t seed = 0;
  AccuracyBreakdown accuracy;
};

struct EvalReport {
  std::string method;
  std::vector<uint64_t> seeds;
  std::vector<SeedEval> runs;

  // aggregates (filled by aggregate())
  std::map<std::string, double> mean_per_domain;
  std::map<std::string, double> std_per_domain;
  std::map<std::string, long> counts;
  double macro_mean = 0, macro_std = 0;        // unweighted domain average
  double weighted_mean = 0, weighted_std = 0;  // example-weighted average

  void aggregate() {
    if (runs.empty()) throw std::runtime_error("eval report: no runs to aggregate");
    seeds.clear();
    mean_per_domain.clear();
    std_per_domain.clear();
    counts = runs.front().accuracy.counts;
    std::vector<double> macros, weighteds;
    std::map<std::string, std::vector<double>> per_domain;
    for (const auto& run : runs) {
      seeds.push_back(run.seed);
      macros.push_back(run.accuracy.macro);
      weighteds.push_back(run.accuracy.overall);
      for (const auto& [d, acc] : run.accuracy.per_domain) per_domain[d].push_back(acc);
    }
    for (const auto& [d, vals] : per_domain) {
      mean_per_domain[d] = detail::mean_of_values(vals);
      std_per_domain[d] = detail::sample_std(vals);
    }
    macro_mean = detail::mean_of_values(macros);
    macro_std = detail::sample_std(macros);
    weighted_mean = detail::mean_of_values(weighteds);
    weighted_std = detail::sample_std(weighteds);
  }

  json to_json() const {
    json per;
    for (const auto& [d, m] : mean_per_domain)
      per[d] = {{"mean", m}, {"std", std_per_domain.at(d)}, {"count", counts.at(d)}};
    json runs_j = json::array();
    for (const auto& run : runs) {
      json pd;
      for (const auto& [d, acc] : run.accuracy.per_domain) pd[d] = acc;
      runs_j.push_back({{"seed", run.seed},
                        {"per_domain", pd},
                        {"macro", run.accuracy.macro},
                        {"weighted", run.accuracy.overall}});
    }
    return json{{"method", method},
                {"seeds", seeds},
                {"per_domain", per},
                {"macro", {{"mean", macro_mean}, {"std", macro_std}}},
                {"weighted", {{"mean", weighted_mean}, {"std", weighted_std}}},
                {"runs", runs_j}};
  }
};

// One aligned grid: method rows × domain columns plus both averages.
inline std::string eval_table(const std::vector<EvalReport>& reports) {
  if (reports.empty()) return "(no evaluation results)\n";
  std::vector<std::string> domains;
  for (const auto& [d, m] : reports.front().mean_per_domain) domains.push_back(d);
  const size_t cell = 17;
  std::ostringstream o;
  auto pad = [&](const std::string& s) {
    o << s;
    for (size_t i = s.size(); i < cell; ++i) o << ' ';
  };
  pad("method");
  for (const auto& d : domains) pad(d);
  pad("macro-avg");
  pad("weighted-avg");
  o << "\n";
  for (const auto& r : reports) {
    pad(r.method);
    for (const auto& d : domains) {
      auto it = r.mean_per_domain.find(d);
      pad(it == r.mean_per_domain.end()
              ? std::string("-")
              : detail::fmt(it->second) + "±" + detail::fmt(r.std_per_domain.at(d)));
    }
    pad(detail::fmt(r.macro_mean) + "±" + detail::fmt(r.macro_std));
    pad(detail::fmt(r.weighted_mean) + "±" + detail::fmt(r.weighted_std));
    o << "\n";
  }
  return o.str();
}

// ---------------------------------------------------------------------------
// timing

struct TimingComponent {
  std::string name;
  double seconds = 0;  // per-epoch training seconds for that component
};

struct TimingReport {
  std::string method;
  // training side
  std::vector<TimingComponent> train_components;
  double train_total = 0;  // sum of component per-epoch seconds
  // inference side
  long calls = 0;
  double median_call_seconds = 0;
  double mean_call_seconds = 0;
  long swap_count = 0;
  double swap_seconds_total = 0;

  json to_json() const {
    json comps = json::array();
    for (const auto& c : train_components)
      comps.push_back({{"component", c.name}, {"seconds_per_epoch", c.seconds}});
    return json{{"method", method},
                {"train_components", comps},
                {"train_total", train_total},
                {"calls", calls},
                {"median_call_seconds", median_call_seconds},
                {"mean_call_seconds", mean_call_seconds},
                {"swap_count", swap_count},
                {"swap_seconds_total", swap_seconds_total}};
  }
};

// Per-epoch training seconds per component, straight from the run metrics.
inline TimingReport training_timing(const MethodAssembly& a) {
  TimingReport t;
  t.method = a.method;
  double total = 0;
  for (const auto& [component, rep] : a.training_reports) {
    if (rep.epochs.empty()) continue;
    t.train_components.push_back(
        {component, rep.total_seconds / static_cast<double>(rep.epochs.size())});
    total += rep.total_seconds / static_cast<double>(rep.epochs.size());
  }
  t.train_total = total;
  return t;
}

inline std::string timing_table(const std::vector<TimingReport>& reports) {
  std::ostringstream o;
  o << std::left;
  o << std::setw(12) << "method" << std::setw(10) << "calls" << std::setw(16)
    << "median-call-s" << std::setw(16) << "mean-call-s" << std::setw(8) << "swaps"
    << std::setw(16) << "train-total-s" << "\n";
  for (const auto& r : reports)
    o << std::setw(12) << r.method << std::setw(10) << r.calls << std::setw(16)
      << detail::fmt(r.median_call_seconds, 6) << std::setw(16)
      << detail::fmt(r.mean_call_seconds, 6) << std::setw(8) << r.swap_count
      << std::setw(16) << detail::fmt(r.train_total, 3) << "\n";
  return o.str();
}

// ---------------------------------------------------------------------------
// inference benchmark

struct BenchOptions {
  int samples_per_domain = 20;
  int warmup_calls = 5;
  int repeats = 3;  // the run is repeated and the median of per-run medians reported
  uint64_t seed = 0;
  bool sorted_order = false;  // group calls by routed domain (best case for adapter swaps)
};

// Times assembly_score per call over samples_per_domain × n calls. The call
// order is fixed once per invocation — shuffled across domains by default
// (worst case for adapter switching), or domain-sorted — then the identical
// sequence is timed `repeats` times; warmup calls precede the first pass and
// are never measured. Swap counters cover the first measured pass.
inline TimingReport bench_inference(MethodAssembly& a,
                                    const std::vector<RewardExample>& test_data,
                                    const BenchOptions& opt) {
  if (opt.samples_per_domain < 1 || opt.repeats < 1)
    throw std::invalid_argument("bench: samples_per_domain and repeats must be positive");
  auto groups = group_by_domain(test_data);
  if (groups.empty()) throw std::invalid_argument("bench: empty test data");

  Rng root(opt.seed);
  std::vector<std::pair<std::string, std::string>> calls;
  for (const auto& [domain, part] : groups) {
    Rng r = root.split(domain);
    for (int i = 0; i < opt.samples_per_domain; ++i) {
      const auto& ex = part[r.uniform_int(static_cast<int>(part.size()))];
      calls.push_back({ex.prompt, ex.chosen});
    }
  }
  if (opt.sorted_order) {
    // Group by the router's decision, the only grouping a serving layer can
    // actually schedule by. This caps adapter rebinds at one per adapter no
    // matter how the router maps prompts. Without a router the map walk above
    // already left the calls grouped by domain.
    if (a.router.has_value()) {
      std::vector<std::pair<std::string, size_t>> keyed;
      keyed.reserve(calls.size());
      for (size_t i = 0; i < calls.size(); ++i)
        keyed.push_back({route(*a.router, calls[i].first).domain, i});
      std::stable_sort(keyed.begin(), keyed.end());
      std::vector<std::pair<std::string, std::string>> ordered;
      ordered.reserve(calls.size());
      for (const auto& [domain, i] : keyed) ordered.push_back(calls[i]);
      calls = std::move(ordered);
    }
  } else {
    Rng shuffle_rng = root.split("order");
    shuffle_rng.shuffle(calls);
  }

  for (int w = 0; w < opt.warmup_calls; ++w)
    assembly_score(a, calls[w % calls.size()].first, calls[w % calls.size()].second);

  TimingReport t;
  t.method = a.method;
  t.calls = static_cast<long>(calls.size());
  std::vector<double> medians;
  std::vector<double> all;
  for (int rep = 0; rep < opt.repeats; ++rep) {
    const bool count_swaps = rep == 0 && a.host != nullptr;
    long swaps_before = 0;
    double swap_secs_before = 0;
    if (count_swaps) {
      swaps_before = a.host->swap_count();
      swap_secs_before = a.host->swap_seconds_total();
    }
    std::vector<double> durations;
    durations.reserve(calls.size());
    for (const auto& [prompt, response] : calls) {
      const auto t0 = std::chrono::steady_clock::now();
      assembly_score(a, prompt, response);
      durations.push_back(
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    if (count_swaps) {
      t.swap_count = a.host->swap_count() - swaps_before;
      t.swap_seconds_total = a.host->swap_seconds_total() - swap_secs_before;
    }
    medians.push_back(detail::median_of(durations));
    all.insert(all.end(), durations.begin(), durations.end());
  }
  t.median_call_seconds = detail::median_of(medians);
  t.mean_call_seconds = detail::mean_of_values(all);
  return t;
}

// ---------------------------------------------------------------------------
// the full experiment grid

struct MatrixOptions {
  std::vector<std::string> methods;
  std::vector<uint64_t> seeds;
  BuildOptions build;  // train.seed is overridden per cell
  int jobs = 1;        // worker threads across the independent cells
};

struct MatrixResult {
  std::vector<EvalReport> eval;      // one per method, in request order
  std::vector<TimingReport> timing;  // training side only (bench fills inference)
};

// Trains and evaluates every (method, seed) cell. Timing components are
// averaged across seeds. Any cell failure is rethrown with the cell identity.
// Cells are fully independent, so jobs > 1 shards them across threads without
// changing any accuracy number (timings remain wall-clock and contention-bound).
inline MatrixResult run_matrix(const std::vector<RewardExample>& train_data,
                               const std::vector<RewardExample>& test_data,
                               const MatrixOptions& opt) {
  if (opt.methods.empty() || opt.seeds.empty())
    throw std::invalid_argument("run_matrix: need at least one method and one seed");
  if (opt.jobs < 1) throw std::invalid_argument("run_matrix: jobs must be positive");

  const size_t n_methods = opt.methods.size();
  const size_t n_seeds = opt.seeds.size();
  const size_t n_cells = n_methods * n_seeds;
  std::vector<SeedEval> cell_eval(n_cells);
  std::vector<std::vector<TimingComponent>> cell_timing(n_cells);

  auto run_cell = [&](size_t cell) {
    const std::string& method = opt.methods[cell / n_seeds];
    const uint64_t seed = opt.seeds[cell % n_seeds];
    try {
      BuildOptions b = opt.build;
      b.train.seed = seed;
      auto assembly = build_assembly(method, train_data, b);
      SeedEval run;
      run.seed = seed;
      run.accuracy = binary_accuracy(
          [&](const std::string& p, const std::string& r) {
            return assembly_score(assembly, p, r).reward;
          },
          test_data);
      cell_eval[cell] = std::move(run);
      cell_timing[cell] = training_timing(assembly).train_components;
    } catch (const std::exception& e) {
      throw std::runtime_error("run_matrix cell (method=" + method +
                               ", seed=" + std::to_string(seed) + "): " + e.what());
    }
  };

  const int workers = static_cast<int>(std::min<size_t>(static_cast<size_t>(opt.jobs), n_cells));
  if (workers <= 1) {
    for (size_t cell = 0; cell < n_cells; ++cell) run_cell(cell);
  } else {
    std::atomic<size_t> next{0};
    std::mutex err_mutex;
    std::exception_ptr first_error;
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (size_t c = next.fetch_add(1); c < n_cells; c = next.fetch_add(1)) {
          try {
            run_cell(c);
          } catch (...) {
            std::lock_guard<std::mutex> lock(err_mutex);
            if (!first_error) first_error = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  MatrixResult result;
  for (size_t m = 0; m < n_methods; ++m) {
    EvalReport er;
    er.method = opt.methods[m];
    std::map<std::string, std::vector<double>> component_seconds;
    for (size_t s = 0; s < n_seeds; ++s) {
      const size_t cell = m * n_seeds + s;
      er.runs.push_back(std::move(cell_eval[cell]));
      for (const auto& c : cell_timing[cell]) component_seconds[c.name].push_back(c.seconds);
    }
    er.aggregate();
    result.eval.push_back(std::move(er));

    TimingReport t;
    t.method = opt.methods[m];
    for (const auto& [name, secs] : component_seconds) {
      t.train_components.push_back({name, detail::mean_of_values(secs)});
      t.train_total += t.train_components.back().seconds;
    }
    result.timing.push_back(std::move(t));
  }
  return result;
}

}  // namespace rmroute
