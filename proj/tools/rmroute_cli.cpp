// rmroute — desk-scale workbench for routed reward models.
//
// Commands
//   synth          generate a synthetic multi-domain preference dataset
//   convert        turn raw source records into (prompt, chosen, rejected) pairs
//   train          train one method, write checkpoints + an assembly manifest
//   eval           accuracy tables for saved assemblies or a method × seed matrix
//   bench          per-call inference timing with adapter-swap counters
//   report-params  parameter-count breakdowns against a reference model
//
// Exit codes: 0 success, 2 usage, 3 validation, 4 runtime (I/O, integrity).
//
// All outputs land under --out (or --json). When RMROUTE_OUT_ROOT is set,
// relative output paths are resolved beneath it. Inputs are never modified.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rmroute/eval.hpp"

namespace {

using namespace rmroute;

// ---------------------------------------------------------------------------
// output locations

std::string resolve_out(const std::string& path) {
  const char* root = std::getenv("RMROUTE_OUT_ROOT");
  if (!root || !*root) return path;
  std::filesystem::path p(path);
  if (p.is_absolute()) return path;
  return (std::filesystem::path(root) / p).string();
}

void write_json_file(const std::string& path, const json& j) {
  const std::string full = resolve_out(path);
  const auto parent = std::filesystem::path(full).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream f(full, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + full + "' for writing");
  f << j.dump(2) << '\n';
  if (!f) throw std::runtime_error("write failed for '" + full + "'");
  std::cout << "wrote " << full << "\n";
}

// ---------------------------------------------------------------------------
// config files: one JSON document with sections encoder / moe / adapter /
// train / reference. Unknown sections or keys are rejected with their JSON
// pointer; parse errors carry the byte offset. Flags override file values.

json load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config '" + path + "': cannot open");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config '" + path + "': parse error at byte " +
                                std::to_string(e.byte) + ": " + e.what());
  }
}

void expect_object(const json& j, const std::string& where) {
  if (!j.is_object())
    throw std::invalid_argument("config: '" + (where.empty() ? "/" : where) +
                                "' must be a JSON object");
}

void expect_keys(const json& j, std::initializer_list<const char*> allowed,
                 const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw std::invalid_argument("config: unknown key '" + where + "/" + it.key() + "'");
  }
}

template <typename T>
void maybe_get(const json& j, const char* key, T& field, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw std::invalid_argument("config: bad value at '" + where + "/" + key +
                                "': " + e.what());
  }
}

void apply_encoder_section(EncoderConfig& c, const json& j, const std::string& where) {
  expect_object(j, where);
  expect_keys(j, {"vocab_size", "max_len", "hidden", "layers", "heads", "ffn", "dropout"},
              where);
  maybe_get(j, "vocab_size", c.vocab_size, where);
  maybe_get(j, "max_len", c.max_len, where);
  maybe_get(j, "hidden", c.hidden, where);
  maybe_get(j, "layers", c.layers, where);
  maybe_get(j, "heads", c.heads, where);
  maybe_get(j, "ffn", c.ffn, where);
  maybe_get(j, "dropout", c.dropout, where);
}

void apply_moe_section(MoEConfig& c, const json& j, const std::string& where) {
  expect_object(j, where);
  expect_keys(j, {"num_experts", "top_k", "expert_dim", "noise_enabled", "load_balance_coeff"},
              where);
  maybe_get(j, "num_experts", c.num_experts, where);
  maybe_get(j, "top_k", c.top_k, where);
  maybe_get(j, "expert_dim", c.expert_dim, where);
  maybe_get(j, "noise_enabled", c.noise_enabled, where);
  maybe_get(j, "load_balance_coeff", c.load_balance_coeff, where);
}

void apply_adapter_section(AdapterSpec& c, const json& j, const std::string& where) {
  expect_object(j, where);
  expect_keys(j, {"rank", "alpha", "dropout", "targets"}, where);
  maybe_get(j, "rank", c.rank, where);
  maybe_get(j, "alpha", c.alpha, where);
  maybe_get(j, "dropout", c.dropout, where);
  maybe_get(j, "targets", c.targets, where);
}

void apply_train_section(TrainConfig& c, const json& j, const std::string& where) {
  expect_object(j, where);
  expect_keys(j, {"lr", "batch_size", "epochs", "seed", "shared_pair_dropout"}, where);
  maybe_get(j, "lr", c.lr, where);
  maybe_get(j, "batch_size", c.batch_size, where);
  maybe_get(j, "epochs", c.epochs, where);
  maybe_get(j, "seed", c.seed, where);
  maybe_get(j, "shared_pair_dropout", c.shared_pair_dropout, where);
}

// ---------------------------------------------------------------------------
// shared training/build flags (train command and eval's matrix mode)

struct BuildFlags {
  std::string preset = "desk";
  std::string config_path;
  int jobs = 1;

  float lr = 0;
  int epochs = 0, batch_size = 0;
  std::uint64_t seed = 0;
  bool shared_pair_dropout = false;
  int hidden = 0, layers = 0, heads = 0, ffn = 0, vocab_size = 0, max_len = 0;
  float enc_dropout = 0;
  int experts = 0, top_k = 0, expert_dim = 0;
  float load_balance = 0;
  bool no_gate_noise = false;
  int rank = 0;
  float alpha = 0, adapter_dropout = 0;
  int ref_hidden = 0, ref_ffn = 0;

  CLI::Option *o_lr = nullptr, *o_epochs = nullptr, *o_batch = nullptr, *o_seed = nullptr,
              *o_shared = nullptr, *o_hidden = nullptr, *o_layers = nullptr,
              *o_heads = nullptr, *o_ffn = nullptr, *o_vocab = nullptr, *o_max_len = nullptr,
              *o_enc_drop = nullptr, *o_experts = nullptr, *o_top_k = nullptr,
              *o_expert_dim = nullptr, *o_balance = nullptr, *o_no_noise = nullptr,
              *o_rank = nullptr, *o_alpha = nullptr, *o_adapter_drop = nullptr,
              *o_ref_hidden = nullptr, *o_ref_ffn = nullptr;
};

void add_build_flags(CLI::App* cmd, BuildFlags& f) {
  cmd->add_option("--preset", f.preset, "hyperparameter preset: desk or paper")
      ->check(CLI::IsMember({"desk", "paper"}))
      ->capture_default_str();
  cmd->add_option("--config", f.config_path,
                  "JSON config file (sections: encoder, moe, adapter, train, reference); "
                  "flags below override file values");
  cmd->add_option("--jobs", f.jobs, "worker threads for independent per-domain runs")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  f.o_lr = cmd->add_option("--lr", f.lr, "learning rate");
  f.o_epochs = cmd->add_option("--epochs", f.epochs, "training epochs");
  f.o_batch = cmd->add_option("--batch-size", f.batch_size, "pairs per optimizer step");
  f.o_seed = cmd->add_option("--seed", f.seed, "training seed");
  f.o_shared = cmd->add_flag("--shared-pair-dropout", f.shared_pair_dropout,
                             "chosen and rejected share one dropout stream");

  f.o_hidden = cmd->add_option("--hidden", f.hidden, "encoder hidden size");
  f.o_layers = cmd->add_option("--layers", f.layers, "encoder layers");
  f.o_heads = cmd->add_option("--heads", f.heads, "attention heads");
  f.o_ffn = cmd->add_option("--ffn", f.ffn, "feed-forward size");
  f.o_vocab = cmd->add_option("--vocab-size", f.vocab_size, "vocabulary capacity");
  f.o_max_len = cmd->add_option("--max-len", f.max_len, "token budget per pair");
  f.o_enc_drop = cmd->add_option("--encoder-dropout", f.enc_dropout, "encoder dropout rate");

  f.o_experts = cmd->add_option("--experts", f.experts, "expert count for the moe method");
  f.o_top_k = cmd->add_option("--top-k", f.top_k, "experts kept per example");
  f.o_expert_dim = cmd->add_option("--expert-dim", f.expert_dim, "expert hidden size");
  f.o_balance = cmd->add_option("--load-balance", f.load_balance,
                                "load-balance auxiliary loss weight");
  f.o_no_noise = cmd->add_flag("--no-gate-noise", f.no_gate_noise,
                               "disable gate noise during training");

  f.o_rank = cmd->add_option("--rank", f.rank, "adapter rank");
  f.o_alpha = cmd->add_option("--alpha", f.alpha, "adapter scaling numerator");
  f.o_adapter_drop =
      cmd->add_option("--adapter-dropout", f.adapter_dropout, "adapter input dropout");

  f.o_ref_hidden = cmd->add_option("--reference-hidden", f.ref_hidden,
                                   "reference model hidden size (parameter accounting)");
  f.o_ref_ffn = cmd->add_option("--reference-ffn", f.ref_ffn,
                                "reference model feed-forward size (parameter accounting)");
}

BuildOptions make_build_options(const BuildFlags& f) {
  BuildOptions b;
  b.train = f.preset == "paper" ? paper_preset() : desk_preset();
  b.jobs = f.jobs;

  if (!f.config_path.empty()) {
    const json cfg = load_config(f.config_path);
    expect_object(cfg, "");
    expect_keys(cfg, {"encoder", "moe", "adapter", "train", "reference"}, "");
    if (cfg.contains("encoder")) apply_encoder_section(b.encoder, cfg["encoder"], "/encoder");
    if (cfg.contains("moe")) apply_moe_section(b.moe, cfg["moe"], "/moe");
    if (cfg.contains("adapter")) apply_adapter_section(b.adapter, cfg["adapter"], "/adapter");
    if (cfg.contains("train")) apply_train_section(b.train, cfg["train"], "/train");
    if (cfg.contains("reference")) {
      EncoderConfig ref = b.encoder;
      apply_encoder_section(ref, cfg["reference"], "/reference");
      b.reference = ref;
    }
  }

  auto set = [](const CLI::Option* o) { return o && o->count() > 0; };
  if (set(f.o_lr)) b.train.lr = f.lr;
  if (set(f.o_epochs)) b.train.epochs = f.epochs;
  if (set(f.o_batch)) b.train.batch_size = f.batch_size;
  if (set(f.o_seed)) b.train.seed = f.seed;
  if (set(f.o_shared)) b.train.shared_pair_dropout = f.shared_pair_dropout;
  if (set(f.o_hidden)) b.encoder.hidden = f.hidden;
  if (set(f.o_layers)) b.encoder.layers = f.layers;
  if (set(f.o_heads)) b.encoder.heads = f.heads;
  if (set(f.o_ffn)) b.encoder.ffn = f.ffn;
  if (set(f.o_vocab)) b.encoder.vocab_size = f.vocab_size;
  if (set(f.o_max_len)) b.encoder.max_len = f.max_len;
  if (set(f.o_enc_drop)) b.encoder.dropout = f.enc_dropout;
  if (set(f.o_experts)) b.moe.num_experts = f.experts;
  if (set(f.o_top_k)) b.moe.top_k = f.top_k;
  if (set(f.o_expert_dim)) b.moe.expert_dim = f.expert_dim;
  if (set(f.o_balance)) b.moe.load_balance_coeff = f.load_balance;
  if (set(f.o_no_noise)) b.moe.noise_enabled = !f.no_gate_noise;
  if (set(f.o_rank)) b.adapter.rank = f.rank;
  if (set(f.o_alpha)) b.adapter.alpha = f.alpha;
  if (set(f.o_adapter_drop)) b.adapter.dropout = f.adapter_dropout;
  if (set(f.o_ref_hidden) || set(f.o_ref_ffn)) {
    EncoderConfig ref = b.reference.value_or(b.encoder);
    if (set(f.o_ref_hidden)) ref.hidden = f.ref_hidden;
    if (set(f.o_ref_ffn)) ref.ffn = f.ref_ffn;
    b.reference = ref;
  }
  return b;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string out;
  std::string mode = "disjoint";
  SynthOptions opt;
};

int run_synth(const SynthArgs& s) {
  SynthOptions opt = s.opt;
  opt.mode = s.mode == "disjoint" ? SynthMode::kDisjoint : SynthMode::kOverlapping;
  const auto res = synth_generate(opt, resolve_out(s.out));
  std::cout << "domains:";
  for (const auto& d : res.domains) std::cout << ' ' << d;
  std::cout << "\nwrote " << res.train_path << " (" << res.train_manifest.total()
            << " pairs)\nwrote " << res.test_path << " (" << res.test_manifest.total()
            << " pairs)\nwrote " << res.train_manifest_path << "\nwrote "
            << res.test_manifest_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// convert

struct ConvertArgs {
  std::string source, in, out;
  std::uint64_t seed = 0;
};

std::vector<RawRecord> load_raw_records(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  std::vector<RawRecord> records;
  std::string line;
  long line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::invalid_argument(where + ": malformed record: " + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument(where + ": record must be an object");
    RawRecord rec;
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& key = it.key();
      const json& v = it.value();
      if (key == "source" && v.is_string()) {
        rec.source = v.get<std::string>();
      } else if (key == "domain" && v.is_string()) {
        rec.domain = v.get<std::string>();
      } else if (v.is_string()) {
        rec.text[key] = v.get<std::string>();
      } else if (v.is_array()) {
        try {
          rec.list = v.get<std::vector<std::string>>();
        } catch (const json::exception&) {
          throw std::invalid_argument(where + ": field '" + key +
                                      "' must be an array of strings");
        }
      } else if (v.is_number_integer()) {
        rec.label = v.get<int>();
      } else {
        throw std::invalid_argument(where + ": field '" + key +
                                    "' has an unsupported type");
      }
    }
    if (rec.domain.empty())
      throw std::invalid_argument(where + ": missing 'domain' field");
    records.push_back(std::move(rec));
  }
  if (records.empty()) throw std::invalid_argument("no records in '" + path + "'");
  return records;
}

int run_convert(const ConvertArgs& c) {
  const auto records = load_raw_records(c.in);
  std::vector<RewardExample> out;
  try {
    if (c.source == "dialogue-transcript")
      out = convert_dialogue(records);
    else if (c.source == "dual-summary")
      out = convert_dual_summary(records);
    else if (c.source == "multi-ending")
      out = convert_multi_ending(records, c.seed);
    else
      out = convert_preranked(records);
  } catch (const std::runtime_error& e) {
    // malformed source records are an input-validation failure, not a crash
    throw std::invalid_argument(std::string("raw record validation: ") + e.what());
  }

  const std::filesystem::path dir = resolve_out(c.out);
  std::filesystem::create_directories(dir);
  const std::string data_path = (dir / "converted.jsonl").string();
  save_examples(data_path, out);
  DatasetManifest manifest;
  manifest.split = "converted";
  manifest.seed = c.seed;
  for (const auto& ex : out) ++manifest.counts[ex.domain];
  manifest.recompute_shares();
  write_json_file((dir / "converted.manifest.json").string(), manifest.to_json());
  std::cout << "wrote " << data_path << " (" << out.size() << " pairs from "
            << records.size() << " records)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string method, data, out, extend_path;
  BuildFlags flags;
};

int run_train(const TrainArgs& t) {
  auto [examples, data_manifest] = load_examples(t.data);

  MethodAssembly a;
  if (!t.extend_path.empty()) {
    a = load_assembly(t.extend_path);
    if (!t.method.empty() && t.method != a.method)
      throw std::invalid_argument("train: --method '" + t.method +
                                  "' does not match the extended assembly's method '" +
                                  a.method + "'");
    extend_assembly(a, examples);
  } else {
    if (t.method.empty())
      throw std::invalid_argument("train: --method is required (or use --extend)");
    a = build_assembly(t.method, examples, make_build_options(t.flags));
  }

  const std::string manifest_path = save_assembly(a, resolve_out(t.out));
  std::cout << "method " << a.method << ", " << a.domains.size() << " domain"
            << (a.domains.size() == 1 ? "" : "s") << ", " << a.training_reports.size()
            << " trained component" << (a.training_reports.size() == 1 ? "" : "s") << "\n";
  for (const auto& [name, rep] : a.training_reports) {
    const auto& last = rep.epochs.back();
    std::ostringstream line;
    line << "  " << std::left << std::setw(18) << name << std::right << rep.epochs.size()
         << " epochs  final loss " << std::fixed << std::setprecision(4) << last.mean_loss
         << "  " << std::setprecision(2) << rep.total_seconds << "s";
    std::cout << line.str() << "\n";
  }
  std::cout << "wrote " << manifest_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::vector<std::string> manifests;
  std::vector<std::string> methods;
  std::vector<std::uint64_t> seeds;
  std::string data, train_data, json_out;
  bool tie_half = false;
  float tie_eps = 1e-6f;
  BuildFlags flags;
};

int run_eval(const EvalArgs& e) {
  auto [test, test_manifest] = load_examples(e.data);
  TieOptions ties;
  ties.half_credit_ties = e.tie_half;
  ties.tie_epsilon = e.tie_eps;

  std::vector<EvalReport> reports;
  if (!e.manifests.empty()) {
    if (!e.methods.empty() || !e.train_data.empty())
      throw std::invalid_argument(
          "eval: use either --manifest mode or --method/--train-data matrix mode, not both");
    for (const auto& path : e.manifests) {
      auto a = load_assembly(path);
      EvalReport r;
      r.method = a.method;
      SeedEval run;
      run.seed = a.train_cfg.seed;
      run.accuracy = binary_accuracy(
          [&](const std::string& p, const std::string& resp) {
            return assembly_score(a, p, resp).reward;
          },
          test, ties);
      r.runs.push_back(std::move(run));
      r.aggregate();
      reports.push_back(std::move(r));
    }
  } else {
    if (e.methods.empty() || e.train_data.empty())
      throw std::invalid_argument(
          "eval: need --manifest, or --method with --train-data for matrix mode");
    auto [train, train_manifest] = load_examples(e.train_data);
    MatrixOptions mo;
    mo.methods = e.methods;
    mo.seeds = e.seeds.empty() ? std::vector<std::uint64_t>{0} : e.seeds;
    mo.build = make_build_options(e.flags);
    mo.jobs = e.flags.jobs;
    auto result = run_matrix(train, test, mo);
    reports = std::move(result.eval);
  }

  std::cout << eval_table(reports);
  if (!e.json_out.empty()) {
    json arr = json::array();
    for (const auto& r : reports) arr.push_back(r.to_json());
    write_json_file(e.json_out, arr);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  std::vector<std::string> manifests;
  std::string data, json_out;
  BenchOptions opt;
};

int run_bench(const BenchArgs& b) {
  auto [test, test_manifest] = load_examples(b.data);
  std::vector<TimingReport> reports;
  for (const auto& path : b.manifests) {
    auto a = load_assembly(path);
    TimingReport t = bench_inference(a, test, b.opt);
    const TimingReport trained = training_timing(a);
    t.train_components = trained.train_components;
    t.train_total = trained.train_total;
    reports.push_back(std::move(t));
  }
  std::sort(reports.begin(), reports.end(),
            [](const TimingReport& x, const TimingReport& y) { return x.method < y.method; });
  std::cout << timing_table(reports);
  if (!b.json_out.empty()) {
    json arr = json::array();
    for (const auto& r : reports) arr.push_back(r.to_json());
    write_json_file(b.json_out, arr);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// report-params

struct ParamsArgs {
  std::string manifest, method, json_out;
  long long model_params = -1, adapter_params = 0, reference_params = -1;
  int domains = -1;
};

json param_report_to_json(const ParamReport& r) {
  json comps = json::array();
  for (const auto& c : r.components) comps.push_back({{"name", c.name}, {"params", c.params}});
  return json{{"method", r.method},
              {"components", comps},
              {"total", r.total},
              {"reference_total", r.reference_total},
              {"percent_of_reference", r.percent_of_reference}};
}

int run_params(const ParamsArgs& p) {
  ParamReport r;
  if (!p.manifest.empty()) {
    const auto a = load_assembly(p.manifest);
    r = assembly_parameter_report(a);
    const long long stored = serialized_param_count(p.manifest);
    if (stored != r.total)
      throw std::runtime_error("parameter report total " + std::to_string(r.total) +
                               " does not match the " + std::to_string(stored) +
                               " parameters serialized in the checkpoints");
    std::cout << "serialized parameters verified: " << stored << "\n";
  } else {
    if (p.method.empty() || p.model_params < 0 || p.domains < 0)
      throw std::invalid_argument(
          "report-params: need --manifest, or --method with --model-params and --domains");
    const long long reference = p.reference_params < 0 ? p.model_params : p.reference_params;
    r = parameter_report_from_counts(p.method, p.model_params, p.adapter_params, p.domains,
                                     reference);
  }
  std::cout << r.table();
  if (!p.json_out.empty()) write_json_file(p.json_out, param_report_to_json(r));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "rmroute: train, evaluate, and benchmark routed reward-model architectures\n"
      "(single pooled model, shared-backbone adapter, sparse expert head, router\n"
      "over per-domain models, and router-switched adapters on one backbone)"};
  app.require_subcommand(1);
  app.footer("Exit codes: 0 success, 2 usage, 3 validation, 4 runtime/integrity.");

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "generate a synthetic multi-domain dataset");
  synth->add_option("--out", synth_args.out, "output directory")->required();
  synth->add_option("--domains", synth_args.opt.domains, "number of domains")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  synth->add_option("--per-domain", synth_args.opt.train_per_domain,
                    "training pairs per domain")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  synth->add_option("--test-per-domain", synth_args.opt.test_per_domain,
                    "held-out pairs per domain")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  synth->add_option("--mode", synth_args.mode, "domain vocabulary overlap")
      ->check(CLI::IsMember({"disjoint", "overlapping"}))
      ->capture_default_str();
  synth->add_option("--seed", synth_args.opt.seed, "generation seed")->capture_default_str();

  ConvertArgs convert_args;
  auto* convert = app.add_subcommand("convert", "convert raw records to preference pairs");
  convert->add_option("--source", convert_args.source, "raw record shape")
      ->required()
      ->check(CLI::IsMember(
          {"dialogue-transcript", "dual-summary", "multi-ending", "preranked"}));
  convert->add_option("--in", convert_args.in, "raw JSONL file")->required();
  convert->add_option("--out", convert_args.out, "output directory")->required();
  convert->add_option("--seed", convert_args.seed,
                      "seed for sampling rejected endings (multi-ending only)")
      ->capture_default_str();

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "train one method and save its assembly");
  train->add_option("--method", train_args.method,
                    "baseline | base-lora | more | rodos | arliss");
  train->add_option("--data", train_args.data, "training pairs (JSONL)")->required();
  train->add_option("--out", train_args.out, "checkpoint directory")->required();
  train->add_option("--extend", train_args.extend_path,
                    "existing assembly manifest to grow with new domains");
  add_build_flags(train, train_args.flags);

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "accuracy tables for assemblies or a method grid");
  eval->add_option("--data", eval_args.data, "held-out pairs (JSONL)")->required();
  eval->add_option("--manifest", eval_args.manifests,
                   "saved assembly manifest (repeatable)");
  eval->add_option("--method", eval_args.methods,
                   "method to train and evaluate in matrix mode (repeatable)");
  eval->add_option("--seeds", eval_args.seeds, "training seeds for matrix mode");
  eval->add_option("--train-data", eval_args.train_data,
                   "training pairs for matrix mode (JSONL)");
  eval->add_option("--json", eval_args.json_out, "write reports to this JSON file");
  eval->add_flag("--tie-half-credit", eval_args.tie_half,
                 "score ties as 0.5 instead of 0 (sensitivity check)");
  eval->add_option("--tie-epsilon", eval_args.tie_eps, "reward gap treated as a tie")
      ->capture_default_str();
  add_build_flags(eval, eval_args.flags);

  BenchArgs bench_args;
  auto* bench = app.add_subcommand("bench", "per-call inference timing and swap counts");
  bench->add_option("--manifest", bench_args.manifests,
                    "saved assembly manifest (repeatable)")
      ->required();
  bench->add_option("--data", bench_args.data, "held-out pairs to sample calls from (JSONL)")
      ->required();
  bench->add_option("--samples-per-domain", bench_args.opt.samples_per_domain,
                    "timed calls sampled per domain")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  bench->add_option("--warmup", bench_args.opt.warmup_calls, "untimed warmup calls")
      ->capture_default_str();
  bench->add_option("--repeats", bench_args.opt.repeats,
                    "timed passes (median of per-pass medians)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  bench->add_option("--seed", bench_args.opt.seed, "call-sampling seed")
      ->capture_default_str();
  bench->add_flag("--sorted", bench_args.opt.sorted_order,
                  "group calls by routed domain (fewest adapter swaps)");
  bench->add_option("--json", bench_args.json_out, "write reports to this JSON file");

  ParamsArgs params_args;
  auto* params = app.add_subcommand("report-params",
                                    "parameter totals per method vs a reference model");
  params->add_option("--manifest", params_args.manifest,
                     "saved assembly manifest (exact, checked against checkpoints)");
  params->add_option("--method", params_args.method,
                     "method for closed-form accounting from round counts");
  params->add_option("--model-params", params_args.model_params,
                     "parameters of one full model");
  params->add_option("--adapter-params", params_args.adapter_params,
                     "parameters of one adapter")
      ->capture_default_str();
  params->add_option("--domains", params_args.domains, "number of domains");
  params->add_option("--reference-params", params_args.reference_params,
                     "reference total (defaults to --model-params)");
  params->add_option("--json", params_args.json_out, "write the report to this JSON file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth) return run_synth(synth_args);
    if (*convert) return run_convert(convert_args);
    if (*train) return run_train(train_args);
    if (*eval) return run_eval(eval_args);
    if (*bench) return run_bench(bench_args);
    if (*params) return run_params(params_args);
  } catch (const std::invalid_argument& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 2;
}
