#pragma once

// Dataset schema, JSONL persistence, structural converters for the four raw
// source shapes, and deterministic synthetic multi-domain generation.

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rmroute/rng.hpp"

namespace rmroute {

using json = nlohmann::json;

struct RewardExample {
  std::string prompt;
  std::string chosen;
  std::string rejected;
  std::string domain;
};

inline void validate_example(const RewardExample& ex, const std::string& where) {
  if (ex.chosen == ex.rejected)
    throw std::runtime_error(where + ": degenerate pair (chosen == rejected)");
  if (ex.domain.empty()) throw std::runtime_error(where + ": missing domain label");
}

struct DatasetManifest {
  std::map<std::string, long> counts;
  std::map<std::string, double> shares;  // percent of total
  std::string split;
  uint64_t seed = 0;

  long total() const {
    long t = 0;
    for (const auto& [d, c] : counts) t += c;
    return t;
  }

  void recompute_shares() {
    shares.clear();
    const long t = total();
    for (const auto& [d, c] : counts)
      shares[d] = t == 0 ? 0.0 : 100.0 * static_cast<double>(c) / static_cast<double>(t);
  }

  json to_json() const {
    json j;
    j["split"] = split;
    j["seed"] = seed;
    j["counts"] = counts;
    j["shares"] = shares;
    j["total"] = total();
    return j;
  }
};

// ---------------------------------------------------------------------------
// JSONL persistence: one {"chosen","domain","prompt","rejected"} object per line

inline void save_examples(const std::string& path, const std::vector<RewardExample>& examples) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("save_examples: cannot open '" + path + "'");
  for (const auto& ex : examples) {
    json j;
    j["prompt"] = ex.prompt;
    j["chosen"] = ex.chosen;
    j["rejected"] = ex.rejected;
    j["domain"] = ex.domain;
    f << j.dump() << '\n';  // keys serialize in sorted order: deterministic bytes
  }
  if (!f) throw std::runtime_error("save_examples: write failed for '" + path + "'");
}

inline std::pair<std::vector<RewardExample>, DatasetManifest> load_examples(
    const std::string& path, const std::vector<std::string>& expected_domains = {}) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_examples: cannot open '" + path + "'");
  std::set<std::string> allowed(expected_domains.begin(), expected_domains.end());
  std::vector<RewardExample> out;
  DatasetManifest manifest;
  std::string line;
  long line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error(where + ": malformed line: " + e.what());
    }
    RewardExample ex;
    try {
      ex.prompt = j.at("prompt").get<std::string>();
      ex.chosen = j.at("chosen").get<std::string>();
      ex.rejected = j.at("rejected").get<std::string>();
      ex.domain = j.at("domain").get<std::string>();
    } catch (const json::exception& e) {
      throw std::runtime_error(where + ": missing field: " + e.what());
    }
    validate_example(ex, where);
    if (!allowed.empty() && !allowed.count(ex.domain))
      throw std::runtime_error(where + ": unknown domain label '" + ex.domain + "'");
    ++manifest.counts[ex.domain];
    out.push_back(std::move(ex));
  }
  if (out.empty()) throw std::runtime_error("load_examples: no examples in '" + path + "'");
  manifest.recompute_shares();
  return {out, manifest};
}

// ---------------------------------------------------------------------------
// Raw-source converters

struct RawRecord {
  std::string source;  // dialogue-transcript | dual-summary | multi-ending | preranked
  std::string domain;
  std::map<std::string, std::string> text;  // scalar fields per source shape
  std::vector<std::string> list;            // endings / ranked responses
  int label = -1;                           // preferred summary or correct ending
};

namespace detail {

struct Turn {
  std::string role;  // "Human" or "Assistant"
  std::string text;
};

inline std::vector<Turn> parse_transcript(const std::string& transcript,
                                          const std::string& where) {
  std::vector<Turn> turns;
  std::istringstream in(transcript);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    for (const char* role : {"Human: ", "Assistant: "}) {
      if (line.rfind(role, 0) == 0) {
        const std::string r(role);
        turns.push_back({r.substr(0, r.size() - 2), line.substr(r.size())});
        goto next_line;
      }
    }
    throw std::runtime_error(where + ": transcript line without Human/Assistant role: '" +
                             line + "'");
  next_line:;
  }
  if (turns.empty()) throw std::runtime_error(where + ": empty transcript");
  return turns;
}

}  // namespace detail

// Two transcripts sharing every turn except the final assistant reply: the
// shared turns (role markers stripped, space-joined) become the prompt; the
// divergent final replies become chosen/rejected.
inline std::vector<RewardExample> convert_dialogue(const std::vector<RawRecord>& records) {
  std::vector<RewardExample> out;
  for (size_t i = 0; i < records.size(); ++i) {
    const std::string where = "dialogue record " + std::to_string(i);
    const auto& rec = records[i];
    auto a = detail::parse_transcript(rec.text.at("transcript_chosen"), where);
    auto b = detail::parse_transcript(rec.text.at("transcript_rejected"), where);
    if (a.size() != b.size())
      throw std::runtime_error(where + ": transcripts have different turn counts");
    if (a.back().role != "Assistant" || b.back().role != "Assistant")
      throw std::runtime_error(where + ": transcripts must end with an assistant turn");
    for (size_t t = 0; t + 1 < a.size(); ++t)
      if (a[t].role != b[t].role || a[t].text != b[t].text)
        throw std::runtime_error(where + ": transcripts diverge before the final turn (turn " +
                                 std::to_string(t) + ")");
    RewardExample ex;
    for (size_t t = 0; t + 1 < a.size(); ++t) {
      if (!ex.prompt.empty()) ex.prompt += ' ';
      ex.prompt += a[t].text;
    }
    ex.chosen = a.back().text;
    ex.rejected = b.back().text;
    ex.domain = rec.domain;
    validate_example(ex, where);
    out.push_back(std::move(ex));
  }
  return out;
}

// Context + two summaries + preferred label: label picks chosen.
inline std::vector<RewardExample> convert_dual_summary(const std::vector<RawRecord>& records) {
  std::vector<RewardExample> out;
  for (size_t i = 0; i < records.size(); ++i) {
    const std::string where = "dual-summary record " + std::to_string(i);
    const auto& rec = records[i];
    if (rec.label != 0 && rec.label != 1)
      throw std::runtime_error(where + ": preferred label must be 0 or 1, got " +
                               std::to_string(rec.label));
    RewardExample ex;
    ex.prompt = rec.text.at("context");
    ex.chosen = rec.text.at(rec.label == 0 ? "summary0" : "summary1");
    ex.rejected = rec.text.at(rec.label == 0 ? "summary1" : "summary0");
    ex.domain = rec.domain;
    validate_example(ex, where);
    out.push_back(std::move(ex));
  }
  return out;
}

// Prompt + endings + correct index: chosen is the correct ending, rejected a
// seeded-uniform pick among the incorrect ones.
inline std::vector<RewardExample> convert_multi_ending(const std::vector<RawRecord>& records,
                                                       uint64_t seed) {
  std::vector<RewardExample> out;
  Rng root(seed);
  for (size_t i = 0; i < records.size(); ++i) {
    const std::string where = "multi-ending record " + std::to_string(i);
    const auto& rec = records[i];
    if (rec.list.size() < 2)
      throw std::runtime_error(where + ": need at least 2 endings, got " +
                               std::to_string(rec.list.size()));
    if (rec.label < 0 || rec.label >= static_cast<int>(rec.list.size()))
      throw std::runtime_error(where + ": correct index " + std::to_string(rec.label) +
                               " out of range");
    std::vector<int> incorrect;
    for (int j = 0; j < static_cast<int>(rec.list.size()); ++j)
      if (j != rec.label) incorrect.push_back(j);
    Rng r = root.split(i);
    RewardExample ex;
    ex.prompt = rec.text.at("prompt");
    ex.chosen = rec.list[rec.label];
    ex.rejected = rec.list[incorrect[r.uniform_int(static_cast<int>(incorrect.size()))]];
    ex.domain = rec.domain;
    validate_example(ex, where);
    out.push_back(std::move(ex));
  }
  return out;
}

// Ranked responses, best first: adjacent ranks pair up (i chosen, i+1 rejected).
inline std::vector<RewardExample> convert_preranked(const std::vector<RawRecord>& records) {
  std::vector<RewardExample> out;
  for (size_t i = 0; i < records.size(); ++i) {
    const std::string where = "preranked record " + std::to_string(i);
    const auto& rec = records[i];
    if (rec.list.size() < 2)
      throw std::runtime_error(where + ": need at least 2 ranked responses");
    for (size_t j = 0; j + 1 < rec.list.size(); ++j) {
      RewardExample ex;
      ex.prompt = rec.text.at("prompt");
      ex.chosen = rec.list[j];
      ex.rejected = rec.list[j + 1];
      ex.domain = rec.domain;
      validate_example(ex, where + " pair " + std::to_string(j));
      out.push_back(std::move(ex));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic multi-domain generation

enum class SynthMode { kDisjoint, kOverlapping };

struct SynthOptions {
  int domains = 5;
  int train_per_domain = 200;
  int test_per_domain = 60;
  SynthMode mode = SynthMode::kDisjoint;
  uint64_t seed = 0;
};

struct SynthResult {
  std::string train_path;
  std::string test_path;
  std::string train_manifest_path;
  std::string test_manifest_path;
  DatasetManifest train_manifest;
  DatasetManifest test_manifest;
  std::vector<std::string> domains;
};

inline std::vector<std::string> domain_names(int n) {
  static const std::vector<std::string> pool = {"alpha",   "bravo", "charlie", "delta",
                                                "echo",    "foxtrot", "golf",  "hotel",
                                                "india",   "juliet"};
  if (n < 1) throw std::invalid_argument("domain_names: need at least one domain");
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i)
    out.push_back(i < static_cast<int>(pool.size()) ? pool[i]
                                                    : "domain" + std::to_string(i));
  return out;
}

namespace detail {

constexpr int kPromptPool = 20;
constexpr int kFillerPool = 20;
constexpr int kSharedPool = 10;

// Chosen responses carry the domain's quality marker "<domain>_good", rejected
// "<domain>_bad"; prompts draw from the domain's private token pool (plus a
// shared pool in overlapping mode), which makes both the reward rule and the
// routing rule learnable — and brute-force checkable.
inline RewardExample synth_example(const std::string& domain, SynthMode mode, Rng& r) {
  auto prompt_tok = [&]() {
    if (mode == SynthMode::kOverlapping && r.uniform() < 0.3)
      return "shared_s" + std::to_string(r.uniform_int(kSharedPool));
    return domain + "_t" + std::to_string(r.uniform_int(kPromptPool));
  };
  auto filler_tok = [&]() { return domain + "_r" + std::to_string(r.uniform_int(kFillerPool)); };

  RewardExample ex;
  ex.domain = domain;
  const int prompt_len = 4 + r.uniform_int(3);
  for (int i = 0; i < prompt_len; ++i) {
    if (i) ex.prompt += ' ';
    ex.prompt += prompt_tok();
  }
  const int resp_len = 3 + r.uniform_int(3);
  std::vector<std::string> chosen_toks, rejected_toks;
  for (int i = 0; i < resp_len; ++i) {
    chosen_toks.push_back(filler_tok());
    rejected_toks.push_back(filler_tok());
  }
  chosen_toks.insert(chosen_toks.begin() + r.uniform_int(resp_len + 1), domain + "_good");
  rejected_toks.insert(rejected_toks.begin() + r.uniform_int(resp_len + 1), domain + "_bad");
  for (size_t i = 0; i < chosen_toks.size(); ++i) {
    if (i) ex.chosen += ' ';
    ex.chosen += chosen_toks[i];
  }
  for (size_t i = 0; i < rejected_toks.size(); ++i) {
    if (i) ex.rejected += ' ';
    ex.rejected += rejected_toks[i];
  }
  return ex;
}

}  // namespace detail

struct SynthSplits {
  std::vector<RewardExample> train;
  std::vector<RewardExample> test;
  std::vector<std::string> domains;
  DatasetManifest train_manifest;
  DatasetManifest test_manifest;
};

// In-memory generation; the file writer below serializes exactly this.
inline SynthSplits synth_examples(const SynthOptions& opt) {
  if (opt.domains < 1 || opt.train_per_domain < 1 || opt.test_per_domain < 1)
    throw std::invalid_argument("synth_generate: sizes must be positive");
  SynthSplits out;
  out.domains = domain_names(opt.domains);
  Rng root(opt.seed);
  for (const char* split : {"train", "test"}) {
    const bool is_train = std::string(split) == "train";
    const int per_domain = is_train ? opt.train_per_domain : opt.test_per_domain;
    auto& examples = is_train ? out.train : out.test;
    auto& manifest = is_train ? out.train_manifest : out.test_manifest;
    manifest.split = split;
    manifest.seed = opt.seed;
    Rng split_rng = root.split(split);
    for (const auto& domain : out.domains) {
      Rng domain_rng = split_rng.split(domain);
      for (int i = 0; i < per_domain; ++i) {
        Rng r = domain_rng.split(static_cast<uint64_t>(i));
        examples.push_back(detail::synth_example(domain, opt.mode, r));
        ++manifest.counts[domain];
      }
    }
    manifest.recompute_shares();
  }
  return out;
}

inline SynthResult synth_generate(const SynthOptions& opt, const std::string& out_dir) {
  auto splits = synth_examples(opt);
  SynthResult res;
  res.domains = splits.domains;
  res.train_manifest = splits.train_manifest;
  res.test_manifest = splits.test_manifest;
  std::filesystem::create_directories(out_dir);
  for (const char* split : {"train", "test"}) {
    const bool is_train = std::string(split) == "train";
    const std::string path =
        (std::filesystem::path(out_dir) / (std::string(split) + ".jsonl")).string();
    const std::string mpath =
        (std::filesystem::path(out_dir) / (std::string(split) + ".manifest.json")).string();
    save_examples(path, is_train ? splits.train : splits.test);
    std::ofstream mf(mpath, std::ios::trunc);
    mf << (is_train ? splits.train_manifest : splits.test_manifest).to_json().dump(2) << '\n';
    if (!mf) throw std::runtime_error("synth_generate: cannot write '" + mpath + "'");
    (is_train ? res.train_path : res.test_path) = path;
    (is_train ? res.train_manifest_path : res.test_manifest_path) = mpath;
  }
  return res;
}

// Token set of all prompts per domain; the disjointness check and the
// bag-of-words routing oracle both build on this.
inline std::map<std::string, std::set<std::string>> prompt_vocabularies(
    const std::vector<RewardExample>& examples) {
  std::map<std::string, std::set<std::string>> vocabs;
  for (const auto& ex : examples) {
    std::istringstream in(ex.prompt);
    std::string tok;
    while (in >> tok) vocabs[ex.domain].insert(tok);
  }
  return vocabs;
}

}  // namespace rmroute
