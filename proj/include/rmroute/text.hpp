#pragma once

// Whitespace tokenizer and frequency vocabulary with reserved PAD/UNK/SEP ids.

#include <algorithm>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace rmroute {

inline std::vector<std::string> split_ws(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

struct Vocab {
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kSep = 2;

  std::vector<std::string> tokens;  // position == id
  std::unordered_map<std::string, int> ids;

  int size() const { return static_cast<int>(tokens.size()); }

  int id_of(const std::string& tok) const {
    auto it = ids.find(tok);
    return it == ids.end() ? kUnk : it->second;
  }

  // newline-joined token list, reconstructible via from_lines
  std::string to_lines() const {
    std::string out;
    for (size_t i = 0; i < tokens.size(); ++i) {
      if (i) out += '\n';
      out += tokens[i];
    }
    return out;
  }

  static Vocab from_lines(const std::string& lines) {
    Vocab v;
    std::istringstream in(lines);
    std::string line;
    while (std::getline(in, line)) {
      v.ids[line] = static_cast<int>(v.tokens.size());
      v.tokens.push_back(line);
    }
    if (v.size() < 3 || v.tokens[0] != "<pad>" || v.tokens[1] != "<unk>" ||
        v.tokens[2] != "<sep>")
      throw std::runtime_error("vocab: serialized list missing reserved tokens");
    return v;
  }
};

// Descending-frequency vocabulary (ties broken lexicographically), truncated
// to max_size entries including the three reserved ids.
inline Vocab build_vocab(const std::vector<std::string>& corpus, int max_size) {
  if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  if (max_size < 3) throw std::invalid_argument("build_vocab: max_size below reserved count");
  std::map<std::string, long> freq;
  for (const auto& doc : corpus)
    for (const auto& tok : split_ws(doc)) ++freq[tok];

  std::vector<std::pair<std::string, long>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocab v;
  for (const char* r : {"<pad>", "<unk>", "<sep>"}) {
    v.ids[r] = v.size();
    v.tokens.push_back(r);
  }
  for (const auto& [tok, n] : ranked) {
    if (v.size() >= max_size) break;
    if (v.ids.count(tok)) continue;  // corpus text colliding with a reserved literal
    v.ids[tok] = v.size();
    v.tokens.push_back(tok);
  }
  return v;
}

struct TokenSequence {
  std::vector<int> ids;
  std::vector<float> mask;          // 1 = attend, 0 = padding
  std::vector<std::string> spans;   // surface form per position ("" for pad/sep)

  int length() const { return static_cast<int>(ids.size()); }
};

// prompt tokens + SEP + response tokens, truncated from the right to max_len
inline TokenSequence tokenize(const std::string& prompt, const std::string& response,
                              const Vocab& vocab, int max_len) {
  if (max_len < 1) throw std::invalid_argument("tokenize: max_len must be positive");
  TokenSequence seq;
  auto push = [&](int id, const std::string& span) {
    if (seq.length() >= max_len) return;
    seq.ids.push_back(id);
    seq.mask.push_back(1.0f);
    seq.spans.push_back(span);
  };
  for (const auto& tok : split_ws(prompt)) push(vocab.id_of(tok), tok);
  push(Vocab::kSep, "");
  for (const auto& tok : split_ws(response)) push(vocab.id_of(tok), tok);
  return seq;
}

// Extend with PAD positions (mask 0); used by mask-correctness checks.
inline TokenSequence pad_to(TokenSequence seq, int len) {
  if (len < seq.length()) throw std::invalid_argument("pad_to: target shorter than sequence");
  while (seq.length() < len) {
    seq.ids.push_back(Vocab::kPad);
    seq.mask.push_back(0.0f);
    seq.spans.emplace_back();
  }
  return seq;
}

}  // namespace rmroute
