// Corpus loading, vocabulary construction and id encoding. The corpus file
// is UTF-8 JSONL, one {"id", "news", "report"} object per line with
// whitespace-separated token fields.
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "cvaekd/tensor.hpp"

namespace cvaekd {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NewsReportPair {
  std::string id;
  std::vector<std::string> news_tokens;
  std::vector<std::string> report_tokens;
};

inline std::vector<std::string> split_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

// Numeric means: optional sign, digits, at most one decimal point, and at
// least one digit. "2021", "-3.5", "+7" are numeric; "1.2.3" and "." are not.
inline bool is_numeric_token(const std::string& tok) {
  std::size_t i = 0;
  if (i < tok.size() && (tok[i] == '+' || tok[i] == '-')) ++i;
  bool digit = false, dot = false;
  for (; i < tok.size(); ++i) {
    if (tok[i] >= '0' && tok[i] <= '9') {
      digit = true;
    } else if (tok[i] == '.') {
      if (dot) return false;
      dot = true;
    } else {
      return false;
    }
  }
  return digit;
}

inline std::vector<NewsReportPair> load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file: " + path);
  std::vector<NewsReportPair> pairs;
  std::unordered_map<std::string, std::size_t> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("corpus line " + std::to_string(lineno) +
                      ": invalid JSON: " + e.what());
    }
    for (const char* field : {"id", "news", "report"}) {
      if (!obj.contains(field) || !obj[field].is_string())
        throw DataError("corpus line " + std::to_string(lineno) +
                        ": missing or non-string field \"" + field + "\"");
    }
    NewsReportPair p;
    p.id = obj["id"].get<std::string>();
    p.news_tokens = split_tokens(obj["news"].get<std::string>());
    p.report_tokens = split_tokens(obj["report"].get<std::string>());
    if (p.news_tokens.empty() || p.report_tokens.empty())
      throw DataError("corpus line " + std::to_string(lineno) +
                      ": empty news or report");
    if (!seen.emplace(p.id, lineno).second)
      throw DataError("corpus line " + std::to_string(lineno) +
                      ": duplicate id \"" + p.id + "\"");
    pairs.push_back(std::move(p));
  }
  return pairs;
}

class Vocabulary {
 public:
  static constexpr const char* kPadToken = "<PAD>";
  static constexpr const char* kUnkToken = "<UNK>";
  static constexpr const char* kStartToken = "<START>";
  static constexpr const char* kEndToken = "<END>";
  static constexpr const char* kNumToken = "<NUM>";

  Vocabulary() = default;

  // Keeps a token iff its total term frequency over news + report fields
  // clears min_tf (>= by default, > when strict). Numeric tokens count as
  // NUM before screening; the five specials are always present.
  static Vocabulary build(const std::vector<NewsReportPair>& pairs,
                          std::size_t min_tf, bool strict = false) {
    if (pairs.empty()) throw DataError("build_vocabulary: empty corpus");
    if (min_tf < 1) throw DataError("build_vocabulary: min_tf must be >= 1");
    std::unordered_map<std::string, std::size_t> tf;
    auto count = [&](const std::vector<std::string>& toks) {
      for (const std::string& t : toks)
        ++tf[is_numeric_token(t) ? std::string(kNumToken) : t];
    };
    for (const NewsReportPair& p : pairs) {
      count(p.news_tokens);
      count(p.report_tokens);
    }
    std::vector<std::string> kept;
    for (const auto& [tok, n] : tf) {
      if (tok == kPadToken || tok == kUnkToken || tok == kStartToken ||
          tok == kEndToken || tok == kNumToken)
        continue;
      if (strict ? n > min_tf : n >= min_tf) kept.push_back(tok);
    }
    std::sort(kept.begin(), kept.end());

    Vocabulary v;
    v.min_tf_ = min_tf;
    for (const char* s :
         {kPadToken, kUnkToken, kStartToken, kEndToken, kNumToken})
      v.push(s);
    for (const std::string& tok : kept) v.push(tok);
    return v;
  }

  static Vocabulary from_tokens(const std::vector<std::string>& tokens,
                                std::size_t min_tf = 1) {
    Vocabulary v;
    v.min_tf_ = min_tf;
    for (const std::string& t : tokens) v.push(t);
    for (const char* s :
         {kPadToken, kUnkToken, kStartToken, kEndToken, kNumToken})
      if (v.index_.find(s) == v.index_.end())
        throw DataError("vocabulary is missing special token " +
                        std::string(s));
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  std::size_t min_term_frequency() const { return min_tf_; }

  int pad() const { return index_.at(kPadToken); }
  int unk() const { return index_.at(kUnkToken); }
  int start() const { return index_.at(kStartToken); }
  int end() const { return index_.at(kEndToken); }
  int num() const { return index_.at(kNumToken); }

  // Raw lookup; -1 when absent.
  int lookup(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? -1 : it->second;
  }

  // Encoding rule: numeric tokens map to NUM, anything out of vocabulary
  // maps to UNK.
  int encode_token(const std::string& tok) const {
    if (is_numeric_token(tok)) return num();
    const int id = lookup(tok);
    return id < 0 ? unk() : id;
  }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw DataError("vocabulary id out of range: " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write vocabulary file: " + path);
    for (const std::string& t : tokens_) out << t << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary file: " + path);
    std::vector<std::string> toks;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) toks.push_back(line);
    }
    return from_tokens(toks);
  }

 private:
  void push(const std::string& tok) {
    if (!index_.emplace(tok, static_cast<int>(tokens_.size())).second)
      throw DataError("duplicate vocabulary token: " + tok);
    tokens_.push_back(tok);
  }

  std::unordered_map<std::string, int> index_;
  std::vector<std::string> tokens_;
  std::size_t min_tf_ = 1;
};

struct EncodedExample {
  std::string id;
  std::vector<int> news_ids;    // exactly max_enc, PAD-filled
  std::size_t news_len = 0;     // valid prefix length
  std::vector<int> report_ids;  // exactly max_dec; START ... END then PAD
  std::size_t report_len = 0;   // including START and END
};

inline std::vector<int> encode_tokens(const std::vector<std::string>& tokens,
                                      const Vocabulary& vocab) {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const std::string& t : tokens) ids.push_back(vocab.encode_token(t));
  return ids;
}

inline std::vector<std::string> decode_ids(const std::vector<int>& ids,
                                           const Vocabulary& vocab) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(vocab.token(id));
  return out;
}

// News is truncated then PAD-padded to exactly max_enc. The report is
// wrapped in START/END with the body truncated so END always survives.
inline EncodedExample encode_example(const NewsReportPair& pair,
                                     const Vocabulary& vocab,
                                     std::size_t max_enc,
                                     std::size_t max_dec) {
  if (max_enc < 2 || max_dec < 2)
    throw DataError("encode_example: max_enc and max_dec must be >= 2");
  EncodedExample ex;
  ex.id = pair.id;

  std::vector<int> news = encode_tokens(pair.news_tokens, vocab);
  if (news.size() > max_enc) news.resize(max_enc);
  ex.news_len = news.size();
  news.resize(max_enc, vocab.pad());
  ex.news_ids = std::move(news);

  std::vector<int> body = encode_tokens(pair.report_tokens, vocab);
  if (body.size() > max_dec - 2) body.resize(max_dec - 2);
  ex.report_ids.reserve(max_dec);
  ex.report_ids.push_back(vocab.start());
  ex.report_ids.insert(ex.report_ids.end(), body.begin(), body.end());
  ex.report_ids.push_back(vocab.end());
  ex.report_len = ex.report_ids.size();
  ex.report_ids.resize(max_dec, vocab.pad());
  return ex;
}

// Seeded permutation chunked into batches; the final partial batch is kept.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n,
                                                          std::size_t batch,
                                                          std::uint64_t seed) {
  if (batch < 1) throw DataError("make_batches: batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch) {
    out.emplace_back(order.begin() + i,
                     order.begin() + std::min(n, i + batch));
  }
  return out;
}

class BatchIterator {
 public:
  BatchIterator(std::size_t n, std::size_t batch, std::uint64_t seed)
      : batches_(make_batches(n, batch, seed)) {}

  std::optional<std::vector<std::size_t>> next() {
    if (pos_ >= batches_.size()) return std::nullopt;
    return batches_[pos_++];
  }

 private:
  std::vector<std::vector<std::size_t>> batches_;
  std::size_t pos_ = 0;
};

}  // namespace cvaekd
