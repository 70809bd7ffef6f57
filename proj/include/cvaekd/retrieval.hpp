// Background-knowledge retrieval: a TF-IDF cosine index over the news side
// of the corpus. Queries return the most similar pair ids, which the model
// expands into the neighbor news set X_s and their reports Y_s.
#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "cvaekd/corpus.hpp"

namespace cvaekd {

class NeighborIndex {
 public:
  // tf is the raw in-document count, idf = ln((1+D)/(1+df)) + 1, and each
  // document vector is L2-normalized, so cosine is a plain dot product.
  static NeighborIndex build(const std::vector<NewsReportPair>& pairs,
                             std::size_t k_default = 5) {
    if (pairs.empty()) throw DataError("build_index: empty corpus");
    NeighborIndex idx;
    idx.k_default_ = k_default;

    std::unordered_map<std::string, std::size_t> df;
    for (const NewsReportPair& p : pairs) {
      std::unordered_map<std::string, std::size_t> seen;
      for (const std::string& t : p.news_tokens) ++seen[t];
      for (const auto& [t, n] : seen) ++df[t];
    }
    // deterministic term order
    std::vector<std::string> terms;
    terms.reserve(df.size());
    for (const auto& [t, n] : df) terms.push_back(t);
    std::sort(terms.begin(), terms.end());
    idx.terms_ = terms;
    idx.idf_.resize(terms.size());
    const double d_total = static_cast<double>(pairs.size());
    for (std::size_t i = 0; i < terms.size(); ++i) {
      idx.term_index_.emplace(terms[i], static_cast<int>(i));
      idx.idf_[i] =
          std::log((1.0 + d_total) /
                   (1.0 + static_cast<double>(df[terms[i]]))) +
          1.0;
    }

    idx.docs_.reserve(pairs.size());
    for (const NewsReportPair& p : pairs) {
      Doc doc;
      doc.id = p.id;
      doc.weights = idx.vectorize(p.news_tokens);
      idx.docs_.push_back(std::move(doc));
    }
    return idx;
  }

  // Top-k by cosine, descending; exact ties break toward the smaller id.
  // exclude_id is never returned. Fewer than k results only when the corpus
  // runs out.
  std::vector<std::string> query(const std::vector<std::string>& news_tokens,
                                 std::size_t k,
                                 const std::string& exclude_id = "") const {
    if (k < 1) throw DataError("query_neighbors: k must be >= 1");
    const std::vector<std::pair<int, double>> q = vectorize(news_tokens);
    std::vector<std::pair<double, const std::string*>> scored;
    scored.reserve(docs_.size());
    for (const Doc& doc : docs_) {
      if (!exclude_id.empty() && doc.id == exclude_id) continue;
      scored.emplace_back(dot(q, doc.weights), &doc.id);
    }
    std::sort(scored.begin(), scored.end(),
              [](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return *a.second < *b.second;
              });
    std::vector<std::string> out;
    for (std::size_t i = 0; i < scored.size() && i < k; ++i)
      out.push_back(*scored[i].second);
    return out;
  }

  std::size_t size() const { return docs_.size(); }
  std::size_t k_default() const { return k_default_; }

  double idf(const std::string& term) const {
    auto it = term_index_.find(term);
    return it == term_index_.end() ? 0.0
                                   : idf_[static_cast<std::size_t>(it->second)];
  }

  // Raw document vectors exposed for the oracle tests.
  const std::vector<std::pair<int, double>>& doc_vector(std::size_t i) const {
    return docs_[i].weights;
  }

  std::vector<std::pair<int, double>> query_vector(
      const std::vector<std::string>& tokens) const {
    return vectorize(tokens);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    nlohmann::json idf = nlohmann::json::object();
    for (std::size_t i = 0; i < terms_.size(); ++i) idf[terms_[i]] = idf_[i];
    j["idf"] = std::move(idf);
    nlohmann::json docs = nlohmann::json::array();
    for (const Doc& d : docs_) {
      nlohmann::json doc;
      doc["id"] = d.id;
      std::vector<int> indices;
      std::vector<double> values;
      for (const auto& [t, w] : d.weights) {
        indices.push_back(t);
        values.push_back(w);
      }
      doc["indices"] = indices;
      doc["values"] = values;
      docs.push_back(std::move(doc));
    }
    j["docs"] = std::move(docs);
    return j;
  }

 private:
  struct Doc {
    std::string id;
    std::vector<std::pair<int, double>> weights;  // sorted by term index
  };

  // Terms missing from the indexed corpus contribute nothing.
  std::vector<std::pair<int, double>> vectorize(
      const std::vector<std::string>& tokens) const {
    std::map<int, double> acc;
    for (const std::string& t : tokens) {
      auto it = term_index_.find(t);
      if (it == term_index_.end()) continue;
      acc[it->second] += idf_[static_cast<std::size_t>(it->second)];
    }
    double sq = 0.0;
    for (const auto& [i, w] : acc) sq += w * w;
    const double norm = std::sqrt(sq);
    std::vector<std::pair<int, double>> out;
    out.reserve(acc.size());
    for (const auto& [i, w] : acc)
      out.emplace_back(i, norm > 0.0 ? w / norm : 0.0);
    return out;
  }

  static double dot(const std::vector<std::pair<int, double>>& a,
                    const std::vector<std::pair<int, double>>& b) {
    double s = 0.0;
    std::size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
      if (a[i].first == b[j].first) {
        s += a[i].second * b[j].second;
        ++i;
        ++j;
      } else if (a[i].first < b[j].first) {
        ++i;
      } else {
        ++j;
      }
    }
    return s;
  }

  std::unordered_map<std::string, int> term_index_;
  std::vector<std::string> terms_;
  std::vector<double> idf_;
  std::vector<Doc> docs_;
  std::size_t k_default_ = 5;
};

struct Background {
  std::vector<std::vector<std::string>> news;     // X_s
  std::vector<std::vector<std::string>> reports;  // Y_s
};

// Cached id -> pair lookup for repeated gathers during training.
class PairLookup {
 public:
  explicit PairLookup(const std::vector<NewsReportPair>& pairs)
      : pairs_(&pairs) {
    for (std::size_t i = 0; i < pairs.size(); ++i)
      by_id_.emplace(pairs[i].id, i);
  }

  const NewsReportPair& at(const std::string& id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw DataError("unknown pair id: " + id);
    return (*pairs_)[it->second];
  }

  Background gather(const std::vector<std::string>& ids) const {
    Background bg;
    bg.news.reserve(ids.size());
    bg.reports.reserve(ids.size());
    for (const std::string& id : ids) {
      const NewsReportPair& p = at(id);
      bg.news.push_back(p.news_tokens);
      bg.reports.push_back(p.report_tokens);
    }
    return bg;
  }

 private:
  const std::vector<NewsReportPair>* pairs_;
  std::unordered_map<std::string, std::size_t> by_id_;
};

inline Background gather_background(const std::vector<NewsReportPair>& pairs,
                                    const std::vector<std::string>& ids) {
  return PairLookup(pairs).gather(ids);
}

}  // namespace cvaekd
