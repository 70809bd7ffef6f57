// BLEU-1..4 and ROUGE-1/2/L over whitespace-pre-segmented token sequences.
// BLEU is corpus-level and cumulative: clipped modified n-gram precisions
// pooled over the corpus, uniform-weight geometric mean, brevity penalty
// exp(min(0, 1 - r/c)); precisions for n >= 2 are add-one smoothed. ROUGE
// is per-pair F1 (recall optional), macro-averaged. All scores are x100.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "cvaekd/corpus.hpp"

namespace cvaekd {

struct EvalPair {
  std::vector<std::string> candidate;
  std::vector<std::string> reference;
};

namespace detail {

// n-grams keyed by join with an unlikely separator byte
inline std::unordered_map<std::string, std::size_t> ngram_counts(
    const std::vector<std::string>& tokens, std::size_t n) {
  std::unordered_map<std::string, std::size_t> counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (std::size_t j = 1; j < n; ++j) {
      key.push_back('\x1f');
      key += tokens[i + j];
    }
    ++counts[key];
  }
  return counts;
}

inline std::size_t clipped_overlap(
    const std::unordered_map<std::string, std::size_t>& cand,
    const std::unordered_map<std::string, std::size_t>& ref) {
  std::size_t overlap = 0;
  for (const auto& [g, c] : cand) {
    auto it = ref.find(g);
    if (it != ref.end()) overlap += std::min(c, it->second);
  }
  return overlap;
}

}  // namespace detail

// Cumulative corpus BLEU by default; per_order scores a single n instead.
inline double bleu(const std::vector<EvalPair>& pairs, int n_max,
                   bool per_order = false) {
  if (pairs.empty()) throw DataError("bleu: empty pair list");
  if (n_max < 1 || n_max > 4) throw DataError("bleu: n_max must be in 1..4");

  std::size_t cand_total_len = 0, ref_total_len = 0;
  std::vector<std::size_t> match(static_cast<std::size_t>(n_max) + 1, 0);
  std::vector<std::size_t> total(static_cast<std::size_t>(n_max) + 1, 0);
  for (const EvalPair& p : pairs) {
    if (p.reference.empty()) throw DataError("bleu: empty reference");
    cand_total_len += p.candidate.size();
    ref_total_len += p.reference.size();
    for (int n = 1; n <= n_max; ++n) {
      auto c = detail::ngram_counts(p.candidate, static_cast<std::size_t>(n));
      auto r = detail::ngram_counts(p.reference, static_cast<std::size_t>(n));
      match[static_cast<std::size_t>(n)] += detail::clipped_overlap(c, r);
      std::size_t cand_ngrams = 0;
      for (const auto& [g, k] : c) cand_ngrams += k;
      total[static_cast<std::size_t>(n)] += cand_ngrams;
    }
  }
  if (cand_total_len == 0) return 0.0;

  auto precision = [&](int n) {
    const std::size_t m = match[static_cast<std::size_t>(n)];
    const std::size_t t = total[static_cast<std::size_t>(n)];
    if (n == 1) return t == 0 ? 0.0 : static_cast<double>(m) / t;
    return (static_cast<double>(m) + 1.0) / (static_cast<double>(t) + 1.0);
  };

  double log_sum = 0.0;
  if (per_order) {
    const double p = precision(n_max);
    if (p <= 0.0) return 0.0;
    log_sum = std::log(p);
  } else {
    for (int n = 1; n <= n_max; ++n) {
      const double p = precision(n);
      if (p <= 0.0) return 0.0;
      log_sum += std::log(p) / n_max;
    }
  }
  const double bp =
      std::exp(std::min(0.0, 1.0 - static_cast<double>(ref_total_len) /
                                      static_cast<double>(cand_total_len)));
  return 100.0 * bp * std::exp(log_sum);
}

inline double rouge_n(const std::vector<EvalPair>& pairs, int n,
                      bool f1 = true) {
  if (pairs.empty()) throw DataError("rouge_n: empty pair list");
  if (n < 1 || n > 2) throw DataError("rouge_n: n must be 1 or 2");
  double sum = 0.0;
  for (const EvalPair& p : pairs) {
    if (p.reference.empty()) throw DataError("rouge_n: empty reference");
    auto c = detail::ngram_counts(p.candidate, static_cast<std::size_t>(n));
    auto r = detail::ngram_counts(p.reference, static_cast<std::size_t>(n));
    std::size_t cand_ngrams = 0, ref_ngrams = 0;
    for (const auto& [g, k] : c) cand_ngrams += k;
    for (const auto& [g, k] : r) ref_ngrams += k;
    const std::size_t overlap = detail::clipped_overlap(c, r);
    const double prec =
        cand_ngrams == 0 ? 0.0 : static_cast<double>(overlap) / cand_ngrams;
    const double rec =
        ref_ngrams == 0 ? 0.0 : static_cast<double>(overlap) / ref_ngrams;
    if (f1)
      sum += (prec + rec) > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    else
      sum += rec;
  }
  return 100.0 * sum / static_cast<double>(pairs.size());
}

// Two-row dynamic program; the tests hold a full-matrix oracle against it.
inline std::size_t lcs_length(const std::vector<std::string>& a,
                              const std::vector<std::string>& b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      if (a[i - 1] == b[j - 1])
        cur[j] = prev[j - 1] + 1;
      else
        cur[j] = std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double rouge_l(const std::vector<EvalPair>& pairs, bool f1 = true) {
  if (pairs.empty()) throw DataError("rouge_l: empty pair list");
  double sum = 0.0;
  for (const EvalPair& p : pairs) {
    if (p.reference.empty()) throw DataError("rouge_l: empty reference");
    const double lcs =
        static_cast<double>(lcs_length(p.candidate, p.reference));
    const double prec =
        p.candidate.empty() ? 0.0 : lcs / static_cast<double>(p.candidate.size());
    const double rec = lcs / static_cast<double>(p.reference.size());
    if (f1)
      sum += (prec + rec) > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    else
      sum += rec;
  }
  return 100.0 * sum / static_cast<double>(pairs.size());
}

struct ScoreReport {
  double bleu1 = 0, bleu2 = 0, bleu3 = 0, bleu4 = 0;
  double rouge1 = 0, rouge2 = 0, rougeL = 0;
  std::size_t n_pairs = 0;
};

inline ScoreReport score_all(const std::vector<EvalPair>& pairs) {
  ScoreReport r;
  r.bleu1 = bleu(pairs, 1);
  r.bleu2 = bleu(pairs, 2);
  r.bleu3 = bleu(pairs, 3);
  r.bleu4 = bleu(pairs, 4);
  r.rouge1 = rouge_n(pairs, 1);
  r.rouge2 = rouge_n(pairs, 2);
  r.rougeL = rouge_l(pairs);
  r.n_pairs = pairs.size();
  return r;
}

inline nlohmann::json score_to_json(const ScoreReport& r) {
  return {{"bleu1", r.bleu1},   {"bleu2", r.bleu2},
          {"bleu3", r.bleu3},   {"bleu4", r.bleu4},
          {"rouge1", r.rouge1}, {"rouge2", r.rouge2},
          {"rougeL", r.rougeL}, {"n_pairs", r.n_pairs}};
}

// Aligned plain-text table, one row per labelled run.
inline std::string format_score_table(
    const std::vector<std::pair<std::string, ScoreReport>>& rows) {
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof buf, "%-24s %7s %7s %7s %7s %8s %8s %8s\n",
                "run", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-1",
                "ROUGE-2", "ROUGE-L");
  out += buf;
  for (const auto& [label, r] : rows) {
    std::snprintf(buf, sizeof buf,
                  "%-24s %7.2f %7.2f %7.2f %7.2f %8.2f %8.2f %8.2f\n",
                  label.c_str(), r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.rouge1,
                  r.rouge2, r.rougeL);
    out += buf;
  }
  return out;
}

}  // namespace cvaekd
