// The frozen bidirectional language-model teacher. A forward next-token GRU
// LM and a backward previous-token GRU LM are trained locally on the report
// side of the corpus, then frozen. The pair supplies contextual embeddings
// (forward state ; backward state per position) and the forward LM supplies
// temperature-softened soft targets for distillation.
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "cvaekd/checkpoint.hpp"
#include "cvaekd/corpus.hpp"
#include "cvaekd/layers.hpp"
#include "cvaekd/tensor.hpp"

namespace cvaekd {

struct TeacherConfig {
  std::size_t hidden = 128;
  std::size_t emb = 64;
  std::size_t epochs = 20;
  std::size_t batch = 8;
  std::size_t max_len = 200;  // report ids incl. START/END
  double lr = 1e-3;
  double grad_clip = 5.0;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    return {{"hidden", hidden},   {"emb", emb},
            {"epochs", epochs},   {"batch", batch},
            {"max_len", max_len}, {"lr", lr},
            {"grad_clip", grad_clip}, {"temperature", temperature},
            {"seed", seed}};
  }

  static TeacherConfig from_json(const nlohmann::json& j) {
    TeacherConfig c;
    c.hidden = j.at("hidden").get<std::size_t>();
    c.emb = j.at("emb").get<std::size_t>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.batch = j.at("batch").get<std::size_t>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.lr = j.at("lr").get<double>();
    c.grad_clip = j.at("grad_clip").get<double>();
    c.temperature = j.at("temperature").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  }
};

namespace detail {

struct LmParams {
  EmbeddingTable emb;
  GruCellParams gru;
  Tensor W_out, b_out;

  static LmParams init(std::size_t vocab, std::size_t d_emb,
                       std::size_t hidden, int pad_id, Rng& rng) {
    LmParams lm;
    lm.emb = EmbeddingTable::init(vocab, d_emb, pad_id, rng);
    lm.gru = GruCellParams::init(d_emb, hidden, rng);
    lm.W_out = glorot_init(hidden, vocab, rng);
    lm.b_out = zeros_param(1, vocab);
    return lm;
  }

  void collect(std::vector<NamedParam>& out, const std::string& prefix) const {
    emb.collect(out, prefix + ".emb");
    gru.collect(out, prefix + ".gru");
    out.push_back({prefix + ".W_out", W_out});
    out.push_back({prefix + ".b_out", b_out});
  }
};

// Hidden states after consuming ids[0..upto-1], one row per step.
inline std::vector<Tensor> lm_states(const LmParams& lm,
                                     const std::vector<int>& ids,
                                     std::size_t upto) {
  std::vector<Tensor> states;
  states.reserve(upto);
  Tensor h(1, lm.gru.hidden_dim);
  for (std::size_t t = 0; t < upto; ++t) {
    h = gru_cell(embed({ids[t]}, lm.emb), h, lm.gru);
    states.push_back(h);
  }
  return states;
}

// Next-token logits for targets ids[1..len-1] given inputs ids[0..len-2].
inline Tensor lm_logits(const LmParams& lm, const std::vector<int>& ids,
                        std::size_t len) {
  std::vector<Tensor> states = lm_states(lm, ids, len - 1);
  std::vector<Tensor> rows;
  rows.reserve(states.size());
  for (const Tensor& h : states)
    rows.push_back(add(matmul(h, lm.W_out), lm.b_out));
  return stack_rows(rows);
}

}  // namespace detail

// Cross-entropy of student log-probabilities under the teacher's soft
// target rows, averaged over unmasked positions. Teacher rows must be
// probability distributions.
inline Tensor distillation_loss(const Tensor& student_logits,
                                const Tensor& teacher_probs,
                                const std::vector<std::uint8_t>& mask) {
  if (student_logits.rows() != teacher_probs.rows() ||
      student_logits.cols() != teacher_probs.cols())
    throw ShapeError("distillation_loss: shape mismatch");
  if (mask.size() != student_logits.rows())
    throw ShapeError("distillation_loss: mask length mismatch");
  std::size_t n_valid = 0;
  for (std::uint8_t m : mask) n_valid += m ? 1 : 0;
  if (n_valid == 0)
    throw ShapeError("distillation_loss: no unmasked positions");
  for (std::size_t t = 0; t < teacher_probs.rows(); ++t) {
    if (!mask[t]) continue;
    double s = 0.0;
    for (std::size_t j = 0; j < teacher_probs.cols(); ++j)
      s += teacher_probs.at(t, j);
    if (std::fabs(s - 1.0) > 1e-6)
      throw NumericError("distillation_loss: teacher row " +
                         std::to_string(t) + " sums to " + std::to_string(s));
  }
  std::vector<double> w(mask.size(), 0.0);
  for (std::size_t t = 0; t < mask.size(); ++t)
    if (mask[t]) w[t] = 1.0 / static_cast<double>(n_valid);
  return neg(rowdot_weighted_sum(log_softmax_rows(student_logits),
                                 teacher_probs, w));
}

struct TeacherEpochStats {
  double ppl_fwd = 0.0;
  double ppl_bwd = 0.0;
};

class TeacherLM {
 public:
  // Trains the forward LM on each report read left to right and the
  // backward LM on the same report read right to left, then freezes.
  static TeacherLM train(const std::vector<NewsReportPair>& pairs,
                         std::shared_ptr<const Vocabulary> vocab,
                         const TeacherConfig& cfg,
                         std::vector<TeacherEpochStats>* log = nullptr) {
    if (pairs.empty()) throw DataError("train_teacher: empty corpus");
    if (cfg.max_len < 2) throw DataError("train_teacher: max_len must be >= 2");
    TeacherLM t(vocab, cfg);
    Rng init_rng(cfg.seed);
    t.fwd_ = detail::LmParams::init(vocab->size(), cfg.emb, cfg.hidden,
                                    vocab->pad(), init_rng);
    t.bwd_ = detail::LmParams::init(vocab->size(), cfg.emb, cfg.hidden,
                                    vocab->pad(), init_rng);

    std::vector<std::vector<int>> fwd_seqs, bwd_seqs;
    for (const NewsReportPair& p : pairs) {
      std::vector<int> ids = t.wrap_report(p.report_tokens);
      std::vector<int> rev(ids.rbegin(), ids.rend());
      fwd_seqs.push_back(std::move(ids));
      bwd_seqs.push_back(std::move(rev));
    }

    std::vector<Tensor> params = t.trainable();
    AdamState opt(params, {cfg.lr});
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      double nll_fwd = 0.0, nll_bwd = 0.0;
      std::size_t tok_fwd = 0, tok_bwd = 0;
      for (const auto& batch :
           make_batches(pairs.size(), cfg.batch, cfg.seed + 1 + epoch)) {
        Tape tape;
        {
          Tape::Scope scope(tape);
          Tensor acc = Tensor::scalar(0.0);
          std::size_t denom = 0;
          for (std::size_t i : batch) {
            Tensor f = t.sequence_nll(t.fwd_, fwd_seqs[i]);
            Tensor b = t.sequence_nll(t.bwd_, bwd_seqs[i]);
            nll_fwd += f.value();
            nll_bwd += b.value();
            tok_fwd += fwd_seqs[i].size() - 1;
            tok_bwd += bwd_seqs[i].size() - 1;
            acc = add(acc, add(f, b));
            denom += (fwd_seqs[i].size() - 1) + (bwd_seqs[i].size() - 1);
          }
          Tensor loss = mul_scalar(acc, 1.0 / static_cast<double>(denom));
          if (!std::isfinite(loss.value()))
            throw NumericError("train_teacher: training diverged");
          zero_grads(params);
          tape.backward(loss);
        }
        clip_global_norm(params, cfg.grad_clip);
        t.apply_update(opt, params);
      }
      if (log)
        log->push_back({std::exp(nll_fwd / static_cast<double>(tok_fwd)),
                        std::exp(nll_bwd / static_cast<double>(tok_bwd))});
    }
    t.frozen_ = true;
    return t;
  }

  bool frozen() const { return frozen_; }
  std::size_t hidden_dim() const { return cfg_.hidden; }
  double temperature() const { return cfg_.temperature; }
  const TeacherConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return *vocab_; }

  // Per-position [forward state ; backward state], deterministic, no
  // gradient flows back into the teacher. Forward context starts at START,
  // backward context starts at END.
  Tensor embed_ids(const std::vector<int>& ids) const {
    require_frozen("teacher_embed");
    if (ids.empty()) throw DataError("teacher_embed: empty input");
    std::vector<int> f(1, vocab_->start());
    f.insert(f.end(), ids.begin(), ids.end());
    std::vector<int> b(1, vocab_->end());
    b.insert(b.end(), ids.rbegin(), ids.rend());
    std::vector<Tensor> fs = detail::lm_states(fwd_, f, f.size());
    std::vector<Tensor> bs = detail::lm_states(bwd_, b, b.size());
    std::vector<Tensor> rows;
    rows.reserve(ids.size());
    // fs[i+1] consumed ids[i]; bs[n-i] consumed ids[i] from the right
    for (std::size_t i = 0; i < ids.size(); ++i)
      rows.push_back(concat_cols(fs[i + 1], bs[ids.size() - i]));
    Tensor out = stack_rows(rows);
    out.set_requires_grad(false);
    return out;
  }

  Tensor embed_tokens(const std::vector<std::string>& tokens) const {
    return embed_ids(encode_tokens(tokens, *vocab_));
  }

  // softmax(forward-LM logits / temperature) for the position following the
  // prefix. The prefix must begin with START.
  std::vector<double> soft_targets(const std::vector<int>& prefix) const {
    require_frozen("soft_targets");
    if (prefix.empty()) throw DataError("soft_targets: empty prefix");
    if (prefix[0] != vocab_->start())
      throw DataError("soft_targets: prefix must start with START");
    std::vector<Tensor> states =
        detail::lm_states(fwd_, prefix, prefix.size());
    Tensor logits = add(matmul(states.back(), fwd_.W_out), fwd_.b_out);
    Tensor probs = softmax_rows(mul_scalar(logits, 1.0 / cfg_.temperature));
    return probs.data();
  }

  // Soft-target rows for teacher-forced positions 1..len-1 of a report id
  // sequence, one pass over the forward LM. Constant rows.
  Tensor soft_target_rows(const std::vector<int>& report_ids,
                          std::size_t len) const {
    require_frozen("soft_target_rows");
    if (len < 2) throw DataError("soft_target_rows: need len >= 2");
    Tensor logits = detail::lm_logits(fwd_, report_ids, len);
    Tensor probs = softmax_rows(mul_scalar(logits, 1.0 / cfg_.temperature));
    probs.set_requires_grad(false);
    return probs;
  }

  std::vector<NamedParam> named_params() const {
    std::vector<NamedParam> out;
    fwd_.collect(out, "teacher.fwd");
    bwd_.collect(out, "teacher.bwd");
    return out;
  }

  std::uint64_t parameter_checksum() const {
    return params_checksum(named_params());
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["version"] = kCheckpointVersion;
    j["kind"] = "teacher";
    j["frozen"] = frozen_;
    j["config"] = cfg_.to_json();
    j["vocab"] = vocab_->tokens();
    j["params"] = params_to_json(named_params());
    return j;
  }

  static TeacherLM from_json(const nlohmann::json& j) {
    if (j.at("kind").get<std::string>() != "teacher")
      throw DataError("checkpoint is not a teacher checkpoint");
    auto vocab = std::make_shared<Vocabulary>(Vocabulary::from_tokens(
        j.at("vocab").get<std::vector<std::string>>()));
    TeacherConfig cfg = TeacherConfig::from_json(j.at("config"));
    TeacherLM t(vocab, cfg);
    Rng rng(cfg.seed);
    t.fwd_ = detail::LmParams::init(vocab->size(), cfg.emb, cfg.hidden,
                                    vocab->pad(), rng);
    t.bwd_ = detail::LmParams::init(vocab->size(), cfg.emb, cfg.hidden,
                                    vocab->pad(), rng);
    std::vector<NamedParam> params = t.named_params();
    params_from_json(j.at("params"), params);
    t.frozen_ = j.at("frozen").get<bool>();
    return t;
  }

  // Exposed so tests can assert the freeze contract.
  void apply_update(AdamState& opt, std::vector<Tensor>& params) {
    if (frozen_)
      throw std::logic_error("TeacherLM: parameter update on frozen teacher");
    opt.step(params);
  }

 private:
  TeacherLM(std::shared_ptr<const Vocabulary> vocab, TeacherConfig cfg)
      : cfg_(cfg), vocab_(std::move(vocab)) {}

  void require_frozen(const char* op) const {
    if (!frozen_)
      throw std::logic_error(std::string(op) +
                             ": teacher must be frozen first");
  }

  std::vector<int> wrap_report(const std::vector<std::string>& tokens) const {
    std::vector<int> body = encode_tokens(tokens, *vocab_);
    if (body.size() > cfg_.max_len - 2) body.resize(cfg_.max_len - 2);
    std::vector<int> ids;
    ids.reserve(body.size() + 2);
    ids.push_back(vocab_->start());
    ids.insert(ids.end(), body.begin(), body.end());
    ids.push_back(vocab_->end());
    return ids;
  }

  // Summed (not averaged) next-token NLL of one sequence.
  Tensor sequence_nll(const detail::LmParams& lm,
                      const std::vector<int>& ids) const {
    Tensor logp = log_softmax_rows(detail::lm_logits(lm, ids, ids.size()));
    std::vector<int> targets(ids.begin() + 1, ids.end());
    std::vector<double> w(targets.size(), 1.0);
    return neg(pick_weighted_sum(logp, targets, w));
  }

  detail::LmParams fwd_, bwd_;
  TeacherConfig cfg_;
  std::shared_ptr<const Vocabulary> vocab_;
  bool frozen_ = false;

  std::vector<Tensor> trainable() {
    std::vector<Tensor> out;
    for (const NamedParam& p : named_params()) out.push_back(p.tensor);
    return out;
  }
};

}  // namespace cvaekd
