// The CVAE-KD model: Bi-GRU encoder with a Gaussian prior head over the
// input news, a background-knowledge Gaussian estimated from KNN neighbor
// pairs (optionally concatenated with frozen teacher embeddings), a
// product-of-experts posterior, a GRU decoder conditioned on z at every
// step, and the combined objective
//   total = alpha * (recon + w(step) * KL(posterior || knowledge))
//         + (1 - alpha) * distillation,
// trained with Adam under global-norm gradient clipping. With distillation
// disabled the teacher is never touched and total reduces to the CVAE loss.
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "cvaekd/checkpoint.hpp"
#include "cvaekd/config.hpp"
#include "cvaekd/corpus.hpp"
#include "cvaekd/latent.hpp"
#include "cvaekd/layers.hpp"
#include "cvaekd/retrieval.hpp"
#include "cvaekd/teacher.hpp"
#include "cvaekd/tensor.hpp"

namespace cvaekd {

// Noise is injected, never drawn inside the loss, so gradient checks can
// freeze it and deterministic decoding can zero it.
class NoiseSource {
 public:
  virtual ~NoiseSource() = default;
  virtual std::vector<double> eps(std::size_t n) = 0;
  virtual std::vector<double> dropout_mask(std::size_t n, double rate) = 0;
};

class RngNoise : public NoiseSource {
 public:
  explicit RngNoise(Rng& rng) : rng_(&rng) {}
  std::vector<double> eps(std::size_t n) override {
    std::vector<double> v(n);
    for (double& x : v) x = rng_->normal();
    return v;
  }
  // inverted dropout: kept entries are scaled by 1/(1-rate)
  std::vector<double> dropout_mask(std::size_t n, double rate) override {
    std::vector<double> v(n, 1.0);
    if (rate <= 0.0) return v;
    const double keep = 1.0 - rate;
    for (double& x : v) x = rng_->uniform(0.0, 1.0) < keep ? 1.0 / keep : 0.0;
    return v;
  }

 private:
  Rng* rng_;
};

class ZeroNoise : public NoiseSource {
 public:
  std::vector<double> eps(std::size_t n) override {
    return std::vector<double>(n, 0.0);
  }
  std::vector<double> dropout_mask(std::size_t n, double) override {
    return std::vector<double>(n, 1.0);
  }
};

// Records draws from an inner source so a replay can reproduce the exact
// same noise sequence on repeated loss builds (finite-difference checks).
class RecordingNoise : public NoiseSource {
 public:
  explicit RecordingNoise(NoiseSource& inner) : inner_(&inner) {}
  std::vector<double> eps(std::size_t n) override {
    recorded_.push_back(inner_->eps(n));
    return recorded_.back();
  }
  std::vector<double> dropout_mask(std::size_t n, double rate) override {
    recorded_.push_back(inner_->dropout_mask(n, rate));
    return recorded_.back();
  }
  const std::vector<std::vector<double>>& recorded() const {
    return recorded_;
  }

 private:
  NoiseSource* inner_;
  std::vector<std::vector<double>> recorded_;
};

class ReplayNoise : public NoiseSource {
 public:
  explicit ReplayNoise(std::vector<std::vector<double>> draws)
      : draws_(std::move(draws)) {}
  void reset() { pos_ = 0; }
  std::vector<double> eps(std::size_t n) override { return take(n); }
  std::vector<double> dropout_mask(std::size_t n, double) override {
    return take(n);
  }

 private:
  std::vector<double> take(std::size_t n) {
    if (pos_ >= draws_.size() || draws_[pos_].size() != n)
      throw NumericError("ReplayNoise: draw sequence mismatch");
    return draws_[pos_++];
  }
  std::vector<std::vector<double>> draws_;
  std::size_t pos_ = 0;
};

struct LossBreakdown {
  double recon = 0;
  double kl = 0;
  double l_cvae = 0;
  double l_kd = 0;
  double total = 0;
  double kl_weight_applied = 0;
  double alpha_applied = 1;
};

struct LossTensors {
  Tensor recon, kl, l_cvae, l_kd, total;
  double kl_weight = 0;
  double alpha_applied = 1;

  LossBreakdown values() const {
    return {recon.value(),  kl.value(), l_cvae.value(),   l_kd.value(),
            total.value(),  kl_weight,  alpha_applied};
  }
};

// Retrieval context for one run: the index over the training split plus the
// id -> pair lookup that expands neighbor ids into X_s / Y_s.
struct BackgroundSource {
  const NeighborIndex* index = nullptr;
  const PairLookup* lookup = nullptr;
  std::size_t k = 5;

  Background fetch(const std::vector<std::string>& news_tokens,
                   const std::string& exclude_id) const {
    if (!index || !lookup) return {};
    return lookup->gather(index->query(news_tokens, k, exclude_id));
  }
};

struct TrainExample {
  NewsReportPair pair;
  EncodedExample encoded;
};

inline std::vector<TrainExample> make_examples(
    const std::vector<NewsReportPair>& pairs, const Vocabulary& vocab,
    const CvaeKdConfig& cfg) {
  std::vector<TrainExample> out;
  out.reserve(pairs.size());
  for (const NewsReportPair& p : pairs)
    out.push_back({p, encode_example(p, vocab, cfg.max_enc, cfg.max_dec)});
  return out;
}

class CvaeKdModel {
 public:
  CvaeKdModel(const CvaeKdConfig& cfg,
              std::shared_ptr<const Vocabulary> vocab)
      : config(cfg), vocab(std::move(vocab)) {
    config.validate();
    Rng rng(config.seed);
    const std::size_t v = this->vocab->size();
    const std::size_t h2 = 2 * config.hidden;
    embedding = EmbeddingTable::init(v, config.d_emb, this->vocab->pad(), rng);
    enc_fwd = GruCellParams::init(config.d_emb, config.hidden, rng);
    enc_bwd = GruCellParams::init(config.d_emb, config.hidden, rng);
    if (!config.share_background_encoder) {
      bg_fwd = GruCellParams::init(config.d_emb, config.hidden, rng);
      bg_bwd = GruCellParams::init(config.d_emb, config.hidden, rng);
    }
    prior_mu = MlpParams::init(h2, config.head_hidden, config.d_z, rng);
    prior_sigma = MlpParams::init(h2, config.head_hidden, config.d_z, rng);
    const std::size_t know_in =
        2 * (h2 + (config.kd_enabled ? 2 * config.teacher_hidden : 0));
    align = MlpParams::init(know_in, config.head_hidden, config.head_hidden,
                            rng);
    know_mu =
        MlpParams::init(config.head_hidden, config.head_hidden, config.d_z,
                        rng);
    know_sigma =
        MlpParams::init(config.head_hidden, config.head_hidden, config.d_z,
                        rng);
    dec = GruCellParams::init(config.d_emb + config.d_z, config.hidden, rng);
    init_W = glorot_init(config.d_z + h2, config.hidden, rng);
    init_b = zeros_param(1, config.hidden);
    out_W = glorot_init(config.hidden, v, rng);
    out_b = zeros_param(1, v);
    if (config.kd_enabled && config.alpha_learnable) {
      const double a = std::min(std::max(config.alpha, 1e-6), 1.0 - 1e-6);
      alpha_raw = Tensor::from({std::log(a / (1.0 - a))}, 1, 1, true);
    }
  }

  EmbeddingTable embedding;
  GruCellParams enc_fwd, enc_bwd;
  std::optional<GruCellParams> bg_fwd, bg_bwd;
  MlpParams prior_mu, prior_sigma;
  MlpParams align;  // maps pooled [X_em ; Y_em] into model space
  MlpParams know_mu, know_sigma;
  GruCellParams dec;
  Tensor init_W, init_b;  // [z ; encoder final] -> decoder initial state
  Tensor out_W, out_b;    // hidden -> vocabulary, tanh-squashed logits
  Tensor alpha_raw;       // defined only in learnable-alpha mode
  CvaeKdConfig config;
  std::shared_ptr<const Vocabulary> vocab;

  std::vector<NamedParam> named_params() const {
    std::vector<NamedParam> out;
    embedding.collect(out, "embedding");
    enc_fwd.collect(out, "enc_fwd");
    enc_bwd.collect(out, "enc_bwd");
    if (bg_fwd) {
      bg_fwd->collect(out, "bg_fwd");
      bg_bwd->collect(out, "bg_bwd");
    }
    prior_mu.collect(out, "prior_mu");
    prior_sigma.collect(out, "prior_sigma");
    align.collect(out, "align");
    know_mu.collect(out, "know_mu");
    know_sigma.collect(out, "know_sigma");
    dec.collect(out, "dec");
    out.push_back({"init.W", init_W});
    out.push_back({"init.b", init_b});
    out.push_back({"out.W", out_W});
    out.push_back({"out.b", out_b});
    if (alpha_raw.defined()) out.push_back({"alpha_raw", alpha_raw});
    return out;
  }

  std::vector<Tensor> trainable() const {
    std::vector<Tensor> out;
    for (const NamedParam& p : named_params()) out.push_back(p.tensor);
    return out;
  }

  std::uint64_t parameter_checksum() const {
    return params_checksum(named_params());
  }

  struct Encoded {
    Tensor states;  // T x 2H
    Tensor final;   // 1 x 2H
    GaussianParams prior;
  };

  Encoded encode_news(const EncodedExample& ex) const {
    Tensor seq = embed(ex.news_ids, embedding);
    BiGruOutput enc = bigru_encode(seq, ex.news_len, enc_fwd, enc_bwd);
    return {enc.states, enc.final,
            gaussian_head(enc.final, prior_mu, prior_sigma)};
  }

  // q(z2 | X_s, Y_s): each neighbor news/report runs through the (shared)
  // Bi-GRU, concatenated per position with the teacher embedding when
  // distillation is on, mean-pooled over positions and then neighbors. An
  // empty neighbor set falls back to the standard normal.
  GaussianParams background_latent(const Background& bg,
                                   const TeacherLM* teacher) const {
    if (bg.news.size() != bg.reports.size())
      throw ShapeError("background_latent: misaligned neighbor lists");
    if (bg.news.empty()) return standard_normal(config.d_z);
    const GruCellParams& f = bg_fwd ? *bg_fwd : enc_fwd;
    const GruCellParams& b = bg_bwd ? *bg_bwd : enc_bwd;
    const bool with_teacher = config.kd_enabled && teacher != nullptr;

    auto pooled_sequence = [&](const std::vector<std::string>& tokens,
                               std::size_t cap) {
      std::vector<int> ids = encode_tokens(tokens, *vocab);
      if (ids.size() > cap) ids.resize(cap);
      if (ids.empty()) throw DataError("background_latent: empty neighbor");
      Tensor states = bigru_encode(embed(ids, embedding), ids.size(), f, b)
                          .states;
      if (with_teacher)
        states = concat_cols(states, teacher->embed_ids(ids));
      return mean_first_rows(states, ids.size());
    };

    Tensor x_sum, y_sum;
    for (std::size_t i = 0; i < bg.news.size(); ++i) {
      Tensor x = pooled_sequence(bg.news[i], config.max_enc);
      Tensor y = pooled_sequence(bg.reports[i], config.max_dec);
      x_sum = i == 0 ? x : add(x_sum, x);
      y_sum = i == 0 ? y : add(y_sum, y);
    }
    const double inv_k = 1.0 / static_cast<double>(bg.news.size());
    Tensor pooled =
        concat_cols(mul_scalar(x_sum, inv_k), mul_scalar(y_sum, inv_k));
    return gaussian_head(mlp2(pooled, align), know_mu, know_sigma);
  }

  double kl_anneal_weight(std::size_t step) const {
    if (config.kl_anneal_steps == 0) return 1.0;
    return std::min(1.0, static_cast<double>(step) /
                             static_cast<double>(config.kl_anneal_steps));
  }

  LossTensors compute_losses(const EncodedExample& ex, const Background& bg,
                             const TeacherLM* teacher, std::size_t step,
                             NoiseSource& noise, bool train_mode) const {
    if (config.kd_enabled && teacher == nullptr)
      throw DataError("compute_losses: kd_enabled but no teacher");
    Encoded enc = encode_news(ex);
    GaussianParams knowledge =
        background_latent(bg, config.kd_enabled ? teacher : nullptr);
    GaussianParams posterior = product_of_experts(enc.prior, knowledge);
    Tensor eps = Tensor::row_vector(noise.eps(config.d_z));
    Tensor z = reparameterize(posterior, eps);

    // teacher-forced decode over the valid report span
    const std::size_t len = ex.report_len;
    Tensor h = tanh(add(matmul(concat_cols(z, enc.final), init_W), init_b));
    std::vector<Tensor> logit_rows;
    logit_rows.reserve(len - 1);
    for (std::size_t t = 1; t < len; ++t) {
      Tensor x_in = concat_cols(embed({ex.report_ids[t - 1]}, embedding), z);
      if (train_mode && config.dropout_decoder > 0.0) {
        Tensor mask = Tensor::row_vector(
            noise.dropout_mask(x_in.cols(), config.dropout_decoder));
        x_in = mul(x_in, mask);
      }
      h = gru_cell(x_in, h, dec);
      logit_rows.push_back(tanh(add(matmul(h, out_W), out_b)));
    }
    Tensor logits = stack_rows(logit_rows);
    Tensor logp = log_softmax_rows(logits);
    std::vector<int> targets(ex.report_ids.begin() + 1,
                             ex.report_ids.begin() +
                                 static_cast<std::ptrdiff_t>(len));
    std::vector<double> w(targets.size(),
                          1.0 / static_cast<double>(targets.size()));

    LossTensors out;
    out.recon = neg(pick_weighted_sum(logp, targets, w));
    out.kl = kl_divergence(posterior, knowledge);
    out.kl_weight = kl_anneal_weight(step);
    out.l_cvae = add(out.recon, mul_scalar(out.kl, out.kl_weight));
    if (config.kd_enabled) {
      Tensor probs = teacher->soft_target_rows(ex.report_ids, len);
      out.l_kd = distillation_loss(
          logits, probs, std::vector<std::uint8_t>(targets.size(), 1));
      if (alpha_raw.defined()) {
        Tensor a = sigmoid(alpha_raw);
        out.alpha_applied = a.value();
        out.total = add(mul(a, out.l_cvae),
                        mul(add_scalar(neg(a), 1.0), out.l_kd));
      } else {
        out.alpha_applied = config.alpha;
        out.total = add(mul_scalar(out.l_cvae, config.alpha),
                        mul_scalar(out.l_kd, 1.0 - config.alpha));
      }
    } else {
      out.l_kd = Tensor::scalar(0.0);
      out.alpha_applied = 1.0;
      out.total = out.l_cvae;
    }
    if (!std::isfinite(out.total.value()))
      throw NumericError("compute_losses: non-finite loss");
    return out;
  }

  // Greedy argmax decoding. z comes from the fused posterior with eps = 0
  // in deterministic mode or one standard-normal draw otherwise. PAD and
  // START are never emitted; END stops decoding.
  std::vector<std::string> generate(
      const std::vector<std::string>& news_tokens, const TeacherLM* teacher,
      const BackgroundSource& bg_source, std::size_t max_len,
      bool deterministic = true, Rng* sample_rng = nullptr,
      const std::string& exclude_id = "") const {
    std::vector<int> ids = encode_tokens(news_tokens, *vocab);
    if (ids.empty()) throw DataError("generate: empty input news");
    if (ids.size() > config.max_enc) ids.resize(config.max_enc);

    BiGruOutput enc =
        bigru_encode(embed(ids, embedding), ids.size(), enc_fwd, enc_bwd);
    GaussianParams prior = gaussian_head(enc.final, prior_mu, prior_sigma);
    Background bg = bg_source.fetch(news_tokens, exclude_id);
    GaussianParams knowledge =
        background_latent(bg, config.kd_enabled ? teacher : nullptr);
    GaussianParams posterior = product_of_experts(prior, knowledge);

    Tensor z;
    if (deterministic) {
      z = posterior.mu;
    } else {
      if (!sample_rng)
        throw DataError("generate: sampling mode needs an rng");
      std::vector<double> e(config.d_z);
      for (double& x : e) x = sample_rng->normal();
      z = reparameterize(posterior, Tensor::row_vector(e));
    }

    Tensor h = tanh(add(matmul(concat_cols(z, enc.final), init_W), init_b));
    std::vector<std::string> out;
    int prev = vocab->start();
    while (out.size() < max_len) {
      Tensor x_in = concat_cols(embed({prev}, embedding), z);
      h = gru_cell(x_in, h, dec);
      Tensor logits = tanh(add(matmul(h, out_W), out_b));
      std::vector<double> v = logits.data();
      v[static_cast<std::size_t>(vocab->pad())] =
          -std::numeric_limits<double>::infinity();
      v[static_cast<std::size_t>(vocab->start())] =
          -std::numeric_limits<double>::infinity();
      std::size_t best = 0;
      for (std::size_t j = 1; j < v.size(); ++j)
        if (v[j] > v[best]) best = j;
      if (static_cast<int>(best) == vocab->end()) break;
      out.push_back(vocab->token(static_cast<int>(best)));
      prev = static_cast<int>(best);
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["version"] = kCheckpointVersion;
    j["kind"] = "model";
    j["config"] = config.to_json();
    j["vocab"] = vocab->tokens();
    j["params"] = params_to_json(named_params());
    return j;
  }

  static CvaeKdModel from_json(const nlohmann::json& j) {
    if (j.at("kind").get<std::string>() != "model")
      throw DataError("checkpoint is not a model checkpoint");
    auto vocab = std::make_shared<Vocabulary>(Vocabulary::from_tokens(
        j.at("vocab").get<std::vector<std::string>>()));
    CvaeKdModel m(CvaeKdConfig::from_json(j.at("config")), vocab);
    std::vector<NamedParam> params = m.named_params();
    params_from_json(j.at("params"), params);
    return m;
  }
};

// One optimizer step over a batch: mean total loss, reverse pass, gradient
// clipping by global norm, Adam. A non-finite gradient aborts before any
// parameter moves. Returns the batch-averaged breakdown.
inline LossBreakdown train_step(const std::vector<const TrainExample*>& batch,
                                CvaeKdModel& m, const TeacherLM* teacher,
                                AdamState& opt,
                                const BackgroundSource& bg_source,
                                std::size_t step, NoiseSource& noise) {
  if (batch.empty()) throw DataError("train_step: empty batch");
  std::vector<Tensor> params = m.trainable();
  LossBreakdown avg;
  Tape tape;
  {
    Tape::Scope scope(tape);
    Tensor total_sum;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const TrainExample& ex = *batch[i];
      Background bg = bg_source.fetch(ex.pair.news_tokens, ex.pair.id);
      LossTensors lt =
          m.compute_losses(ex.encoded, bg, teacher, step, noise, true);
      LossBreakdown v = lt.values();
      avg.recon += v.recon;
      avg.kl += v.kl;
      avg.l_cvae += v.l_cvae;
      avg.l_kd += v.l_kd;
      avg.total += v.total;
      avg.kl_weight_applied = v.kl_weight_applied;
      avg.alpha_applied = v.alpha_applied;
      total_sum = i == 0 ? lt.total : add(total_sum, lt.total);
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    avg.recon *= inv;
    avg.kl *= inv;
    avg.l_cvae *= inv;
    avg.l_kd *= inv;
    avg.total *= inv;
    Tensor mean_total = mul_scalar(total_sum, inv);
    zero_grads(params);
    tape.backward(mean_total);
  }
  clip_global_norm(params, m.config.grad_clip);
  opt.step(params);
  tape.clear();
  return avg;
}

// Deterministic validation objective: zero noise, no dropout, final KL
// weight. Used for best-checkpoint selection.
inline double evaluate_loss(const std::vector<TrainExample>& examples,
                            const CvaeKdModel& m, const TeacherLM* teacher,
                            const BackgroundSource& bg_source) {
  if (examples.empty()) return 0.0;
  ZeroNoise noise;
  double sum = 0.0;
  for (const TrainExample& ex : examples) {
    Background bg = bg_source.fetch(ex.pair.news_tokens, ex.pair.id);
    sum += m.compute_losses(ex.encoded, bg, teacher, m.config.kl_anneal_steps,
                            noise, false)
               .values()
               .total;
  }
  return sum / static_cast<double>(examples.size());
}

}  // namespace cvaekd
