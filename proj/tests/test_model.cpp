#include <cmath>
#include <memory>

#include <gtest/gtest.h>

#include "cvaekd/model.hpp"

using namespace cvaekd;

namespace {

// Seven distinct surface tokens + five specials = V of 12.
std::vector<NewsReportPair> fixture_corpus() {
  const std::vector<std::string> words = {"up", "down", "flat", "gain",
                                          "loss", "hold", "risk"};
  std::vector<NewsReportPair> pairs;
  for (int i = 0; i < 10; ++i) {
    NewsReportPair p;
    p.id = "p" + std::to_string(i);
    for (int j = 0; j < 4; ++j) p.news_tokens.push_back(words[(i + j) % 7]);
    for (int j = 0; j < 8; ++j)
      p.report_tokens.push_back(words[(i * 3 + j) % 7]);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

CvaeKdConfig tiny_config() {
  CvaeKdConfig cfg;
  cfg.hidden = 4;
  cfg.d_z = 2;
  cfg.d_emb = 5;
  cfg.head_hidden = 6;
  cfg.batch = 2;
  cfg.max_enc = 6;
  cfg.max_dec = 12;
  cfg.k_neighbors = 2;
  cfg.kl_anneal_steps = 10;
  cfg.teacher_hidden = 4;
  cfg.teacher_emb = 4;
  cfg.seed = 11;
  return cfg;
}

struct Fixture {
  std::vector<NewsReportPair> pairs;
  std::shared_ptr<Vocabulary> vocab;
  CvaeKdConfig cfg;
  std::vector<TrainExample> examples;
  NeighborIndex index;
  PairLookup lookup;
  BackgroundSource bg;

  explicit Fixture(CvaeKdConfig c)
      : pairs(fixture_corpus()),
        vocab(std::make_shared<Vocabulary>(Vocabulary::build(pairs, 1))),
        cfg(c),
        examples(make_examples(pairs, *vocab, cfg)),
        index(NeighborIndex::build(pairs)),
        lookup(pairs) {
    bg.index = &index;
    bg.lookup = &lookup;
    bg.k = cfg.k_neighbors;
  }
};

TeacherLM tiny_teacher(const Fixture& fx, std::size_t epochs = 3) {
  TeacherConfig tc;
  tc.hidden = fx.cfg.teacher_hidden;
  tc.emb = fx.cfg.teacher_emb;
  tc.epochs = epochs;
  tc.batch = 4;
  tc.max_len = fx.cfg.max_dec;
  tc.lr = 0.01;
  tc.seed = 99;
  return TeacherLM::train(fx.pairs, fx.vocab, tc);
}

// ---------------------------------------------------------------------
// Straight-line reimplementation of the forward pass with plain loops,
// used as the reconstruction-loss oracle. Independent of the Tensor/Tape
// machinery: everything is std::vector<double>.
// ---------------------------------------------------------------------
using Vec = std::vector<double>;

Vec vecmat(const Vec& x, const Tensor& w) {
  Vec out(w.cols(), 0.0);
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) out[j] += x[i] * w.at(i, j);
  return out;
}
Vec vadd(Vec a, const Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}
Vec vmul(Vec a, const Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] *= b[i];
  return a;
}
Vec vsig(Vec a) {
  for (double& x : a) x = 1.0 / (1.0 + std::exp(-x));
  return a;
}
Vec vtanh(Vec a) {
  for (double& x : a) x = std::tanh(x);
  return a;
}
Vec vconcat(const Vec& a, const Vec& b) {
  Vec out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}
Vec bias(const Tensor& b) { return b.data(); }

Vec gru_hand(const Vec& x, const Vec& h, const GruCellParams& p) {
  Vec c = vsig(vadd(vadd(vecmat(x, p.W_c), vecmat(h, p.U_c)), bias(p.b_c)));
  Vec r = vsig(vadd(vadd(vecmat(x, p.W_r), vecmat(h, p.U_r)), bias(p.b_r)));
  Vec cand =
      vtanh(vadd(vadd(vecmat(x, p.W), vecmat(vmul(r, h), p.U)), bias(p.b)));
  Vec out(h.size());
  for (std::size_t i = 0; i < h.size(); ++i)
    out[i] = (1.0 - c[i]) * h[i] + c[i] * cand[i];
  return out;
}

Vec mlp2_hand(const Vec& x, const MlpParams& p) {
  return vadd(vecmat(vtanh(vadd(vecmat(x, p.W1), bias(p.b1))), p.W2),
              bias(p.b2));
}

Vec embed_hand(int id, const EmbeddingTable& t) {
  Vec out(t.weight.cols(), 0.0);
  if (id == t.pad_id) return out;
  for (std::size_t j = 0; j < t.weight.cols(); ++j)
    out[j] = t.weight.at(static_cast<std::size_t>(id), j);
  return out;
}

double recon_oracle(const CvaeKdModel& m, const EncodedExample& ex) {
  // encoder over the valid news span
  const std::size_t H = m.config.hidden;
  std::vector<Vec> hf(ex.news_len), hb(ex.news_len);
  Vec h(H, 0.0);
  for (std::size_t t = 0; t < ex.news_len; ++t) {
    h = gru_hand(embed_hand(ex.news_ids[t], m.embedding), h, m.enc_fwd);
    hf[t] = h;
  }
  h.assign(H, 0.0);
  for (std::size_t i = 0; i < ex.news_len; ++i) {
    const std::size_t t = ex.news_len - 1 - i;
    h = gru_hand(embed_hand(ex.news_ids[t], m.embedding), h, m.enc_bwd);
    hb[t] = h;
  }
  Vec fin = vconcat(hf[ex.news_len - 1], hb[0]);

  // prior head, then fuse with the standard normal (empty neighbor set)
  Vec mu_x = mlp2_hand(fin, m.prior_mu);
  Vec lv_x = mlp2_hand(fin, m.prior_sigma);
  for (double& x : lv_x) x = std::min(std::max(x, kLogVarMin), kLogVarMax);
  const std::size_t dz = m.config.d_z;
  Vec mu(dz), lv(dz);
  for (std::size_t i = 0; i < dz; ++i) {
    const double prec_x = std::exp(-lv_x[i]);
    const double prec = prec_x + 1.0;
    lv[i] = std::min(std::max(-std::log(prec), kLogVarMin), kLogVarMax);
    mu[i] = (mu_x[i] * prec_x + 0.0) / prec;
  }
  Vec z = mu;  // eps = 0

  // decoder, teacher-forced
  Vec hd = vtanh(vadd(vecmat(vconcat(z, fin), m.init_W), bias(m.init_b)));
  double nll = 0.0;
  const std::size_t len = ex.report_len;
  for (std::size_t t = 1; t < len; ++t) {
    Vec x_in = vconcat(embed_hand(ex.report_ids[t - 1], m.embedding), z);
    hd = gru_hand(x_in, hd, m.dec);
    Vec logits = vtanh(vadd(vecmat(hd, m.out_W), bias(m.out_b)));
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double zsum = 0.0;
    for (double v : logits) zsum += std::exp(v - mx);
    const double lse = mx + std::log(zsum);
    nll -= (logits[static_cast<std::size_t>(ex.report_ids[t])] - lse) /
           static_cast<double>(len - 1);
  }
  return nll;
}

}  // namespace

TEST(EncodeNews, FinalWidthIsTwiceHidden) {
  Fixture fx(tiny_config());
  CvaeKdModel m(fx.cfg, fx.vocab);
  auto enc = m.encode_news(fx.examples[0].encoded);
  EXPECT_EQ(enc.final.cols(), 2 * fx.cfg.hidden);
  EXPECT_EQ(enc.states.rows(), fx.cfg.max_enc);
  EXPECT_EQ(enc.prior.dim(), fx.cfg.d_z);
}

TEST(EncodeNews, PadContentBeyondLenIsIgnored) {
  Fixture fx(tiny_config());
  CvaeKdModel m(fx.cfg, fx.vocab);
  EncodedExample a = fx.examples[0].encoded;
  EncodedExample b = a;
  // scribble over the pad region with a real token id
  for (std::size_t t = a.news_len; t < b.news_ids.size(); ++t)
    b.news_ids[t] = fx.vocab->encode_token("risk");
  auto ea = m.encode_news(a);
  auto eb = m.encode_news(b);
  EXPECT_EQ(ea.final.data(), eb.final.data());
  EXPECT_EQ(ea.prior.mu.data(), eb.prior.mu.data());
}

TEST(EncodeNews, DifferentNewsGiveDifferentPriors) {
  Fixture fx(tiny_config());
  CvaeKdModel m(fx.cfg, fx.vocab);
  auto a = m.encode_news(fx.examples[0].encoded);
  auto b = m.encode_news(fx.examples[5].encoded);
  double diff = 0.0;
  for (std::size_t j = 0; j < fx.cfg.d_z; ++j)
    diff += std::fabs(a.prior.mu.at(0, j) - b.prior.mu.at(0, j));
  EXPECT_GT(diff, 1e-12);
}

TEST(BackgroundLatent, EmptyNeighborsGiveStandardNormal) {
  Fixture fx(tiny_config());
  CvaeKdModel m(fx.cfg, fx.vocab);
  GaussianParams g = m.background_latent({}, nullptr);
  EXPECT_EQ(g.dim(), fx.cfg.d_z);
  for (double v : g.mu.data()) EXPECT_DOUBLE_EQ(v, 0.0);
  for (double v : g.log_var.data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(BackgroundLatent, DuplicatedNeighborEqualsSingle) {
  Fixture fx(tiny_config());
  CvaeKdModel m(fx.cfg, fx.vocab);
  TeacherLM teacher = tiny_teacher(fx);
  Background one;
  one.news = {fx.pairs[1].news_tokens};
  one.reports = {fx.pairs[1].report_tokens};
  Background five;
  for (int i = 0; i < 5; ++i) {
    five.news.push_back(fx.pairs[1].news_tokens);
    five.reports.push_back(fx.pairs[1].report_tokens);
  }
  GaussianParams a = m.background_latent(one, &teacher);
  GaussianParams b = m.background_latent(five, &teacher);
  for (std::size_t j = 0; j < fx.cfg.d_z; ++j) {
    EXPECT_NEAR(a.mu.at(0, j), b.mu.at(0, j), 1e-12);
    EXPECT_NEAR(a.log_var.at(0, j), b.log_var.at(0, j), 1e-12);
  }
}

TEST(BackgroundLatent, FiniteAtConfiguredDim) {
  Fixture fx(tiny_config());
  CvaeKdModel m(fx.cfg, fx.vocab);
  TeacherLM teacher = tiny_teacher(fx);
  Background bg = fx.bg.fetch(fx.pairs[0].news_tokens, fx.pairs[0].id);
  ASSERT_FALSE(bg.news.empty());
  GaussianParams g = m.background_latent(bg, &teacher);
  EXPECT_EQ(g.dim(), fx.cfg.d_z);
  EXPECT_TRUE(g.mu.all_finite());
  EXPECT_TRUE(g.log_var.all_finite());
}

TEST(BackgroundLatent, MisalignedListsRejected) {
  Fixture fx(tiny_config());
  CvaeKdModel m(fx.cfg, fx.vocab);
  Background bad;
  bad.news = {fx.pairs[0].news_tokens};
  EXPECT_THROW(m.background_latent(bad, nullptr), ShapeError);
}

TEST(ComputeLosses, AlphaOneMakesTotalEqualCvae) {
  CvaeKdConfig cfg = tiny_config();
  cfg.alpha = 1.0;
  Fixture fx(cfg);
  CvaeKdModel m(fx.cfg, fx.vocab);
  TeacherLM teacher = tiny_teacher(fx);
  Background bg = fx.bg.fetch(fx.pairs[0].news_tokens, fx.pairs[0].id);
  ZeroNoise noise;
  LossBreakdown v =
      m.compute_losses(fx.examples[0].encoded, bg, &teacher, 5, noise, true)
          .values();
  EXPECT_DOUBLE_EQ(v.total, v.l_cvae);
}

TEST(ComputeLosses, MixingIdentityHolds) {
  Fixture fx(tiny_config());
  CvaeKdModel m(fx.cfg, fx.vocab);
  TeacherLM teacher = tiny_teacher(fx);
  ZeroNoise noise;
  for (std::size_t step : {0u, 3u, 10u, 50u}) {
    Background bg = fx.bg.fetch(fx.pairs[2].news_tokens, fx.pairs[2].id);
    LossBreakdown v = m.compute_losses(fx.examples[2].encoded, bg, &teacher,
                                       step, noise, true)
                          .values();
    EXPECT_NEAR(v.total,
                v.alpha_applied * v.l_cvae + (1.0 - v.alpha_applied) * v.l_kd,
                1e-12);
    EXPECT_NEAR(v.l_cvae, v.recon + v.kl_weight_applied * v.kl, 1e-12);
    EXPECT_GE(v.kl, 0.0);
  }
}

TEST(ComputeLosses, NearFlatPriorMakesPosteriorTrackKnowledge) {
  CvaeKdConfig cfg = tiny_config();
  cfg.kd_enabled = false;
  Fixture fx(cfg);
  CvaeKdModel m(fx.cfg, fx.vocab);
  // rig the prior heads: mu = 0, log_var = +8 (near-flat prior), so the
  // fused posterior collapses onto the knowledge distribution
  std::fill(m.prior_mu.W2.data().begin(), m.prior_mu.W2.data().end(), 0.0);
  std::fill(m.prior_mu.b2.data().begin(), m.prior_mu.b2.data().end(), 0.0);
  std::fill(m.prior_sigma.W2.data().begin(), m.prior_sigma.W2.data().end(),
            0.0);
  std::fill(m.prior_sigma.b2.data().begin(), m.prior_sigma.b2.data().end(),
            8.0);
  ZeroNoise noise;
  LossBreakdown v =
      m.compute_losses(fx.examples[0].encoded, {}, nullptr, 5, noise, true)
          .values();
  EXPECT_LT(v.kl, 1e-6);
}

TEST(ComputeLosses, KdDisabledReportsZeroAndExcludesIt) {
  CvaeKdConfig cfg = tiny_config();
  cfg.kd_enabled = false;
  Fixture fx(cfg);
  CvaeKdModel m(fx.cfg, fx.vocab);
  Background bg = fx.bg.fetch(fx.pairs[1].news_tokens, fx.pairs[1].id);
  ZeroNoise noise;
  LossBreakdown v =
      m.compute_losses(fx.examples[1].encoded, bg, nullptr, 3, noise, true)
          .values();
  EXPECT_DOUBLE_EQ(v.l_kd, 0.0);
  EXPECT_DOUBLE_EQ(v.total, v.l_cvae);
  EXPECT_DOUBLE_EQ(v.alpha_applied, 1.0);
}

TEST(ComputeLosses, LearnableAlphaEntersTheMix) {
  CvaeKdConfig cfg = tiny_config();
  cfg.alpha_learnable = true;
  cfg.alpha = 0.3;
  Fixture fx(cfg);
  CvaeKdModel m(fx.cfg, fx.vocab);
  ASSERT_TRUE(m.alpha_raw.defined());
  TeacherLM teacher = tiny_teacher(fx);
  Background bg = fx.bg.fetch(fx.pairs[0].news_tokens, fx.pairs[0].id);
  ZeroNoise noise;
  LossBreakdown v =
      m.compute_losses(fx.examples[0].encoded, bg, &teacher, 1, noise, true)
          .values();
  EXPECT_NEAR(v.alpha_applied, 0.3, 1e-9);
  EXPECT_NEAR(v.total, 0.3 * v.l_cvae + 0.7 * v.l_kd, 1e-9);
}

TEST(KlAnnealing, LinearZeroToOneMonotone) {
  Fixture fx(tiny_config());  // kl_anneal_steps = 10
  CvaeKdModel m(fx.cfg, fx.vocab);
  EXPECT_DOUBLE_EQ(m.kl_anneal_weight(0), 0.0);
  EXPECT_DOUBLE_EQ(m.kl_anneal_weight(10), 1.0);
  EXPECT_DOUBLE_EQ(m.kl_anneal_weight(100), 1.0);
  double prev = -1.0;
  for (std::size_t s = 0; s <= 30; ++s) {
    EXPECT_GE(m.kl_anneal_weight(s), prev);
    prev = m.kl_anneal_weight(s);
  }
  CvaeKdConfig cfg = tiny_config();
  cfg.kl_anneal_steps = 0;  // annealing disabled
  CvaeKdModel m2(cfg, fx.vocab);
  EXPECT_DOUBLE_EQ(m2.kl_anneal_weight(0), 1.0);
}

TEST(ComputeLosses, FullLossGradientsPassFiniteDifferences) {
  // the acceptance configuration: d_z=2, hidden=4, V=12, 2-example batch,
  // latent noise and dropout masks frozen
  Fixture fx(tiny_config());
  ASSERT_EQ(fx.vocab->size(), 12u);
  CvaeKdModel m(fx.cfg, fx.vocab);
  TeacherLM teacher = tiny_teacher(fx);
  std::vector<Background> bgs = {
      fx.bg.fetch(fx.pairs[0].news_tokens, fx.pairs[0].id),
      fx.bg.fetch(fx.pairs[1].news_tokens, fx.pairs[1].id)};

  Rng noise_rng(4242);
  RngNoise raw(noise_rng);
  RecordingNoise recorder(raw);
  for (std::size_t i = 0; i < 2; ++i)
    (void)m.compute_losses(fx.examples[i].encoded, bgs[i], &teacher, 4,
                           recorder, true);
  ReplayNoise replay(recorder.recorded());
  auto f = [&]() {
    replay.reset();
    Tensor sum;
    for (std::size_t i = 0; i < 2; ++i) {
      LossTensors lt = m.compute_losses(fx.examples[i].encoded, bgs[i],
                                        &teacher, 4, replay, true);
      sum = i == 0 ? lt.total : add(sum, lt.total);
    }
    return mul_scalar(sum, 0.5);
  };
  // Coordinates with gradients under 1e-3 sit at the resolution limit of
  // central differences (noise ~1e-11 here); the floored denominator holds
  // them to an absolute 1e-7 while everything else stays relative.
  GradCheckResult r = finite_difference_check(f, m.trainable(), 1e-5, 1e-3);
  EXPECT_LT(r.max_rel_err, 1e-4);
  EXPECT_GT(r.n_checked, 500u);
}

TEST(ReconLoss, MatchesStraightLineOracle) {
  CvaeKdConfig cfg = tiny_config();
  cfg.kd_enabled = false;
  Fixture fx(cfg);
  CvaeKdModel m(fx.cfg, fx.vocab);
  ZeroNoise noise;
  for (std::size_t i : {0u, 3u, 7u}) {
    LossBreakdown v =
        m.compute_losses(fx.examples[i].encoded, {}, nullptr, 0, noise, false)
            .values();
    EXPECT_NEAR(v.recon, recon_oracle(m, fx.examples[i].encoded), 1e-12)
        << "example " << i;
  }
}

TEST(TrainStep, ZeroLearningRateLeavesParametersBitIdentical) {
  Fixture fx(tiny_config());
  CvaeKdModel m(fx.cfg, fx.vocab);
  TeacherLM teacher = tiny_teacher(fx);
  std::vector<Tensor> params = m.trainable();
  std::vector<std::vector<double>> before;
  for (const Tensor& p : params) before.push_back(p.data());
  AdamState opt(params, {0.0});
  Rng nrng(1);
  RngNoise noise(nrng);
  std::vector<const TrainExample*> batch = {&fx.examples[0], &fx.examples[1]};
  train_step(batch, m, &teacher, opt, fx.bg, 0, noise);
  for (std::size_t i = 0; i < params.size(); ++i)
    EXPECT_EQ(params[i].data(), before[i]) << "param " << i;
}

TEST(TrainStep, LossDecreasesOnTinyCorpus) {
  CvaeKdConfig cfg = tiny_config();
  cfg.kl_anneal_steps = 40;
  Fixture fx(cfg);
  CvaeKdModel m(fx.cfg, fx.vocab);
  TeacherLM teacher = tiny_teacher(fx);
  std::vector<Tensor> params = m.trainable();
  AdamState opt(params, {0.01});
  Rng nrng(2);
  RngNoise noise(nrng);
  std::vector<const TrainExample*> batch;
  for (const TrainExample& e : fx.examples) batch.push_back(&e);
  double first = 0.0, last = 0.0;
  for (std::size_t step = 0; step < 30; ++step) {
    LossBreakdown v = train_step(batch, m, &teacher, opt, fx.bg, step, noise);
    if (step == 0) first = v.recon;
    last = v.recon;
  }
  EXPECT_LT(last, first);
}

TEST(TrainStep, NonFiniteLossAbortsWithoutCorruption) {
  CvaeKdConfig cfg = tiny_config();
  cfg.kd_enabled = false;
  Fixture fx(cfg);
  CvaeKdModel m(fx.cfg, fx.vocab);
  // poison one weight so the forward pass blows up
  m.out_W.data()[0] = std::numeric_limits<double>::quiet_NaN();
  std::vector<Tensor> params = m.trainable();
  AdamState opt(params);
  Rng nrng(3);
  RngNoise noise(nrng);
  std::vector<const TrainExample*> batch = {&fx.examples[0]};
  EXPECT_THROW(train_step(batch, m, nullptr, opt, fx.bg, 0, noise),
               NumericError);
  EXPECT_EQ(opt.t(), 0u);
}

TEST(Generate, DeterministicModeRepeatsExactly) {
  CvaeKdConfig cfg = tiny_config();
  cfg.kd_enabled = false;
  Fixture fx(cfg);
  CvaeKdModel m(fx.cfg, fx.vocab);
  auto a = m.generate(fx.pairs[0].news_tokens, nullptr, fx.bg, 16, true,
                      nullptr, fx.pairs[0].id);
  auto b = m.generate(fx.pairs[0].news_tokens, nullptr, fx.bg, 16, true,
                      nullptr, fx.pairs[0].id);
  EXPECT_EQ(a, b);
}

TEST(Generate, RespectsLengthBoundAndForbiddenTokens) {
  CvaeKdConfig cfg = tiny_config();
  cfg.kd_enabled = false;
  Fixture fx(cfg);
  CvaeKdModel m(fx.cfg, fx.vocab);
  for (std::size_t max_len : {1u, 5u, 20u}) {
    auto out = m.generate(fx.pairs[3].news_tokens, nullptr, fx.bg, max_len);
    EXPECT_LE(out.size(), max_len);
    for (const std::string& tok : out) {
      EXPECT_NE(tok, Vocabulary::kPadToken);
      EXPECT_NE(tok, Vocabulary::kStartToken);
      EXPECT_NE(tok, Vocabulary::kEndToken);
    }
  }
}

TEST(Generate, EmptyNewsRejected) {
  CvaeKdConfig cfg = tiny_config();
  cfg.kd_enabled = false;
  Fixture fx(cfg);
  CvaeKdModel m(fx.cfg, fx.vocab);
  EXPECT_THROW(m.generate({}, nullptr, fx.bg, 10), DataError);
}

TEST(Generate, SamplingModeNeedsRngAndDiffers) {
  CvaeKdConfig cfg = tiny_config();
  cfg.kd_enabled = false;
  Fixture fx(cfg);
  CvaeKdModel m(fx.cfg, fx.vocab);
  EXPECT_THROW(m.generate(fx.pairs[0].news_tokens, nullptr, fx.bg, 8, false),
               DataError);
  Rng rng(5);
  auto sampled =
      m.generate(fx.pairs[0].news_tokens, nullptr, fx.bg, 8, false, &rng);
  EXPECT_LE(sampled.size(), 8u);
}

TEST(Checkpoint, ModelRoundTripPreservesChecksumAndBehavior) {
  CvaeKdConfig cfg = tiny_config();
  cfg.kd_enabled = false;
  Fixture fx(cfg);
  CvaeKdModel m(fx.cfg, fx.vocab);
  nlohmann::json j = m.to_json();
  CvaeKdModel m2 = CvaeKdModel::from_json(j);
  EXPECT_EQ(m2.parameter_checksum(), m.parameter_checksum());
  auto a = m.generate(fx.pairs[4].news_tokens, nullptr, fx.bg, 10);
  auto b = m2.generate(fx.pairs[4].news_tokens, nullptr, fx.bg, 10);
  EXPECT_EQ(a, b);
}
