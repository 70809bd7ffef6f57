#include <gtest/gtest.h>

#include "cvaekd/layers.hpp"

using namespace cvaekd;

namespace {

GruCellParams zero_gru(std::size_t in, std::size_t hidden) {
  Rng rng(0);
  GruCellParams p = GruCellParams::init(in, hidden, rng);
  for (Tensor* t : {&p.W_c, &p.U_c, &p.b_c, &p.W_r, &p.U_r, &p.b_r, &p.W,
                    &p.U, &p.b})
    std::fill(t->data().begin(), t->data().end(), 0.0);
  return p;
}

}  // namespace

TEST(Embed, PadRowIsZero) {
  Rng rng(3);
  EmbeddingTable table = EmbeddingTable::init(5, 4, /*pad_id=*/0, rng);
  Tensor e = embed({0}, table);
  for (double x : e.data()) EXPECT_DOUBLE_EQ(x, 0.0);
}

TEST(Embed, RepeatedIdGivesIdenticalRows) {
  Rng rng(3);
  EmbeddingTable table = EmbeddingTable::init(5, 4, 0, rng);
  Tensor e = embed({3, 3}, table);
  for (std::size_t j = 0; j < 4; ++j)
    EXPECT_DOUBLE_EQ(e.at(0, j), e.at(1, j));
}

TEST(Embed, OutOfRangeIdThrows) {
  Rng rng(3);
  EmbeddingTable table = EmbeddingTable::init(5, 4, 0, rng);
  EXPECT_THROW(embed({5}, table), ShapeError);
  EXPECT_THROW(embed({-1}, table), ShapeError);
}

TEST(Embed, GradientAccumulatesOverOccurrences) {
  Rng rng(3);
  EmbeddingTable table = EmbeddingTable::init(6, 3, 0, rng);
  std::vector<int> ids = {2, 2, 5};
  Tensor coeff = uniform_init(3, 3, 1.0, rng);
  coeff.set_requires_grad(false);
  auto f = [&]() { return sum_all(mul(embed(ids, table), coeff)); };
  GradCheckResult r = finite_difference_check(f, {table.weight}, 1e-5);
  EXPECT_LT(r.max_rel_err, 1e-6);
  EXPECT_NEAR(table.weight.grad()[2 * 3 + 0], coeff.at(0, 0) + coeff.at(1, 0),
              1e-12);
}

TEST(GruCell, AllZeroParamsHalveState) {
  // c = sigmoid(0) = 0.5, candidate = tanh(0) = 0
  // h = (1-0.5)*0.8 + 0.5*0 = 0.4
  GruCellParams p = zero_gru(1, 1);
  Tensor h = gru_cell(Tensor::scalar(0.0), Tensor::scalar(0.8), p);
  EXPECT_DOUBLE_EQ(h.value(), 0.4);
}

TEST(GruCell, HandComputedOneDim) {
  // W = U = 1 on the candidate only, x = 0, h_prev = 1:
  // c = r = 0.5, cand = tanh(0.5) = 0.462117, h = 0.5 + 0.5*0.462117
  GruCellParams p = zero_gru(1, 1);
  p.W.data()[0] = 1.0;
  p.U.data()[0] = 1.0;
  Tensor h = gru_cell(Tensor::scalar(0.0), Tensor::scalar(1.0), p);
  EXPECT_NEAR(h.value(), 0.7310585786300049, 1e-12);
}

TEST(GruCell, ZeroInputZeroStateIsFixedPoint) {
  Rng rng(17);
  GruCellParams p = GruCellParams::init(3, 4, rng);  // biases are zero
  Tensor h = gru_cell(Tensor(1, 3), Tensor(1, 4), p);
  for (double x : h.data()) EXPECT_DOUBLE_EQ(x, 0.0);
}

TEST(GruCell, StateStaysInOpenUnitIntervalFromZeroState) {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    GruCellParams p = GruCellParams::init(4, 6, rng);
    Tensor x = uniform_init(1, 4, 2.0, rng);
    Tensor h = gru_cell(x, Tensor(1, 6), p);
    for (double v : h.data()) {
      EXPECT_GT(v, -1.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(GruCell, GradientsPassFiniteDifferences) {
  Rng rng(29);
  GruCellParams p = GruCellParams::init(3, 4, rng);
  Tensor x = uniform_init(1, 3, 1.0, rng);
  Tensor h0 = uniform_init(1, 4, 0.5, rng);
  std::vector<Tensor> params = {p.W_c, p.U_c, p.b_c, p.W_r, p.U_r, p.b_r,
                                p.W,   p.U,   p.b,   x,     h0};
  auto f = [&]() { return sum_all(gru_cell(x, h0, p)); };
  GradCheckResult r = finite_difference_check(f, params, 1e-5);
  EXPECT_LT(r.max_rel_err, 1e-6);
}

TEST(BiGru, StateWidthIsTwiceHidden) {
  Rng rng(5);
  const std::size_t H = 8;
  GruCellParams fwd = GruCellParams::init(4, H, rng);
  GruCellParams bwd = GruCellParams::init(4, H, rng);
  Tensor seq = uniform_init(6, 4, 1.0, rng);
  BiGruOutput out = bigru_encode(seq, 6, fwd, bwd);
  EXPECT_EQ(out.states.rows(), 6u);
  EXPECT_EQ(out.states.cols(), 2 * H);
  EXPECT_EQ(out.final.cols(), 2 * H);
}

TEST(BiGru, PalindromeWithSharedParamsMatchesEnds) {
  Rng rng(7);
  GruCellParams p = GruCellParams::init(3, 5, rng);
  Tensor r0 = uniform_init(1, 3, 1.0, rng);
  Tensor r1 = uniform_init(1, 3, 1.0, rng);
  Tensor seq = stack_rows({r0, r1, r0});  // palindrome
  BiGruOutput out = bigru_encode(seq, 3, p, p);
  // forward final == backward state at position 0
  for (std::size_t j = 0; j < 5; ++j)
    EXPECT_NEAR(out.final.at(0, j), out.final.at(0, 5 + j), 1e-12);
}

TEST(BiGru, LengthOneFinalUsesTheSingleStep) {
  Rng rng(9);
  GruCellParams fwd = GruCellParams::init(3, 4, rng);
  GruCellParams bwd = GruCellParams::init(3, 4, rng);
  Tensor seq = uniform_init(4, 3, 1.0, rng);
  BiGruOutput out = bigru_encode(seq, 1, fwd, bwd);
  Tensor hf = gru_cell(row(seq, 0), Tensor(1, 4), fwd);
  Tensor hb = gru_cell(row(seq, 0), Tensor(1, 4), bwd);
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_DOUBLE_EQ(out.final.at(0, j), hf.at(0, j));
    EXPECT_DOUBLE_EQ(out.final.at(0, 4 + j), hb.at(0, j));
  }
}

TEST(BiGru, IndependentOfPadContentBeyondLen) {
  Rng rng(11);
  GruCellParams fwd = GruCellParams::init(3, 4, rng);
  GruCellParams bwd = GruCellParams::init(3, 4, rng);
  Tensor a = uniform_init(5, 3, 1.0, rng);
  Tensor b = Tensor::from(a.data(), 5, 3);
  for (std::size_t t = 2; t < 5; ++t)
    for (std::size_t j = 0; j < 3; ++j) b.at(t, j) = rng.uniform(-9, 9);
  BiGruOutput oa = bigru_encode(a, 2, fwd, bwd);
  BiGruOutput ob = bigru_encode(b, 2, fwd, bwd);
  EXPECT_EQ(oa.final.data(), ob.final.data());
  EXPECT_EQ(oa.states.data(), ob.states.data());
  // and the pad rows are zero
  for (std::size_t t = 2; t < 5; ++t)
    for (std::size_t j = 0; j < 8; ++j)
      EXPECT_DOUBLE_EQ(oa.states.at(t, j), 0.0);
}

TEST(BiGru, ZeroLenRejected) {
  Rng rng(13);
  GruCellParams p = GruCellParams::init(3, 4, rng);
  Tensor seq = uniform_init(4, 3, 1.0, rng);
  EXPECT_THROW(bigru_encode(seq, 0, p, p), ShapeError);
}

TEST(BiGru, GradientsPassFiniteDifferences) {
  Rng rng(15);
  GruCellParams fwd = GruCellParams::init(2, 3, rng);
  GruCellParams bwd = GruCellParams::init(2, 3, rng);
  Tensor seq = uniform_init(4, 2, 1.0, rng);
  std::vector<Tensor> params = {fwd.W_c, fwd.U_c, fwd.W_r, fwd.U_r, fwd.W,
                                fwd.U,   bwd.W_c, bwd.U_c, bwd.W,   bwd.U,
                                seq};
  auto f = [&]() {
    BiGruOutput out = bigru_encode(seq, 3, fwd, bwd);
    return add(sum_all(tanh(out.states)), sum_all(out.final));
  };
  GradCheckResult r = finite_difference_check(f, params, 1e-5);
  EXPECT_LT(r.max_rel_err, 1e-6);
}

TEST(Mlp2, ZeroParamsGiveZeroOutput) {
  Rng rng(19);
  MlpParams p = MlpParams::init(3, 4, 2, rng);
  for (Tensor* t : {&p.W1, &p.b1, &p.W2, &p.b2})
    std::fill(t->data().begin(), t->data().end(), 0.0);
  Tensor y = mlp2(uniform_init(1, 3, 1.0, rng), p);
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Mlp2, IdentityLikeLayersComposeToTanh) {
  Rng rng(21);
  MlpParams p = MlpParams::init(1, 1, 1, rng);
  p.W1.data()[0] = 1.0;
  p.b1.data()[0] = 0.0;
  p.W2.data()[0] = 1.0;
  p.b2.data()[0] = 0.0;
  const double x = 0.7;
  Tensor y = mlp2(Tensor::scalar(x), p);
  EXPECT_DOUBLE_EQ(y.value(), std::tanh(x));
}

TEST(Mlp2, GradientsPassFiniteDifferences) {
  Rng rng(25);
  MlpParams p = MlpParams::init(4, 5, 3, rng);
  Tensor x = uniform_init(2, 4, 1.0, rng);
  auto f = [&]() { return sum_all(tanh(mlp2(x, p))); };
  GradCheckResult r =
      finite_difference_check(f, {p.W1, p.b1, p.W2, p.b2, x}, 1e-5);
  EXPECT_LT(r.max_rel_err, 1e-6);
}

TEST(MeanFirstRows, MasksTail) {
  Tensor m = Tensor::from({1, 2, 3, 4, 100, 200}, 3, 2);
  Tensor avg = mean_first_rows(m, 2);
  EXPECT_DOUBLE_EQ(avg.at(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(avg.at(0, 1), 3.0);
}
