#include <gtest/gtest.h>

#include <cmath>

#include "unihead.hpp"

using namespace unihead;

namespace {

Tensor<double> rnd(Shape s, Rng& r, double lo = -2, double hi = 2) { return init::uniform<double>(std::move(s), lo, hi, r); }

cit::BranchPair<double> random_pair(std::size_t h, std::size_t w, std::size_t c, Rng& r) {
  return {FeatureMap<double>(rnd({h, w, c}, r)), FeatureMap<double>(rnd({h, w, c}, r))};
}

}  // namespace

TEST(Cpe, ZeroKernelIsIdentity) {
  Rng r(1);
  const auto x = rnd({3, 4, 6}, r);
  const auto y = cit::cpe<double>(x, Tensor<double>({6, 3, 3}), Tensor<double>({6}));
  EXPECT_EQ(y.vec(), x.vec());
}

TEST(Cpe, ZeroSumKernelKeepsConstantInterior) {
  Tensor<double> k({2, 3, 3});
  for (std::size_t c = 0; c < 2; ++c) {
    k[c * 9 + 0] = 1;
    k[c * 9 + 8] = -1;
  }
  const Tensor<double> x({5, 5, 2}, 3.0);
  const auto y = cit::cpe<double>(x, k, Tensor<double>({2}));
  for (std::size_t i = 1; i < 4; ++i)
    for (std::size_t j = 1; j < 4; ++j)
      for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(y[(i * 5 + j) * 2 + c], 3.0);
  EXPECT_EQ(y[0], 0.0);  // corner: the +1 tap falls in the padding
}

TEST(Cca, MatchesLiteralOracleAndColumnsSumToOne) {
  checks::TrialOptions opt;
  opt.trials = 20;
  for (const auto& rep : checks::eq6(opt)) EXPECT_TRUE(rep.pass) << rep.json_line();
}

TEST(Cca, RandomThreeByFourBySixPair) {
  Rng r(2);
  const auto pair = random_pair(3, 4, 6, r);
  const auto p = cit::CitParams<double>::init(6, 11, "cit");
  for (auto dir : {cit::Direction::to_cls, cit::Direction::to_loc}) {
    const bool to_cls = dir == cit::Direction::to_cls;
    const auto got = cit::cca<double>(pair.cls, pair.loc, p, dir);
    const auto ref = oracle::naive_cca(to_cls ? pair.cls : pair.loc, to_cls ? pair.loc : pair.cls, checks::cca_weights(p, dir));
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_LT(oracle::rel_err(got[i], ref[i]), 1e-10);
  }
}

TEST(Cca, OracleCatchesWrongSoftmaxAxis) {
  // normalizing rows instead of columns is a different operator
  Rng r(3);
  const auto pair = random_pair(2, 3, 4, r);
  const auto p = cit::CitParams<double>::init(4, 5, "cit");
  Tensor<double> attn;
  const auto w = checks::cca_weights(p, cit::Direction::to_cls);
  oracle::naive_cca(pair.cls, pair.loc, w, &attn);
  const auto a = cit::cca_attention<double>(pair.cls, pair.loc, p, cit::Direction::to_cls);
  double row0 = 0;
  for (std::size_t j = 0; j < 4; ++j) row0 += a(0, j);
  EXPECT_GT(std::fabs(row0 - 1), 1e-6);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], attn[i], 1e-12);
}

TEST(Cca, SingleTokenClosedForm) {
  // H = W = 1: A = softmax over i of q_i k_j (d_k = 1), out_j = sum_i v_i A_ij
  Rng r(4);
  const std::size_t c = 4, half = 2;
  const auto pair = random_pair(1, 1, c, r);
  const auto p = cit::CitParams<double>::init(c, 6, "cit");
  const auto& tgt = pair.cls.vec();
  const auto& gd = pair.loc.vec();
  auto proj = [&](const std::vector<double>& x, const Tensor<double>& m, std::size_t j) {
    double s = 0;
    for (std::size_t e = 0; e < c; ++e) s += x[e] * m[e * m.dim(1) + j];
    return s;
  };
  std::vector<double> q(c), k(c), v(c);
  for (std::size_t j = 0; j < c; ++j) q[j] = proj(gd, p.loc.wq, j);
  for (std::size_t j = 0; j < half; ++j) {
    k[j] = proj(tgt, p.cls.wk, j);
    k[half + j] = proj(gd, p.loc.wk, j);
    v[j] = proj(tgt, p.cls.wv, j);
    v[half + j] = proj(gd, p.loc.wv, j);
  }
  const auto out = cit::cca<double>(pair.cls, pair.loc, p, cit::Direction::to_cls);
  for (std::size_t j = 0; j < c; ++j) {
    double z = 0, num = 0;
    for (std::size_t i = 0; i < c; ++i) z += std::exp(q[i] * k[j]);
    for (std::size_t i = 0; i < c; ++i) num += v[i] * std::exp(q[i] * k[j]);
    EXPECT_NEAR(out[j], num / z, 1e-12);
  }
}

TEST(Cca, CrossGuidanceSensitivity) {
  Rng r(5);
  const auto p = cit::CitParams<double>::init(8, 7, "cit");
  for (int trial = 0; trial < 5; ++trial) {
    auto pair = random_pair(3, 3, 8, r);
    const auto base = cit::cca<double>(pair.cls, pair.loc, p, cit::Direction::to_cls);
    for (auto& v : pair.loc.vec()) v += r.uniform(-0.1, 0.1);  // guide only
    const auto moved = cit::cca<double>(pair.cls, pair.loc, p, cit::Direction::to_cls);
    double diff = 0;
    for (std::size_t i = 0; i < base.size(); ++i) diff = std::max(diff, std::fabs(base[i] - moved[i]));
    EXPECT_GT(diff, 1e-8);
  }
}

TEST(Cca, ShapeMismatch) {
  Rng r(6);
  const auto p = cit::CitParams<double>::init(4, 1, "cit");
  EXPECT_THROW(cit::cca<double>(rnd({2, 2, 4}, r), rnd({2, 3, 4}, r), p, cit::Direction::to_cls), ShapeError);
  EXPECT_THROW(cit::cit_block<double>({FeatureMap<double>(rnd({2, 2, 4}, r)), FeatureMap<double>(rnd({3, 2, 4}, r))}, p),
               ShapeError);
  EXPECT_THROW(cit::CitParams<double>::init(5, 1, "cit"), ConfigError);
}

TEST(Cca, CostIsFiveHwcSquaredAndLinearInArea) {
  EXPECT_EQ(cit::cca_flops(1, 1, 2), 20u);
  for (std::size_t h : {2, 4, 8})
    for (std::size_t w : {2, 4, 8})
      for (std::size_t c : {4, 8, 16}) {
        EXPECT_EQ(cit::cca_flops(2 * h, w, c), 2 * cit::cca_flops(h, w, c));
        EXPECT_EQ(cit::cca_flops(h, 2 * w, c), 2 * cit::cca_flops(h, w, c));
      }
  for (auto [h, w, c] : {std::tuple<std::size_t, std::size_t, std::size_t>{1, 1, 2}, {4, 4, 8}, {3, 5, 6}}) {
    Rng r(h + w + c);
    CostCounter counter;
    {
      CountingScope scope(counter);
      cit::cit_block<double>(random_pair(h, w, c, r), cit::CitParams<double>::init(c, 1, "cit"));
    }
    EXPECT_EQ(counter.get("cit.cca_cls").macs, cit::cca_flops(h, w, c));
    EXPECT_EQ(counter.get("cit.cca_loc").macs, cit::cca_flops(h, w, c));
  }
}

TEST(Leb, IdentityKernels) {
  Rng r(7);
  auto p = cit::BranchParams<double>::init(4, 1, "cit", "cls");
  p.leb_in_weight.fill(1);
  p.leb_out_weight.fill(1);
  p.leb_mid_weight.fill(0);
  for (std::size_t c = 0; c < 4; ++c) p.leb_mid_weight[c * 9 + 4] = 1;
  const auto x = rnd({3, 3, 4}, r);
  EXPECT_EQ(cit::leb<double>(x, p).vec(), x.vec());
}

TEST(Leb, OuterScalesMultiply) {
  Rng r(8);
  auto p = cit::BranchParams<double>::init(4, 2, "cit", "cls");
  const auto x = rnd({3, 4, 4}, r);
  const auto base = cit::leb<double>(x, p);
  for (auto& v : p.leb_in_weight.vec()) v *= 1.5;
  for (auto& v : p.leb_out_weight.vec()) v *= -0.4;
  const auto scaled = cit::leb<double>(x, p);
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(scaled[i], -0.6 * base[i], 1e-13);
}

TEST(Leb, IsSequentialDepthwiseConvs) {
  Rng r(9);
  auto p = cit::BranchParams<double>::init(6, 3, "cit", "loc");
  p.leb_in_bias = rnd({6}, r);
  p.leb_mid_bias = rnd({6}, r);
  p.leb_out_bias = rnd({6}, r);
  const auto x = rnd({4, 5, 6}, r);
  const auto a = kernels::dwconv<double>(x, p.leb_in_weight, p.leb_in_bias);
  const auto b = kernels::dwconv<double>(a, p.leb_mid_weight, p.leb_mid_bias);
  const auto ref = kernels::dwconv<double>(b, p.leb_out_weight, p.leb_out_bias);
  const auto got = cit::leb<double>(x, p);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], ref[i], 1e-13);
}

TEST(CitBlock, ShapesPreserved) {
  Rng r(10);
  const auto out = cit::cit_block<double>(random_pair(3, 5, 8, r), cit::CitParams<double>::init(8, 1, "cit"));
  EXPECT_EQ(out.cls.shape(), (Shape{3, 5, 8}));
  EXPECT_EQ(out.loc.shape(), (Shape{3, 5, 8}));
}

TEST(CitBlock, SwappingBranchesAndParamsSwapsOutputs) {
  Rng r(11);
  const auto p = cit::CitParams<double>::init(6, 9, "cit");
  const auto pair = random_pair(3, 3, 6, r);
  const auto out = cit::cit_block<double>(pair, p);
  const cit::CitParams<double> swapped_p{p.loc, p.cls};
  const auto swapped = cit::cit_block<double>({pair.loc, pair.cls}, swapped_p);
  EXPECT_EQ(swapped.cls.vec(), out.loc.vec());
  EXPECT_EQ(swapped.loc.vec(), out.cls.vec());
}

TEST(CitBlock, BothAttentionsReadTheSameEncodedPair) {
  Rng r(12);
  const auto p = cit::CitParams<double>::init(4, 2, "cit");
  const auto pair = random_pair(3, 3, 4, r);
  const auto out = cit::cit_block<double>(pair, p);
  const auto ec = cit::cpe<double>(pair.cls, p.cls.cpe_weight, p.cls.cpe_bias);
  const auto el = cit::cpe<double>(pair.loc, p.loc.cpe_weight, p.loc.cpe_bias);
  const auto lc = cit::leb<double>(cit::cca<double>(ec, el, p, cit::Direction::to_cls), p.cls);
  auto loc_p = p.loc;
  const auto ll = cit::leb<double>(cit::cca<double>(ec, el, p, cit::Direction::to_loc), loc_p);
  for (std::size_t i = 0; i < out.cls.size(); ++i) {
    EXPECT_EQ(out.cls[i], ec[i] + lc[i]);
    EXPECT_EQ(out.loc[i], el[i] + ll[i]);
  }
}

TEST(Invariants, CitZeroValuePassthrough) {
  const auto r = invariants::cit_zero_value_passthrough(0);
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST(Cit, Gradcheck) {
  gradcheck::Options opt;
  opt.trials = 10;
  for (const auto& rep : gradcheck::run_module("cit", opt)) EXPECT_TRUE(rep.pass) << rep.json_line();
}
