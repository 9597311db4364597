#include <gtest/gtest.h>

#include <cmath>

#include "unihead.hpp"

using namespace unihead;

namespace {

Tensor<double> rnd(Shape s, Rng& r, double lo = -1, double hi = 1) { return init::uniform<double>(std::move(s), lo, hi, r); }

deform::DeformParams<double> random_params(std::size_t ci, std::size_t co, Rng& r) {
  deform::DeformParams<double> p;
  p.conv_weight = rnd({co, ci, 3, 3}, r);
  p.conv_bias = rnd({co}, r);
  p.predictor_weight = rnd({deform::kPredictorChannels, ci, 3, 3}, r, -0.1, 0.1);
  p.predictor_bias = rnd({deform::kPredictorChannels}, r, -0.5, 0.5);
  return p;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Deform, TapsAreRasterOrder) {
  EXPECT_EQ(deform::tap_offset(0), std::make_pair(-1, -1));
  EXPECT_EQ(deform::tap_offset(4), std::make_pair(0, 0));
  EXPECT_EQ(deform::tap_offset(5), std::make_pair(0, 1));
  EXPECT_EQ(deform::tap_offset(8), std::make_pair(1, 1));
}

TEST(Deform, ZeroOffsetsUnitScalesIsPlainConvolution) {
  Rng r(1);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = random_params(3, 4, r);
    const auto x = rnd({5, 6, 3}, r);
    const deform::OffsetField<double> f{Tensor<double>({5, 6, 9, 2}), Tensor<double>({5, 6, 9}, 1.0)};
    const auto got = deform::deform_conv<double>(x, f, p);
    const auto ref = kernels::conv2d<double>(x, p.conv_weight, p.conv_bias);
    EXPECT_LT(max_abs_diff(got, ref), 1e-13);
  }
}

TEST(Deform, MatchesLiteralSamplingSum) {
  checks::TrialOptions opt;
  opt.trials = 20;
  for (const auto& rep : checks::eq1(opt)) EXPECT_TRUE(rep.pass) << rep.json_line();
}

TEST(Deform, OracleCatchesTransposedTaps) {
  // a kernel read as (kx, ky) instead of (ky, kx) must not pass
  Rng r(2);
  const auto p = random_params(2, 2, r);
  const auto x = rnd({4, 4, 2}, r);
  const deform::OffsetField<double> f{rnd({4, 4, 9, 2}, r, -0.7, 0.7), rnd({4, 4, 9}, r, 0, 1)};
  auto wt = p.conv_weight;
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = 0; b < 3; ++b) wt[((o * 2 + c) * 3 + a) * 3 + b] = p.conv_weight[((o * 2 + c) * 3 + b) * 3 + a];
  const auto got = deform::deform_conv<double>(x, f, p);
  const auto wrong = oracle::naive_deform_conv(x, wt, p.conv_bias, f.offsets, f.scales);
  oracle::ErrorStats st("mutant", 1e-12);
  st.add(got.data(), wrong.data());
  EXPECT_FALSE(st.report().pass);
}

TEST(Deform, OracleCatchesOffByOneSample) {
  Rng r(3);
  const auto p = random_params(2, 3, r);
  const auto x = rnd({5, 5, 2}, r);
  auto offsets = rnd({5, 5, 9, 2}, r, -0.7, 0.7);
  const auto scales = rnd({5, 5, 9}, r, 0, 1);
  const auto got = deform::deform_conv<double>(x, {offsets, scales}, p);
  for (std::size_t i = 0; i < offsets.size(); i += 2) offsets[i] += 1.0;  // shift every dy
  const auto wrong = oracle::naive_deform_conv(x, p.conv_weight, p.conv_bias, offsets, scales);
  EXPECT_GT(max_abs_diff(got, wrong), 1e-3);
}

TEST(Deform, ZeroOffsetOutputIsLocalToNeighbourhood) {
  Rng r(4);
  const auto p = random_params(2, 3, r);
  auto x = rnd({7, 7, 2}, r);
  const deform::OffsetField<double> f{Tensor<double>({7, 7, 9, 2}), rnd({7, 7, 9}, r, 0, 1)};
  const auto base = deform::deform_conv<double>(x, f, p);
  // perturb one pixel; only its 3x3 neighbourhood may change
  const std::size_t py = 3, px = 2;
  for (std::size_t c = 0; c < 2; ++c) x[(py * 7 + px) * 2 + c] += 1.0;
  const auto moved = deform::deform_conv<double>(x, f, p);
  for (std::size_t y = 0; y < 7; ++y)
    for (std::size_t xx = 0; xx < 7; ++xx) {
      const bool near = std::abs(int(y) - int(py)) <= 1 && std::abs(int(xx) - int(px)) <= 1;
      for (std::size_t o = 0; o < 3; ++o) {
        const std::size_t i = (y * 7 + xx) * 3 + o;
        if (!near) {
          EXPECT_EQ(base[i], moved[i]) << y << "," << xx;
        }
      }
    }
}

TEST(Deform, ModulationScalesContributionLinearly) {
  Rng r(5);
  auto p = random_params(3, 2, r);
  const auto x = rnd({4, 5, 3}, r);
  const auto offsets = rnd({4, 5, 9, 2}, r, -1.2, 1.2);
  const auto m = rnd({4, 5, 9}, r, 0, 1);
  auto half = m;
  for (auto& v : half.vec()) v *= 0.5;
  const auto full_out = deform::deform_conv<double>(x, {offsets, m}, p);
  const auto half_out = deform::deform_conv<double>(x, {offsets, half}, p);
  const auto zero_out = deform::deform_conv<double>(x, {offsets, Tensor<double>(m.shape())}, p);
  for (std::size_t i = 0; i < full_out.size(); ++i) {
    const double b = p.conv_bias[i % 2];
    EXPECT_EQ(zero_out[i], b);
    EXPECT_NEAR(half_out[i] - b, 0.5 * (full_out[i] - b), 1e-13);
  }
}

TEST(Deform, FractionalOffsetInterpolates) {
  // one channel, identity centre tap: output = sample at p + offset of tap 4
  deform::DeformParams<double> p;
  p.conv_weight = Tensor<double>({1, 1, 3, 3});
  p.conv_weight[4] = 1;
  p.conv_bias = Tensor<double>({1});
  const FeatureMap<double> x(2, 2, 1, {0, 1, 2, 3});
  Tensor<double> off({2, 2, 9, 2});
  off[(0 * 9 + 4) * 2] = 0.5;
  off[(0 * 9 + 4) * 2 + 1] = 0.5;
  const auto y = deform::deform_conv<double>(x, {off, Tensor<double>({2, 2, 9}, 1.0)}, p);
  EXPECT_DOUBLE_EQ(y[0], 1.5);
  EXPECT_DOUBLE_EQ(y[1], 1.0);
  EXPECT_DOUBLE_EQ(y[3], 3.0);
}

TEST(Deform, ZeroPredictorGivesZeroOffsetsAndHalfScales) {
  const auto p = deform::DeformParams<double>::init(4, 4, 9, "dp");
  Rng r(6);
  const auto x = rnd({3, 4, 4}, r);
  const auto f = deform::predict_offsets<double>(x, p);
  EXPECT_EQ(f.offsets.shape(), (Shape{3, 4, 9, 2}));
  for (double v : f.offsets.vec()) EXPECT_EQ(v, 0);
  for (double v : f.scales.vec()) EXPECT_EQ(v, 0.5);
  const auto y = deform::dp_block<double>(x, p);
  const auto conv = kernels::conv2d<double>(x, p.conv_weight, p.conv_bias);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], std::max(0.0, 0.5 * conv[i]), 1e-14);
}

TEST(Deform, ShapeErrors) {
  Rng r(7);
  const auto p = random_params(3, 2, r);
  const auto x = rnd({4, 4, 2}, r);  // wrong channel count
  EXPECT_THROW(deform::dp_block<double>(x, p), ShapeError);
  const auto x3 = rnd({4, 4, 3}, r);
  const deform::OffsetField<double> bad{Tensor<double>({4, 3, 9, 2}), Tensor<double>({4, 4, 9})};
  EXPECT_THROW(deform::deform_conv<double>(x3, bad, p), ShapeError);
}

TEST(Deform, Gradcheck) {
  gradcheck::Options opt;
  opt.trials = 20;
  const auto reps = gradcheck::run_module("deform", opt);
  EXPECT_EQ(reps.size(), 20u);
  for (const auto& rep : reps) EXPECT_TRUE(rep.pass) << rep.json_line();
}
