#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <thread>

#include "unihead.hpp"

using namespace unihead;

namespace {

Tensor<double> rnd(Shape s, std::uint64_t seed, double lo = -1, double hi = 1) {
  Rng r(seed);
  return init::uniform<double>(std::move(s), lo, hi, r);
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("unihead_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(Tensor, LengthMustMatchShape) {
  EXPECT_THROW(Tensor<double>({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_NO_THROW(Tensor<double>({2, 3}, std::vector<double>(6)));
  EXPECT_THROW(FeatureMap<double>(0, 2, 2), ShapeError);
  EXPECT_THROW(FeatureMap<double>(Tensor<double>({2, 2})), ShapeError);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    if (i == 0) {
      EXPECT_NE(x, c.next_u64());
    }
  }
}

TEST(Rng, KnownSplitMix64Values) {
  // reference values of SplitMix64 seeded with 0
  Rng r(0);
  EXPECT_EQ(r.next_u64(), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(r.next_u64(), 0x6E789E6AA1B965F4ULL);
}

TEST(Rng, NamedStreamsAreIndependentOfDrawOrder) {
  Rng a = stream_for(5, "w1");
  Rng b = stream_for(5, "w1");
  Rng other = stream_for(5, "w2");
  EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(stream_for(5, "w1").next_u64(), other.next_u64());
}

TEST(Matmul, IdentityAndHandArithmetic) {
  Matrix<double> eye(3, 3);
  for (int i = 0; i < 3; ++i) eye(i, i) = 1;
  Matrix<double> m(3, 3, rnd({9}, 1).vec());
  const auto r = kernels::matmul(eye, m);
  EXPECT_EQ(r.vec(), m.vec());

  Matrix<double> a(2, 2, {1, 2, 3, 4});
  Matrix<double> b(2, 1, {0, 1});
  const auto ab = kernels::matmul(a, b);
  EXPECT_EQ(ab.vec(), (std::vector<double>{2, 4}));
}

TEST(Matmul, MatchesTripleLoop) {
  Matrix<double> a(5, 7, rnd({35}, 2).vec());
  Matrix<double> b(7, 3, rnd({21}, 3).vec());
  const auto got = kernels::matmul(a, b);
  const auto ref = oracle::naive_matmul(a, b);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_LT(oracle::rel_err(got[i], ref[i]), 1e-13);
}

TEST(Matmul, DimensionMismatchNamesBothShapes) {
  Matrix<double> a(2, 3), b(2, 3);
  try {
    kernels::matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
}

TEST(Softmax, Examples) {
  const std::vector<double> a{1, 1, 1};
  for (double v : kernels::softmax<double>(a)) EXPECT_NEAR(v, 1.0 / 3, 1e-15);
  const std::vector<double> one{123.4};
  EXPECT_EQ(kernels::softmax<double>(one)[0], 1.0);
  const std::vector<double> big{1000, 0};
  const auto s = kernels::softmax<double>(big);
  EXPECT_NEAR(s[0], 1, 1e-12);
  EXPECT_NEAR(s[1], 0, 1e-12);
  EXPECT_TRUE(std::isfinite(s[0]) && std::isfinite(s[1]));
  EXPECT_THROW(kernels::softmax<double>(std::vector<double>{}), ShapeError);
}

TEST(Softmax, ShiftInvariance) {
  const auto v = rnd({9}, 4, -5, 5);
  auto shifted = v;
  for (auto& x : shifted.vec()) x += 37.5;
  const auto a = kernels::softmax<double>(v.data());
  const auto b = kernels::softmax<double>(shifted.data());
  double sum = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NEAR(a[i], b[i], 1e-12);
    sum += a[i];
  }
  EXPECT_NEAR(sum, 1, 1e-12);
}

TEST(Bilinear, Examples) {
  FeatureMap<double> x(2, 2, 1, {0, 1, 2, 3});
  EXPECT_DOUBLE_EQ(kernels::bilinear_sample<double>(x, 0.5, 0.5)[0], 1.5);
  EXPECT_DOUBLE_EQ(kernels::bilinear_sample<double>(x, 1, 0)[0], 2);
  EXPECT_DOUBLE_EQ(kernels::bilinear_sample<double>(x, 0, 1)[0], 1);
  const auto y = rnd({3, 4, 5}, 5);
  for (double v : kernels::bilinear_sample<double>(y, -5, -5)) EXPECT_EQ(v, 0);
}

TEST(Bilinear, Linearity) {
  const auto x = rnd({4, 4, 3}, 6), y = rnd({4, 4, 3}, 7);
  const double alpha = 0.7, beta = -1.3;
  Tensor<double> mix(x.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * x[i] + beta * y[i];
  Rng r(8);
  for (int t = 0; t < 20; ++t) {
    const double py = r.uniform(-1.5, 4.5), px = r.uniform(-1.5, 4.5);
    const auto a = kernels::bilinear_sample<double>(mix, py, px);
    const auto bx = kernels::bilinear_sample<double>(x, py, px);
    const auto by = kernels::bilinear_sample<double>(y, py, px);
    for (std::size_t c = 0; c < a.size(); ++c) EXPECT_NEAR(a[c], alpha * bx[c] + beta * by[c], 1e-12);
  }
}

TEST(Bilinear, PartlyOutsideUsesZeroPadding) {
  FeatureMap<double> x(1, 1, 1, {4.0});
  // half a cell left of the only pixel: blend of 0 and 4
  EXPECT_DOUBLE_EQ(kernels::bilinear_sample<double>(x, 0, -0.5)[0], 2.0);
}

TEST(Dwconv, IdentityKernels) {
  const auto x = rnd({4, 5, 3}, 9);
  const Tensor<double> ones({3, 1, 1}, 1.0), zero_b({3});
  EXPECT_EQ(kernels::dwconv<double>(x, ones, zero_b).vec(), x.vec());
  Tensor<double> center({3, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) center[c * 9 + 4] = 1;
  EXPECT_EQ(kernels::dwconv<double>(x, center, zero_b).vec(), x.vec());
}

TEST(Dwconv, MatchesSlidingWindowOracle) {
  const auto x = rnd({4, 4, 2}, 10);
  const auto w = rnd({2, 3, 3}, 11), b = rnd({2}, 12);
  const auto got = kernels::dwconv<double>(x, w, b);
  const auto ref = oracle::naive_dwconv(x, w, b);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_LT(oracle::rel_err(got[i], ref[i]), 1e-13);
}

TEST(Dwconv, ChannelsDoNotMix) {
  auto x = rnd({4, 4, 3}, 13);
  const auto w = rnd({3, 3, 3}, 14), b = rnd({3}, 15);
  const auto base = kernels::dwconv<double>(x, w, b);
  for (std::size_t i = 1; i < x.size(); i += 3) x[i] += 1.0;  // channel 1 only
  const auto moved = kernels::dwconv<double>(x, w, b);
  for (std::size_t i = 0; i < base.size(); ++i) {
    if (i % 3 == 1) continue;
    EXPECT_EQ(base[i], moved[i]);
  }
}

TEST(Dwconv, EvenKernelIsConfigError) {
  EXPECT_THROW(kernels::dwconv<double>(rnd({3, 3, 2}, 1), Tensor<double>({2, 2, 2}), Tensor<double>({2})), ConfigError);
}

TEST(Conv2d, MatchesOracle) {
  const auto x = rnd({5, 4, 3}, 16);
  const auto w = rnd({2, 3, 3, 3}, 17), b = rnd({2}, 18);
  const auto got = kernels::conv2d<double>(x, w, b);
  const auto ref = oracle::naive_conv(x, w, b);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_LT(oracle::rel_err(got[i], ref[i]), 1e-13);
}

TEST(LayerNorm, Examples) {
  const Tensor<double> gain({2}, 1.0), bias({2});
  const auto y = kernels::layernorm<double>(Tensor<double>({1, 1, 2}, std::vector<double>{1, 3}), gain, bias, 1e-12);
  EXPECT_NEAR(y[0], -1, 1e-9);
  EXPECT_NEAR(y[1], 1, 1e-9);
  const auto z = kernels::layernorm<double>(Tensor<double>({1, 1, 2}, 5.0), gain, bias, 1e-5);
  EXPECT_EQ(z[0], 0);
  EXPECT_EQ(z[1], 0);
  EXPECT_THROW(kernels::layernorm<double>(Tensor<double>({1, 1, 2}, 5.0), gain, bias, 0.0), ConfigError);
}

TEST(LayerNorm, UnitGainZeroBiasNormalizes) {
  const auto x = rnd({3, 3, 8}, 19, -4, 4);
  const Tensor<double> gain({8}, 1.0), bias({8});
  const auto y = kernels::layernorm<double>(x, gain, bias, 1e-5);
  for (std::size_t p = 0; p < 9; ++p) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 8; ++c) mean += y[p * 8 + c];
    mean /= 8;
    for (std::size_t c = 0; c < 8; ++c) var += (y[p * 8 + c] - mean) * (y[p * 8 + c] - mean);
    var /= 8;
    EXPECT_NEAR(mean, 0, 1e-10);
    EXPECT_NEAR(var, 1, 1e-4);  // eps = 1e-5 shrinks the variance slightly
  }
  const auto y2 = kernels::layernorm<double>(x, gain, bias, 1e-14);
  for (std::size_t p = 0; p < 9; ++p) {
    double var = 0, mean = 0;
    for (std::size_t c = 0; c < 8; ++c) mean += y2[p * 8 + c] / 8;
    for (std::size_t c = 0; c < 8; ++c) var += (y2[p * 8 + c] - mean) * (y2[p * 8 + c] - mean) / 8;
    EXPECT_NEAR(var, 1, 1e-6);
  }
}

TEST(Tape, SumGradientIsOnes) {
  Tape<double> t;
  Var x = t.leaf(rnd({3, 3, 4}, 20));
  t.backward(ops::sum(t, x));
  const auto g = t.grad(x);
  for (double v : g.vec()) EXPECT_EQ(v, 1.0);
}

TEST(Tape, MatmulGradientIsOnesTimesBTransposed) {
  Tape<double> t;
  const auto a = rnd({4, 3}, 21), b = rnd({3, 5}, 22);
  Var va = t.leaf(a);
  Var vb = t.constant(b);
  t.backward(ops::sum(t, ops::linear(t, va, vb)));
  const auto g = t.grad(va);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < 3; ++k) {
      double expect = 0;
      for (std::size_t j = 0; j < 5; ++j) expect += b[k * 5 + j];
      EXPECT_NEAR(g[i * 3 + k], expect, 1e-14);
    }
}

TEST(Tape, NonScalarRootIsUsageError) {
  Tape<double> t;
  Var x = t.leaf(rnd({2, 2}, 23));
  EXPECT_THROW(t.backward(ops::relu(t, x)), UsageError);
  Tape<double> off(false);
  Var y = off.leaf(rnd({2}, 24));
  EXPECT_THROW(off.backward(ops::sum(off, y)), UsageError);
}

TEST(Tape, BackwardIsDeterministic) {
  auto run = [] {
    Tape<double> t;
    Var x = t.leaf(rnd({3, 3, 4}, 25));
    Var w = t.leaf(rnd({4, 3, 3}, 26));
    Var b = t.leaf(rnd({4}, 27));
    t.backward(ops::sum(t, ops::softmax_channels(t, ops::dwconv(t, x, w, b))));
    return std::make_pair(t.grad(x).vec(), t.grad(w).vec());
  };
  EXPECT_EQ(run(), run());
}

TEST(Gradcheck, EveryKernelPasses) {
  gradcheck::Options opt;
  opt.trials = 20;
  for (const auto& r : gradcheck::run_module("numkit", opt)) {
    EXPECT_TRUE(r.pass) << r.json_line();
    EXPECT_LT(r.max_rel_err, 1e-6);
  }
}

TEST(Gradcheck, WrongBackwardIsCaught) {
  // a softmax "gradient" that forgets the Jacobian's off-diagonal terms
  gradcheck::Case c("broken", {{"x", rnd({2, 2, 3}, 28), true}}, [](auto& t, const std::vector<Var>& v) {
    using S = gradcheck::detail::scalar_t<decltype(t)>;
    const Var x = v[0];
    Var y = ops::softmax_channels(t, x);
    if constexpr (std::is_same_v<S, double>) {
      // only the forward value is shared; the backward is replaced by y * g
      Tensor<double> val = t.value(y);
      return std::vector<Var>{t.push(val, {x}, [x, y](Tape<double>& tp, Var self) {
        const auto& g = tp.out_grad(self);
        const auto& yv = tp.value(y);
        if (auto* dx = tp.grad_sink(x))
          for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += yv[i] * g[i];
      })};
    } else {
      return std::vector<Var>{y};
    }
  });
  c.probe_seed = 3;
  Rng rng(1);
  EXPECT_FALSE(gradcheck::check(c, gradcheck::Options{}, rng).pass);
}

TEST(Kinks, MonitorSeesReluAndGridDistances) {
  KinkMonitor m;
  {
    KinkScope scope(m);
    Tape<double> t(false);
    ops::relu(t, t.constant(Tensor<double>({3}, std::vector<double>{-0.5, 0.25, 2})));
  }
  EXPECT_DOUBLE_EQ(m.margin(), 0.25);
  KinkMonitor m2;
  {
    KinkScope scope(m2);
    FeatureMap<double> x(3, 3, 1, 1.0);
    kernels::bilinear_sample<double>(x, 1.3, 0.95);
  }
  EXPECT_NEAR(m2.margin(), 0.05, 1e-12);
  EXPECT_EQ(KinkMonitor::active(), nullptr);
}

TEST(Uht, RoundTripIsBitExact) {
  const auto x = rnd({2, 3, 4}, 29);
  const auto bytes = uht::encode(x);
  const auto back = uht::decode(bytes);
  EXPECT_EQ(back.dtype, uht::DType::f64);
  EXPECT_EQ(back.values.shape(), x.shape());
  EXPECT_EQ(back.values.vec(), x.vec());
  EXPECT_EQ(uht::encode(back.values), bytes);

  const auto f = x.cast<float>();
  const auto fb = uht::decode(uht::encode(f));
  EXPECT_EQ(fb.dtype, uht::DType::f32);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(static_cast<float>(fb.values[i]), f[i]);
}

TEST(Uht, HeaderLayout) {
  const auto bytes = uht::encode(Tensor<double>({2, 1}, std::vector<double>{1.0, -2.0}));
  ASSERT_EQ(bytes.size(), 6u + 8u + 16u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "UHT1");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 2);
  EXPECT_EQ(bytes[6], 2);
  EXPECT_EQ(bytes[10], 1);
  // 1.0 = 0x3FF0000000000000 little-endian
  EXPECT_EQ(bytes[14 + 7], 0x3F);
  EXPECT_EQ(bytes[14 + 6], 0xF0);
}

TEST(Uht, MalformedInputsAreIoErrors) {
  auto bytes = uht::encode(rnd({2, 2}, 30));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(uht::decode(bad), IoError);
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(uht::decode(truncated), IoError);
  auto dtype = bytes;
  dtype[4] = 7;
  EXPECT_THROW(uht::decode(dtype), IoError);
  EXPECT_THROW(uht::load("/nonexistent/dir/x.uht"), IoError);
}

TEST(ParamStore, SaveLoadRoundTrip) {
  ParamStore<double> s;
  s.add("a/b.weight", rnd({3, 2}, 31));
  s.add("c.bias", rnd({4}, 32));
  EXPECT_THROW(s.add("c.bias", rnd({1}, 1)), ConfigError);
  EXPECT_EQ(s.total_params(), 10u);
  const auto dir = temp_dir("params");
  s.save(dir);
  const auto back = ParamStore<double>::load(dir);
  EXPECT_TRUE(back == s);
  EXPECT_THROW(back.get("missing"), ConfigError);
}

TEST(Init, GlorotIsSeededAndBounded) {
  const auto a = init::glorot<double>({8, 4}, 8, 4, 7, "w");
  const auto b = init::glorot<double>({8, 4}, 8, 4, 7, "w");
  const auto c = init::glorot<double>({8, 4}, 8, 4, 7, "v");
  EXPECT_EQ(a.vec(), b.vec());
  EXPECT_NE(a.vec(), c.vec());
  const double bound = std::sqrt(6.0 / 12.0);
  for (double v : a.vec()) EXPECT_LE(std::fabs(v), bound);
}

TEST(Digest, Sha256KnownVector) {
  EXPECT_EQ(sha256_hex(std::string("abc")), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(sha256_hex(std::string()), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Parallel, SlotsAreIndependentOfScheduling) {
  const auto one = parallel_map<std::size_t>(50, 1, [](std::size_t i) { return i * i; });
  const auto many = parallel_map<std::size_t>(50, 4, [](std::size_t i) { return i * i; });
  EXPECT_EQ(one, many);
  EXPECT_THROW(parallel_map<int>(10, 3,
                                 [](std::size_t i) -> int {
                                   if (i == 7) throw NumericError("boom");
                                   return 0;
                                 }),
               NumericError);
}

TEST(CostCounter, AttributesToInnermostScope) {
  CostCounter c;
  {
    CountingScope s(c);
    LayerScope outer("a");
    cost::macs(5);
    {
      LayerScope inner("b");
      cost::macs(7);
      cost::non_mac(2);
    }
  }
  EXPECT_EQ(c.get("a").macs, 5u);
  EXPECT_EQ(c.get("b").macs, 7u);
  EXPECT_EQ(c.get("b").non_mac, 2u);
  EXPECT_EQ(c.total().macs, 12u);
  cost::macs(100);  // no active counter: ignored
  EXPECT_EQ(c.total().macs, 12u);
}
