#include <gtest/gtest.h>

#include "unihead.hpp"

using namespace unihead;

namespace {

HeadConfig cfg(std::size_t c, std::size_t n_dat = 2, std::size_t n_cit = 2, std::size_t s = 1) {
  HeadConfig k;
  k.C = c;
  k.num_classes = 5;
  k.num_anchors = 2;
  k.n_dat = n_dat;
  k.n_cit = n_cit;
  k.stripe_width = s;
  return k;
}

}  // namespace

TEST(Profiler, EdaSpotValue) {
  HeadConfig k = cfg(16, 1, 1);
  const auto r = profiler::count(k, 8, 8);
  ASSERT_NE(r.find("dat0.eda"), nullptr);
  EXPECT_EQ(r.find("dat0.eda")->macs, 73728u);
  EXPECT_EQ(r.find("dat0.eda")->params, 896u);
  bool seen = false;
  for (const auto& c : r.closed_form_checks) {
    if (c.formula_name == "dat0.eda: HWC(3.5C+H+W)") {
      seen = true;
      EXPECT_TRUE(c.match);
      EXPECT_EQ(c.expected, 73728u);
    }
  }
  EXPECT_TRUE(seen);
  EXPECT_TRUE(r.failures().empty());
}

TEST(Profiler, EveryEdaLayerCarriesChecks) {
  const auto r = profiler::count(cfg(8, 3, 0, 2), 4, 8);
  std::size_t n = 0;
  for (const auto& c : r.closed_form_checks)
    if (c.formula_name.find(".eda:") != std::string::npos) ++n;
  EXPECT_EQ(n, 3u * 2);  // striped law + parameter law; the s=1 law only applies at width 1
  EXPECT_TRUE(r.failures().empty());
}

TEST(Profiler, EdaBreakdownEnumeratesTerms) {
  // 4 * (16 * 8) + 16 * 8 + 16 * 16
  EXPECT_EQ(profiler::eda_param_enumeration(16), 4u * 128 + 128 + 256);
  const auto b = profiler::eda_breakdown(8, 8, 16, 1);
  EXPECT_EQ(b.value_proj, 64u * 16 * 8);
  EXPECT_EQ(b.qk_proj, 4u * 64 * 16 * 8);
  EXPECT_EQ(b.out_proj, 64u * 256);
  // 8 stripes of 8 tokens per axis, q.k and a.v at width 8
  EXPECT_EQ(b.attention, 2u * 8 * 64 * 16);
}

TEST(Profiler, TotalsAreSumsOfEntries) {
  const auto r = profiler::count(cfg(8), 4, 4);
  std::uint64_t m = 0, p = 0;
  for (const auto& e : r.entries) {
    m += e.macs;
    p += e.params;
  }
  EXPECT_EQ(r.total_macs(), m);
  EXPECT_EQ(r.total_params(), p);
}

TEST(Profiler, ParamsMatchConstructedHead) {
  for (bool ffn : {false, true}) {
    HeadConfig k = cfg(8, 2, 3);
    k.ffn_enabled = ffn;
    EXPECT_EQ(profiler::count(k, 4, 4).total_params(), Head<double>(k).params().total_params());
  }
}

TEST(Profiler, SymbolicCountMatchesInstrumentedRun) {
  for (auto [c, h, w, s] : {std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>{8, 4, 4, 1},
                            {16, 8, 8, 1},
                            {8, 6, 4, 2},
                            {4, 3, 5, 1}}) {
    for (bool ffn : {false, true}) {
      HeadConfig k = cfg(c, 2, 2, s);
      k.ffn_enabled = ffn;
      const Head<double> head(k);
      const auto mism = profiler::diff(profiler::count(k, h, w), profiler::measure(head, h, w));
      for (const auto& m : mism)
        ADD_FAILURE() << m.layer << ": symbolic " << m.symbolic.macs << "/" << m.symbolic.non_mac << " measured "
                      << m.measured.macs << "/" << m.measured.non_mac;
    }
  }
}

TEST(Profiler, DiffReportsOneSidedLayers) {
  const auto r = profiler::count(cfg(4, 1, 1), 2, 2);
  auto measured = profiler::measure(Head<double>(cfg(4, 1, 1)), 2, 2);
  measured["ghost"] = {1, 0};
  measured["dp0.deform"].macs += 1;
  const auto d = profiler::diff(r, measured);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d[0].layer, "dp0.deform");
  EXPECT_EQ(d[1].layer, "ghost");
}

TEST(Profiler, CostIsLinearInImageArea) {
  for (std::size_t h : {2, 4, 8}) {
    const auto a = profiler::count(cfg(8, 1, 1), h, 4), b = profiler::count(cfg(8, 1, 1), 2 * h, 4);
    EXPECT_EQ(b.find("cit0.cca_cls")->macs, 2 * a.find("cit0.cca_cls")->macs);
    EXPECT_EQ(b.find("dp0.deform")->macs, 2 * a.find("dp0.deform")->macs);
  }
}

TEST(Profiler, ConfigErrorsPropagate) {
  EXPECT_THROW(profiler::count(cfg(7), 4, 4), ConfigError);
  EXPECT_THROW(profiler::count(cfg(8, 2, 2, 3), 4, 6), ConfigError);
  EXPECT_THROW(profiler::count(cfg(8), 0, 4), ConfigError);
}

TEST(Baseline, TowerConvParams) {
  const std::uint64_t c = 16;
  const auto r = profiler::parallel_head_baseline(c, 4, 1, 80, 8, 8);
  ASSERT_NE(r.find("tower.cls.0"), nullptr);
  EXPECT_EQ(r.find("tower.cls.0")->params, 9 * c * c + c);
  EXPECT_EQ(r.find("tower.box.3")->macs, 64 * 9 * c * c);
  EXPECT_EQ(r.find("tower.cls.4"), nullptr);
}

TEST(Baseline, DoublingConvsAddsTwoTowersOfConvs) {
  for (std::uint64_t c : {8, 16, 64}) {
    const auto four = profiler::parallel_head_baseline(c, 4, 9, 20, 8, 8);
    const auto eight = profiler::parallel_head_baseline(c, 8, 9, 20, 8, 8);
    EXPECT_EQ(eight.total_params() - four.total_params(), 4 * 2 * (9 * c * c + c));
  }
  EXPECT_EQ(profiler::parallel_head_baseline(8, 2, 1, 3, 4, 4).total_params() -
                profiler::parallel_head_baseline(8, 1, 1, 3, 4, 4).total_params(),
            2 * (9 * 64 + 8));
  EXPECT_THROW(profiler::parallel_head_baseline(8, 0, 1, 3, 4, 4), ConfigError);
}

TEST(Baseline, SharesPredictionLayersWithHead) {
  HeadConfig k = cfg(16);
  const auto head = profiler::count(k, 8, 8);
  const auto base = profiler::parallel_head_baseline(16, 4, k.num_anchors, k.num_classes, 8, 8);
  EXPECT_EQ(*head.find("pred.cls"), *base.find("pred.cls"));
  EXPECT_EQ(*head.find("pred.box"), *base.find("pred.box"));
}

TEST(Profiler, JsonRoundTrip) {
  const auto r = profiler::count(cfg(8), 4, 4);
  const auto j = profiler::to_json(r);
  EXPECT_EQ(j.at("flops_convention"), "1 MAC = 1 FLOP");
  EXPECT_EQ(j.at("totals").at("macs").get<std::uint64_t>(), r.total_macs());
  EXPECT_EQ(j.at("totals").at("flops_2x").get<std::uint64_t>(), 2 * r.total_macs());
  const auto back = profiler::report_from_json(j);
  EXPECT_EQ(back.entries, r.entries);
  EXPECT_EQ(profiler::to_json(back), j);
  EXPECT_EQ(nlohmann::json::parse(j.dump()), j);
}

TEST(Profiler, TableListsEveryLayerAndCheck) {
  const auto r = profiler::count(cfg(8, 1, 1), 4, 4);
  const auto table = profiler::format_table(r);
  for (const auto& e : r.entries) EXPECT_NE(table.find(e.name), std::string::npos) << e.name;
  EXPECT_NE(table.find("closed-form checks"), std::string::npos);
  EXPECT_EQ(table.find("MISMATCH"), std::string::npos);
}
