#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "unihead/cit.hpp"
#include "unihead/dat.hpp"
#include "unihead/head.hpp"
#include "unihead/numkit/init.hpp"
#include "unihead/numkit/rng.hpp"

// Structural properties of the blocks, each checked on seeded random inputs.

namespace unihead::invariants {

struct Result {
  std::string name;
  bool pass = true;
  std::size_t trials = 0;
  double max_deviation = 0;  // 0 for checks that require bitwise equality
  std::string detail;
};

namespace detail {

inline Tensor<double> rnd(Shape s, Rng& rng, double lo = -2, double hi = 2) {
  return init::uniform<double>(std::move(s), lo, hi, rng);
}

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

inline double max_rel(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::fabs(a[i] - b[i]), s = std::fabs(b[i]);
    m = std::max(m, s < 1e-8 ? d : d / s);
  }
  return m;
}

inline void fail(Result& r, std::string why) {
  if (r.pass) r.detail = std::move(why);
  r.pass = false;
}

}  // namespace detail

/// Horizontal stripes of width 1 (before CAB): row i of the output ignores every
/// other row. Checked by rewriting all rows != i and comparing row i bitwise.
/// The vertical axis is checked the same way over columns.
inline Result stripe_independence(std::uint64_t seed, std::size_t trials = 5) {
  Result r;
  r.name = "stripe independence (s=1, pre-CAB)";
  for (std::size_t trial = 0; trial < trials; ++trial) {
    Rng rng = stream_for(seed, "stripe-independence#" + std::to_string(trial));
    const std::size_t h = 2 + rng.index(5), w = 2 + rng.index(5), c = 8;
    const auto p = dat::EdaParams<double>::init(c, rng.next_u64(), "eda");
    const auto x = detail::rnd({h, w, c}, rng);
    for (auto axis : {dat::Axis::horizontal, dat::Axis::vertical}) {
      const bool horiz = axis == dat::Axis::horizontal;
      const auto base = dat::axial_attention<double>(x, p, {axis, 1}).first;
      const std::size_t n_lines = horiz ? h : w;
      for (std::size_t keep = 0; keep < n_lines; ++keep) {
        auto y = x;
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j)
            if ((horiz ? i : j) != keep)
              for (std::size_t k = 0; k < c; ++k) y[(i * w + j) * c + k] = rng.uniform(-2, 2);
        const auto out = dat::axial_attention<double>(y, p, {axis, 1}).first;
        const std::size_t hc = c / 2;
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j) {
            if ((horiz ? i : j) != keep) continue;
            for (std::size_t k = 0; k < hc; ++k) {
              const std::size_t at = (i * w + j) * hc + k;
              if (out[at] != base[at]) {
                detail::fail(r, std::string(dat::axis_name(axis)) + " line " + std::to_string(keep) + " changed");
                r.max_deviation = std::max(r.max_deviation, std::fabs(out[at] - base[at]));
              }
            }
          }
      }
    }
    ++r.trials;
  }
  return r;
}

/// With CAB zeroed, EDA commutes with row permutations and with column permutations.
/// Reduction order inside a permuted column differs, hence a 1e-12 tolerance.
inline Result permutation_equivariance(std::uint64_t seed, std::size_t trials = 5, double tol = 1e-12) {
  Result r;
  r.name = "permutation equivariance (CAB disabled)";
  for (std::size_t trial = 0; trial < trials; ++trial) {
    Rng rng = stream_for(seed, "permutation#" + std::to_string(trial));
    const std::size_t h = 2 + rng.index(5), w = 2 + rng.index(5), c = 8;
    auto p = dat::EdaParams<double>::init(c, rng.next_u64(), "eda");
    p.cab_h_weight.fill(0);
    p.cab_h_bias.fill(0);
    p.cab_v_weight.fill(0);
    p.cab_v_bias.fill(0);
    const auto x = detail::rnd({h, w, c}, rng);
    const auto fx = dat::eda<double>(x, p, 1);
    for (bool rows : {true, false}) {
      std::vector<std::size_t> perm(rows ? h : w);
      std::iota(perm.begin(), perm.end(), 0);
      for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
      // (P x)[i] = x[perm[i]] along the permuted axis
      auto permute = [&](const Tensor<double>& t) {
        Tensor<double> out(t.shape());
        const std::size_t cc = t.dim(2);
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j) {
            const std::size_t si = rows ? perm[i] : i, sj = rows ? j : perm[j];
            for (std::size_t k = 0; k < cc; ++k) out[(i * w + j) * cc + k] = t[(si * w + sj) * cc + k];
          }
        return out;
      };
      const auto lhs = dat::eda<double>(permute(x), p, 1);
      const auto rhs = permute(fx);
      const double dev = detail::max_rel(lhs.data(), rhs.data());
      r.max_deviation = std::max(r.max_deviation, dev);
      if (!(dev < tol)) detail::fail(r, std::string(rows ? "row" : "column") + " permutation deviates by " + std::to_string(dev));
    }
    ++r.trials;
  }
  return r;
}

/// W_O = 0 makes the DAT block the identity (bitwise).
inline Result residual_identity(std::uint64_t seed, std::size_t trials = 5) {
  Result r;
  r.name = "residual identity (W_O = 0)";
  for (std::size_t trial = 0; trial < trials; ++trial) {
    Rng rng = stream_for(seed, "residual#" + std::to_string(trial));
    const std::size_t h = 2 + rng.index(5), w = 2 + rng.index(5), c = 8;
    auto p = dat::DatParams<double>::init(c, false, rng.next_u64(), "dat");
    p.eda.wo.fill(0);
    const auto x = detail::rnd({h, w, c}, rng);
    const auto y = dat::dat_block<double>(x, p, 1);
    if (!detail::bitwise_equal(y.data(), x.data())) detail::fail(r, "dat_block(x) != x");
    ++r.trials;
  }
  return r;
}

/// Zero value projections and LEB biases: the block reduces to the CPE residual of each branch.
inline Result cit_zero_value_passthrough(std::uint64_t seed, std::size_t trials = 5) {
  Result r;
  r.name = "CIT zero-value passthrough";
  for (std::size_t trial = 0; trial < trials; ++trial) {
    Rng rng = stream_for(seed, "cit-passthrough#" + std::to_string(trial));
    const std::size_t h = 1 + rng.index(6), w = 1 + rng.index(6), c = 8;
    auto p = cit::CitParams<double>::init(c, rng.next_u64(), "cit");
    for (auto* b : {&p.cls, &p.loc}) {
      b->cpe_bias = detail::rnd({c}, rng, -0.5, 0.5);
      b->wv.fill(0);
      b->leb_in_bias.fill(0);
      b->leb_mid_bias.fill(0);
      b->leb_out_bias.fill(0);
    }
    const cit::BranchPair<double> in{FeatureMap<double>(detail::rnd({h, w, c}, rng)), FeatureMap<double>(detail::rnd({h, w, c}, rng))};
    const auto out = cit::cit_block<double>(in, p);
    const auto ec = cit::cpe<double>(in.cls, p.cls.cpe_weight, p.cls.cpe_bias);
    const auto el = cit::cpe<double>(in.loc, p.loc.cpe_weight, p.loc.cpe_bias);
    if (!detail::bitwise_equal(out.cls.data(), ec.data())) detail::fail(r, "cls branch != cpe(cls)");
    if (!detail::bitwise_equal(out.loc.data(), el.data())) detail::fail(r, "loc branch != cpe(loc)");
    ++r.trials;
  }
  return r;
}

/// multi_level_forward equals forward applied to each level, bitwise.
inline Result level_independence(std::uint64_t seed, std::size_t trials = 2) {
  Result r;
  r.name = "level independence (multi-level forward)";
  for (std::size_t trial = 0; trial < trials; ++trial) {
    Rng rng = stream_for(seed, "levels#" + std::to_string(trial));
    HeadConfig cfg;
    cfg.C = 8;
    cfg.num_classes = 3;
    cfg.seed = rng.next_u64();
    const Head<double> head(cfg);
    std::vector<FeatureMap<double>> pyramid;
    for (std::size_t side : {8, 4, 2}) pyramid.push_back(synthetic_input<double>(side, side + 1, cfg.C, rng.next_u64()));
    const auto all = head.multi_level_forward(pyramid);
    for (std::size_t i = 0; i < pyramid.size(); ++i) {
      // reversed order so a level cannot lean on state left by its predecessor
      const std::size_t l = pyramid.size() - 1 - i;
      const auto one = head.forward(pyramid[l]);
      if (!detail::bitwise_equal(all[l].cls_logits.data(), one.cls_logits.data()) ||
          !detail::bitwise_equal(all[l].box_deltas.data(), one.box_deltas.data())) {
        detail::fail(r, "level " + std::to_string(l) + " differs from a standalone forward");
      }
    }
    ++r.trials;
  }
  return r;
}

inline std::vector<Result> all(std::uint64_t seed) {
  return {stripe_independence(seed), permutation_equivariance(seed), residual_identity(seed), cit_zero_value_passthrough(seed),
          level_independence(seed)};
}

}  // namespace unihead::invariants
