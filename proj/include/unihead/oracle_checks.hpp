#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "unihead/cit.hpp"
#include "unihead/dat.hpp"
#include "unihead/deform.hpp"
#include "unihead/numkit/init.hpp"
#include "unihead/numkit/parallel.hpp"
#include "unihead/numkit/rng.hpp"
#include "unihead/oracle.hpp"

// Randomized production-vs-oracle comparisons, shared by the CLI and tests.

namespace unihead::checks {

using oracle::ErrorStats;
using oracle::OracleReport;

struct TrialOptions {
  std::size_t trials = 20;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

namespace detail {

inline Tensor<double> rand_tensor(Shape s, Rng& rng, double lo = -1, double hi = 1) {
  return init::uniform<double>(std::move(s), lo, hi, rng);
}

template <typename F>
OracleReport run(const std::string& name, double tol, const TrialOptions& opt, F&& one_trial) {
  // one_trial(rng) -> OracleReport for a single trial
  const auto per = parallel_map<OracleReport>(opt.trials, opt.threads, [&](std::size_t i) {
    Rng rng = stream_for(opt.seed, name + "#" + std::to_string(i));
    return one_trial(rng);
  });
  ErrorStats total(name, tol);
  for (const auto& r : per) {
    total.merge(r);
    total.trial();
  }
  return total.report();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// axial attention vs. masked full attention

inline OracleReport eda_mask_one(Rng& rng, dat::Axis axis, std::size_t s, double tol, std::size_t max_dim = 8) {
  // shapes from {2..max_dim}, divisible by s
  std::vector<std::size_t> dims;
  for (std::size_t d = 2; d <= max_dim; ++d)
    if (d % s == 0) dims.push_back(d);
  const std::size_t h = dims[rng.index(dims.size())], w = dims[rng.index(dims.size())];
  const std::size_t c = std::vector<std::size_t>{4, 8, 16}[rng.index(3)];
  const auto p = dat::EdaParams<double>::init(c, rng.next_u64(), "eda");
  const auto x = detail::rand_tensor({h, w, c}, rng, -2, 2);
  const dat::StripeSpec spec{axis, s};
  const auto [out, value_map] = dat::axial_attention<double>(x, p, spec);
  const bool horizontal = axis == dat::Axis::horizontal;
  const auto ref = oracle::full_attention_masked(Tensor<double>({h * w, c}, x.vec()), oracle::band_mask(h, w, horizontal, s),
                                                 horizontal ? p.wq_h : p.wq_v, horizontal ? p.wk_h : p.wk_v, p.wv_s);
  ErrorStats st("", tol);
  st.add(out.data(), ref.data());
  return st.report();
}

/// One report per (axis, stripe width) for s in {1, 2}.
inline std::vector<OracleReport> eda_mask(const TrialOptions& opt, double tol = 1e-10) {
  std::vector<OracleReport> out;
  for (auto axis : {dat::Axis::horizontal, dat::Axis::vertical}) {
    for (std::size_t s : {1, 2}) {
      const std::string name = std::string("eda-mask/") + dat::axis_name(axis) + "/s" + std::to_string(s);
      out.push_back(detail::run(name, tol, opt, [&](Rng& rng) { return eda_mask_one(rng, axis, s, tol); }));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// deformable convolution vs. the literal sampling sum

inline OracleReport eq1_one(Rng& rng, double tol, std::size_t max_dim = 8) {
  const std::size_t h = 1 + rng.index(max_dim), w = 1 + rng.index(max_dim);
  const std::size_t ci = 1 + rng.index(max_dim), co = 1 + rng.index(max_dim);
  deform::DeformParams<double> p;
  p.conv_weight = detail::rand_tensor({co, ci, 3, 3}, rng);
  p.conv_bias = detail::rand_tensor({co}, rng);
  const auto x = detail::rand_tensor({h, w, ci}, rng);
  // offsets reach past the border so zero padding is exercised
  const deform::OffsetField<double> field{detail::rand_tensor({h, w, 9, 2}, rng, -1.5, 1.5),
                                          detail::rand_tensor({h, w, 9}, rng, 0, 1)};
  const auto out = deform::deform_conv<double>(x, field, p);
  const auto ref = oracle::naive_deform_conv(x, p.conv_weight, p.conv_bias, field.offsets, field.scales);
  ErrorStats st("", tol);
  st.add(out.data(), ref.data());
  return st.report();
}

/// Zero offsets and unit scales against a plain 3x3 convolution.
inline OracleReport eq1_degenerate_one(Rng& rng, double tol, std::size_t max_dim = 8) {
  const std::size_t h = 1 + rng.index(max_dim), w = 1 + rng.index(max_dim);
  const std::size_t ci = 1 + rng.index(max_dim), co = 1 + rng.index(max_dim);
  deform::DeformParams<double> p;
  p.conv_weight = detail::rand_tensor({co, ci, 3, 3}, rng);
  p.conv_bias = detail::rand_tensor({co}, rng);
  const auto x = detail::rand_tensor({h, w, ci}, rng);
  const deform::OffsetField<double> field{Tensor<double>({h, w, 9, 2}), Tensor<double>({h, w, 9}, 1.0)};
  const auto out = deform::deform_conv<double>(x, field, p);
  const auto ref = oracle::naive_conv(x, p.conv_weight, p.conv_bias);
  ErrorStats st("", tol);
  st.add(out.data(), ref.data());
  return st.report();
}

inline std::vector<OracleReport> eq1(const TrialOptions& opt, double tol = 1e-12) {
  return {detail::run("eq1/deform-conv", tol, opt, [&](Rng& rng) { return eq1_one(rng, tol); }),
          detail::run("eq1/zero-offset-conv", tol, opt, [&](Rng& rng) { return eq1_degenerate_one(rng, tol); })};
}

// ---------------------------------------------------------------------------
// cross-task channel attention vs. the explicit C x C attention evaluation

inline oracle::CcaWeights cca_weights(const cit::CitParams<double>& p, cit::Direction dir) {
  const auto& tp = dir == cit::Direction::to_cls ? p.cls : p.loc;
  const auto& gp = dir == cit::Direction::to_cls ? p.loc : p.cls;
  return {gp.wq, tp.wk, gp.wk, tp.wv, gp.wv};
}

struct Eq6Case {
  Tensor<double> cls, loc;
  cit::CitParams<double> params;
  cit::Direction dir;
};

inline Eq6Case eq6_case(Rng& rng, std::size_t max_dim = 6, std::size_t max_c = 8) {
  const std::size_t h = 1 + rng.index(max_dim), w = 1 + rng.index(max_dim);
  const std::size_t c = 2 * (1 + rng.index(max_c / 2));
  Eq6Case k{detail::rand_tensor({h, w, c}, rng, -2, 2), detail::rand_tensor({h, w, c}, rng, -2, 2),
            cit::CitParams<double>::init(c, rng.next_u64(), "cit"),
            rng.index(2) ? cit::Direction::to_cls : cit::Direction::to_loc};
  return k;
}

inline OracleReport eq6_one(Rng& rng, double tol) {
  const auto k = eq6_case(rng);
  const auto out = cit::cca<double>(k.cls, k.loc, k.params, k.dir);
  const bool to_cls = k.dir == cit::Direction::to_cls;
  const auto ref = oracle::naive_cca(to_cls ? k.cls : k.loc, to_cls ? k.loc : k.cls, cca_weights(k.params, k.dir));
  ErrorStats st("", tol);
  st.add(out.data(), ref.data());
  return st.report();
}

/// |sum of each attention column - 1|
inline OracleReport eq6_columns_one(Rng& rng, double tol) {
  const auto k = eq6_case(rng);
  const auto a = cit::cca_attention<double>(k.cls, k.loc, k.params, k.dir);
  ErrorStats st("", tol);
  for (std::size_t j = 0; j < a.cols(); ++j) {
    double s = 0;
    for (std::size_t i = 0; i < a.rows(); ++i) s += a(i, j);
    st.add(s, 1.0);
  }
  return st.report();
}

inline std::vector<OracleReport> eq6(const TrialOptions& opt, double tol = 1e-10, double column_tol = 1e-12) {
  return {detail::run("eq6/cca", tol, opt, [&](Rng& rng) { return eq6_one(rng, tol); }),
          detail::run("eq6/column-sums", column_tol, opt, [&](Rng& rng) { return eq6_columns_one(rng, column_tol); })};
}

}  // namespace unihead::checks
