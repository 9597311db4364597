#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <type_traits>
#include <string>
#include <utility>
#include <vector>

#include "unihead/cit.hpp"
#include "unihead/dat.hpp"
#include "unihead/deform.hpp"
#include "unihead/head.hpp"
#include "unihead/numkit/init.hpp"
#include "unihead/numkit/kinks.hpp"
#include "unihead/numkit/parallel.hpp"
#include "unihead/numkit/rng.hpp"
#include "unihead/numkit/tape.hpp"
#include "unihead/oracle.hpp"

// Analytic tape gradients vs. central differences of the same forward.

namespace unihead::gradcheck {

using oracle::ErrorStats;
using oracle::OracleReport;

struct Options {
  double h = 1e-5;
  double tol = 1e-6;
  std::size_t trials = 10;
  std::size_t samples_per_param = 6;  // coordinates checked per parameter tensor; inputs are checked in full
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  // test points closer than this to a ReLU zero or an integer sampling
  // coordinate are redrawn; central differences straddle the kink otherwise
  double kink_margin = 1e-3;
  std::size_t max_redraws = 50;
};

struct Leaf {
  std::string name;
  Tensor<double> value;
  bool full = false;  // check every coordinate
};

template <typename U>
using ForwardOf = std::function<std::vector<Var>(Tape<U>&, const std::vector<Var>&)>;
using Forward = ForwardOf<double>;
// Central differences are taken in extended precision: the same forward on a
// long double tape, so rounding in the differenced loss sits far below the
// tolerance even for leaves whose whole gradient is tiny.
using Reference = ForwardOf<long double>;

/// Scalar loss = sum_i <output_i, probe_i>; plain_sum uses all-ones probes.
struct Case {
  std::string name;
  std::vector<Leaf> leaves;
  Forward forward;
  Reference reference;
  bool plain_sum = false;
  std::uint64_t probe_seed = 0;  // random probes of each output's shape otherwise

  Case() = default;
  // f must be callable with either tape type
  template <typename F>
  Case(std::string n, std::vector<Leaf> l, F f, bool plain = false)
      : name(std::move(n)), leaves(std::move(l)), forward(f), reference(f), plain_sum(plain) {}
};

namespace detail {

template <typename Tp>
struct scalar_of;
template <typename U>
struct scalar_of<Tape<U>> {
  using type = U;
};
// element type of a generic lambda's tape argument
template <typename Tp>
using scalar_t = typename scalar_of<std::remove_cvref_t<Tp>>::type;

inline Tensor<double> probe_for(const Case& c, std::size_t i, const Shape& s) {
  if (c.plain_sum) return Tensor<double>(s, 1.0);
  Rng r = stream_for(c.probe_seed, "probe" + std::to_string(i));
  return init::uniform<double>(s, -1, 1, r);
}

}  // namespace detail

/// Compares d loss / d leaf against central differences on the selected coordinates.
/// The numeric side differentiates the loss recentered at the base point,
/// sum_i <y_i(x) - y_i(x0), probe_i>: same gradient, but the final reduction
/// no longer rounds at the scale of the loss itself.
struct LeafError {
  std::string leaf;
  double max_rel_err;
  double scale;  // largest |numeric| among the checked coordinates
};

inline OracleReport check(const Case& c, const Options& opt, Rng& rng, std::vector<LeafError>* per_leaf = nullptr) {
  std::vector<Tensor<double>> grads, probes;
  {
    Tape<double> t(true);
    std::vector<Var> vars;
    for (const auto& l : c.leaves) vars.push_back(t.leaf(l.value, true));
    const auto outs = c.forward(t, vars);
    Var loss;
    for (std::size_t i = 0; i < outs.size(); ++i) {
      probes.push_back(detail::probe_for(c, i, t.value(outs[i]).shape()));
      Var term = ops::dot(t, outs[i], probes.back());
      loss = loss.valid() ? ops::add(t, loss, term) : term;
    }
    t.backward(loss);
    for (Var v : vars) grads.push_back(t.grad(v));
  }
  using R = long double;
  std::vector<Tensor<R>> ref_base;
  {
    Tape<R> t(false);
    std::vector<Var> vars;
    for (const auto& l : c.leaves) vars.push_back(t.constant(l.value.template cast<R>()));
    for (Var o : c.reference(t, vars)) ref_base.push_back(t.value(o));
  }
  auto eval = [&](std::size_t which, const std::vector<R>& flat) {
    Tape<R> t(false);
    std::vector<Var> vars;
    for (std::size_t i = 0; i < c.leaves.size(); ++i) {
      vars.push_back(i == which ? t.constant(Tensor<R>(c.leaves[i].value.shape(), flat)) : t.constant(c.leaves[i].value.template cast<R>()));
    }
    const auto outs = c.reference(t, vars);
    R f = 0;
    for (std::size_t i = 0; i < outs.size(); ++i) {
      const auto& y = t.value(outs[i]);
      for (std::size_t j = 0; j < y.size(); ++j) f += probes[i][j] * (y[j] - ref_base[i][j]);
    }
    return f;
  };
  ErrorStats st(c.name, opt.tol);
  for (std::size_t li = 0; li < c.leaves.size(); ++li) {
    const auto& leaf = c.leaves[li];
    const std::vector<R> base = leaf.value.template cast<R>().vec();
    std::vector<std::size_t> coords(base.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (!leaf.full && coords.size() > opt.samples_per_param) {
      for (std::size_t i = 0; i < opt.samples_per_param; ++i) std::swap(coords[i], coords[i + rng.index(coords.size() - i)]);
      coords.resize(opt.samples_per_param);
    }
    const auto f = [&](const std::vector<R>& flat) { return eval(li, flat); };
    std::vector<double> analytic, numeric;
    for (std::size_t i : coords) {
      analytic.push_back(grads[li][i]);
      numeric.push_back(static_cast<double>(oracle::central_difference<R>(f, base, i, static_cast<R>(opt.h))));
    }
    st.add_block(analytic, numeric);
    if (per_leaf) {
      ErrorStats one(leaf.name, opt.tol);
      one.add_block(analytic, numeric);
      double scale = 0;
      for (double n : numeric) scale = std::max(scale, std::fabs(n));
      per_leaf->push_back({c.name + ":" + leaf.name, one.report().max_rel_err, scale});
    }
  }
  st.trial();
  return st.report();
}

/// Smallest distance to a kink seen while evaluating the case's forward.
inline double kink_margin(const Case& c) {
  KinkMonitor m;
  KinkScope scope(m);
  Tape<double> t(false);
  std::vector<Var> vars;
  for (const auto& l : c.leaves) vars.push_back(t.constant(l.value));
  c.forward(t, vars);
  return m.margin();
}

namespace detail {

inline Tensor<double> rnd(Shape s, Rng& rng, double lo = -1, double hi = 1) {
  return init::uniform<double>(std::move(s), lo, hi, rng);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// cases. Each builder draws everything from `rng`, so a trial is a pure function of its seed.

inline std::vector<Case> numkit_cases(Rng& rng) {
  using detail::rnd;
  std::vector<Case> out;
  const std::uint64_t ps = rng.next_u64();
  out.push_back({"numkit/linear",
                 {{"x", rnd({3, 3, 4}, rng), true}, {"w", rnd({4, 5}, rng), true}, {"b", rnd({5}, rng), true}},
                 [](auto& t, const std::vector<Var>& v) { return std::vector<Var>{ops::linear(t, v[0], v[1], v[2])}; }});
  out.push_back({"numkit/softmax",
                 {{"x", rnd({3, 3, 4}, rng, -2, 2), true}},
                 [](auto& t, const std::vector<Var>& v) { return std::vector<Var>{ops::softmax_channels(t, v[0])}; }});
  {
    // sample points kept off integer coordinates (cell boundaries) and partly outside the map
    Tensor<double> pts({6, 2});
    for (auto& p : pts.data()) p = std::floor(rng.uniform(-1.5, 3.5)) + rng.uniform(0.05, 0.95);
    out.push_back({"numkit/bilinear",
                   {{"x", rnd({3, 3, 4}, rng), true}, {"points", pts, true}},
                   [](auto& t, const std::vector<Var>& v) {
                     return std::vector<Var>{ops::bilinear_sample(t, v[0], v[1])};
                   }});
  }
  out.push_back({"numkit/dwconv",
                 {{"x", rnd({3, 3, 4}, rng), true}, {"w", rnd({4, 3, 3}, rng), true}, {"b", rnd({4}, rng), true}},
                 [](auto& t, const std::vector<Var>& v) { return std::vector<Var>{ops::dwconv(t, v[0], v[1], v[2])}; }});
  out.push_back({"numkit/conv2d",
                 {{"x", rnd({3, 3, 4}, rng), true}, {"w", rnd({3, 4, 3, 3}, rng), true}, {"b", rnd({3}, rng), true}},
                 [](auto& t, const std::vector<Var>& v) { return std::vector<Var>{ops::conv2d(t, v[0], v[1], v[2])}; }});
  out.push_back({"numkit/layernorm",
                 {{"x", rnd({3, 3, 4}, rng, -2, 2), true}, {"gain", rnd({4}, rng, 0.5, 1.5), true}, {"bias", rnd({4}, rng), true}},
                 [](auto& t, const std::vector<Var>& v) {
                   return std::vector<Var>{ops::layernorm(t, v[0], v[1], v[2], detail::scalar_t<decltype(t)>(1e-5))};
                 }});
  out.push_back({"numkit/sigmoid",
                 {{"x", rnd({3, 3, 4}, rng, -3, 3), true}},
                 [](auto& t, const std::vector<Var>& v) { return std::vector<Var>{ops::sigmoid(t, v[0])}; }});
  for (auto& c : out) c.probe_seed = ps;
  return out;
}

inline std::vector<Case> deform_cases(Rng& rng) {
  using detail::rnd;
  const std::size_t h = 4, w = 4, c = 8;
  const std::uint64_t ps = rng.next_u64();
  auto p = deform::DeformParams<double>::init(c, c, rng.next_u64(), "dp0");
  p.predictor_weight = rnd(p.predictor_weight.shape(), rng, -0.08, 0.08);
  p.predictor_bias = rnd(p.predictor_bias.shape(), rng, -0.7, 0.7);
  p.conv_bias = rnd(p.conv_bias.shape(), rng, -0.5, 0.5);
  const auto x = rnd({h, w, c}, rng);
  auto leaves = [&] {
    std::vector<Leaf> l{{"x", x, true}};
    deform::DeformParams<double>::visit(p, "dp0", [&](const std::string& n, const Tensor<double>& t) { l.push_back({n, t, false}); });
    return l;
  };
  // leaf order: x, offset.weight, offset.bias, conv.weight, conv.bias
  auto vars = [](const std::vector<Var>& v) { return deform::DeformVars{"dp0", v[3], v[4], v[1], v[2]}; };
  std::vector<Case> out;
  out.push_back({"deform/predict+sample", leaves(), [=](auto& t, const std::vector<Var>& v) {
                   const auto dv = vars(v);
                   auto [off, sc] = deform::predict_offsets(t, v[0], dv);
                   return std::vector<Var>{deform::deform_layer(t, v[0], off, sc, dv)};
                 }});
  out.push_back({"deform/dp_block", leaves(), [=](auto& t, const std::vector<Var>& v) {
                   return std::vector<Var>{deform::dp_block(t, v[0], vars(v))};
                 }});
  for (auto& c : out) c.probe_seed = ps;
  return out;
}

inline std::vector<Case> dat_cases(Rng& rng) {
  using detail::rnd;
  const std::size_t c = 8;
  const std::uint64_t ps = rng.next_u64();
  std::vector<Case> out;
  for (bool ffn : {false, true}) {
    auto p = dat::DatParams<double>::init(c, ffn, rng.next_u64(), "dat0");
    p.norm_gain = rnd({c}, rng, 0.5, 1.5);
    p.norm_bias = rnd({c}, rng, -0.5, 0.5);
    p.eda.cab_h_bias = rnd({c / 2}, rng, -0.5, 0.5);
    p.eda.cab_v_bias = rnd({c / 2}, rng, -0.5, 0.5);
    std::vector<Leaf> leaves{{"x", rnd({4, 4, c}, rng, -2, 2), true}};
    dat::DatParams<double>::visit(p, "dat0", [&](const std::string& n, const Tensor<double>& t) { leaves.push_back({n, t, false}); });
    const std::vector<std::size_t> widths = ffn ? std::vector<std::size_t>{1} : std::vector<std::size_t>{1, 2};
    for (std::size_t s : widths) {
      // leaves after x follow DatParams::visit: norm.gain, norm.bias, 10 EDA tensors, then ffn tensors
      auto loss = [=](auto& t, const std::vector<Var>& v) {
        dat::DatVars dv;
        dv.prefix = "dat0";
        dv.norm_gain = v[1];
        dv.norm_bias = v[2];
        dv.eda = {"dat0", v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10], v[11], v[12]};
        dv.ffn_enabled = ffn;
        if (ffn) {
          dv.ffn_norm_gain = v[13];
          dv.ffn_norm_bias = v[14];
          dv.ffn_w1 = v[15];
          dv.ffn_b1 = v[16];
          dv.ffn_w2 = v[17];
          dv.ffn_b2 = v[18];
        }
        return std::vector<Var>{dat::dat_block(t, v[0], dv, s)};
      };
      out.push_back({std::string("dat/dat_block") + (ffn ? "+ffn" : "") + "/s" + std::to_string(s), leaves, loss});
    }
    if (!ffn) {
      auto eda_leaves = leaves;
      eda_leaves.erase(eda_leaves.begin() + 1, eda_leaves.begin() + 3);
      out.push_back({"dat/eda", eda_leaves, [=](auto& t, const std::vector<Var>& v) {
                       const dat::EdaVars ev{"dat0", v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10]};
                       return std::vector<Var>{dat::eda(t, v[0], ev, 1)};
                     }});
    }
  }
  for (auto& c : out) c.probe_seed = ps;
  return out;
}

inline std::vector<Case> cit_cases(Rng& rng) {
  using detail::rnd;
  const std::size_t c = 4;
  const std::uint64_t ps = rng.next_u64();
  auto p = cit::CitParams<double>::init(c, rng.next_u64(), "cit0");
  for (auto* b : {&p.cls, &p.loc}) {
    b->cpe_bias = rnd({c}, rng, -0.5, 0.5);
    b->leb_in_bias = rnd({c}, rng, -0.5, 0.5);
    b->leb_mid_bias = rnd({c}, rng, -0.5, 0.5);
    b->leb_out_bias = rnd({c}, rng, -0.5, 0.5);
  }
  std::vector<Leaf> leaves{{"cls", rnd({3, 3, c}, rng, -2, 2), true}, {"loc", rnd({3, 3, c}, rng, -2, 2), true}};
  cit::CitParams<double>::visit(p, "cit0", [&](const std::string& n, const Tensor<double>& t) { leaves.push_back({n, t, false}); });
  // 11 tensors per branch after the two inputs: cpe w/b, wq, wk, wv, leb in/mid/out w/b
  auto branch = [](const std::vector<Var>& v, std::size_t o) {
    return cit::BranchVars{v[o], v[o + 1], v[o + 2], v[o + 3], v[o + 4], v[o + 5], v[o + 6], v[o + 7], v[o + 8], v[o + 9], v[o + 10]};
  };
  auto all = [=](const std::vector<Var>& v) { return cit::CitVars{"cit0", branch(v, 2), branch(v, 13)}; };
  std::vector<Case> out;
  out.push_back({"cit/cpe", {leaves[0], leaves[2], leaves[3]}, [=](auto& t, const std::vector<Var>& v) {
                   return std::vector<Var>{cit::cpe(t, v[0], v[1], v[2])};
                 }});
  for (auto dir : {cit::Direction::to_cls, cit::Direction::to_loc}) {
    out.push_back({std::string("cit/cca/") + (dir == cit::Direction::to_cls ? "to_cls" : "to_loc"), leaves,
                   [=](auto& t, const std::vector<Var>& v) { return std::vector<Var>{cit::cca(t, v[0], v[1], all(v), dir)}; }});
  }
  {
    std::vector<Leaf> l{leaves[0]};
    for (std::size_t i = 7; i < 13; ++i) l.push_back(leaves[i]);
    out.push_back({"cit/leb", l, [=](auto& t, const std::vector<Var>& v) {
                     cit::BranchVars b{};
                     b.leb_in_weight = v[1];
                     b.leb_in_bias = v[2];
                     b.leb_mid_weight = v[3];
                     b.leb_mid_bias = v[4];
                     b.leb_out_weight = v[5];
                     b.leb_out_bias = v[6];
                     return std::vector<Var>{cit::leb(t, v[0], b)};
                   }});
  }
  out.push_back({"cit/cit_block", leaves, [=](auto& t, const std::vector<Var>& v) {
                   auto [a, b] = cit::cit_block(t, v[0], v[1], all(v));
                   return std::vector<Var>{a, b};
                 }});
  for (auto& c : out) c.probe_seed = ps;
  return out;
}

/// Head configs for end-to-end checks: C = 8, 3 classes, (n_dp, n_dat, n_cit) as given.
inline HeadConfig gradcheck_head_config(std::uint64_t seed, std::size_t n_dat = 2, std::size_t n_cit = 2) {
  HeadConfig cfg;
  cfg.C = 8;
  cfg.num_classes = 3;
  cfg.n_dat = n_dat;
  cfg.n_cit = n_cit;
  cfg.seed = seed;
  return cfg;
}

/// The head at double precision plus an exact long double copy for the reference side.
struct HeadPair {
  Head<double> d;
  Head<long double> ld;

  const Head<double>& on(const Tape<double>&) const { return d; }
  const Head<long double>& on(const Tape<long double>&) const { return ld; }
};

inline HeadPair gradcheck_head(const HeadConfig& cfg, Rng& rng) {
  using detail::rnd;
  Head<double> head(cfg);
  // the offset predictor starts at zero, which puts every sample exactly on a cell boundary
  for (auto& dp : head.dp()) {
    dp.predictor_weight = rnd(dp.predictor_weight.shape(), rng, -0.08, 0.08);
    dp.predictor_bias = rnd(dp.predictor_bias.shape(), rng, -0.7, 0.7);
    // a position whose channels ReLU to ~0 feeds LayerNorm a near-zero variance, where
    // the forward is stiff enough for h^2 truncation to dominate
    dp.conv_bias = rnd(dp.conv_bias.shape(), rng, 0.2, 0.6);
  }
  Head<long double> ld(cfg);
  const auto store = head.params();
  ld.visit([&](const std::string& n, Tensor<long double>& t) { t = store.get(n).template cast<long double>(); });
  return {std::move(head), std::move(ld)};
}

// Two cases: the default (1,2,2) stack differentiated w.r.t. its input, and a
// (1,1,1) stack w.r.t. its input and every parameter.
inline std::vector<Case> head_cases(Rng& rng) {
  using detail::rnd;
  std::vector<Case> out;
  {
    const auto heads = gradcheck_head(gradcheck_head_config(rng.next_u64()), rng);
    auto fwd = [heads](auto& t, const std::vector<Var>& v) {
      const auto& head = heads.on(t);
      Binder<detail::scalar_t<decltype(t)>> b(t, false);
      const auto g = head.graph(t, v[0], head.bind(b));
      return std::vector<Var>{g.cls, g.box};
    };
    out.emplace_back("head/(1,2,2)/input", std::vector<Leaf>{{"x", rnd({4, 4, 8}, rng, -2, 2), true}}, fwd, true);
  }
  {
    const auto heads = gradcheck_head(gradcheck_head_config(rng.next_u64(), 1, 1), rng);
    std::vector<Leaf> leaves{{"x", rnd({4, 4, 8}, rng, -2, 2), true}};
    heads.d.visit([&](const std::string& n, const Tensor<double>& t) { leaves.push_back({n, t, false}); });
    auto fwd = [heads](auto& t, const std::vector<Var>& v) {
      const auto& head = heads.on(t);
      std::map<std::string, Var> preset;
      std::size_t i = 1;
      head.visit([&](const std::string& n, const auto&) { preset[n] = v[i++]; });
      Binder<detail::scalar_t<decltype(t)>> b(t, std::move(preset));
      const auto g = head.graph(t, v[0], head.bind(b));
      return std::vector<Var>{g.cls, g.box};
    };
    out.emplace_back("head/(1,1,1)/all", leaves, fwd, true);
  }
  return out;
}

inline const std::vector<std::string>& module_names() {
  static const std::vector<std::string> names{"numkit", "deform", "dat", "cit", "head"};
  return names;
}

inline std::vector<Case> cases_for(const std::string& module, Rng& rng) {
  if (module == "numkit") return numkit_cases(rng);
  if (module == "deform") return deform_cases(rng);
  if (module == "dat") return dat_cases(rng);
  if (module == "cit") return cit_cases(rng);
  if (module == "head") return head_cases(rng);
  throw UsageError("unknown gradcheck module '" + module + "'");
}

/// Draws the cases for one trial, redrawing while any sits within opt.kink_margin of a kink.
inline std::vector<Case> draw_cases(const std::string& module, const Options& opt, Rng& rng, std::size_t* redraws = nullptr) {
  for (std::size_t attempt = 0;; ++attempt) {
    auto cases = cases_for(module, rng);
    double margin = std::numeric_limits<double>::infinity();
    for (const auto& c : cases) margin = std::min(margin, kink_margin(c));
    if (margin >= opt.kink_margin) {
      if (redraws) *redraws = attempt;
      return cases;
    }
    if (attempt >= opt.max_redraws)
      throw NumericError("gradcheck: no test point for " + module + " clear of kinks after " + std::to_string(attempt + 1) +
                         " draws");
  }
}

/// One report per trial. `redraws`, if given, receives the redraw count per trial.
inline std::vector<OracleReport> run_module(const std::string& module, const Options& opt,
                                            std::vector<std::size_t>* redraws = nullptr) {
  std::vector<std::size_t> rd(opt.trials);
  auto out = parallel_map<OracleReport>(opt.trials, opt.threads, [&](std::size_t i) {
    const std::string name = module + "/trial-" + std::to_string(i);
    Rng rng = stream_for(opt.seed, "gradcheck/" + name);
    ErrorStats st(name, opt.tol);
    for (const auto& c : draw_cases(module, opt, rng, &rd[i])) st.merge(check(c, opt, rng));
    st.trial();
    return st.report();
  });
  if (redraws) *redraws = std::move(rd);
  return out;
}

}  // namespace unihead::gradcheck
