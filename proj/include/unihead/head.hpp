#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "unihead/cit.hpp"
#include "unihead/dat.hpp"
#include "unihead/deform.hpp"
#include "unihead/numkit/init.hpp"
#include "unihead/numkit/param_store.hpp"
#include "unihead/numkit/tape.hpp"
#include "unihead/numkit/tensor.hpp"

namespace unihead {

enum class Precision { f32, f64 };

struct HeadConfig {
  std::size_t C = 16;
  std::size_t n_dp = 1;
  std::size_t n_dat = 2;
  std::size_t n_cit = 2;
  std::size_t stripe_width = 1;
  std::size_t num_classes = 80;
  std::size_t num_anchors = 1;
  bool ffn_enabled = false;
  Precision precision = Precision::f64;
  std::uint64_t seed = 0;

  void validate() const {
    if (C == 0 || C % 2 != 0) throw ConfigError("config field 'C' must be a positive even integer, got " + std::to_string(C));
    if (stripe_width == 0) throw ConfigError("config field 'stripe_width' must be positive");
    if (num_classes == 0) throw ConfigError("config field 'num_classes' must be positive");
    if (num_anchors == 0) throw ConfigError("config field 'num_anchors' must be positive");
  }

  /// Stripe divisibility for an H x W input.
  void check_input(std::size_t h, std::size_t w) const {
    if (h % stripe_width != 0 || w % stripe_width != 0) {
      throw ConfigError("stripe_width " + std::to_string(stripe_width) + " does not divide input H=" + std::to_string(h) +
                        ", W=" + std::to_string(w) + " (divisibility required)");
    }
  }

  friend bool operator==(const HeadConfig&, const HeadConfig&) = default;
};

inline const char* precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

inline Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ConfigError("config field 'precision' must be \"f32\" or \"f64\", got \"" + s + "\"");
}

inline nlohmann::json to_json(const HeadConfig& c) {
  return {{"C", c.C},
          {"n_dp", c.n_dp},
          {"n_dat", c.n_dat},
          {"n_cit", c.n_cit},
          {"stripe_width", c.stripe_width},
          {"num_classes", c.num_classes},
          {"num_anchors", c.num_anchors},
          {"ffn_enabled", c.ffn_enabled},
          {"precision", precision_name(c.precision)},
          {"seed", c.seed}};
}

/// Missing keys keep their defaults; unknown keys and wrong types are config errors.
inline HeadConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known{"C",           "n_dp",        "n_dat",       "n_cit",     "stripe_width",
                                           "num_classes", "num_anchors", "ffn_enabled", "precision", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  HeadConfig c;
  auto count = [&](const char* key, std::size_t& out) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
      throw ConfigError(std::string("config field '") + key + "' must be a non-negative integer");
    }
    out = v.get<std::size_t>();
  };
  count("C", c.C);
  count("n_dp", c.n_dp);
  count("n_dat", c.n_dat);
  count("n_cit", c.n_cit);
  count("stripe_width", c.stripe_width);
  count("num_classes", c.num_classes);
  count("num_anchors", c.num_anchors);
  if (j.contains("ffn_enabled")) {
    if (!j.at("ffn_enabled").is_boolean()) throw ConfigError("config field 'ffn_enabled' must be a boolean");
    c.ffn_enabled = j.at("ffn_enabled").get<bool>();
  }
  if (j.contains("precision")) {
    if (!j.at("precision").is_string()) throw ConfigError("config field 'precision' must be a string");
    c.precision = parse_precision(j.at("precision").get<std::string>());
  }
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_unsigned() && !(j.at("seed").is_number_integer() && j.at("seed").get<std::int64_t>() >= 0)) {
      throw ConfigError("config field 'seed' must be a non-negative integer");
    }
    c.seed = j.at("seed").get<std::uint64_t>();
  }
  c.validate();
  return c;
}

template <typename T>
struct HeadOutput {
  FeatureMap<T> cls_logits;  // H x W x (A * num_classes)
  FeatureMap<T> box_deltas;  // H x W x (A * 4)
};

/// Prior-probability bias for the classification layer: -log((1 - 0.01) / 0.01).
inline double cls_prior_bias() { return -std::log((1.0 - 0.01) / 0.01); }

/// DP blocks -> DAT blocks -> per-branch 1x1 split -> CIT blocks -> 3x3 prediction convs.
/// Immutable once built apart from explicit parameter loading.
template <typename T>
class Head {
 public:
  struct Linear {
    Tensor<T> weight;  // C_in x C_out
    Tensor<T> bias;
  };
  struct Conv {
    Tensor<T> weight;  // C_out x C_in x 3 x 3
    Tensor<T> bias;
  };

  struct Vars {
    std::vector<deform::DeformVars> dp;
    std::vector<dat::DatVars> dat;
    Var split_cls_w, split_cls_b, split_loc_w, split_loc_b;
    std::vector<cit::CitVars> cit;
    Var pred_cls_w, pred_cls_b, pred_box_w, pred_box_b;
  };

  struct Graph {
    Var cls;
    Var box;
    std::vector<std::pair<std::string, Var>> trace;  // block outputs in execution order
  };

  explicit Head(HeadConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t c = cfg_.C;
    const std::uint64_t seed = cfg_.seed;
    for (std::size_t i = 0; i < cfg_.n_dp; ++i) dp_.push_back(deform::DeformParams<T>::init(c, c, seed, "dp" + std::to_string(i)));
    for (std::size_t i = 0; i < cfg_.n_dat; ++i)
      dat_.push_back(dat::DatParams<T>::init(c, cfg_.ffn_enabled, seed, "dat" + std::to_string(i)));
    split_cls_ = {init::glorot<T>({c, c}, c, c, seed, "split.cls.weight"), Tensor<T>({c})};
    split_loc_ = {init::glorot<T>({c, c}, c, c, seed, "split.loc.weight"), Tensor<T>({c})};
    for (std::size_t i = 0; i < cfg_.n_cit; ++i) cit_.push_back(cit::CitParams<T>::init(c, seed, "cit" + std::to_string(i)));
    const std::size_t nc = cls_channels(), nb = box_channels();
    pred_cls_ = {init::glorot<T>({nc, c, 3, 3}, c * 9, nc * 9, seed, "pred.cls.weight"),
                 Tensor<T>({nc}, static_cast<T>(cls_prior_bias()))};
    pred_box_ = {init::glorot<T>({nb, c, 3, 3}, c * 9, nb * 9, seed, "pred.box.weight"), Tensor<T>({nb})};
  }

  const HeadConfig& config() const { return cfg_; }
  std::size_t cls_channels() const { return cfg_.num_anchors * cfg_.num_classes; }
  std::size_t box_channels() const { return cfg_.num_anchors * 4; }

  std::vector<deform::DeformParams<T>>& dp() { return dp_; }
  std::vector<dat::DatParams<T>>& dat() { return dat_; }
  std::vector<cit::CitParams<T>>& cit() { return cit_; }
  const std::vector<deform::DeformParams<T>>& dp() const { return dp_; }
  const std::vector<dat::DatParams<T>>& dat() const { return dat_; }
  const std::vector<cit::CitParams<T>>& cit() const { return cit_; }

  /// f(name, tensor) over every parameter in module order.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  ParamStore<T> params() const {
    ParamStore<T> store;
    visit([&](const std::string& name, const Tensor<T>& t) { store.add(name, t); });
    return store;
  }

  /// Replaces every parameter from `store`; names and shapes must match exactly.
  void load(const ParamStore<T>& store) {
    std::size_t seen = 0;
    visit([&](const std::string& name, Tensor<T>& t) {
      const Tensor<T>& src = store.get(name);
      if (src.shape() != t.shape()) {
        throw ShapeError("parameter '" + name + "' has shape " + shape_str(src.shape()) + ", expected " + shape_str(t.shape()));
      }
      t = src;
      ++seen;
    });
    if (seen != store.size()) throw ConfigError("parameter store has entries the head does not use");
  }

  Tensor<T>& param(const std::string& name) {
    Tensor<T>* found = nullptr;
    visit([&](const std::string& n, Tensor<T>& t) {
      if (n == name) found = &t;
    });
    if (!found) throw ConfigError("unknown parameter: " + name);
    return *found;
  }

  Vars bind(Binder<T>& b) const {
    Vars v;
    for (std::size_t i = 0; i < dp_.size(); ++i) v.dp.push_back(deform::bind_params(dp_[i], b, "dp" + std::to_string(i)));
    for (std::size_t i = 0; i < dat_.size(); ++i) v.dat.push_back(dat::bind_params(dat_[i], b, "dat" + std::to_string(i)));
    v.split_cls_w = b("split.cls.weight", split_cls_.weight);
    v.split_cls_b = b("split.cls.bias", split_cls_.bias);
    v.split_loc_w = b("split.loc.weight", split_loc_.weight);
    v.split_loc_b = b("split.loc.bias", split_loc_.bias);
    for (std::size_t i = 0; i < cit_.size(); ++i) v.cit.push_back(cit::bind_params(cit_[i], b, "cit" + std::to_string(i)));
    v.pred_cls_w = b("pred.cls.weight", pred_cls_.weight);
    v.pred_cls_b = b("pred.cls.bias", pred_cls_.bias);
    v.pred_box_w = b("pred.box.weight", pred_box_.weight);
    v.pred_box_b = b("pred.box.bias", pred_box_.bias);
    return v;
  }

  void check_input(const Tensor<T>& x) const {
    require_rank(x.shape(), 3, "head input");
    if (x.dim(2) != cfg_.C) {
      throw ShapeError("head input " + shape_str(x.shape()) + " has " + std::to_string(x.dim(2)) +
                       " channels, config expects C=" + std::to_string(cfg_.C));
    }
    cfg_.check_input(x.dim(0), x.dim(1));
  }

  Graph graph(Tape<T>& t, Var x, const Vars& v) const {
    check_input(t.value(x));
    Graph g;
    Var h = x;
    for (std::size_t i = 0; i < v.dp.size(); ++i) {
      h = deform::dp_block(t, h, v.dp[i]);
      g.trace.emplace_back(v.dp[i].prefix, h);
    }
    for (std::size_t i = 0; i < v.dat.size(); ++i) {
      h = dat::dat_block(t, h, v.dat[i], cfg_.stripe_width);
      g.trace.emplace_back(v.dat[i].prefix, h);
    }
    Var cls, loc;
    {
      LayerScope scope("split.cls");
      cls = ops::linear(t, h, v.split_cls_w, v.split_cls_b);
    }
    {
      LayerScope scope("split.loc");
      loc = ops::linear(t, h, v.split_loc_w, v.split_loc_b);
    }
    g.trace.emplace_back("split.cls", cls);
    g.trace.emplace_back("split.loc", loc);
    for (std::size_t i = 0; i < v.cit.size(); ++i) {
      std::tie(cls, loc) = cit::cit_block(t, cls, loc, v.cit[i]);
      g.trace.emplace_back(v.cit[i].prefix + ".cls", cls);
      g.trace.emplace_back(v.cit[i].prefix + ".loc", loc);
    }
    {
      LayerScope scope("pred.cls");
      g.cls = ops::conv2d(t, cls, v.pred_cls_w, v.pred_cls_b);
    }
    {
      LayerScope scope("pred.box");
      g.box = ops::conv2d(t, loc, v.pred_box_w, v.pred_box_b);
    }
    g.trace.emplace_back("pred.cls", g.cls);
    g.trace.emplace_back("pred.box", g.box);
    return g;
  }

  HeadOutput<T> forward(const Tensor<T>& x) const {
    Tape<T> t(false);
    Binder<T> b(t, false);
    const auto v = bind(b);
    const auto g = graph(t, t.constant(x), v);
    HeadOutput<T> out{FeatureMap<T>(t.value(g.cls)), FeatureMap<T>(t.value(g.box))};
    if (!all_finite<T>(out.cls_logits.data()) || !all_finite<T>(out.box_deltas.data())) {
      throw NumericError("head forward produced non-finite outputs");
    }
    return out;
  }

  /// Every block output in execution order, ending with the two prediction maps.
  std::vector<std::pair<std::string, Tensor<T>>> forward_traced(const Tensor<T>& x) const {
    Tape<T> t(false);
    Binder<T> b(t, false);
    const auto v = bind(b);
    const auto g = graph(t, t.constant(x), v);
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (const auto& [name, var] : g.trace) out.emplace_back(name, t.value(var));
    return out;
  }

  /// The same parameters applied independently to each pyramid level.
  std::vector<HeadOutput<T>> multi_level_forward(const std::vector<FeatureMap<T>>& pyramid) const {
    std::vector<HeadOutput<T>> out;
    out.reserve(pyramid.size());
    for (const auto& level : pyramid) out.push_back(forward(level));
    return out;
  }

  struct Gradients {
    T loss{};
    Tensor<T> input;
    std::vector<std::pair<std::string, Tensor<T>>> params;
  };

  /// Gradients of <cls, cls_probe> + <box, box_probe> w.r.t. the input and every parameter.
  Gradients gradient(const Tensor<T>& x, const Tensor<T>& cls_probe, const Tensor<T>& box_probe) const {
    Tape<T> t(true);
    Binder<T> b(t, true);
    const auto v = bind(b);
    Var xin = t.leaf(x, true);
    const auto g = graph(t, xin, v);
    Var loss = ops::add(t, ops::dot(t, g.cls, cls_probe), ops::dot(t, g.box, box_probe));
    t.backward(loss);
    Gradients out;
    out.loss = t.value(loss)[0];
    out.input = t.grad(xin);
    for (const auto& [name, var] : b.bound()) out.params.emplace_back(name, t.grad(var));
    return out;
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    for (std::size_t i = 0; i < self.dp_.size(); ++i)
      deform::DeformParams<T>::visit(self.dp_[i], "dp" + std::to_string(i), f);
    for (std::size_t i = 0; i < self.dat_.size(); ++i) dat::DatParams<T>::visit(self.dat_[i], "dat" + std::to_string(i), f);
    f(std::string("split.cls.weight"), self.split_cls_.weight);
    f(std::string("split.cls.bias"), self.split_cls_.bias);
    f(std::string("split.loc.weight"), self.split_loc_.weight);
    f(std::string("split.loc.bias"), self.split_loc_.bias);
    for (std::size_t i = 0; i < self.cit_.size(); ++i) cit::CitParams<T>::visit(self.cit_[i], "cit" + std::to_string(i), f);
    f(std::string("pred.cls.weight"), self.pred_cls_.weight);
    f(std::string("pred.cls.bias"), self.pred_cls_.bias);
    f(std::string("pred.box.weight"), self.pred_box_.weight);
    f(std::string("pred.box.bias"), self.pred_box_.bias);
  }

  HeadConfig cfg_;
  std::vector<deform::DeformParams<T>> dp_;
  std::vector<dat::DatParams<T>> dat_;
  Linear split_cls_, split_loc_;
  std::vector<cit::CitParams<T>> cit_;
  Conv pred_cls_, pred_box_;
};

template <typename T>
Head<T> build_head(const HeadConfig& cfg) {
  return Head<T>(cfg);
}

/// Seeded H x W x C input: standard normal clipped to [-3, 3].
template <typename T>
FeatureMap<T> synthetic_input(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
  if (h == 0 || w == 0 || c == 0) throw ShapeError("synthetic input needs positive H, W, C");
  Rng rng = stream_for(seed, "input");
  return FeatureMap<T>(init::clipped_normal<T>({h, w, c}, 3.0, rng));
}

}  // namespace unihead
