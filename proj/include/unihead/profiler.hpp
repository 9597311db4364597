#pragma once

#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "unihead/cit.hpp"
#include "unihead/dat.hpp"
#include "unihead/deform.hpp"
#include "unihead/head.hpp"
#include "unihead/numkit/cost_counter.hpp"

// MAC / parameter accounting. Layer names are the same ones LayerScope uses
// during a forward pass, so a symbolic report can be diffed against an
// instrumented run entry by entry.

namespace unihead::profiler {

using u64 = std::uint64_t;

struct LayerCost {
  std::string name;
  u64 macs = 0;
  u64 params = 0;
  u64 non_mac = 0;  // softmax exps, norms, activations, residual adds, bilinear blends

  friend bool operator==(const LayerCost&, const LayerCost&) = default;
};

struct ClosedFormCheck {
  std::string formula_name;
  u64 expected = 0;
  u64 measured = 0;
  bool match = false;
};

struct CostReport {
  std::string label;
  std::vector<LayerCost> entries;
  std::vector<ClosedFormCheck> closed_form_checks;
  std::string flops_convention = "1 MAC = 1 FLOP";

  u64 total_macs() const {
    u64 s = 0;
    for (const auto& e : entries) s += e.macs;
    return s;
  }
  u64 total_params() const {
    u64 s = 0;
    for (const auto& e : entries) s += e.params;
    return s;
  }
  u64 total_non_mac() const {
    u64 s = 0;
    for (const auto& e : entries) s += e.non_mac;
    return s;
  }

  const LayerCost* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }

  std::vector<ClosedFormCheck> failures() const {
    std::vector<ClosedFormCheck> out;
    for (const auto& c : closed_form_checks)
      if (!c.match) out.push_back(c);
    return out;
  }

  void check(std::string name, u64 expected, u64 measured) {
    closed_form_checks.push_back({std::move(name), expected, measured, expected == measured});
  }
};

namespace detail {

inline u64 stripe_attention_macs(u64 h, u64 w, u64 d, u64 dv, const dat::StripeSpec& spec) {
  // Sum over stripes of n^2 (d + dv), with n tokens per stripe.
  const auto stripes = dat::stripe_tokens(h, w, spec);
  u64 s = 0;
  for (const auto& tok : stripes) s += tok.size() * tok.size() * (d + dv);
  return s;
}

inline u64 stripe_softmax_elems(u64 h, u64 w, const dat::StripeSpec& spec) {
  u64 s = 0;
  for (const auto& tok : dat::stripe_tokens(h, w, spec)) s += tok.size() * tok.size();
  return s;
}

}  // namespace detail

// Per-module entry builders (n = H * W positions). They enumerate shapes
// term by term instead of evaluating the closed forms they are checked against.

inline std::vector<LayerCost> dp_layers(const std::string& prefix, u64 n, u64 c) {
  const u64 k = deform::kTaps, pc = deform::kPredictorChannels;
  return {
      {prefix + ".offset", n * pc * c * 9, pc * c * 9 + pc, n * k},
      {prefix + ".deform", n * k * c * c, c * c * 9 + c, n * k * c + n * c},
  };
}

struct EdaBreakdown {
  u64 value_proj, qk_proj, attention, out_proj;
  u64 total() const { return value_proj + qk_proj + attention + out_proj; }
};

inline EdaBreakdown eda_breakdown(u64 h, u64 w, u64 c, u64 s) {
  const u64 n = h * w, half = c / 2;
  const dat::StripeSpec hs{dat::Axis::horizontal, s}, vs{dat::Axis::vertical, s};
  return {n * c * half, 4 * n * c * half,
          detail::stripe_attention_macs(h, w, half, half, hs) + detail::stripe_attention_macs(h, w, half, half, vs),
          n * c * c};
}

inline u64 eda_param_enumeration(u64 c) {
  const u64 half = c / 2;
  return 4 * (c * half) + c * half + c * c;
}

inline std::vector<LayerCost> dat_layers(const std::string& prefix, u64 h, u64 w, u64 c, u64 s, bool ffn) {
  const u64 n = h * w, half = c / 2;
  const dat::StripeSpec hs{dat::Axis::horizontal, s}, vs{dat::Axis::vertical, s};
  std::vector<LayerCost> out{
      {prefix + ".norm", 0, 2 * c, n * c},
      {prefix + ".eda", eda_breakdown(h, w, c, s).total(), eda_param_enumeration(c),
       detail::stripe_softmax_elems(h, w, hs) + detail::stripe_softmax_elems(h, w, vs)},
      {prefix + ".cab", 2 * n * half * 9, 2 * (half * 9 + half), 2 * n * half},
      {prefix + ".residual", 0, 0, n * c},
  };
  if (ffn) {
    const u64 hid = dat::kFfnExpansion * c;
    out.push_back({prefix + ".ffn_norm", 0, 2 * c, n * c});
    out.push_back({prefix + ".ffn", 2 * n * c * hid, c * hid + hid + hid * c + c, n * hid});
    out.push_back({prefix + ".ffn_residual", 0, 0, n * c});
  }
  return out;
}

inline std::vector<LayerCost> cit_layers(const std::string& prefix, u64 n, u64 c) {
  const u64 half = c / 2;
  std::vector<LayerCost> out;
  for (const char* tag : {"cls", "loc"}) {
    out.push_back({prefix + ".cpe_" + tag, n * c * 9, c * 9 + c, n * c});
  }
  for (const char* tag : {"cls", "loc"}) {
    // q, k/v halves from both branches, Q^T K, V A; params are this branch's own matrices
    const u64 macs = n * c * c + 2 * n * c * half + 2 * n * c * half + n * c * c + n * c * c;
    out.push_back({prefix + ".cca_" + tag, macs, c * c + 2 * c * half, c * c});
  }
  for (const char* tag : {"cls", "loc"}) {
    out.push_back({prefix + ".leb_" + tag, n * c * (1 + 9 + 1), (c + c) + (9 * c + c) + (c + c), n * c});
  }
  return out;
}

/// Closed-form parameter total of a head.
inline u64 closed_form_params(const HeadConfig& cfg) {
  const u64 c = cfg.C, a = cfg.num_anchors, nc = cfg.num_classes;
  const u64 dp = 9 * c * c + 244 * c + 27;
  u64 dat = 7 * c * c / 2 + 12 * c;
  if (cfg.ffn_enabled) dat += 8 * c * c + 7 * c;
  const u64 split = 2 * (c * c + c);
  const u64 cit = 4 * c * c + 48 * c;
  const u64 pred = 9 * c * a * nc + a * nc + 36 * c * a + 4 * a;
  return cfg.n_dp * dp + cfg.n_dat * dat + split + cfg.n_cit * cit + pred;
}

/// Symbolic count over shapes only; no tensor arithmetic is executed.
inline CostReport count(const HeadConfig& cfg, u64 h, u64 w) {
  cfg.validate();
  cfg.check_input(h, w);
  if (h == 0 || w == 0) throw ConfigError("count: H and W must be positive");
  const u64 c = cfg.C, n = h * w, s = cfg.stripe_width;
  CostReport r;
  r.label = "unihead";
  auto append = [&](std::vector<LayerCost> v) { r.entries.insert(r.entries.end(), v.begin(), v.end()); };

  for (std::size_t i = 0; i < cfg.n_dp; ++i) append(dp_layers("dp" + std::to_string(i), n, c));
  for (std::size_t i = 0; i < cfg.n_dat; ++i) {
    const std::string pre = "dat" + std::to_string(i);
    append(dat_layers(pre, h, w, c, s, cfg.ffn_enabled));
    const u64 measured = r.find(pre + ".eda")->macs;
    r.check(pre + ".eda: HWC(3.5C+sH+sW)", dat::eda_flops_striped(h, w, c, s), measured);
    if (s == 1) r.check(pre + ".eda: HWC(3.5C+H+W)", dat::eda_flops(h, w, c), measured);
    r.check(pre + ".eda: projection params 3.5C^2", dat::eda_projection_params(c), r.find(pre + ".eda")->params);
  }
  r.entries.push_back({"split.cls", n * c * c, c * c + c, 0});
  r.entries.push_back({"split.loc", n * c * c, c * c + c, 0});
  for (std::size_t i = 0; i < cfg.n_cit; ++i) {
    const std::string pre = "cit" + std::to_string(i);
    append(cit_layers(pre, n, c));
    for (const char* tag : {"cls", "loc"}) {
      r.check(pre + ".cca_" + tag + ": 5HWC^2", cit::cca_flops(h, w, c), r.find(pre + ".cca_" + tag)->macs);
    }
  }
  const u64 ncls = cfg.num_anchors * cfg.num_classes, nbox = cfg.num_anchors * 4;
  r.entries.push_back({"pred.cls", n * ncls * c * 9, ncls * c * 9 + ncls, 0});
  r.entries.push_back({"pred.box", n * nbox * c * 9, nbox * c * 9 + nbox, 0});
  r.check("head params: closed form", closed_form_params(cfg), r.total_params());
  return r;
}

/// Two parallel towers of n_convs 3x3 C->C convolutions (with bias), then the
/// same prediction convs as the head.
inline CostReport parallel_head_baseline(u64 c, u64 n_convs, u64 a, u64 num_classes, u64 h, u64 w) {
  if (n_convs == 0) throw ConfigError("parallel_head_baseline: n_convs must be >= 1");
  if (c == 0 || a == 0 || num_classes == 0) throw ConfigError("parallel_head_baseline: C, A, num_classes must be positive");
  const u64 n = h * w;
  CostReport r;
  r.label = "parallel-baseline";
  for (const char* tower : {"cls", "box"}) {
    for (u64 i = 0; i < n_convs; ++i) {
      r.entries.push_back({std::string("tower.") + tower + "." + std::to_string(i), n * c * c * 9, 9 * c * c + c, n * c});
    }
  }
  const u64 ncls = a * num_classes, nbox = a * 4;
  r.entries.push_back({"pred.cls", n * ncls * c * 9, ncls * c * 9 + ncls, 0});
  r.entries.push_back({"pred.box", n * nbox * c * 9, nbox * c * 9 + nbox, 0});
  return r;
}

/// Instrumented forward on an all-zero input: per-layer tallies as counted by the kernels.
template <typename T>
std::map<std::string, OpTally> measure(const Head<T>& head, std::size_t h, std::size_t w) {
  CostCounter counter;
  {
    CountingScope scope(counter);
    Tape<T> t(false);
    Binder<T> b(t, false);
    const auto v = head.bind(b);
    head.graph(t, t.constant(Tensor<T>({h, w, head.config().C})), v);
  }
  return counter.tallies();
}

struct Mismatch {
  std::string layer;
  OpTally symbolic;
  OpTally measured;
};

/// Layers where symbolic and instrumented counts disagree, including layers present on one side only.
inline std::vector<Mismatch> diff(const CostReport& r, const std::map<std::string, OpTally>& measured) {
  std::vector<Mismatch> out;
  std::map<std::string, OpTally> sym;
  for (const auto& e : r.entries) sym[e.name] = {e.macs, e.non_mac};
  for (const auto& [name, tally] : sym) {
    auto it = measured.find(name);
    const OpTally m = it == measured.end() ? OpTally{} : it->second;
    if (m.macs != tally.macs || m.non_mac != tally.non_mac) out.push_back({name, tally, m});
  }
  for (const auto& [name, tally] : measured)
    if (!sym.count(name)) out.push_back({name, {}, tally});
  return out;
}

inline nlohmann::json to_json(const CostReport& r) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.entries) entries.push_back({{"name", e.name}, {"macs", e.macs}, {"params", e.params}, {"non_mac", e.non_mac}});
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : r.closed_form_checks)
    checks.push_back({{"formula_name", c.formula_name}, {"expected", c.expected}, {"measured", c.measured}, {"match", c.match}});
  return {{"label", r.label},
          {"entries", entries},
          {"totals",
           {{"macs", r.total_macs()}, {"params", r.total_params()}, {"non_mac", r.total_non_mac()}, {"flops_2x", 2 * r.total_macs()}}},
          {"closed_form_checks", checks},
          {"flops_convention", r.flops_convention}};
}

inline CostReport report_from_json(const nlohmann::json& j) {
  CostReport r;
  r.label = j.at("label").get<std::string>();
  for (const auto& e : j.at("entries"))
    r.entries.push_back({e.at("name").get<std::string>(), e.at("macs").get<u64>(), e.at("params").get<u64>(), e.at("non_mac").get<u64>()});
  for (const auto& c : j.at("closed_form_checks"))
    r.closed_form_checks.push_back(
        {c.at("formula_name").get<std::string>(), c.at("expected").get<u64>(), c.at("measured").get<u64>(), c.at("match").get<bool>()});
  r.flops_convention = j.at("flops_convention").get<std::string>();
  return r;
}

inline std::string format_table(const CostReport& r) {
  std::size_t wname = 5;
  for (const auto& e : r.entries) wname = std::max(wname, e.name.size());
  std::ostringstream os;
  os << r.label << "  (" << r.flops_convention << ")\n";
  os << std::left << std::setw(static_cast<int>(wname)) << "layer" << std::right << std::setw(14) << "MACs" << std::setw(12)
     << "params" << std::setw(12) << "non-MAC" << '\n';
  for (const auto& e : r.entries) {
    os << std::left << std::setw(static_cast<int>(wname)) << e.name << std::right << std::setw(14) << e.macs << std::setw(12)
       << e.params << std::setw(12) << e.non_mac << '\n';
  }
  os << std::left << std::setw(static_cast<int>(wname)) << "total" << std::right << std::setw(14) << r.total_macs()
     << std::setw(12) << r.total_params() << std::setw(12) << r.total_non_mac() << '\n';
  os << "FLOPs (2 x MACs): " << 2 * r.total_macs() << '\n';
  if (!r.closed_form_checks.empty()) {
    os << "closed-form checks:\n";
    for (const auto& c : r.closed_form_checks) {
      os << "  " << (c.match ? "match   " : "MISMATCH") << "  " << c.formula_name << "  expected " << c.expected << "  measured "
         << c.measured << '\n';
    }
  }
  return os.str();
}

}  // namespace unihead::profiler
