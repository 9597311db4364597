#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "unihead/numkit/cost_counter.hpp"
#include "unihead/numkit/init.hpp"
#include "unihead/numkit/kernels.hpp"
#include "unihead/numkit/param_store.hpp"
#include "unihead/numkit/tape.hpp"
#include "unihead/numkit/tensor.hpp"

// Dual-axial aggregation transformer.
//
// EDA runs horizontal and vertical stripe self-attention in parallel in a
// channel-halved space. Each axis has its own C x C/2 query and key
// projections; the C x C/2 value projection is shared by both axes. A 3x3
// depth-wise convolution on the shared value map (CAB) is added to each
// axis's attention output, the two halves are concatenated back to C
// channels and mixed by a C x C output projection:
//
//   Z_h = Attn_h(X) + CAB_h(V),  Z_v = Attn_v(X) + CAB_v(V)
//   EDA(X) = Cat(Z_h, Z_v) W_O
//
// Projection parameters: 4 * C*C/2 + C*C/2 + C*C = 3.5 C^2. With one-row
// stripes the projection and attention MACs are HWC(3.5C + H + W); this is
// the only parameterization (separate per-axis Q/K, shared V, no biases)
// that reproduces the 3.5C coefficient.

namespace unihead::dat {

enum class Axis { horizontal, vertical };

struct StripeSpec {
  Axis axis = Axis::horizontal;
  std::size_t width = 1;
};

inline const char* axis_name(Axis a) { return a == Axis::horizontal ? "horizontal" : "vertical"; }

inline void check_stripes(std::size_t h, std::size_t w, const StripeSpec& spec) {
  const std::size_t extent = spec.axis == Axis::horizontal ? h : w;
  if (spec.width == 0 || extent % spec.width != 0) {
    throw ConfigError("stripe width " + std::to_string(spec.width) + " does not divide " +
                      (spec.axis == Axis::horizontal ? "H=" : "W=") + std::to_string(extent) +
                      " (divisibility required for " + axis_name(spec.axis) + " stripes)");
  }
}

/// Flat token positions of every stripe, raster order within a stripe.
inline std::vector<std::vector<std::size_t>> stripe_tokens(std::size_t h, std::size_t w, const StripeSpec& spec) {
  check_stripes(h, w, spec);
  std::vector<std::vector<std::size_t>> stripes;
  const std::size_t s = spec.width;
  if (spec.axis == Axis::horizontal) {
    for (std::size_t r0 = 0; r0 < h; r0 += s) {
      std::vector<std::size_t> tok;
      for (std::size_t y = r0; y < r0 + s; ++y)
        for (std::size_t x = 0; x < w; ++x) tok.push_back(y * w + x);
      stripes.push_back(std::move(tok));
    }
  } else {
    for (std::size_t c0 = 0; c0 < w; c0 += s) {
      std::vector<std::size_t> tok;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = c0; x < c0 + s; ++x) tok.push_back(y * w + x);
      stripes.push_back(std::move(tok));
    }
  }
  return stripes;
}

/// Scaled dot-product attention restricted to stripes. q, k: H x W x d; v: H x W x dv.
template <typename T>
Var stripe_attention(Tape<T>& t, Var q, Var k, Var v, const StripeSpec& spec) {
  const Tensor<T>& qv = t.value(q);
  const Tensor<T>& kv = t.value(k);
  const Tensor<T>& vv = t.value(v);
  require_rank(qv.shape(), 3, "stripe_attention query");
  if (kv.shape() != qv.shape() || vv.rank() != 3 || vv.dim(0) != qv.dim(0) || vv.dim(1) != qv.dim(1)) {
    throw ShapeError("stripe_attention: q " + shape_str(qv.shape()) + ", k " + shape_str(kv.shape()) + ", v " +
                     shape_str(vv.shape()) + " are incompatible");
  }
  const std::size_t h = qv.dim(0), w = qv.dim(1), d = qv.dim(2), dv = vv.dim(2);
  const T scale = T{1} / std::sqrt(static_cast<T>(d));
  auto stripes = stripe_tokens(h, w, spec);

  Tensor<T> out({h, w, dv});
  std::vector<std::vector<T>> probs;
  probs.reserve(stripes.size());
  for (const auto& tok : stripes) {
    const std::size_t n = tok.size();
    std::vector<T> p(n * n);
    for (std::size_t i = 0; i < n; ++i) {
      const T* qi = qv.data().data() + tok[i] * d;
      for (std::size_t j = 0; j < n; ++j) {
        const T* kj = kv.data().data() + tok[j] * d;
        T acc{0};
        for (std::size_t e = 0; e < d; ++e) acc += qi[e] * kj[e];
        p[i * n + j] = acc * scale;
      }
      kernels::softmax_inplace<T>(std::span<T>(p.data() + i * n, n));
      T* oi = out.data().data() + tok[i] * dv;
      for (std::size_t j = 0; j < n; ++j) {
        const T pij = p[i * n + j];
        const T* vj = vv.data().data() + tok[j] * dv;
        for (std::size_t e = 0; e < dv; ++e) oi[e] += pij * vj[e];
      }
    }
    cost::macs(n * n * d + n * n * dv);
    probs.push_back(std::move(p));
  }

  return t.push(std::move(out), {q, k, v},
                [q, k, v, d, dv, scale, stripes = std::move(stripes), probs = std::move(probs)](Tape<T>& tp, Var self) {
                  const Tensor<T>& g = tp.out_grad(self);
                  const Tensor<T>& qv = tp.value(q);
                  const Tensor<T>& kv = tp.value(k);
                  const Tensor<T>& vv = tp.value(v);
                  auto* dq = tp.grad_sink(q);
                  auto* dk = tp.grad_sink(k);
                  auto* dvs = tp.grad_sink(v);
                  for (std::size_t sidx = 0; sidx < stripes.size(); ++sidx) {
                    const auto& tok = stripes[sidx];
                    const auto& p = probs[sidx];
                    const std::size_t n = tok.size();
                    std::vector<T> dp(n);
                    for (std::size_t i = 0; i < n; ++i) {
                      const T* gi = g.data().data() + tok[i] * dv;
                      for (std::size_t j = 0; j < n; ++j) {
                        const T* vj = vv.data().data() + tok[j] * dv;
                        T acc{0};
                        for (std::size_t e = 0; e < dv; ++e) acc += gi[e] * vj[e];
                        dp[j] = acc;
                        if (dvs) {
                          T* dvj = dvs->data().data() + tok[j] * dv;
                          for (std::size_t e = 0; e < dv; ++e) dvj[e] += p[i * n + j] * gi[e];
                        }
                      }
                      const auto ds = kernels::softmax_backward<T>(std::span<const T>(p.data() + i * n, n), dp);
                      const T* qi = qv.data().data() + tok[i] * d;
                      for (std::size_t j = 0; j < n; ++j) {
                        const T sij = ds[j] * scale;
                        const T* kj = kv.data().data() + tok[j] * d;
                        if (dq) {
                          T* dqi = dq->data().data() + tok[i] * d;
                          for (std::size_t e = 0; e < d; ++e) dqi[e] += sij * kj[e];
                        }
                        if (dk) {
                          T* dkj = dk->data().data() + tok[j] * d;
                          for (std::size_t e = 0; e < d; ++e) dkj[e] += sij * qi[e];
                        }
                      }
                    }
                  }
                });
}

// ---------------------------------------------------------------------------
// parameters

template <typename T>
struct EdaParams {
  Tensor<T> wq_h, wk_h, wq_v, wk_v;  // C x C/2
  Tensor<T> wv_s;                    // C x C/2, shared by both axes
  Tensor<T> wo;                      // C x C
  Tensor<T> cab_h_weight, cab_h_bias, cab_v_weight, cab_v_bias;  // C/2 x 3 x 3, C/2

  std::size_t channels() const { return wo.dim(0); }

  static EdaParams init(std::size_t c, std::uint64_t seed, const std::string& prefix) {
    if (c == 0 || c % 2 != 0) throw ConfigError("EDA channel count must be even, got C=" + std::to_string(c));
    const std::size_t half = c / 2;
    EdaParams p;
    p.wq_h = init::glorot<T>({c, half}, c, half, seed, prefix + ".wq_h");
    p.wk_h = init::glorot<T>({c, half}, c, half, seed, prefix + ".wk_h");
    p.wq_v = init::glorot<T>({c, half}, c, half, seed, prefix + ".wq_v");
    p.wk_v = init::glorot<T>({c, half}, c, half, seed, prefix + ".wk_v");
    p.wv_s = init::glorot<T>({c, half}, c, half, seed, prefix + ".wv_s");
    p.wo = init::glorot<T>({c, c}, c, c, seed, prefix + ".wo");
    p.cab_h_weight = init::glorot<T>({half, 3, 3}, 9, 9, seed, prefix + ".cab_h.weight");
    p.cab_h_bias = Tensor<T>({half});
    p.cab_v_weight = init::glorot<T>({half, 3, 3}, 9, 9, seed, prefix + ".cab_v.weight");
    p.cab_v_bias = Tensor<T>({half});
    return p;
  }

  std::size_t projection_params() const {
    return wq_h.size() + wk_h.size() + wq_v.size() + wk_v.size() + wv_s.size() + wo.size();
  }

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + ".wq_h", self.wq_h);
    f(prefix + ".wk_h", self.wk_h);
    f(prefix + ".wq_v", self.wq_v);
    f(prefix + ".wk_v", self.wk_v);
    f(prefix + ".wv_s", self.wv_s);
    f(prefix + ".wo", self.wo);
    f(prefix + ".cab_h.weight", self.cab_h_weight);
    f(prefix + ".cab_h.bias", self.cab_h_bias);
    f(prefix + ".cab_v.weight", self.cab_v_weight);
    f(prefix + ".cab_v.bias", self.cab_v_bias);
  }
};

inline constexpr std::size_t kFfnExpansion = 4;
inline constexpr double kNormEps = 1e-5;

template <typename T>
struct DatParams {
  Tensor<T> norm_gain, norm_bias;
  EdaParams<T> eda;
  bool ffn_enabled = false;
  Tensor<T> ffn_norm_gain, ffn_norm_bias, ffn_w1, ffn_b1, ffn_w2, ffn_b2;

  static DatParams init(std::size_t c, bool ffn, std::uint64_t seed, const std::string& prefix) {
    DatParams p;
    p.norm_gain = Tensor<T>({c}, T{1});
    p.norm_bias = Tensor<T>({c});
    p.eda = EdaParams<T>::init(c, seed, prefix + ".eda");
    p.ffn_enabled = ffn;
    if (ffn) {
      const std::size_t hidden = kFfnExpansion * c;
      p.ffn_norm_gain = Tensor<T>({c}, T{1});
      p.ffn_norm_bias = Tensor<T>({c});
      p.ffn_w1 = init::glorot<T>({c, hidden}, c, hidden, seed, prefix + ".ffn.w1");
      p.ffn_b1 = Tensor<T>({hidden});
      p.ffn_w2 = init::glorot<T>({hidden, c}, hidden, c, seed, prefix + ".ffn.w2");
      p.ffn_b2 = Tensor<T>({c});
    }
    return p;
  }

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + ".norm.gain", self.norm_gain);
    f(prefix + ".norm.bias", self.norm_bias);
    EdaParams<T>::visit(self.eda, prefix + ".eda", f);
    if (self.ffn_enabled) {
      f(prefix + ".ffn_norm.gain", self.ffn_norm_gain);
      f(prefix + ".ffn_norm.bias", self.ffn_norm_bias);
      f(prefix + ".ffn.w1", self.ffn_w1);
      f(prefix + ".ffn.b1", self.ffn_b1);
      f(prefix + ".ffn.w2", self.ffn_w2);
      f(prefix + ".ffn.b2", self.ffn_b2);
    }
  }
};

struct EdaVars {
  std::string prefix;  // layer prefix of the owning block, e.g. "dat0"
  Var wq_h, wk_h, wq_v, wk_v, wv_s, wo, cab_h_weight, cab_h_bias, cab_v_weight, cab_v_bias;
};

struct DatVars {
  std::string prefix;
  Var norm_gain, norm_bias;
  EdaVars eda;
  bool ffn_enabled = false;
  Var ffn_norm_gain, ffn_norm_bias, ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

template <typename T>
EdaVars bind_params(const EdaParams<T>& p, Binder<T>& b, const std::string& block_prefix) {
  const std::string pre = block_prefix + ".eda";
  return {block_prefix,
          b(pre + ".wq_h", p.wq_h),
          b(pre + ".wk_h", p.wk_h),
          b(pre + ".wq_v", p.wq_v),
          b(pre + ".wk_v", p.wk_v),
          b(pre + ".wv_s", p.wv_s),
          b(pre + ".wo", p.wo),
          b(pre + ".cab_h.weight", p.cab_h_weight),
          b(pre + ".cab_h.bias", p.cab_h_bias),
          b(pre + ".cab_v.weight", p.cab_v_weight),
          b(pre + ".cab_v.bias", p.cab_v_bias)};
}

template <typename T>
DatVars bind_params(const DatParams<T>& p, Binder<T>& b, const std::string& prefix) {
  DatVars v;
  v.prefix = prefix;
  v.norm_gain = b(prefix + ".norm.gain", p.norm_gain);
  v.norm_bias = b(prefix + ".norm.bias", p.norm_bias);
  v.eda = bind_params(p.eda, b, prefix);
  v.ffn_enabled = p.ffn_enabled;
  if (p.ffn_enabled) {
    v.ffn_norm_gain = b(prefix + ".ffn_norm.gain", p.ffn_norm_gain);
    v.ffn_norm_bias = b(prefix + ".ffn_norm.bias", p.ffn_norm_bias);
    v.ffn_w1 = b(prefix + ".ffn.w1", p.ffn_w1);
    v.ffn_b1 = b(prefix + ".ffn.b1", p.ffn_b1);
    v.ffn_w2 = b(prefix + ".ffn.w2", p.ffn_w2);
    v.ffn_b2 = b(prefix + ".ffn.b2", p.ffn_b2);
  }
  return v;
}

// ---------------------------------------------------------------------------
// graph builders

namespace detail {

template <typename T>
void check_input(Tape<T>& t, Var x, Var wv_s) {
  const Tensor<T>& xv = t.value(x);
  require_rank(xv.shape(), 3, "EDA input");
  const std::size_t c = t.value(wv_s).dim(0);
  if (c % 2 != 0) throw ConfigError("EDA channel count must be even, got C=" + std::to_string(c));
  if (xv.dim(2) != c) {
    throw ShapeError("EDA: input " + shape_str(xv.shape()) + " does not have C=" + std::to_string(c) + " channels");
  }
}

}  // namespace detail

struct AxialResult {
  Var out;        // attention output, C/2 channels
  Var value_map;  // shared value map, C/2 channels
};

/// One axis of EDA: returns the attention output and the value map it attended over.
template <typename T>
AxialResult axial_attention(Tape<T>& t, Var x, const EdaVars& v, const StripeSpec& spec) {
  detail::check_input(t, x, v.wv_s);
  const Tensor<T>& xv = t.value(x);
  check_stripes(xv.dim(0), xv.dim(1), spec);
  LayerScope scope(v.prefix + ".eda");
  const bool horizontal = spec.axis == Axis::horizontal;
  Var value = ops::linear(t, x, v.wv_s);
  Var q = ops::linear(t, x, horizontal ? v.wq_h : v.wq_v);
  Var k = ops::linear(t, x, horizontal ? v.wk_h : v.wk_v);
  return {stripe_attention(t, q, k, value, spec), value};
}

/// attn_out + dwconv3x3(value_map)
template <typename T>
Var cab(Tape<T>& t, Var value_map, Var attn_out, Var weight, Var bias) {
  const Tensor<T>& vm = t.value(value_map);
  const Tensor<T>& ao = t.value(attn_out);
  if (vm.shape() != ao.shape()) {
    throw ShapeError("cab: value map " + shape_str(vm.shape()) + " does not match attention output " + shape_str(ao.shape()));
  }
  return ops::add(t, attn_out, ops::dwconv(t, value_map, weight, bias));
}

template <typename T>
Var eda(Tape<T>& t, Var x, const EdaVars& v, std::size_t stripe_width) {
  detail::check_input(t, x, v.wv_s);
  const Tensor<T>& xv = t.value(x);
  const StripeSpec hspec{Axis::horizontal, stripe_width}, vspec{Axis::vertical, stripe_width};
  check_stripes(xv.dim(0), xv.dim(1), hspec);
  check_stripes(xv.dim(0), xv.dim(1), vspec);

  Var value, yh, yv;
  {
    LayerScope scope(v.prefix + ".eda");
    value = ops::linear(t, x, v.wv_s);
    Var qh = ops::linear(t, x, v.wq_h);
    Var kh = ops::linear(t, x, v.wk_h);
    Var qv = ops::linear(t, x, v.wq_v);
    Var kv = ops::linear(t, x, v.wk_v);
    yh = stripe_attention(t, qh, kh, value, hspec);
    yv = stripe_attention(t, qv, kv, value, vspec);
  }
  Var zh, zv;
  {
    LayerScope scope(v.prefix + ".cab");
    zh = cab(t, value, yh, v.cab_h_weight, v.cab_h_bias);
    zv = cab(t, value, yv, v.cab_v_weight, v.cab_v_bias);
  }
  LayerScope scope(v.prefix + ".eda");
  return ops::linear(t, ops::concat_channels(t, zh, zv), v.wo);
}

/// x + EDA(LN(x)), then optionally x + FFN(LN(x)).
template <typename T>
Var dat_block(Tape<T>& t, Var x, const DatVars& v, std::size_t stripe_width) {
  Var xn;
  {
    LayerScope scope(v.prefix + ".norm");
    xn = ops::layernorm(t, x, v.norm_gain, v.norm_bias, static_cast<T>(kNormEps));
  }
  Var y = eda(t, xn, v.eda, stripe_width);
  Var out;
  {
    LayerScope scope(v.prefix + ".residual");
    out = ops::add(t, x, y);
  }
  if (!v.ffn_enabled) return out;
  Var hn;
  {
    LayerScope scope(v.prefix + ".ffn_norm");
    hn = ops::layernorm(t, out, v.ffn_norm_gain, v.ffn_norm_bias, static_cast<T>(kNormEps));
  }
  Var f;
  {
    LayerScope scope(v.prefix + ".ffn");
    f = ops::linear(t, ops::relu(t, ops::linear(t, hn, v.ffn_w1, v.ffn_b1)), v.ffn_w2, v.ffn_b2);
  }
  LayerScope scope(v.prefix + ".ffn_residual");
  return ops::add(t, out, f);
}

// ---------------------------------------------------------------------------
// closed forms

/// HWC(3.5C + H + W): projection plus attention MACs of EDA with one-row stripes.
inline std::uint64_t eda_flops(std::uint64_t h, std::uint64_t w, std::uint64_t c) {
  if (c % 2 != 0) throw ConfigError("eda_flops: C must be even, got " + std::to_string(c));
  return h * w * c * (7 * c / 2 + h + w);
}

/// HWC(3.5C + sH + sW): the same count for stripes of width s.
inline std::uint64_t eda_flops_striped(std::uint64_t h, std::uint64_t w, std::uint64_t c, std::uint64_t s) {
  if (c % 2 != 0) throw ConfigError("eda_flops: C must be even, got " + std::to_string(c));
  return h * w * c * (7 * c / 2 + s * h + s * w);
}

/// 3.5 C^2
inline std::uint64_t eda_projection_params(std::uint64_t c) {
  if (c % 2 != 0) throw ConfigError("eda_projection_params: C must be even, got " + std::to_string(c));
  return 7 * c * c / 2;
}

// ---------------------------------------------------------------------------
// value-level entry points

template <typename T>
std::pair<FeatureMap<T>, FeatureMap<T>> axial_attention(const Tensor<T>& x, const EdaParams<T>& p,
                                                        const StripeSpec& spec) {
  Tape<T> t(false);
  Binder<T> b(t, false);
  const auto v = bind_params(p, b, "dat");
  auto r = axial_attention(t, t.constant(x), v, spec);
  return {FeatureMap<T>(t.value(r.out)), FeatureMap<T>(t.value(r.value_map))};
}

template <typename T>
FeatureMap<T> cab(const Tensor<T>& value_map, const Tensor<T>& attn_out, const Tensor<T>& weight, const Tensor<T>& bias) {
  Tape<T> t(false);
  Var y = cab(t, t.constant(value_map), t.constant(attn_out), t.constant(weight), t.constant(bias));
  return FeatureMap<T>(t.value(y));
}

template <typename T>
FeatureMap<T> eda(const Tensor<T>& x, const EdaParams<T>& p, std::size_t stripe_width) {
  Tape<T> t(false);
  Binder<T> b(t, false);
  const auto v = bind_params(p, b, "dat");
  return FeatureMap<T>(t.value(eda(t, t.constant(x), v, stripe_width)));
}

template <typename T>
FeatureMap<T> dat_block(const Tensor<T>& x, const DatParams<T>& p, std::size_t stripe_width) {
  Tape<T> t(false);
  Binder<T> b(t, false);
  const auto v = bind_params(p, b, "dat");
  return FeatureMap<T>(t.value(dat_block(t, t.constant(x), v, stripe_width)));
}

}  // namespace unihead::dat
