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

// Cross-task interaction transformer.
//
// Both branches get a conditional positional encoding x + DW3x3(x). Each
// branch then runs channel-wise cross attention where the OTHER branch
// supplies the queries and both branches supply half of the keys and values:
//
//   Q = guide Wq_guide                         (HW x C)
//   K = Cat(target Wk_target, guide Wk_guide)  (HW x C)
//   V = Cat(target Wv_target, guide Wv_guide)  (HW x C)
//   A = softmax_over_rows(Q^T K / sqrt(HW))    (C x C, every column sums to 1)
//   CCA = V A
//
// and the result passes through the locality block DW1x1 -> DW3x3 -> DW1x1
// before the residual add. Both attentions read the same encoded pair.

namespace unihead::cit {

enum class Direction {
  to_cls,  // target = cls, guide = loc
  to_loc,  // target = loc, guide = cls
};

template <typename T>
struct BranchPair {
  FeatureMap<T> cls;
  FeatureMap<T> loc;
};

/// V * column-softmax(Q^T K / sqrt(N)). q: N x Cq (any leading dims), k: N x Ck, v: N x Cq.
template <typename T>
Var channel_attention(Tape<T>& t, Var q, Var k, Var v) {
  const Tensor<T>& qv = t.value(q);
  const Tensor<T>& kv = t.value(k);
  const Tensor<T>& vv = t.value(v);
  const std::size_t cq = qv.shape().back(), ck = kv.shape().back();
  const std::size_t n = qv.size() / cq;
  if (kv.size() / ck != n || vv.shape() != qv.shape()) {
    throw ShapeError("channel_attention: q " + shape_str(qv.shape()) + ", k " + shape_str(kv.shape()) + ", v " +
                     shape_str(vv.shape()) + " are incompatible");
  }
  const T scale = T{1} / std::sqrt(static_cast<T>(n));

  // scores[i][j] = sum_n q[n][i] k[n][j]
  std::vector<T> attn(cq * ck, T{0});
  kernels::gemm_tn_acc<T>(qv.data(), kv.data(), attn, cq, n, ck);
  for (auto& s : attn) s *= scale;
  std::vector<T> column(cq);
  for (std::size_t j = 0; j < ck; ++j) {
    for (std::size_t i = 0; i < cq; ++i) column[i] = attn[i * ck + j];
    kernels::softmax_inplace<T>(column);
    for (std::size_t i = 0; i < cq; ++i) attn[i * ck + j] = column[i];
  }
  Shape out_shape = kv.shape();
  Tensor<T> out(out_shape);
  kernels::gemm<T>(vv.data(), attn, out.data(), n, cq, ck);
  cost::macs(2 * n * cq * ck);

  return t.push(std::move(out), {q, k, v}, [q, k, v, n, cq, ck, scale, attn = std::move(attn)](Tape<T>& tp, Var self) {
    const Tensor<T>& g = tp.out_grad(self);
    if (auto* dv = tp.grad_sink(v)) kernels::gemm_nt_acc<T>(g.data(), attn, dv->data(), n, ck, cq);
    auto* dq = tp.grad_sink(q);
    auto* dk = tp.grad_sink(k);
    if (!dq && !dk) return;
    std::vector<T> da(cq * ck, T{0});
    kernels::gemm_tn_acc<T>(tp.value(v).data(), g.data(), da, cq, n, ck);
    std::vector<T> ds(cq * ck);
    for (std::size_t j = 0; j < ck; ++j) {
      T dot{0};
      for (std::size_t i = 0; i < cq; ++i) dot += attn[i * ck + j] * da[i * ck + j];
      for (std::size_t i = 0; i < cq; ++i) ds[i * ck + j] = attn[i * ck + j] * (da[i * ck + j] - dot) * scale;
    }
    if (dq) kernels::gemm_nt_acc<T>(tp.value(k).data(), ds, dq->data(), n, ck, cq);
    if (dk) {
      std::vector<T> tmp(n * ck);
      kernels::gemm<T>(tp.value(q).data(), ds, tmp, n, cq, ck);
      for (std::size_t i = 0; i < tmp.size(); ++i) (*dk)[i] += tmp[i];
    }
  });
}

// ---------------------------------------------------------------------------
// parameters

template <typename T>
struct BranchParams {
  Tensor<T> cpe_weight, cpe_bias;  // C x 3 x 3, C
  Tensor<T> wq;                    // C x C
  Tensor<T> wk, wv;                // C x C/2, this branch's half of the keys and values
  Tensor<T> leb_in_weight, leb_in_bias;    // C x 1 x 1
  Tensor<T> leb_mid_weight, leb_mid_bias;  // C x 3 x 3
  Tensor<T> leb_out_weight, leb_out_bias;  // C x 1 x 1

  static BranchParams init(std::size_t c, std::uint64_t seed, const std::string& pre, const std::string& tag) {
    const std::size_t half = c / 2;
    BranchParams p;
    p.cpe_weight = init::glorot<T>({c, 3, 3}, 9, 9, seed, pre + ".cpe_" + tag + ".weight");
    p.cpe_bias = Tensor<T>({c});
    p.wq = init::glorot<T>({c, c}, c, c, seed, pre + "." + tag + ".wq");
    p.wk = init::glorot<T>({c, half}, c, half, seed, pre + "." + tag + ".wk");
    p.wv = init::glorot<T>({c, half}, c, half, seed, pre + "." + tag + ".wv");
    p.leb_in_weight = init::glorot<T>({c, 1, 1}, 1, 1, seed, pre + ".leb_" + tag + ".in.weight");
    p.leb_in_bias = Tensor<T>({c});
    p.leb_mid_weight = init::glorot<T>({c, 3, 3}, 9, 9, seed, pre + ".leb_" + tag + ".mid.weight");
    p.leb_mid_bias = Tensor<T>({c});
    p.leb_out_weight = init::glorot<T>({c, 1, 1}, 1, 1, seed, pre + ".leb_" + tag + ".out.weight");
    p.leb_out_bias = Tensor<T>({c});
    return p;
  }

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& pre, const std::string& tag, F&& f) {
    f(pre + ".cpe_" + tag + ".weight", self.cpe_weight);
    f(pre + ".cpe_" + tag + ".bias", self.cpe_bias);
    f(pre + "." + tag + ".wq", self.wq);
    f(pre + "." + tag + ".wk", self.wk);
    f(pre + "." + tag + ".wv", self.wv);
    f(pre + ".leb_" + tag + ".in.weight", self.leb_in_weight);
    f(pre + ".leb_" + tag + ".in.bias", self.leb_in_bias);
    f(pre + ".leb_" + tag + ".mid.weight", self.leb_mid_weight);
    f(pre + ".leb_" + tag + ".mid.bias", self.leb_mid_bias);
    f(pre + ".leb_" + tag + ".out.weight", self.leb_out_weight);
    f(pre + ".leb_" + tag + ".out.bias", self.leb_out_bias);
  }
};

template <typename T>
struct CitParams {
  BranchParams<T> cls;
  BranchParams<T> loc;

  static CitParams init(std::size_t c, std::uint64_t seed, const std::string& prefix) {
    if (c == 0 || c % 2 != 0) throw ConfigError("CIT channel count must be even, got C=" + std::to_string(c));
    return {BranchParams<T>::init(c, seed, prefix, "cls"), BranchParams<T>::init(c, seed, prefix, "loc")};
  }

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    BranchParams<T>::visit(self.cls, prefix, "cls", f);
    BranchParams<T>::visit(self.loc, prefix, "loc", f);
  }
};

struct BranchVars {
  Var cpe_weight, cpe_bias, wq, wk, wv;
  Var leb_in_weight, leb_in_bias, leb_mid_weight, leb_mid_bias, leb_out_weight, leb_out_bias;
};

struct CitVars {
  std::string prefix;
  BranchVars cls, loc;
};

template <typename T>
BranchVars bind_params(const BranchParams<T>& p, Binder<T>& b, const std::string& pre, const std::string& tag) {
  return {b(pre + ".cpe_" + tag + ".weight", p.cpe_weight),
          b(pre + ".cpe_" + tag + ".bias", p.cpe_bias),
          b(pre + "." + tag + ".wq", p.wq),
          b(pre + "." + tag + ".wk", p.wk),
          b(pre + "." + tag + ".wv", p.wv),
          b(pre + ".leb_" + tag + ".in.weight", p.leb_in_weight),
          b(pre + ".leb_" + tag + ".in.bias", p.leb_in_bias),
          b(pre + ".leb_" + tag + ".mid.weight", p.leb_mid_weight),
          b(pre + ".leb_" + tag + ".mid.bias", p.leb_mid_bias),
          b(pre + ".leb_" + tag + ".out.weight", p.leb_out_weight),
          b(pre + ".leb_" + tag + ".out.bias", p.leb_out_bias)};
}

template <typename T>
CitVars bind_params(const CitParams<T>& p, Binder<T>& b, const std::string& prefix) {
  CitVars v;
  v.prefix = prefix;
  v.cls = bind_params(p.cls, b, prefix, "cls");
  v.loc = bind_params(p.loc, b, prefix, "loc");
  return v;
}

// ---------------------------------------------------------------------------
// graph builders

/// x + DW3x3(x)
template <typename T>
Var cpe(Tape<T>& t, Var x, Var weight, Var bias) {
  return ops::add(t, x, ops::dwconv(t, x, weight, bias));
}

template <typename T>
Var cca(Tape<T>& t, Var target, Var guide, const BranchVars& target_params, const BranchVars& guide_params) {
  const Tensor<T>& tv = t.value(target);
  const Tensor<T>& gv = t.value(guide);
  require_rank(tv.shape(), 3, "cca target");
  if (tv.shape() != gv.shape()) {
    throw ShapeError("cca: target " + shape_str(tv.shape()) + " and guide " + shape_str(gv.shape()) + " differ");
  }
  if (tv.dim(2) % 2 != 0) throw ConfigError("cca: channel count must be even, got C=" + std::to_string(tv.dim(2)));
  Var q = ops::linear(t, guide, guide_params.wq);
  Var k = ops::concat_channels(t, ops::linear(t, target, target_params.wk), ops::linear(t, guide, guide_params.wk));
  Var v = ops::concat_channels(t, ops::linear(t, target, target_params.wv), ops::linear(t, guide, guide_params.wv));
  return channel_attention(t, q, k, v);
}

template <typename T>
Var cca(Tape<T>& t, Var cls, Var loc, const CitVars& v, Direction dir) {
  return dir == Direction::to_cls ? cca(t, cls, loc, v.cls, v.loc) : cca(t, loc, cls, v.loc, v.cls);
}

/// DW1x1 -> DW3x3 -> DW1x1
template <typename T>
Var leb(Tape<T>& t, Var x, const BranchVars& p) {
  Var a = ops::dwconv(t, x, p.leb_in_weight, p.leb_in_bias);
  Var b = ops::dwconv(t, a, p.leb_mid_weight, p.leb_mid_bias);
  return ops::dwconv(t, b, p.leb_out_weight, p.leb_out_bias);
}

template <typename T>
std::pair<Var, Var> cit_block(Tape<T>& t, Var cls, Var loc, const CitVars& v) {
  const Tensor<T>& cv = t.value(cls);
  const Tensor<T>& lv = t.value(loc);
  if (cv.shape() != lv.shape()) {
    throw ShapeError("cit_block: branch shapes differ, cls " + shape_str(cv.shape()) + " vs loc " + shape_str(lv.shape()));
  }
  Var ec, el;
  {
    LayerScope scope(v.prefix + ".cpe_cls");
    ec = cpe(t, cls, v.cls.cpe_weight, v.cls.cpe_bias);
  }
  {
    LayerScope scope(v.prefix + ".cpe_loc");
    el = cpe(t, loc, v.loc.cpe_weight, v.loc.cpe_bias);
  }
  Var ac, al;
  {
    LayerScope scope(v.prefix + ".cca_cls");
    ac = cca(t, ec, el, v, Direction::to_cls);
  }
  {
    LayerScope scope(v.prefix + ".cca_loc");
    al = cca(t, ec, el, v, Direction::to_loc);
  }
  Var oc, ol;
  {
    LayerScope scope(v.prefix + ".leb_cls");
    oc = ops::add(t, ec, leb(t, ac, v.cls));
  }
  {
    LayerScope scope(v.prefix + ".leb_loc");
    ol = ops::add(t, el, leb(t, al, v.loc));
  }
  return {oc, ol};
}

// ---------------------------------------------------------------------------
// closed forms

/// Q (HW C^2) + K, V halves over both branches (2 HW C^2) + Q^T K (HW C^2) + V A (HW C^2).
inline std::uint64_t cca_flops(std::uint64_t h, std::uint64_t w, std::uint64_t c) { return 5 * h * w * c * c; }

// ---------------------------------------------------------------------------
// value-level entry points

template <typename T>
FeatureMap<T> cpe(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  Tape<T> t(false);
  return FeatureMap<T>(t.value(cpe(t, t.constant(x), t.constant(weight), t.constant(bias))));
}

template <typename T>
FeatureMap<T> cca(const Tensor<T>& cls, const Tensor<T>& loc, const CitParams<T>& p, Direction dir) {
  Tape<T> t(false);
  Binder<T> b(t, false);
  const auto v = bind_params(p, b, "cit");
  return FeatureMap<T>(t.value(cca(t, t.constant(cls), t.constant(loc), v, dir)));
}

/// The C x C attention matrix of cca (columns sum to 1).
template <typename T>
Matrix<T> cca_attention(const Tensor<T>& cls, const Tensor<T>& loc, const CitParams<T>& p, Direction dir) {
  const BranchParams<T>& tp = dir == Direction::to_cls ? p.cls : p.loc;
  const BranchParams<T>& gp = dir == Direction::to_cls ? p.loc : p.cls;
  const Tensor<T>& target = dir == Direction::to_cls ? cls : loc;
  const Tensor<T>& guide = dir == Direction::to_cls ? loc : cls;
  Tape<T> t(false);
  Var q = ops::linear(t, t.constant(guide), t.constant(gp.wq));
  Var k = ops::concat_channels(t, ops::linear(t, t.constant(target), t.constant(tp.wk)),
                               ops::linear(t, t.constant(guide), t.constant(gp.wk)));
  const Tensor<T>& qv = t.value(q);
  const Tensor<T>& kv = t.value(k);
  const std::size_t c = qv.shape().back(), n = qv.size() / c;
  Matrix<T> a(c, c);
  kernels::gemm_tn_acc<T>(qv.data(), kv.data(), a.data(), c, n, c);
  const T scale = T{1} / std::sqrt(static_cast<T>(n));
  std::vector<T> column(c);
  for (std::size_t j = 0; j < c; ++j) {
    for (std::size_t i = 0; i < c; ++i) column[i] = a(i, j) * scale;
    kernels::softmax_inplace<T>(column);
    for (std::size_t i = 0; i < c; ++i) a(i, j) = column[i];
  }
  return a;
}

template <typename T>
FeatureMap<T> leb(const Tensor<T>& x, const BranchParams<T>& p) {
  Tape<T> t(false);
  Binder<T> b(t, false);
  const auto v = bind_params(p, b, "cit", "cls");
  return FeatureMap<T>(t.value(leb(t, t.constant(x), v)));
}

template <typename T>
BranchPair<T> cit_block(const BranchPair<T>& pair, const CitParams<T>& p) {
  Tape<T> t(false);
  Binder<T> b(t, false);
  const auto v = bind_params(p, b, "cit");
  auto [c, l] = cit_block(t, t.constant(pair.cls), t.constant(pair.loc), v);
  return {FeatureMap<T>(t.value(c)), FeatureMap<T>(t.value(l))};
}

}  // namespace unihead::cit
