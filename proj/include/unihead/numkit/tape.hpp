#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "unihead/numkit/cost_counter.hpp"
#include "unihead/numkit/errors.hpp"
#include "unihead/numkit/kernels.hpp"
#include "unihead/numkit/tensor.hpp"

namespace unihead {

/// Handle to a value recorded on a Tape.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const { return id != npos; }
};

/// Reverse-mode tape for the fixed op set used by the head.
///
/// Every op pushes its forward value and, when the tape records and some
/// input needs a gradient, a closure that reads the op's output gradient and
/// accumulates into its inputs. Values stay alive for the tape's lifetime.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, Var self)>;

  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var leaf(Tensor<T> value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, {}, record_ && requires_grad});
    return Var{nodes_.size() - 1};
  }

  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Records an op output. `parents` decide whether a gradient is needed.
  Var push(Tensor<T> value, std::initializer_list<Var> parents, Backward backward) {
    bool needs = false;
    if (record_) {
      for (Var p : parents) needs = needs || (p.valid() && node(p).needs_grad);
    }
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : Backward{}, needs});
    return Var{nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const { return node(v).value; }

  bool needs_grad(Var v) const { return node(v).needs_grad; }

  /// Gradient buffer for `v`, allocated on first use. Null when `v` does not
  /// need a gradient, so backward closures can skip that input.
  Tensor<T>* grad_sink(Var v) {
    Node& n = node(v);
    if (!n.needs_grad) return nullptr;
    if (!n.grad) n.grad.emplace(n.value.shape(), T{0});
    return &*n.grad;
  }

  /// Gradient of the last backward() root w.r.t. `v`; zeros if none reached it.
  Tensor<T> grad(Var v) const {
    const Node& n = node(v);
    return n.grad ? *n.grad : Tensor<T>(n.value.shape(), T{0});
  }

  const Tensor<T>& out_grad(Var v) const { return *node(v).grad; }

  void backward(Var root) {
    if (!record_) throw UsageError("backward: tape was not recording");
    if (!root.valid() || root.id >= nodes_.size()) throw UsageError("backward: invalid root");
    Node& r = node(root);
    if (r.value.size() != 1) {
      throw UsageError("backward: root must be a scalar reduction, got shape " + shape_str(r.value.shape()));
    }
    if (!r.needs_grad) throw UsageError("backward: root does not depend on any input requiring a gradient");
    for (Node& n : nodes_) n.grad.reset();
    r.grad.emplace(r.value.shape(), T{1});
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.grad) n.backward(*this, Var{i});
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    std::optional<Tensor<T>> grad;
    Backward backward;
    bool needs_grad = false;
  };

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw UsageError("tape: invalid variable");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw UsageError("tape: invalid variable");
    return nodes_[v.id];
  }

  bool record_;
  std::vector<Node> nodes_;
};

namespace ops {

namespace detail {

inline std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

template <typename T>
void accumulate(Tensor<T>* sink, const Tensor<T>& g) {
  if (!sink) return;
  for (std::size_t i = 0; i < g.size(); ++i) (*sink)[i] += g[i];
}

}  // namespace detail

/// Token-wise projection: rows of x (all leading dims flattened) times w (C x D), optional bias (D).
template <typename T>
Var linear(Tape<T>& t, Var x, Var w, Var bias = {}) {
  const Tensor<T>& xv = t.value(x);
  const Tensor<T>& wv = t.value(w);
  require_rank(wv.shape(), 2, "linear weight");
  const std::size_t c = detail::last_dim(xv.shape());
  if (wv.dim(0) != c) {
    throw ShapeError("linear: cannot project " + shape_str(xv.shape()) + " with " + shape_str(wv.shape()));
  }
  const std::size_t d = wv.dim(1);
  const std::size_t n = xv.size() / c;
  Shape out_shape = xv.shape();
  out_shape.back() = d;
  Tensor<T> out(out_shape);
  kernels::gemm<T>(xv.data(), wv.data(), out.data(), n, c, d);
  if (bias.valid()) {
    const Tensor<T>& bv = t.value(bias);
    if (bv.size() != d) {
      throw ShapeError("linear: bias " + shape_str(bv.shape()) + " does not match width " + std::to_string(d));
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += bv[j];
  }
  cost::macs(n * c * d);
  return t.push(std::move(out), {x, w, bias}, [x, w, bias, n, c, d](Tape<T>& tp, Var self) {
    const Tensor<T>& g = tp.out_grad(self);
    if (auto* dx = tp.grad_sink(x)) kernels::gemm_nt_acc<T>(g.data(), tp.value(w).data(), dx->data(), n, d, c);
    if (auto* dw = tp.grad_sink(w)) kernels::gemm_tn_acc<T>(tp.value(x).data(), g.data(), dw->data(), c, n, d);
    if (bias.valid()) {
      if (auto* db = tp.grad_sink(bias)) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) (*db)[j] += g[i * d + j];
      }
    }
  });
}

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  const Tensor<T>& av = t.value(a);
  const Tensor<T>& bv = t.value(b);
  if (av.shape() != bv.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  cost::non_mac(out.size());
  return t.push(std::move(out), {a, b}, [a, b](Tape<T>& tp, Var self) {
    const Tensor<T>& g = tp.out_grad(self);
    detail::accumulate(tp.grad_sink(a), g);
    detail::accumulate(tp.grad_sink(b), g);
  });
}

template <typename T>
Var relu(Tape<T>& t, Var x) {
  const Tensor<T>& xv = t.value(x);
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = xv[i] > T{0} ? xv[i] : T{0};
    kinks::note(std::fabs(static_cast<double>(xv[i])));
  }
  cost::non_mac(out.size());
  return t.push(std::move(out), {x}, [x](Tape<T>& tp, Var self) {
    const Tensor<T>& g = tp.out_grad(self);
    const Tensor<T>& xv = tp.value(x);
    if (auto* dx = tp.grad_sink(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += xv[i] > T{0} ? g[i] : T{0};
    }
  });
}

template <typename T>
Var sigmoid(Tape<T>& t, Var x) {
  const Tensor<T>& xv = t.value(x);
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T{1} / (T{1} + std::exp(-xv[i]));
  cost::non_mac(out.size());
  return t.push(std::move(out), {x}, [x](Tape<T>& tp, Var self) {
    const Tensor<T>& g = tp.out_grad(self);
    const Tensor<T>& y = tp.value(self);
    if (auto* dx = tp.grad_sink(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i] * y[i] * (T{1} - y[i]);
    }
  });
}

/// Concatenates along the last (channel) axis.
template <typename T>
Var concat_channels(Tape<T>& t, Var a, Var b) {
  const Tensor<T>& av = t.value(a);
  const Tensor<T>& bv = t.value(b);
  Shape lead_a(av.shape().begin(), av.shape().end() - 1);
  Shape lead_b(bv.shape().begin(), bv.shape().end() - 1);
  if (av.rank() == 0 || lead_a != lead_b) {
    throw ShapeError("concat: incompatible shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  }
  const std::size_t ca = av.shape().back(), cb = bv.shape().back(), n = av.size() / ca;
  Shape out_shape = av.shape();
  out_shape.back() = ca + cb;
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < ca; ++j) out[i * (ca + cb) + j] = av[i * ca + j];
    for (std::size_t j = 0; j < cb; ++j) out[i * (ca + cb) + ca + j] = bv[i * cb + j];
  }
  return t.push(std::move(out), {a, b}, [a, b, ca, cb, n](Tape<T>& tp, Var self) {
    const Tensor<T>& g = tp.out_grad(self);
    if (auto* da = tp.grad_sink(a))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < ca; ++j) (*da)[i * ca + j] += g[i * (ca + cb) + j];
    if (auto* db = tp.grad_sink(b))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < cb; ++j) (*db)[i * cb + j] += g[i * (ca + cb) + ca + j];
  });
}

/// Channels [begin, end) of the last axis.
template <typename T>
Var slice_channels(Tape<T>& t, Var x, std::size_t begin, std::size_t end) {
  const Tensor<T>& xv = t.value(x);
  const std::size_t c = detail::last_dim(xv.shape());
  if (begin >= end || end > c) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") outside " +
                     shape_str(xv.shape()));
  }
  const std::size_t w = end - begin, n = xv.size() / c;
  Shape out_shape = xv.shape();
  out_shape.back() = w;
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = xv[i * c + begin + j];
  return t.push(std::move(out), {x}, [x, begin, w, c, n](Tape<T>& tp, Var self) {
    const Tensor<T>& g = tp.out_grad(self);
    if (auto* dx = tp.grad_sink(x))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) (*dx)[i * c + begin + j] += g[i * w + j];
  });
}

template <typename T>
Var dwconv(Tape<T>& t, Var x, Var weight, Var bias) {
  Tensor<T> out = kernels::dwconv<T>(t.value(x), t.value(weight), t.value(bias));
  return t.push(std::move(out), {x, weight, bias}, [x, weight, bias](Tape<T>& tp, Var self) {
    kernels::dwconv_backward<T>(tp.value(x), tp.value(weight), tp.out_grad(self), tp.grad_sink(x),
                                tp.grad_sink(weight), tp.grad_sink(bias));
  });
}

template <typename T>
Var conv2d(Tape<T>& t, Var x, Var weight, Var bias) {
  Tensor<T> out = kernels::conv2d<T>(t.value(x), t.value(weight), t.value(bias));
  return t.push(std::move(out), {x, weight, bias}, [x, weight, bias](Tape<T>& tp, Var self) {
    kernels::conv2d_backward<T>(tp.value(x), tp.value(weight), tp.out_grad(self), tp.grad_sink(x),
                                tp.grad_sink(weight), tp.grad_sink(bias));
  });
}

template <typename T>
Var layernorm(Tape<T>& t, Var x, Var gain, Var bias, T eps) {
  Tensor<T> out = kernels::layernorm<T>(t.value(x), t.value(gain), t.value(bias), eps);
  return t.push(std::move(out), {x, gain, bias}, [x, gain, bias, eps](Tape<T>& tp, Var self) {
    kernels::layernorm_backward<T>(tp.value(x), tp.value(gain), eps, tp.out_grad(self), tp.grad_sink(x),
                                   tp.grad_sink(gain), tp.grad_sink(bias));
  });
}

/// Softmax over the last axis.
template <typename T>
Var softmax_channels(Tape<T>& t, Var x) {
  const Tensor<T>& xv = t.value(x);
  const std::size_t c = detail::last_dim(xv.shape()), n = xv.size() / c;
  Tensor<T> out = xv;
  for (std::size_t i = 0; i < n; ++i) kernels::softmax_inplace<T>(out.data().subspan(i * c, c));
  return t.push(std::move(out), {x}, [x, c, n](Tape<T>& tp, Var self) {
    const Tensor<T>& g = tp.out_grad(self);
    const Tensor<T>& y = tp.value(self);
    if (auto* dx = tp.grad_sink(x)) {
      for (std::size_t i = 0; i < n; ++i) {
        const auto d = kernels::softmax_backward<T>(y.data().subspan(i * c, c), g.data().subspan(i * c, c));
        for (std::size_t j = 0; j < c; ++j) (*dx)[i * c + j] += d[j];
      }
    }
  });
}

/// Bilinear samples of x (H x W x C) at points (P x 2, (y, x) grid coords) -> P x C.
template <typename T>
Var bilinear_sample(Tape<T>& t, Var x, Var points) {
  const Tensor<T>& xv = t.value(x);
  const Tensor<T>& pv = t.value(points);
  require_rank(xv.shape(), 3, "bilinear_sample input");
  if (pv.rank() != 2 || pv.dim(1) != 2) throw ShapeError("bilinear_sample: points must be P x 2, got " + shape_str(pv.shape()));
  const std::size_t np = pv.dim(0), c = xv.dim(2);
  Tensor<T> out({np, c});
  for (std::size_t i = 0; i < np; ++i) {
    const auto s = kernels::bilinear_sample<T>(xv, pv[2 * i], pv[2 * i + 1]);
    std::copy(s.begin(), s.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  cost::non_mac(np * c);
  return t.push(std::move(out), {x, points}, [x, points, np, c](Tape<T>& tp, Var self) {
    const Tensor<T>& g = tp.out_grad(self);
    const kernels::MapView<T> xv(tp.value(x));
    const Tensor<T>& pv = tp.value(points);
    auto* dx = tp.grad_sink(x);
    auto* dp = tp.grad_sink(points);
    for (std::size_t i = 0; i < np; ++i) {
      const auto cell = kernels::BilinearCell<T>::at(pv[2 * i], pv[2 * i + 1]);
      for (int k = 0; k < 4; ++k) {
        const auto yy = cell.cy(k), xx = cell.cx(k);
        if (!kernels::in_bounds(yy, xx, xv.height(), xv.width())) continue;
        const std::size_t base = (static_cast<std::size_t>(yy) * xv.width() + static_cast<std::size_t>(xx)) * c;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T gi = g[i * c + ch];
          if (dx) (*dx)[base + ch] += cell.weight(k) * gi;
          if (dp) {
            (*dp)[2 * i] += cell.dweight_dy(k) * xv[base + ch] * gi;
            (*dp)[2 * i + 1] += cell.dweight_dx(k) * xv[base + ch] * gi;
          }
        }
      }
    }
  });
}

template <typename T>
Var sum(Tape<T>& t, Var x) {
  const Tensor<T>& xv = t.value(x);
  T acc{0};
  for (T v : xv.data()) acc += v;
  return t.push(Tensor<T>(Shape{1}, acc), {x}, [x](Tape<T>& tp, Var self) {
    const T g = tp.out_grad(self)[0];
    if (auto* dx = tp.grad_sink(x))
      for (auto& v : dx->vec()) v += g;
  });
}

/// Scalar <x, probe> for a fixed probe tensor of the same size.
template <typename T>
Var dot(Tape<T>& t, Var x, Tensor<T> probe) {
  const Tensor<T>& xv = t.value(x);
  if (probe.size() != xv.size()) {
    throw ShapeError("dot: probe " + shape_str(probe.shape()) + " does not match " + shape_str(xv.shape()));
  }
  T acc{0};
  for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i] * probe[i];
  return t.push(Tensor<T>(Shape{1}, acc), {x}, [x, probe = std::move(probe)](Tape<T>& tp, Var self) {
    const T g = tp.out_grad(self)[0];
    if (auto* dx = tp.grad_sink(x))
      for (std::size_t i = 0; i < probe.size(); ++i) (*dx)[i] += g * probe[i];
  });
}

}  // namespace ops

}  // namespace unihead
