#pragma once

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

// Deformation perception: modulated deformable 3x3 convolution whose sampling
// offsets and modulation scales are predicted from the input by a plain 3x3
// convolution.
//
//   out(p) = b + sum_k W_k * B(x; p + p_k + dp_k) * m_k,   k = 0..8
//
// with p_k the 3x3 grid (row-major, (-1,-1) first), B zero-padded bilinear
// sampling, and m_k = sigmoid of the predictor's modulation logits.

namespace unihead::deform {

inline constexpr std::size_t kTaps = 9;
inline constexpr std::size_t kOffsetChannels = 2 * kTaps;
inline constexpr std::size_t kPredictorChannels = 3 * kTaps;

/// Grid displacement of tap k, (dy, dx).
constexpr std::pair<int, int> tap_offset(std::size_t k) {
  return {static_cast<int>(k / 3) - 1, static_cast<int>(k % 3) - 1};
}

template <typename T>
struct DeformParams {
  Tensor<T> conv_weight;       // C_out x C_in x 3 x 3
  Tensor<T> conv_bias;         // C_out
  Tensor<T> predictor_weight;  // 27 x C_in x 3 x 3: 18 offset channels (dy_k, dx_k interleaved), then 9 logits
  Tensor<T> predictor_bias;    // 27

  std::size_t in_channels() const { return conv_weight.dim(1); }
  std::size_t out_channels() const { return conv_weight.dim(0); }

  /// Glorot conv weights, zero bias, zero predictor (offsets 0, scales 0.5).
  static DeformParams init(std::size_t c_in, std::size_t c_out, std::uint64_t seed, const std::string& prefix) {
    DeformParams p;
    p.conv_weight = init::glorot<T>({c_out, c_in, 3, 3}, c_in * 9, c_out * 9, seed, prefix + ".conv.weight");
    p.conv_bias = Tensor<T>({c_out});
    p.predictor_weight = Tensor<T>({kPredictorChannels, c_in, 3, 3});
    p.predictor_bias = Tensor<T>({kPredictorChannels});
    return p;
  }

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + ".offset.weight", self.predictor_weight);
    f(prefix + ".offset.bias", self.predictor_bias);
    f(prefix + ".conv.weight", self.conv_weight);
    f(prefix + ".conv.bias", self.conv_bias);
  }

  std::size_t param_count() const {
    return conv_weight.size() + conv_bias.size() + predictor_weight.size() + predictor_bias.size();
  }
};

struct DeformVars {
  std::string prefix;
  Var conv_weight, conv_bias, predictor_weight, predictor_bias;
};

template <typename T>
DeformVars bind_params(const DeformParams<T>& p, Binder<T>& b, const std::string& prefix) {
  return {prefix, b(prefix + ".conv.weight", p.conv_weight), b(prefix + ".conv.bias", p.conv_bias),
          b(prefix + ".offset.weight", p.predictor_weight), b(prefix + ".offset.bias", p.predictor_bias)};
}

/// offsets: H x W x 9 x 2 (dy, dx in grid units), scales: H x W x 9 in (0, 1).
template <typename T>
struct OffsetField {
  Tensor<T> offsets;
  Tensor<T> scales;
};

namespace detail {

// Modulated samples: col[(p * 9 + k) * C_in + c] = m_k * B(x; p + p_k + dp_k)[c].
template <typename T>
std::vector<T> sample_columns(const kernels::MapView<T>& x, const Tensor<T>& offsets, const Tensor<T>& scales) {
  const std::size_t h = x.height(), w = x.width(), c = x.channels();
  std::vector<T> col(h * w * kTaps * c, T{0});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t xi = 0; xi < w; ++xi) {
      const std::size_t p = y * w + xi;
      for (std::size_t k = 0; k < kTaps; ++k) {
        const auto [ty, tx] = tap_offset(k);
        const T py = static_cast<T>(y) + static_cast<T>(ty) + offsets[(p * kTaps + k) * 2];
        const T px = static_cast<T>(xi) + static_cast<T>(tx) + offsets[(p * kTaps + k) * 2 + 1];
        const T m = scales[p * kTaps + k];
        const auto cell = kernels::BilinearCell<T>::at(py, px);
        T* dst = col.data() + (p * kTaps + k) * c;
        for (int i = 0; i < 4; ++i) {
          const auto yy = cell.cy(i), xx = cell.cx(i);
          if (!kernels::in_bounds(yy, xx, h, w)) continue;
          const T wgt = cell.weight(i) * m;
          const T* src = &x(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), 0);
          for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += wgt * src[ch];
        }
      }
    }
  }
  return col;
}

// C_out x C_in x 3 x 3  ->  (9 * C_in) x C_out, row index k * C_in + c.
template <typename T>
std::vector<T> weight_as_rows(const Tensor<T>& w) {
  const std::size_t co = w.dim(0), ci = w.dim(1);
  std::vector<T> rows(kTaps * ci * co);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t c = 0; c < ci; ++c)
      for (std::size_t k = 0; k < kTaps; ++k) rows[(k * ci + c) * co + o] = w[(o * ci + c) * kTaps + k];
  return rows;
}

template <typename T>
void check_shapes(const kernels::MapView<T>& x, const Tensor<T>& offsets, const Tensor<T>& scales,
                  const Tensor<T>& weight, const Tensor<T>& bias) {
  const std::size_t hw = x.height() * x.width();
  if (offsets.size() != hw * kOffsetChannels || offsets.dim(0) != x.height() || offsets.dim(1) != x.width()) {
    throw ShapeError("deform_conv: offsets " + shape_str(offsets.shape()) + " do not match input " + shape_str(x.shape()));
  }
  if (scales.size() != hw * kTaps || scales.dim(0) != x.height() || scales.dim(1) != x.width()) {
    throw ShapeError("deform_conv: scales " + shape_str(scales.shape()) + " do not match input " + shape_str(x.shape()));
  }
  require_rank(weight.shape(), 4, "deform_conv weight");
  if (weight.dim(1) != x.channels() || weight.dim(2) != 3 || weight.dim(3) != 3 || bias.size() != weight.dim(0)) {
    throw ShapeError("deform_conv: weight " + shape_str(weight.shape()) + " / bias " + shape_str(bias.shape()) +
                     " do not match input " + shape_str(x.shape()));
  }
}

}  // namespace detail

/// Differentiable w.r.t. input, offsets, scales, weight and bias.
template <typename T>
Var deform_conv(Tape<T>& t, Var x, Var offsets, Var scales, Var weight, Var bias) {
  const kernels::MapView<T> xv(t.value(x));
  const Tensor<T>& wv = t.value(weight);
  const Tensor<T>& bv = t.value(bias);
  detail::check_shapes(xv, t.value(offsets), t.value(scales), wv, bv);
  const std::size_t h = xv.height(), w = xv.width(), ci = xv.channels(), co = wv.dim(0), hw = h * w;

  auto col = detail::sample_columns(xv, t.value(offsets), t.value(scales));
  const auto wrows = detail::weight_as_rows(wv);
  FeatureMap<T> out(h, w, co);
  kernels::gemm<T>(col, wrows, out.data(), hw, kTaps * ci, co);
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t o = 0; o < co; ++o) out[p * co + o] += bv[o];
  cost::macs(hw * kTaps * ci * co);
  cost::non_mac(hw * kTaps * ci);

  return t.push(std::move(out), {x, offsets, scales, weight, bias},
                [x, offsets, scales, weight, bias, h, w, ci, co, col = std::move(col)](Tape<T>& tp, Var self) {
                  const std::size_t hw = h * w;
                  const Tensor<T>& g = tp.out_grad(self);
                  const kernels::MapView<T> xv(tp.value(x));
                  const Tensor<T>& off = tp.value(offsets);
                  const Tensor<T>& sc = tp.value(scales);
                  const Tensor<T>& wv = tp.value(weight);

                  if (auto* db = tp.grad_sink(bias))
                    for (std::size_t p = 0; p < hw; ++p)
                      for (std::size_t o = 0; o < co; ++o) (*db)[o] += g[p * co + o];

                  if (auto* dw = tp.grad_sink(weight)) {
                    std::vector<T> drows(kTaps * ci * co, T{0});
                    kernels::gemm_tn_acc<T>(col, g.data(), drows, kTaps * ci, hw, co);
                    for (std::size_t o = 0; o < co; ++o)
                      for (std::size_t c = 0; c < ci; ++c)
                        for (std::size_t k = 0; k < kTaps; ++k) (*dw)[(o * ci + c) * kTaps + k] += drows[(k * ci + c) * co + o];
                  }

                  auto* dx = tp.grad_sink(x);
                  auto* doff = tp.grad_sink(offsets);
                  auto* dsc = tp.grad_sink(scales);
                  if (!dx && !doff && !dsc) return;

                  const auto wrows = detail::weight_as_rows(wv);
                  std::vector<T> dcol(hw * kTaps * ci, T{0});
                  kernels::gemm_nt_acc<T>(g.data(), wrows, dcol, hw, co, kTaps * ci);

                  std::vector<T> sample(ci);
                  for (std::size_t y = 0; y < h; ++y) {
                    for (std::size_t xi = 0; xi < w; ++xi) {
                      const std::size_t p = y * w + xi;
                      for (std::size_t k = 0; k < kTaps; ++k) {
                        const auto [ty, tx] = tap_offset(k);
                        const T py = static_cast<T>(y) + static_cast<T>(ty) + off[(p * kTaps + k) * 2];
                        const T px = static_cast<T>(xi) + static_cast<T>(tx) + off[(p * kTaps + k) * 2 + 1];
                        const T m = sc[p * kTaps + k];
                        const auto cell = kernels::BilinearCell<T>::at(py, px);
                        const T* gcol = dcol.data() + (p * kTaps + k) * ci;
                        T dpy{0}, dpx{0};
                        std::fill(sample.begin(), sample.end(), T{0});
                        for (int i = 0; i < 4; ++i) {
                          const auto yy = cell.cy(i), xx = cell.cx(i);
                          if (!kernels::in_bounds(yy, xx, h, w)) continue;
                          const std::size_t base = (static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)) * ci;
                          const T wgt = cell.weight(i), wy = cell.dweight_dy(i), wx = cell.dweight_dx(i);
                          for (std::size_t c = 0; c < ci; ++c) {
                            const T xval = xv[base + c];
                            sample[c] += wgt * xval;
                            const T gm = gcol[c] * m;
                            if (dx) (*dx)[base + c] += wgt * gm;
                            dpy += gm * wy * xval;
                            dpx += gm * wx * xval;
                          }
                        }
                        if (doff) {
                          (*doff)[(p * kTaps + k) * 2] += dpy;
                          (*doff)[(p * kTaps + k) * 2 + 1] += dpx;
                        }
                        if (dsc) {
                          T dm{0};
                          for (std::size_t c = 0; c < ci; ++c) dm += gcol[c] * sample[c];
                          (*dsc)[p * kTaps + k] += dm;
                        }
                      }
                    }
                  }
                });
}

/// Returns (offsets H x W x 18, scales H x W x 9) on the tape.
template <typename T>
std::pair<Var, Var> predict_offsets(Tape<T>& t, Var x, const DeformVars& v) {
  LayerScope scope(v.prefix + ".offset");
  const Tensor<T>& xv = t.value(x);
  const Tensor<T>& pw = t.value(v.predictor_weight);
  require_rank(xv.shape(), 3, "predict_offsets input");
  if (pw.dim(1) != xv.dim(2)) {
    throw ShapeError("predict_offsets: input has " + std::to_string(xv.dim(2)) + " channels, predictor expects " +
                     std::to_string(pw.dim(1)));
  }
  Var raw = ops::conv2d(t, x, v.predictor_weight, v.predictor_bias);
  Var offsets = ops::slice_channels(t, raw, 0, kOffsetChannels);
  Var logits = ops::slice_channels(t, raw, kOffsetChannels, kPredictorChannels);
  return {offsets, ops::sigmoid(t, logits)};
}

template <typename T>
Var deform_layer(Tape<T>& t, Var x, Var offsets, Var scales, const DeformVars& v) {
  LayerScope scope(v.prefix + ".deform");
  return deform_conv(t, x, offsets, scales, v.conv_weight, v.conv_bias);
}

/// predict_offsets -> deform_conv -> ReLU.
template <typename T>
Var dp_block(Tape<T>& t, Var x, const DeformVars& v) {
  auto [offsets, scales] = predict_offsets(t, x, v);
  Var y = deform_layer(t, x, offsets, scales, v);
  LayerScope scope(v.prefix + ".deform");
  return ops::relu(t, y);
}

// Value-level entry points; each runs on a private non-recording tape.

template <typename T>
OffsetField<T> predict_offsets(const Tensor<T>& x, const DeformParams<T>& p) {
  Tape<T> t(false);
  Binder<T> b(t, false);
  const auto v = bind_params(p, b, "dp");
  auto [off, sc] = predict_offsets(t, t.constant(x), v);
  Tensor<T> offsets = t.value(off);
  Tensor<T> scales = t.value(sc);
  const std::size_t h = x.dim(0), w = x.dim(1);
  return {Tensor<T>({h, w, kTaps, 2}, offsets.vec()), Tensor<T>({h, w, kTaps}, scales.vec())};
}

template <typename T>
FeatureMap<T> deform_conv(const Tensor<T>& x, const OffsetField<T>& field, const DeformParams<T>& p) {
  Tape<T> t(false);
  Var y = deform_conv(t, t.constant(x), t.constant(field.offsets), t.constant(field.scales), t.constant(p.conv_weight),
                      t.constant(p.conv_bias));
  return FeatureMap<T>(t.value(y));
}

template <typename T>
FeatureMap<T> dp_block(const Tensor<T>& x, const DeformParams<T>& p) {
  Tape<T> t(false);
  Binder<T> b(t, false);
  const auto v = bind_params(p, b, "dp");
  return FeatureMap<T>(t.value(dp_block(t, t.constant(x), v)));
}

}  // namespace unihead::deform
