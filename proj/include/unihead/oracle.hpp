#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "unihead/numkit/errors.hpp"
#include "unihead/numkit/tensor.hpp"

// Brute-force references. Everything here is written out with plain loops over
// Tensor<double> storage; nothing calls into the production kernels, tape or
// modules, so a bug there cannot hide in both sides of a comparison.

namespace unihead::oracle {

using Map = Tensor<double>;

// ---------------------------------------------------------------------------
// error accounting

struct OracleReport {
  std::string name;
  double max_abs_err = 0;
  double max_rel_err = 0;
  long trials = 0;
  double tolerance = 0;
  bool pass = true;

  std::string json_line() const {
    nlohmann::json j{{"name", name},           {"max_abs_err", max_abs_err}, {"max_rel_err", max_rel_err},
                     {"trials", trials},       {"tolerance", tolerance},     {"pass", pass}};
    return j.dump();
  }
};

inline constexpr double kRelFloor = 1e-8;

/// Relative error of one element; absolute when the reference is tiny.
inline double rel_err(double actual, double reference) {
  const double a = std::fabs(actual - reference);
  if (!std::isfinite(actual) || !std::isfinite(reference)) return std::numeric_limits<double>::infinity();
  return std::fabs(reference) < kRelFloor ? a : a / std::fabs(reference);
}

/// Running max of abs / rel error against a fixed tolerance.
class ErrorStats {
 public:
  explicit ErrorStats(std::string name, double tolerance) {
    r_.name = std::move(name);
    r_.tolerance = tolerance;
  }

  void add(double actual, double reference) {
    const double a = std::fabs(actual - reference);
    r_.max_abs_err = std::max(r_.max_abs_err, std::isfinite(a) ? a : std::numeric_limits<double>::infinity());
    r_.max_rel_err = std::max(r_.max_rel_err, rel_err(actual, reference));
  }

  void add(std::span<const double> actual, std::span<const double> reference) {
    if (actual.size() != reference.size()) {
      throw ShapeError("oracle compare: " + std::to_string(actual.size()) + " values vs reference of " +
                       std::to_string(reference.size()));
    }
    for (std::size_t i = 0; i < actual.size(); ++i) add(actual[i], reference[i]);
  }

  /// Normwise form: every error in the block is scaled by the block's largest
  /// reference magnitude (absolute when that is below the floor).
  void add_block(std::span<const double> actual, std::span<const double> reference) {
    if (actual.size() != reference.size()) {
      throw ShapeError("oracle compare: " + std::to_string(actual.size()) + " values vs reference of " +
                       std::to_string(reference.size()));
    }
    double scale = 0;
    for (double r : reference) scale = std::max(scale, std::fabs(r));
    for (std::size_t i = 0; i < actual.size(); ++i) {
      const double a = std::fabs(actual[i] - reference[i]);
      const double e = !std::isfinite(a) ? std::numeric_limits<double>::infinity() : a;
      r_.max_abs_err = std::max(r_.max_abs_err, e);
      r_.max_rel_err = std::max(r_.max_rel_err, scale < kRelFloor ? e : e / scale);
    }
  }

  void merge(const OracleReport& other) {
    r_.max_abs_err = std::max(r_.max_abs_err, other.max_abs_err);
    r_.max_rel_err = std::max(r_.max_rel_err, other.max_rel_err);
  }

  void trial() { ++r_.trials; }

  OracleReport report() const {
    OracleReport out = r_;
    out.pass = out.max_rel_err < out.tolerance;
    return out;
  }

 private:
  OracleReport r_;
};

// ---------------------------------------------------------------------------
// dense references

inline Map naive_matmul(const Map& a, const Map& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("naive_matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Map out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      out[i * n + j] = s;
    }
  return out;
}

inline double at(const Map& x, long y, long xx, std::size_t c) {
  const long h = static_cast<long>(x.dim(0)), w = static_cast<long>(x.dim(1));
  if (y < 0 || xx < 0 || y >= h || xx >= w) return 0.0;
  return x[(static_cast<std::size_t>(y) * x.dim(1) + static_cast<std::size_t>(xx)) * x.dim(2) + c];
}

/// Sliding window, zero padding, per-channel k x k kernel (weight C x k x k).
inline Map naive_dwconv(const Map& x, const Map& weight, const Map& bias) {
  if (x.rank() != 3 || weight.rank() != 3 || weight.dim(0) != x.dim(2) || weight.dim(1) != weight.dim(2)) {
    throw ShapeError("naive_dwconv: input " + shape_str(x.shape()) + ", weight " + shape_str(weight.shape()));
  }
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2), k = weight.dim(1);
  const long r = static_cast<long>(k / 2);
  Map out({h, w, c});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t xx = 0; xx < w; ++xx)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double s = bias.size() ? bias[ch] : 0.0;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j)
            s += weight[(ch * k + i) * k + j] *
                 at(x, static_cast<long>(y) + static_cast<long>(i) - r, static_cast<long>(xx) + static_cast<long>(j) - r, ch);
        out[(y * w + xx) * c + ch] = s;
      }
  return out;
}

/// Dense k x k convolution, zero padding (weight C_out x C_in x k x k).
inline Map naive_conv(const Map& x, const Map& weight, const Map& bias) {
  if (x.rank() != 3 || weight.rank() != 4 || weight.dim(1) != x.dim(2) || weight.dim(2) != weight.dim(3)) {
    throw ShapeError("naive_conv: input " + shape_str(x.shape()) + ", weight " + shape_str(weight.shape()));
  }
  const std::size_t h = x.dim(0), w = x.dim(1), ci = x.dim(2), co = weight.dim(0), k = weight.dim(2);
  const long r = static_cast<long>(k / 2);
  Map out({h, w, co});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t xx = 0; xx < w; ++xx)
      for (std::size_t o = 0; o < co; ++o) {
        double s = bias.size() ? bias[o] : 0.0;
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j)
              s += weight[((o * ci + c) * k + i) * k + j] *
                   at(x, static_cast<long>(y) + static_cast<long>(i) - r, static_cast<long>(xx) + static_cast<long>(j) - r, c);
        out[(y * w + xx) * co + o] = s;
      }
  return out;
}

/// Bilinear interpolation as a sum of tent functions over every grid node;
/// nodes outside the map simply do not exist, which is zero padding.
inline std::vector<double> tent_sample(const Map& x, double py, double px) {
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < h; ++i) {
    const double ty = std::max(0.0, 1.0 - std::fabs(py - static_cast<double>(i)));
    if (ty == 0.0) continue;
    for (std::size_t j = 0; j < w; ++j) {
      const double tx = std::max(0.0, 1.0 - std::fabs(px - static_cast<double>(j)));
      if (tx == 0.0) continue;
      for (std::size_t ch = 0; ch < c; ++ch) out[ch] += ty * tx * x[(i * w + j) * c + ch];
    }
  }
  return out;
}

/// out(p) = b + sum_k W_k . B(x; p + p_k + dp_k) * m_k, taps p_k over the 3x3 grid in raster order.
/// offsets H x W x 9 x 2 (dy, dx); scales H x W x 9; weight C_out x C_in x 3 x 3.
inline Map naive_deform_conv(const Map& x, const Map& weight, const Map& bias, const Map& offsets, const Map& scales) {
  if (x.rank() != 3 || weight.rank() != 4 || weight.dim(1) != x.dim(2) || weight.dim(2) != 3 || weight.dim(3) != 3) {
    throw ShapeError("naive_deform_conv: input " + shape_str(x.shape()) + ", weight " + shape_str(weight.shape()));
  }
  const std::size_t h = x.dim(0), w = x.dim(1), ci = x.dim(2), co = weight.dim(0);
  if (offsets.shape() != Shape{h, w, 9, 2} || scales.shape() != Shape{h, w, 9}) {
    throw ShapeError("naive_deform_conv: offsets " + shape_str(offsets.shape()) + " / scales " + shape_str(scales.shape()) +
                     " do not cover " + shape_str(x.shape()));
  }
  Map out({h, w, co});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t xx = 0; xx < w; ++xx) {
      const std::size_t pos = y * w + xx;
      for (std::size_t o = 0; o < co; ++o) out[pos * co + o] = bias.size() ? bias[o] : 0.0;
      for (int ky = -1; ky <= 1; ++ky)
        for (int kx = -1; kx <= 1; ++kx) {
          const std::size_t k = static_cast<std::size_t>((ky + 1) * 3 + (kx + 1));
          const double sy = static_cast<double>(y) + ky + offsets[(pos * 9 + k) * 2];
          const double sx = static_cast<double>(xx) + kx + offsets[(pos * 9 + k) * 2 + 1];
          const double m = scales[pos * 9 + k];
          const auto sample = tent_sample(x, sy, sx);
          for (std::size_t o = 0; o < co; ++o) {
            double s = 0;
            for (std::size_t c = 0; c < ci; ++c)
              s += weight[((o * ci + c) * 3 + static_cast<std::size_t>(ky + 1)) * 3 + static_cast<std::size_t>(kx + 1)] * sample[c];
            out[pos * co + o] += s * m;
          }
        }
    }
  return out;
}

/// Weights of one cross-task attention unit, named from the point of view of
/// the branch being updated (target) and the branch supplying queries (guide).
struct CcaWeights {
  Map wq_guide;   // C x C
  Map wk_target;  // C x C/2
  Map wk_guide;   // C x C/2
  Map wv_target;  // C x C/2
  Map wv_guide;   // C x C/2
};

/// Channel attention between branches, with the C x C attention matrix formed
/// explicitly: A = softmax_i(Q^T K / sqrt(HW)), out = V A.
/// Returns the output map; `attention`, if given, receives A (row i, column j).
inline Map naive_cca(const Map& target, const Map& guide, const CcaWeights& p, Map* attention = nullptr) {
  if (target.rank() != 3 || target.shape() != guide.shape()) {
    throw ShapeError("naive_cca: target " + shape_str(target.shape()) + " vs guide " + shape_str(guide.shape()));
  }
  const std::size_t n = target.dim(0) * target.dim(1), c = target.dim(2), half = c / 2;
  if (c % 2 != 0 || p.wq_guide.shape() != Shape{c, c} || p.wk_target.shape() != Shape{c, half}) {
    throw ShapeError("naive_cca: weights do not match C=" + std::to_string(c));
  }
  auto proj = [&](const Map& x, const Map& wm, std::size_t t, std::size_t j) {
    const std::size_t d = wm.dim(1);
    double s = 0;
    for (std::size_t e = 0; e < c; ++e) s += x[t * c + e] * wm[e * d + j];
    return s;
  };
  // token-major Q, K, V (n x c); K and V concatenate target then guide halves
  std::vector<double> q(n * c), k(n * c), v(n * c);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t j = 0; j < c; ++j) q[t * c + j] = proj(guide, p.wq_guide, t, j);
    for (std::size_t j = 0; j < half; ++j) {
      k[t * c + j] = proj(target, p.wk_target, t, j);
      k[t * c + half + j] = proj(guide, p.wk_guide, t, j);
      v[t * c + j] = proj(target, p.wv_target, t, j);
      v[t * c + half + j] = proj(guide, p.wv_guide, t, j);
    }
  }
  const double inv = 1.0 / std::sqrt(static_cast<double>(n));
  std::vector<double> a(c * c);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      double s = 0;
      for (std::size_t t = 0; t < n; ++t) s += q[t * c + i] * k[t * c + j];
      a[i * c + j] = s * inv;
    }
  for (std::size_t j = 0; j < c; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < c; ++i) mx = std::max(mx, a[i * c + j]);
    double z = 0;
    for (std::size_t i = 0; i < c; ++i) z += std::exp(a[i * c + j] - mx);
    for (std::size_t i = 0; i < c; ++i) a[i * c + j] = std::exp(a[i * c + j] - mx) / z;
  }
  Map out(target.shape());
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < c; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < c; ++i) s += v[t * c + i] * a[i * c + j];
      out[t * c + j] = s;
    }
  if (attention) *attention = Map({c, c}, std::move(a));
  return out;
}

/// Dense single-head attention over N tokens with a boolean mask (mask[i*N+j]
/// true = token i may attend to j); masked scores are -inf before softmax.
/// tokens N x C, wq/wk C x d, wv C x dv -> N x dv.
inline Map full_attention_masked(const Map& tokens, const std::vector<bool>& mask, const Map& wq, const Map& wk,
                                 const Map& wv) {
  if (tokens.rank() != 2) throw ShapeError("full_attention_masked: tokens must be N x C, got " + shape_str(tokens.shape()));
  const std::size_t n = tokens.dim(0);
  if (mask.size() != n * n) throw ShapeError("full_attention_masked: mask must be N x N");
  for (std::size_t i = 0; i < n; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) any = any || mask[i * n + j];
    if (!any) throw ConfigError("full_attention_masked: row " + std::to_string(i) + " of the mask allows no position");
  }
  const Map q = naive_matmul(tokens, wq);
  const Map k = naive_matmul(tokens, wk);
  const Map v = naive_matmul(tokens, wv);
  const std::size_t d = q.dim(1), dv = v.dim(1);
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  const double neg_inf = -std::numeric_limits<double>::infinity();
  Map out({n, dv});
  std::vector<double> s(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = neg_inf;
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0;
      for (std::size_t e = 0; e < d; ++e) dot += q[i * d + e] * k[j * d + e];
      s[j] = mask[i * n + j] ? dot * inv : neg_inf;
      mx = std::max(mx, s[j]);
    }
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(s[j] - mx);  // exp(-inf) = 0
    for (std::size_t j = 0; j < n; ++j) {
      const double pij = std::exp(s[j] - mx) / z;
      for (std::size_t e = 0; e < dv; ++e) out[i * dv + e] += pij * v[j * dv + e];
    }
  }
  return out;
}

/// Block-diagonal mask over raster-ordered tokens of an H x W map: two positions
/// share a block when they fall in the same band of `width` rows (rows = true)
/// or `width` columns (rows = false).
inline std::vector<bool> band_mask(std::size_t h, std::size_t w, bool rows, std::size_t width) {
  const std::size_t n = h * w;
  std::vector<bool> m(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t a = rows ? i / w : i % w, b = rows ? j / w : j % w;
      m[i * n + j] = a / width == b / width;
    }
  return m;
}

// ---------------------------------------------------------------------------
// central differences

/// Central difference (f(x + h e_i) - f(x - h e_i)) / 2h in scalar type R.
template <typename R, typename F>
R central_difference(F&& f, std::vector<R> x, std::size_t i, R h) {
  if (!(h > 0)) throw UsageError("fd_partial: step must be positive");
  if (i >= x.size()) throw UsageError("fd_partial: coordinate out of range");
  const R x0 = x[i];
  x[i] = x0 + h;
  const R fp = f(x);
  x[i] = x0 - h;
  const R fm = f(x);
  if (!std::isfinite(fp) || !std::isfinite(fm)) {
    throw NumericError("fd_partial: non-finite function value at coordinate " + std::to_string(i));
  }
  return (fp - fm) / (2 * h);
}

inline double fd_partial(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x, std::size_t i,
                         double h) {
  return central_difference<double>(f, std::move(x), i, h);
}
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       const std::vector<double>& x, double h) {
  if (!(h > 0)) throw UsageError("fd_gradient: step must be positive");
  std::vector<double> g(x.size());
  std::vector<double> work = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = work[i];
    work[i] = x0 + h;
    const double fp = f(work);
    work[i] = x0 - h;
    const double fm = f(work);
    work[i] = x0;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("fd_gradient: non-finite function value at coordinate " + std::to_string(i));
    }
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

}  // namespace unihead::oracle
