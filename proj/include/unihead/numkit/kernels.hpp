#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "unihead/numkit/cost_counter.hpp"
#include "unihead/numkit/errors.hpp"
#include "unihead/numkit/kinks.hpp"
#include "unihead/numkit/tensor.hpp"

// Forward kernels report MACs to the active CostCounter; backward kernels do not.
// Every reduction runs in ascending index order so results are bitwise reproducible.

namespace unihead::kernels {

// out[M x N] = a[M x K] * b[K x N]
template <typename T>
void gemm(std::span<const T> a, std::span<const T> b, std::span<T> out, std::size_t m, std::size_t k,
          std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) row[j] = T{0};
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

// out[M x N] += a[M x K] * b[N x K]^T
template <typename T>
void gemm_nt_acc(std::span<const T> a, std::span<const T> b, std::span<T> out, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
      out[i * n + j] += acc;
    }
  }
}

// out[M x N] += a[K x M]^T * b[K x N]
template <typename T>
void gemm_tn_acc(std::span<const T> a, std::span<const T> b, std::span<T> out, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < m; ++i) {
      const T av = a[p * m + i];
      T* row = out.data() + i * n;
      const T* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  Matrix<T> out(a.rows(), b.cols());
  gemm<T>(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.cols());
  cost::macs(a.rows() * a.cols() * b.cols());
  return out;
}

// ---------------------------------------------------------------------------
// softmax

template <typename T>
void softmax_inplace(std::span<T> v) {
  if (v.empty()) throw ShapeError("softmax: empty input");
  T mx = v[0];
  for (T x : v) mx = x > mx ? x : mx;
  T sum{0};
  for (T& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (T& x : v) x /= sum;
  cost::non_mac(v.size());
}

template <typename T>
std::vector<T> softmax(std::span<const T> v) {
  std::vector<T> out(v.begin(), v.end());
  softmax_inplace<T>(out);
  return out;
}

// dx = y * (dy - <dy, y>)
template <typename T>
std::vector<T> softmax_backward(std::span<const T> y, std::span<const T> dy) {
  T dot{0};
  for (std::size_t i = 0; i < y.size(); ++i) dot += dy[i] * y[i];
  std::vector<T> dx(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = y[i] * (dy[i] - dot);
  return dx;
}

// ---------------------------------------------------------------------------
// bilinear sampling with zero padding

/// The <= 4 grid taps around a continuous point. At exact integers the cell
/// to the lower/right of the point is used (floor), which fixes the one-sided
/// derivative there.
template <typename T>
struct BilinearCell {
  std::ptrdiff_t y0;
  std::ptrdiff_t x0;
  T ly;
  T lx;

  static BilinearCell at(T y, T x) {
    const T fy = std::floor(y);
    const T fx = std::floor(x);
    kinks::note_grid(static_cast<double>(y));
    kinks::note_grid(static_cast<double>(x));
    return {static_cast<std::ptrdiff_t>(fy), static_cast<std::ptrdiff_t>(fx), y - fy, x - fx};
  }

  // Corner i in {0,1,2,3} = (dy, dx) in {(0,0),(0,1),(1,0),(1,1)}.
  T weight(int i) const {
    const T wy = (i & 2) ? ly : T{1} - ly;
    const T wx = (i & 1) ? lx : T{1} - lx;
    return wy * wx;
  }
  T dweight_dy(int i) const {
    const T wx = (i & 1) ? lx : T{1} - lx;
    return (i & 2) ? wx : -wx;
  }
  T dweight_dx(int i) const {
    const T wy = (i & 2) ? ly : T{1} - ly;
    return (i & 1) ? wy : -wy;
  }
  std::ptrdiff_t cy(int i) const { return y0 + ((i & 2) ? 1 : 0); }
  std::ptrdiff_t cx(int i) const { return x0 + ((i & 1) ? 1 : 0); }
};

inline bool in_bounds(std::ptrdiff_t y, std::ptrdiff_t x, std::size_t h, std::size_t w) {
  return y >= 0 && x >= 0 && static_cast<std::size_t>(y) < h && static_cast<std::size_t>(x) < w;
}

/// Non-owning (y, x, c) view over a rank-3 tensor.
template <typename T>
class MapView {
 public:
  explicit MapView(const Tensor<T>& t) : data_(t.data()) {
    require_rank(t.shape(), 3, "feature map");
    h_ = t.dim(0);
    w_ = t.dim(1);
    c_ = t.dim(2);
  }
  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }
  std::size_t channels() const { return c_; }
  std::size_t size() const { return data_.size(); }
  const Shape shape() const { return {h_, w_, c_}; }
  std::span<const T> data() const { return data_; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  const T& operator()(std::size_t y, std::size_t x, std::size_t c) const { return data_[(y * w_ + x) * c_ + c]; }

 private:
  std::span<const T> data_;
  std::size_t h_ = 0, w_ = 0, c_ = 0;
};

template <typename T>
std::vector<T> bilinear_sample(const Tensor<T>& input, T py, T px) {
  const MapView<T> x(input);
  const std::size_t c = x.channels();
  std::vector<T> out(c, T{0});
  const auto cell = BilinearCell<T>::at(py, px);
  for (int i = 0; i < 4; ++i) {
    const auto yy = cell.cy(i);
    const auto xx = cell.cx(i);
    if (!in_bounds(yy, xx, x.height(), x.width())) continue;
    const T wgt = cell.weight(i);
    const T* src = &x(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), 0);
    for (std::size_t ch = 0; ch < c; ++ch) out[ch] += wgt * src[ch];
  }
  return out;
}

// ---------------------------------------------------------------------------
// depth-wise convolution, stride 1, zero padding (k-1)/2

inline void require_odd_kernel(std::size_t k, const char* what) {
  if (k % 2 == 0) throw ConfigError(std::string(what) + ": kernel size must be odd, got " + std::to_string(k));
}

template <typename T>
void check_dwconv_shapes(const MapView<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(weight.shape(), 3, "dwconv weight");
  if (weight.dim(1) != weight.dim(2)) throw ShapeError("dwconv: kernel must be square, got " + shape_str(weight.shape()));
  require_odd_kernel(weight.dim(1), "dwconv");
  if (weight.dim(0) != x.channels() || bias.size() != x.channels()) {
    throw ShapeError("dwconv: weight " + shape_str(weight.shape()) + " / bias " + shape_str(bias.shape()) +
                     " do not match input " + shape_str(x.shape()));
  }
}

/// weight: C x k x k, bias: C
template <typename T>
FeatureMap<T> dwconv(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  const MapView<T> x(input);
  check_dwconv_shapes<T>(x, weight, bias);
  const std::size_t h = x.height(), w = x.width(), c = x.channels(), k = weight.dim(1);
  const auto r = static_cast<std::ptrdiff_t>(k / 2);
  FeatureMap<T> out(h, w, c);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t xi = 0; xi < w; ++xi) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        T acc = bias[ch];
        for (std::size_t i = 0; i < k; ++i) {
          const auto yy = static_cast<std::ptrdiff_t>(y + i) - r;
          for (std::size_t j = 0; j < k; ++j) {
            const auto xx = static_cast<std::ptrdiff_t>(xi + j) - r;
            if (!in_bounds(yy, xx, h, w)) continue;
            acc += weight[(ch * k + i) * k + j] * x(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), ch);
          }
        }
        out(y, xi, ch) = acc;
      }
    }
  }
  cost::macs(h * w * c * k * k);
  return out;
}

template <typename T>
void dwconv_backward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& grad_out, Tensor<T>* dx,
                     Tensor<T>* dweight, Tensor<T>* dbias) {
  const MapView<T> x(input);
  const MapView<T> dy(grad_out);
  const std::size_t h = x.height(), w = x.width(), c = x.channels(), k = weight.dim(1);
  const auto r = static_cast<std::ptrdiff_t>(k / 2);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t xi = 0; xi < w; ++xi) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T g = dy(y, xi, ch);
        if (dbias) (*dbias)[ch] += g;
        for (std::size_t i = 0; i < k; ++i) {
          const auto yy = static_cast<std::ptrdiff_t>(y + i) - r;
          for (std::size_t j = 0; j < k; ++j) {
            const auto xx = static_cast<std::ptrdiff_t>(xi + j) - r;
            if (!in_bounds(yy, xx, h, w)) continue;
            const std::size_t src = (static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)) * c + ch;
            const std::size_t widx = (ch * k + i) * k + j;
            if (dweight) (*dweight)[widx] += g * x[src];
            if (dx) (*dx)[src] += g * weight[widx];
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// dense convolution, stride 1, zero padding (k-1)/2

/// weight: C_out x C_in x k x k, bias: C_out
template <typename T>
FeatureMap<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  const MapView<T> x(input);
  require_rank(weight.shape(), 4, "conv2d weight");
  if (weight.dim(2) != weight.dim(3)) throw ShapeError("conv2d: kernel must be square, got " + shape_str(weight.shape()));
  require_odd_kernel(weight.dim(2), "conv2d");
  if (weight.dim(1) != x.channels() || bias.size() != weight.dim(0)) {
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " / bias " + shape_str(bias.shape()) +
                     " do not match input " + shape_str(x.shape()));
  }
  const std::size_t h = x.height(), w = x.width(), ci = x.channels(), co = weight.dim(0), k = weight.dim(2);
  const auto r = static_cast<std::ptrdiff_t>(k / 2);
  FeatureMap<T> out(h, w, co);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t xi = 0; xi < w; ++xi) {
      for (std::size_t o = 0; o < co; ++o) {
        T acc = bias[o];
        for (std::size_t i = 0; i < k; ++i) {
          const auto yy = static_cast<std::ptrdiff_t>(y + i) - r;
          for (std::size_t j = 0; j < k; ++j) {
            const auto xx = static_cast<std::ptrdiff_t>(xi + j) - r;
            if (!in_bounds(yy, xx, h, w)) continue;
            const T* src = &x(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), 0);
            for (std::size_t c = 0; c < ci; ++c) acc += weight[((o * ci + c) * k + i) * k + j] * src[c];
          }
        }
        out(y, xi, o) = acc;
      }
    }
  }
  cost::macs(h * w * co * ci * k * k);
  return out;
}

template <typename T>
void conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& grad_out, Tensor<T>* dx,
                     Tensor<T>* dweight, Tensor<T>* dbias) {
  const MapView<T> x(input);
  const MapView<T> dy(grad_out);
  const std::size_t h = x.height(), w = x.width(), ci = x.channels(), co = weight.dim(0), k = weight.dim(2);
  const auto r = static_cast<std::ptrdiff_t>(k / 2);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t xi = 0; xi < w; ++xi) {
      for (std::size_t o = 0; o < co; ++o) {
        const T g = dy(y, xi, o);
        if (dbias) (*dbias)[o] += g;
        for (std::size_t i = 0; i < k; ++i) {
          const auto yy = static_cast<std::ptrdiff_t>(y + i) - r;
          for (std::size_t j = 0; j < k; ++j) {
            const auto xx = static_cast<std::ptrdiff_t>(xi + j) - r;
            if (!in_bounds(yy, xx, h, w)) continue;
            const std::size_t base = (static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)) * ci;
            for (std::size_t c = 0; c < ci; ++c) {
              const std::size_t widx = ((o * ci + c) * k + i) * k + j;
              if (dweight) (*dweight)[widx] += g * x[base + c];
              if (dx) (*dx)[base + c] += g * weight[widx];
            }
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// layer normalization over channels at every spatial position

template <typename T>
FeatureMap<T> layernorm(const Tensor<T>& input, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const MapView<T> x(input);
  const std::size_t c = x.channels();
  if (gain.size() != c || bias.size() != c) throw ShapeError("layernorm: gain/bias do not match " + shape_str(x.shape()));
  if (!(eps > T{0})) throw ConfigError("layernorm: eps must be positive");
  FeatureMap<T> out(x.height(), x.width(), c);
  const std::size_t positions = x.height() * x.width();
  for (std::size_t p = 0; p < positions; ++p) {
    const T* src = x.data().data() + p * c;
    T mean{0};
    for (std::size_t i = 0; i < c; ++i) mean += src[i];
    mean /= static_cast<T>(c);
    T var{0};
    for (std::size_t i = 0; i < c; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= static_cast<T>(c);
    const T rstd = T{1} / std::sqrt(var + eps);
    T* dst = out.data().data() + p * c;
    for (std::size_t i = 0; i < c; ++i) dst[i] = gain[i] * ((src[i] - mean) * rstd) + bias[i];
  }
  cost::non_mac(x.size());
  return out;
}

template <typename T>
void layernorm_backward(const Tensor<T>& input, const Tensor<T>& gain, T eps, const Tensor<T>& grad_out,
                        Tensor<T>* dx, Tensor<T>* dgain, Tensor<T>* dbias) {
  const MapView<T> x(input);
  const MapView<T> dy(grad_out);
  const std::size_t c = x.channels();
  const std::size_t positions = x.height() * x.width();
  std::vector<T> xhat(c), dxhat(c);
  for (std::size_t p = 0; p < positions; ++p) {
    const T* src = x.data().data() + p * c;
    const T* g = dy.data().data() + p * c;
    T mean{0};
    for (std::size_t i = 0; i < c; ++i) mean += src[i];
    mean /= static_cast<T>(c);
    T var{0};
    for (std::size_t i = 0; i < c; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= static_cast<T>(c);
    const T rstd = T{1} / std::sqrt(var + eps);
    T mean_dxhat{0}, mean_dxhat_xhat{0};
    for (std::size_t i = 0; i < c; ++i) {
      xhat[i] = (src[i] - mean) * rstd;
      dxhat[i] = g[i] * gain[i];
      mean_dxhat += dxhat[i];
      mean_dxhat_xhat += dxhat[i] * xhat[i];
      if (dgain) (*dgain)[i] += g[i] * xhat[i];
      if (dbias) (*dbias)[i] += g[i];
    }
    mean_dxhat /= static_cast<T>(c);
    mean_dxhat_xhat /= static_cast<T>(c);
    if (dx) {
      for (std::size_t i = 0; i < c; ++i) {
        (*dx)[p * c + i] += rstd * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
      }
    }
  }
}

}  // namespace unihead::kernels
