#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "unihead/numkit/rng.hpp"
#include "unihead/numkit/tensor.hpp"

namespace unihead::init {

/// Uniform in [-a, a] with a = sqrt(6 / (fan_in + fan_out)), drawn from the
/// stream keyed by (seed, name).
template <typename T>
Tensor<T> glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, std::uint64_t seed, std::string_view name) {
  Rng rng = stream_for(seed, name);
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(rng.uniform(-a, a));
  return t;
}

template <typename T>
Tensor<T> uniform(Shape shape, double lo, double hi, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
Tensor<T> constant(Shape shape, T value) {
  return Tensor<T>(std::move(shape), value);
}

/// Standard normal clipped to [-clip, clip].
template <typename T>
Tensor<T> clipped_normal(Shape shape, double clip, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) {
    const double z = rng.normal();
    v = static_cast<T>(z < -clip ? -clip : (z > clip ? clip : z));
  }
  return t;
}

}  // namespace unihead::init
