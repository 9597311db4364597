#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <vector>

#include "unihead/numkit/errors.hpp"
#include "unihead/numkit/tensor.hpp"

// UHT tensor files:
//   "UHT1" | dtype u8 (0 = f32, 1 = f64) | rank u8 | rank x u32 LE dims | row-major LE payload

namespace unihead::uht {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

using Bytes = std::vector<std::uint8_t>;

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "UHT stores f32 or f64 only");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

namespace detail {

template <typename U>
void put_le(Bytes& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

template <typename T>
Bytes payload(const Tensor<T>& t) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  Bytes out;
  out.reserve(t.size() * sizeof(T));
  for (T v : t.data()) detail::put_le(out, std::bit_cast<Bits>(v));
  return out;
}

template <typename T>
Bytes encode(const Tensor<T>& t) {
  if (t.rank() > 255) throw ShapeError("uht: rank exceeds 255");
  Bytes out{'U', 'H', 'T', '1', static_cast<std::uint8_t>(dtype_of<T>()), static_cast<std::uint8_t>(t.rank())};
  for (std::size_t d : t.shape()) {
    if (d > 0xFFFFFFFFull) throw ShapeError("uht: dimension exceeds u32");
    detail::put_le(out, static_cast<std::uint32_t>(d));
  }
  const Bytes body = payload(t);
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

struct Decoded {
  DType dtype = DType::f64;
  Tensor<double> values;
};

inline Decoded decode(const Bytes& bytes) {
  if (bytes.size() < 6 || std::memcmp(bytes.data(), "UHT1", 4) != 0) throw IoError("uht: bad magic");
  const auto dtype_byte = bytes[4];
  if (dtype_byte > 1) throw IoError("uht: unknown dtype " + std::to_string(dtype_byte));
  const auto dtype = static_cast<DType>(dtype_byte);
  const std::size_t rank = bytes[5];
  std::size_t pos = 6;
  if (bytes.size() < pos + 4 * rank) throw IoError("uht: truncated header");
  Shape shape;
  for (std::size_t i = 0; i < rank; ++i, pos += 4) shape.push_back(detail::get_le<std::uint32_t>(bytes.data() + pos));
  const std::size_t n = shape_numel(shape);
  const std::size_t width = dtype == DType::f32 ? 4 : 8;
  if (bytes.size() != pos + n * width) throw IoError("uht: payload length does not match header");
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i, pos += width) {
    data[i] = dtype == DType::f32 ? static_cast<double>(std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes.data() + pos)))
                                  : std::bit_cast<double>(detail::get_le<std::uint64_t>(bytes.data() + pos));
  }
  return {dtype, Tensor<double>(std::move(shape), std::move(data))};
}

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const Bytes& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

template <typename T>
void save(const std::filesystem::path& path, const Tensor<T>& t) {
  write_file(path, encode(t));
}

inline Decoded load(const std::filesystem::path& path) {
  try {
    return decode(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace unihead::uht
