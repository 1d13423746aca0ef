#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mixconv/errors.hpp"
#include "mixconv/rng.hpp"

namespace mixconv {

// Process-wide tally of tensor buffer allocations. Used by the bench
// subcommand as an allocation proxy for peak-memory comparisons.
namespace alloc_meter {
inline std::atomic<std::uint64_t>& counter() {
  static std::atomic<std::uint64_t> bytes{0};
  return bytes;
}
inline void add(std::uint64_t n) { counter().fetch_add(n, std::memory_order_relaxed); }
inline void reset() { counter().store(0, std::memory_order_relaxed); }
inline std::uint64_t total() { return counter().load(std::memory_order_relaxed); }
}  // namespace alloc_meter

// Dense row-major rank-5 array. Axis convention is [N, C, D, H, W] for
// feature maps and [C_O, C_I, K, K, K] for convolution kernels.
template <class T>
struct Tensor5 {
  std::array<int, 5> shape{0, 0, 0, 0, 0};
  std::vector<T> data;

  Tensor5() = default;

  Tensor5(int a, int b, int c, int d, int e) { resize(a, b, c, d, e); }

  void resize(int a, int b, int c, int d, int e) {
    if (a < 0 || b < 0 || c < 0 || d < 0 || e < 0)
      throw DimensionError("Tensor5: negative extent");
    shape = {a, b, c, d, e};
    const std::size_t n = static_cast<std::size_t>(a) * b * c * d * e;
    data.assign(n, T(0));
    alloc_meter::add(n * sizeof(T));
  }

  std::size_t size() const { return data.size(); }

  std::size_t index(int a, int b, int c, int d, int e) const {
    return ((((static_cast<std::size_t>(a) * shape[1] + b) * shape[2] + c) *
                 shape[3] + d) * shape[4] + e);
  }

  T& at(int a, int b, int c, int d, int e) { return data[index(a, b, c, d, e)]; }
  const T& at(int a, int b, int c, int d, int e) const {
    return data[index(a, b, c, d, e)];
  }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  bool same_shape(const Tensor5& o) const { return shape == o.shape; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  std::string shape_str() const {
    std::string s = "[";
    for (int i = 0; i < 5; ++i)
      s += std::to_string(shape[i]) + (i < 4 ? "," : "]");
    return s;
  }

  template <class U>
  Tensor5<U> cast() const {
    Tensor5<U> out(shape[0], shape[1], shape[2], shape[3], shape[4]);
    for (std::size_t i = 0; i < data.size(); ++i)
      out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

template <class T>
Tensor5<T> random_tensor(int n, int c, int d, int h, int w, Rng& rng,
                         double stddev = 1.0) {
  Tensor5<T> t(n, c, d, h, w);
  for (auto& v : t.data) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

template <class T>
bool all_finite(const Tensor5<T>& t) {
  for (T v : t.data)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

// max |a - b| over elements, for exact shape-matched pairs.
template <class T>
double max_abs_diff(const Tensor5<T>& a, const Tensor5<T>& b) {
  if (!a.same_shape(b))
    throw DimensionError("max_abs_diff: shape mismatch " + a.shape_str() +
                         " vs " + b.shape_str());
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) -
                             static_cast<double>(b.data[i])));
  return m;
}

template <class T>
double max_abs(const Tensor5<T>& t) {
  double m = 0.0;
  for (T v : t.data) m = std::max(m, std::abs(static_cast<double>(v)));
  return m;
}

// Deviation of `got` from `want`, relative to the magnitude of `want`.
template <class T>
double rel_deviation(const Tensor5<T>& want, const Tensor5<T>& got) {
  const double scale = std::max(max_abs(want), 1e-30);
  return max_abs_diff(want, got) / scale;
}

}  // namespace mixconv
