#pragma once

#include <string>
#include <vector>

#include "mixconv/tensor.hpp"

namespace mixconv {

// A single-channel 3D scalar field, row-major [d][h][w].
template <class T>
struct VolumeT {
  int d = 0, h = 0, w = 0;
  std::vector<T> data;

  VolumeT() = default;
  VolumeT(int dd, int hh, int ww) { resize(dd, hh, ww); }

  void resize(int dd, int hh, int ww) {
    if (dd < 0 || hh < 0 || ww < 0)
      throw DimensionError("volume extents must be non-negative");
    d = dd;
    h = hh;
    w = ww;
    data.assign(size(), T(0));
  }
  std::size_t size() const {
    return static_cast<std::size_t>(d) * h * static_cast<std::size_t>(w);
  }
  T& at(int z, int y, int x) {
    return data[(static_cast<std::size_t>(z) * h + y) * w + x];
  }
  const T& at(int z, int y, int x) const {
    return data[(static_cast<std::size_t>(z) * h + y) * w + x];
  }
};

using Volume = VolumeT<float>;

// On-disk format: magic "VOL5", u8 version (1), u8 dtype code (1 = f32,
// 2 = f64), three little-endian u32 extents (d, h, w), then the row-major
// little-endian payload. Writes go through a temp file + rename so a failed
// write never leaves a truncated volume behind.
void write_vol(const std::string& path, const VolumeT<float>& v);
void write_vol(const std::string& path, const VolumeT<double>& v);

// Readers enforce the expected dtype; use vol_dtype to dispatch if needed.
VolumeT<float> read_vol(const std::string& path);
VolumeT<double> read_vol_f64(const std::string& path);
int vol_dtype(const std::string& path);

// Normalize to mean 0 / variance 1 over the whole volume.
template <class T>
VolumeT<T> zscore(const VolumeT<T>& v) {
  if (v.size() == 0) throw StatisticsError("zscore: empty volume");
  double mean = 0;
  for (T x : v.data) mean += static_cast<double>(x);
  mean /= static_cast<double>(v.size());
  double var = 0;
  for (T x : v.data) {
    const double dlt = static_cast<double>(x) - mean;
    var += dlt * dlt;
  }
  var /= static_cast<double>(v.size());
  if (var <= 0)
    throw StatisticsError("zscore: constant volume has no scale to normalize by");
  const double inv = 1.0 / std::sqrt(var);
  VolumeT<T> out = v;
  for (T& x : out.data) x = static_cast<T>((static_cast<double>(x) - mean) * inv);
  return out;
}

template <class T, class U>
Tensor5<T> to_tensor(const VolumeT<U>& v) {
  Tensor5<T> t(1, 1, v.d, v.h, v.w);
  for (std::size_t i = 0; i < v.data.size(); ++i)
    t.data[i] = static_cast<T>(v.data[i]);
  return t;
}

template <class U, class T>
VolumeT<U> from_tensor(const Tensor5<T>& t) {
  if (t.shape[0] != 1 || t.shape[1] != 1)
    throw DimensionError("from_tensor expects a [1,1,D,H,W] tensor, got " +
                         t.shape_str());
  VolumeT<U> v(t.shape[2], t.shape[3], t.shape[4]);
  for (std::size_t i = 0; i < v.data.size(); ++i)
    v.data[i] = static_cast<U>(t.data[i]);
  return v;
}

}  // namespace mixconv
