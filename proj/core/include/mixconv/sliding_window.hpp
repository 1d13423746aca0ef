#pragma once

#include <array>
#include <vector>

#include "mixconv/network.hpp"
#include "mixconv/volume.hpp"

namespace mixconv {

// Separable Gaussian importance map over a window, sigma = extent/8 per
// axis, peak normalized to 1 and floored at 1e-8 so every voxel keeps a
// strictly positive weight.
template <class T>
VolumeT<T> gaussian_weight_map(int wd, int wh, int ww) {
  if (wd < 1 || wh < 1 || ww < 1)
    throw DimensionError("gaussian_weight_map: extents must be positive");
  auto axis_profile = [](int n) {
    std::vector<double> p(n);
    const double center = (n - 1) / 2.0;
    const double sigma = n / 8.0;
    double peak = 0;
    for (int i = 0; i < n; ++i) {
      const double d = i - center;
      p[i] = std::exp(-d * d / (2 * sigma * sigma));
      peak = std::max(peak, p[i]);
    }
    for (auto& v : p) v /= peak;
    return p;
  };
  const auto pd = axis_profile(wd), ph = axis_profile(wh), pw = axis_profile(ww);
  VolumeT<T> map(wd, wh, ww);
  for (int z = 0; z < wd; ++z)
    for (int y = 0; y < wh; ++y)
      for (int x = 0; x < ww; ++x)
        map.at(z, y, x) = static_cast<T>(std::max(pd[z] * ph[y] * pw[x], 1e-8));
  return map;
}

struct WindowPlan {
  int wd = 0, wh = 0, ww = 0;
  int sd = 0, sh = 0, sw = 0;
  std::vector<std::array<int, 3>> origins;
  VolumeT<double> weights;
};

// Tile origins at stride intervals (default half-window); the final tile on
// each axis shifts inward so it ends exactly at the volume boundary and no
// voxel is left uncovered.
inline WindowPlan make_window_plan(int vd, int vh, int vw, int wd, int wh,
                                   int ww, int sd = 0, int sh = 0, int sw = 0) {
  if (wd > vd || wh > vh || ww > vw)
    throw GeometryError("window (" + std::to_string(wd) + "x" +
                        std::to_string(wh) + "x" + std::to_string(ww) +
                        ") exceeds volume extents");
  WindowPlan plan;
  plan.wd = wd;
  plan.wh = wh;
  plan.ww = ww;
  plan.sd = sd > 0 ? sd : std::max(1, wd / 2);
  plan.sh = sh > 0 ? sh : std::max(1, wh / 2);
  plan.sw = sw > 0 ? sw : std::max(1, ww / 2);

  auto axis_origins = [](int vol, int win, int stride) {
    std::vector<int> o;
    for (int p = 0; p + win <= vol; p += stride) o.push_back(p);
    if (o.empty() || o.back() + win < vol) o.push_back(vol - win);
    return o;
  };
  for (int z : axis_origins(vd, wd, plan.sd))
    for (int y : axis_origins(vh, wh, plan.sh))
      for (int x : axis_origins(vw, ww, plan.sw))
        plan.origins.push_back({z, y, x});
  plan.weights = gaussian_weight_map<double>(wd, wh, ww);
  return plan;
}

// Predict a full volume by running the network on overlapping tiles and
// blending them as a Gaussian-weighted mean. Accumulation is in f64 and
// strictly tile-ordered, so results are reproducible.
template <class T>
VolumeT<T> sliding_window_predict(const VolumeT<T>& vol, NetworkParams<T>& params,
                                  int task, const WindowPlan& plan,
                                  Path path = Path::Merged,
                                  bool replay_stored_gates = false) {
  VolumeT<double> num(vol.d, vol.h, vol.w), den(vol.d, vol.h, vol.w);
  Tensor5<T> tile(1, 1, plan.wd, plan.wh, plan.ww);
  for (const auto& org : plan.origins) {
    for (int z = 0; z < plan.wd; ++z)
      for (int y = 0; y < plan.wh; ++y)
        for (int x = 0; x < plan.ww; ++x)
          tile.at(0, 0, z, y, x) = vol.at(org[0] + z, org[1] + y, org[2] + x);
    const Tensor5<T> pred =
        net_forward(tile, params, task, path, BNMode::Infer,
                    static_cast<NetCache<T>*>(nullptr), replay_stored_gates);
    for (int z = 0; z < plan.wd; ++z)
      for (int y = 0; y < plan.wh; ++y)
        for (int x = 0; x < plan.ww; ++x) {
          const double w = plan.weights.at(z, y, x);
          num.at(org[0] + z, org[1] + y, org[2] + x) +=
              w * static_cast<double>(pred.at(0, 0, z, y, x));
          den.at(org[0] + z, org[1] + y, org[2] + x) += w;
        }
  }
  VolumeT<T> out(vol.d, vol.h, vol.w);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    if (den.data[i] <= 0)
      throw GeometryError("sliding window left a voxel uncovered");
    out.data[i] = static_cast<T>(num.data[i] / den.data[i]);
  }
  return out;
}

}  // namespace mixconv
