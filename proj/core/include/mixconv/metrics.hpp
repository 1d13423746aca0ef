#pragma once

#include <map>
#include <string>
#include <vector>

#include "mixconv/volume.hpp"

namespace mixconv {

struct Metrics {
  double mse = 0, mae = 0, r2 = 0;
};

// MSE, MAE and the coefficient of determination R^2 = 1 - SS_res/SS_tot,
// computed against the label's own mean.
template <class T>
Metrics metrics(const VolumeT<T>& pred, const VolumeT<T>& label) {
  if (pred.d != label.d || pred.h != label.h || pred.w != label.w)
    throw DimensionError("metrics: prediction and label extents differ");
  const std::size_t n = label.size();
  if (n == 0) throw StatisticsError("metrics: empty volumes");

  double label_mean = 0;
  for (std::size_t i = 0; i < n; ++i) label_mean += label.data[i];
  label_mean /= static_cast<double>(n);

  double ss_res = 0, ss_tot = 0, abs_sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = static_cast<double>(pred.data[i]) - label.data[i];
    const double t = static_cast<double>(label.data[i]) - label_mean;
    ss_res += r * r;
    ss_tot += t * t;
    abs_sum += std::abs(r);
  }
  if (ss_tot <= 0)
    throw StatisticsError("metrics: constant label leaves R^2 undefined");

  Metrics m;
  m.mse = ss_res / static_cast<double>(n);
  m.mae = abs_sum / static_cast<double>(n);
  m.r2 = 1.0 - ss_res / ss_tot;
  return m;
}

// Signed relative improvement over a baseline, in percent. The sign flips
// for lower-is-better metrics so that positive always means better.
inline double delta_imp(double m, double baseline, bool lower_is_better) {
  if (baseline == 0)
    throw StatisticsError("delta_imp: zero baseline value");
  const double raw = (m - baseline) / baseline * 100.0;
  return lower_is_better ? -raw : raw;
}

struct ImageMetrics {
  std::string id;
  int label = 0;
  Metrics m;
};

// Per-image metrics plus the two aggregations used in reports: the plain
// mean over all images, and per-class means.
struct MetricsReport {
  std::vector<ImageMetrics> images;

  Metrics overall() const;
  std::map<int, Metrics> per_class() const;
};

// Human-readable table: one row per structure class, an overall row, and,
// when a baseline is given, a relative-improvement row against its overall.
std::string format_report(const MetricsReport& report,
                          const MetricsReport* baseline = nullptr);

// Machine-readable key-value mirror ("overall.mse 0.4956" style), one pair
// per line; read_report_kv parses only what write_report_kv emits.
void write_report_kv(const std::string& path, const MetricsReport& report);
MetricsReport read_report_kv(const std::string& path);

}  // namespace mixconv
