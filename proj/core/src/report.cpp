#include "mixconv/metrics.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace mixconv {

namespace {

Metrics mean_of(const std::vector<const Metrics*>& items) {
  Metrics out;
  for (const Metrics* m : items) {
    out.mse += m->mse;
    out.mae += m->mae;
    out.r2 += m->r2;
  }
  const double n = static_cast<double>(items.size());
  out.mse /= n;
  out.mae /= n;
  out.r2 /= n;
  return out;
}

}  // namespace

Metrics MetricsReport::overall() const {
  if (images.empty()) throw StatisticsError("report has no images to aggregate");
  std::vector<const Metrics*> all;
  for (const auto& im : images) all.push_back(&im.m);
  return mean_of(all);
}

std::map<int, Metrics> MetricsReport::per_class() const {
  std::map<int, std::vector<const Metrics*>> buckets;
  for (const auto& im : images) buckets[im.label].push_back(&im.m);
  std::map<int, Metrics> out;
  for (const auto& [label, items] : buckets) out[label] = mean_of(items);
  return out;
}

std::string format_report(const MetricsReport& report,
                          const MetricsReport* baseline) {
  const auto per_class = report.per_class();
  const Metrics all = report.overall();

  std::ostringstream os;
  char line[128];
  os << "structure      images      MSE      MAE       R2\n";
  for (const auto& [label, m] : per_class) {
    int count = 0;
    for (const auto& im : report.images) count += im.label == label;
    std::snprintf(line, sizeof line, "class %-2d %11d %8.4f %8.4f %8.4f\n",
                  label, count, m.mse, m.mae, m.r2);
    os << line;
  }
  std::snprintf(line, sizeof line, "overall  %11zu %8.4f %8.4f %8.4f\n",
                report.images.size(), all.mse, all.mae, all.r2);
  os << line;

  if (baseline) {
    const Metrics base = baseline->overall();
    std::snprintf(line, sizeof line,
                  "improvement vs baseline (%%): MSE %+7.3f  MAE %+7.3f  R2 %+7.3f\n",
                  delta_imp(all.mse, base.mse, true),
                  delta_imp(all.mae, base.mae, true),
                  delta_imp(all.r2, base.r2, false));
    os << line;
  }
  return os.str();
}

void write_report_kv(const std::string& path, const MetricsReport& report) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp + " for writing");
    f.precision(12);
    f << "images " << report.images.size() << '\n';
    const Metrics all = report.overall();
    f << "overall.mse " << all.mse << '\n';
    f << "overall.mae " << all.mae << '\n';
    f << "overall.r2 " << all.r2 << '\n';
    for (const auto& [label, m] : report.per_class()) {
      f << "class." << label << ".mse " << m.mse << '\n';
      f << "class." << label << ".mae " << m.mae << '\n';
      f << "class." << label << ".r2 " << m.r2 << '\n';
    }
    for (const auto& im : report.images) {
      f << "image." << im.id << ".label " << im.label << '\n';
      f << "image." << im.id << ".mse " << im.m.mse << '\n';
      f << "image." << im.id << ".mae " << im.m.mae << '\n';
      f << "image." << im.id << ".r2 " << im.m.r2 << '\n';
    }
    if (!f) throw IoError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

MetricsReport read_report_kv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);

  MetricsReport report;
  std::map<std::string, std::size_t> index;
  auto image_for = [&](const std::string& id) -> ImageMetrics& {
    auto it = index.find(id);
    if (it == index.end()) {
      index[id] = report.images.size();
      report.images.push_back(ImageMetrics{id, 0, {}});
      return report.images.back();
    }
    return report.images[it->second];
  };

  std::string key;
  double value;
  int lineno = 0;
  std::string line;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    if (!(ss >> key >> value))
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": expected 'key value'");
    if (key.rfind("image.", 0) != 0) continue;  // aggregates are recomputed
    const std::size_t last_dot = key.rfind('.');
    if (last_dot == std::string::npos || last_dot <= 6)
      throw FormatError(path + ":" + std::to_string(lineno) + ": bad image key");
    const std::string id = key.substr(6, last_dot - 6);
    const std::string field = key.substr(last_dot + 1);
    ImageMetrics& im = image_for(id);
    if (field == "label")
      im.label = static_cast<int>(value);
    else if (field == "mse")
      im.m.mse = value;
    else if (field == "mae")
      im.m.mae = value;
    else if (field == "r2")
      im.m.r2 = value;
    else
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": unknown image field '" + field + "'");
  }
  if (report.images.empty())
    throw FormatError(path + ": no per-image records found");
  return report;
}

}  // namespace mixconv
