#include "mixconv/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace mixconv {

std::string split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_name(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw FormatError("unknown split tag '" + s + "'");
}

const std::vector<ClassProfile>& builtin_class_profiles() {
  static const std::vector<ClassProfile> profiles = {
      {"small-blobs", false, 1.0, 2.0, 0.0, 40, 80},
      {"medium-lumps", false, 3.0, 5.0, 0.0, 8, 16},
      {"large-shells", true, 8.0, 12.0, 1.2, 2, 4},
      {"medium-shells", true, 4.0, 6.0, 1.0, 4, 8},
  };
  return profiles;
}

void validate_spec(const BenchmarkSpec& spec) {
  const int max_classes = static_cast<int>(builtin_class_profiles().size());
  if (spec.classes < 1 || spec.classes > max_classes)
    throw ConfigError("classes must be in 1.." + std::to_string(max_classes) +
                      ", got " + std::to_string(spec.classes));
  if (spec.samples_per_class < 1)
    throw ConfigError("samples_per_class must be positive");
  if (spec.d < 4 || spec.h < 4 || spec.w < 4)
    throw ConfigError("volume extents must be at least 4 voxels");
  if (spec.noise < 0 || spec.blur_sigma < 0)
    throw ConfigError("noise and blur_sigma must be non-negative");
  if (spec.test_fraction <= 0 || spec.test_fraction >= 1 ||
      spec.val_fraction <= 0 || spec.val_fraction >= 1)
    throw ConfigError("split fractions must lie strictly between 0 and 1");
}

namespace {

void add_blob(Volume& v, Rng& rng, double r_min, double r_max) {
  const double r = rng.uniform(r_min, r_max);
  const double amp = rng.uniform(0.6, 1.0);
  const double cz = rng.uniform(0, v.d - 1);
  const double cy = rng.uniform(0, v.h - 1);
  const double cx = rng.uniform(0, v.w - 1);
  const int reach = static_cast<int>(std::ceil(3 * r));
  const int z0 = std::max(0, static_cast<int>(cz) - reach);
  const int z1 = std::min(v.d - 1, static_cast<int>(cz) + reach);
  const int y0 = std::max(0, static_cast<int>(cy) - reach);
  const int y1 = std::min(v.h - 1, static_cast<int>(cy) + reach);
  const int x0 = std::max(0, static_cast<int>(cx) - reach);
  const int x1 = std::min(v.w - 1, static_cast<int>(cx) + reach);
  const double inv = 1.0 / (2 * r * r);
  for (int z = z0; z <= z1; ++z)
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dz = z - cz, dy = y - cy, dx = x - cx;
        const double d2 = dz * dz + dy * dy + dx * dx;
        v.at(z, y, x) += static_cast<float>(amp * std::exp(-d2 * inv));
      }
}

void add_shell(Volume& v, Rng& rng, double r_min, double r_max, double t) {
  const double r = rng.uniform(r_min, r_max);
  const double amp = rng.uniform(0.6, 1.0);
  const double cz = rng.uniform(0, v.d - 1);
  const double cy = rng.uniform(0, v.h - 1);
  const double cx = rng.uniform(0, v.w - 1);
  const int reach = static_cast<int>(std::ceil(r + 3 * t));
  const int z0 = std::max(0, static_cast<int>(cz) - reach);
  const int z1 = std::min(v.d - 1, static_cast<int>(cz) + reach);
  const int y0 = std::max(0, static_cast<int>(cy) - reach);
  const int y1 = std::min(v.h - 1, static_cast<int>(cy) + reach);
  const int x0 = std::max(0, static_cast<int>(cx) - reach);
  const int x1 = std::min(v.w - 1, static_cast<int>(cx) + reach);
  const double inv = 1.0 / (2 * t * t);
  for (int z = z0; z <= z1; ++z)
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dz = z - cz, dy = y - cy, dx = x - cx;
        const double dist = std::sqrt(dz * dz + dy * dy + dx * dx);
        const double off = dist - r;
        v.at(z, y, x) += static_cast<float>(amp * std::exp(-off * off * inv));
      }
}

Volume render_class(const ClassProfile& prof, int d, int h, int w, Rng& rng) {
  Volume v(d, h, w);
  const int count = static_cast<int>(rng.uniform_int(prof.count_min, prof.count_max));
  for (int i = 0; i < count; ++i) {
    if (prof.shell)
      add_shell(v, rng, prof.r_min, prof.r_max, prof.thickness);
    else
      add_blob(v, rng, prof.r_min, prof.r_max);
  }
  return v;
}

// Separable truncated-Gaussian blur along each axis in turn.
void gaussian_blur(Volume& v, double sigma) {
  if (sigma <= 0) return;
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<float> kernel(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    const double x = std::exp(-(i * i) / (2 * sigma * sigma));
    kernel[i + radius] = static_cast<float>(x);
    sum += x;
  }
  for (auto& k : kernel) k = static_cast<float>(k / sum);

  Volume tmp(v.d, v.h, v.w);
  auto pass = [&](Volume& src, Volume& dst, int axis) {
    const int ext[3] = {src.d, src.h, src.w};
    for (int z = 0; z < src.d; ++z)
      for (int y = 0; y < src.h; ++y)
        for (int x = 0; x < src.w; ++x) {
          double acc = 0;
          const int pos[3] = {z, y, x};
          for (int i = -radius; i <= radius; ++i) {
            int p[3] = {z, y, x};
            p[axis] = pos[axis] + i;
            if (p[axis] < 0 || p[axis] >= ext[axis]) continue;
            acc += kernel[i + radius] * src.at(p[0], p[1], p[2]);
          }
          dst.at(z, y, x) = static_cast<float>(acc);
        }
  };
  pass(v, tmp, 0);
  pass(tmp, v, 1);
  pass(v, tmp, 2);
  v = tmp;
}

double population_std(const Volume& v) {
  double mean = 0;
  for (float x : v.data) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0;
  for (float x : v.data) {
    const double d = x - mean;
    var += d * d;
  }
  return std::sqrt(var / static_cast<double>(v.size()));
}

}  // namespace

std::vector<SampleRef> generate_dataset(const BenchmarkSpec& spec, uint64_t seed,
                                        const std::string& out_dir) {
  validate_spec(spec);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());

  const auto& profiles = builtin_class_profiles();
  Rng root(seed);

  // Per-class stratified split, seeded independently of scene content.
  std::vector<std::vector<Split>> splits(spec.classes);
  for (int c = 0; c < spec.classes; ++c) {
    const int n = spec.samples_per_class;
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    Rng srng = root.stream("split", static_cast<uint64_t>(c + 1));
    std::shuffle(order.begin(), order.end(), srng.engine());
    const int n_test = static_cast<int>(std::llround(n * spec.test_fraction));
    const int n_val =
        static_cast<int>(std::llround((n - n_test) * spec.val_fraction));
    splits[c].assign(n, Split::Train);
    for (int i = 0; i < n_test; ++i) splits[c][order[i]] = Split::Test;
    for (int i = n_test; i < n_test + n_val; ++i) splits[c][order[i]] = Split::Val;
  }

  std::vector<SampleRef> rows;
  for (int c = 1; c <= spec.classes; ++c) {
    for (int j = 0; j < spec.samples_per_class; ++j) {
      const uint64_t id =
          static_cast<uint64_t>(c - 1) * spec.samples_per_class + j;
      Rng rng = root.stream("sample", id);

      // Every class is present in the scene; the target reveals only the
      // labeled one. The input therefore carries information about all
      // structures while each sample supervises a single class.
      std::vector<Volume> fields;
      Volume input(spec.d, spec.h, spec.w);
      for (int k = 0; k < spec.classes; ++k) {
        fields.push_back(render_class(profiles[k], spec.d, spec.h, spec.w, rng));
        for (std::size_t i = 0; i < input.data.size(); ++i)
          input.data[i] += fields.back().data[i];
      }
      gaussian_blur(input, spec.blur_sigma);
      if (spec.noise > 0) {
        const double sigma = spec.noise * population_std(input);
        for (auto& x : input.data)
          x += static_cast<float>(rng.normal(0.0, sigma));
      }

      char stem[64];
      std::snprintf(stem, sizeof stem, "c%d_s%03d", c, j);
      SampleRef ref;
      ref.input_path = std::string(stem) + "_x.vol5";
      ref.target_path = std::string(stem) + "_y.vol5";
      ref.label = c;
      ref.split = splits[c - 1][j];
      write_vol(out_dir + "/" + ref.input_path, input);
      write_vol(out_dir + "/" + ref.target_path, fields[c - 1]);
      rows.push_back(std::move(ref));
    }
  }

  write_manifest(out_dir + "/manifest.txt", rows);
  return rows;
}

void write_manifest(const std::string& path, const std::vector<SampleRef>& rows) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp + " for writing");
    f << "# input,target,label,split\n";
    for (const auto& r : rows)
      f << r.input_path << ',' << r.target_path << ',' << r.label << ','
        << split_name(r.split) << '\n';
    if (!f) throw IoError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

std::vector<SampleRef> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  std::vector<SampleRef> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string input, target, label, split;
    if (!std::getline(ss, input, ',') || !std::getline(ss, target, ',') ||
        !std::getline(ss, label, ',') || !std::getline(ss, split))
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": expected input,target,label,split");
    SampleRef r;
    r.input_path = input;
    r.target_path = target;
    try {
      r.label = std::stoi(label);
    } catch (const std::exception&) {
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": label '" + label + "' is not an integer");
    }
    if (r.label < 1)
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": label must be at least 1");
    r.split = split_from_name(split);
    rows.push_back(std::move(r));
  }
  return rows;
}

Sample load_sample(const SampleRef& ref, const std::string& base_dir,
                   bool normalize) {
  Sample s;
  const std::string base = base_dir.empty() ? "." : base_dir;
  s.input = read_vol(base + "/" + ref.input_path);
  s.target = read_vol(base + "/" + ref.target_path);
  if (s.input.d != s.target.d || s.input.h != s.target.h || s.input.w != s.target.w)
    throw DimensionError(ref.input_path + " and " + ref.target_path +
                         " have different extents");
  if (normalize) {
    s.input = zscore(s.input);
    s.target = zscore(s.target);
  }
  s.label = ref.label;
  s.split = ref.split;
  return s;
}

std::vector<Sample> load_split(const std::vector<SampleRef>& rows,
                               const std::string& base_dir, Split split,
                               const std::vector<int>& label_filter,
                               bool normalize) {
  std::vector<Sample> out;
  for (const auto& r : rows) {
    if (r.split != split) continue;
    if (!label_filter.empty() &&
        std::find(label_filter.begin(), label_filter.end(), r.label) ==
            label_filter.end())
      continue;
    out.push_back(load_sample(r, base_dir, normalize));
  }
  return out;
}

}  // namespace mixconv
