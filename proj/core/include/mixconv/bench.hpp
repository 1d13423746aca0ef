#pragma once

#include <algorithm>
#include <chrono>
#include <vector>

#include "mixconv/moe_block.hpp"

namespace mixconv {

// Fixed-workload timing of one mixture block, merged versus branch-wise, in
// f32. Used by the bench subcommand and by the release gate's cost-direction
// check. Times are wall-clock per forward; allocation is the tensor-buffer
// byte tally per forward, a proxy for peak working memory.

struct BlockBenchConfig {
  int batch = 1;
  int channels = 64;
  int d = 16, h = 32, w = 32;
  int reps = 50;
  int warmup = 5;
  uint64_t seed = 1;
};

struct StrategyStats {
  std::vector<double> times_ms;
  double median_ms = 0;
  double iqr_ms = 0;
  std::uint64_t alloc_bytes = 0;
};

struct BlockBenchReport {
  BlockBenchConfig config;
  StrategyStats merged;
  StrategyStats branchwise;
  double rel_dev = 0;  // merged vs branch-wise output agreement
};

namespace detail {

inline void finalize_stats(StrategyStats& s) {
  std::vector<double> t = s.times_ms;
  std::sort(t.begin(), t.end());
  const std::size_t n = t.size();
  s.median_ms = n % 2 ? t[n / 2] : 0.5 * (t[n / 2 - 1] + t[n / 2]);
  s.iqr_ms = t[(3 * n) / 4] - t[n / 4];
}

}  // namespace detail

inline BlockBenchReport bench_block(const BlockBenchConfig& cfg) {
  if (cfg.reps < 1 || cfg.warmup < 0)
    throw ConfigError("bench: reps must be >= 1 and warmup >= 0");
  if (cfg.batch < 1 || cfg.channels < 1 || cfg.d < 1 || cfg.h < 1 || cfg.w < 1)
    throw ConfigError("bench: workload extents must be positive");

  const int tasks = 3;
  BlockConfig block;  // full expert set, task-prior softmax, BN + ReLU
  Rng rng(cfg.seed);
  MoEBlockParams<float> params =
      init_mode_block<float>(cfg.channels, cfg.channels, tasks, block, rng);
  for (auto& v : params.fc1.w) v = static_cast<float>(rng.normal(0.0, 0.5));

  const Tensor5<float> input =
      random_tensor<float>(cfg.batch, cfg.channels, cfg.d, cfg.h, cfg.w, rng);
  const TaskEmbedding task = one_hot_embed(1, tasks);

  BlockBenchReport report;
  report.config = cfg;

  Tensor5<float> out_merged, out_branch;
  for (Path path : {Path::Merged, Path::Branchwise}) {
    StrategyStats& stats =
        path == Path::Merged ? report.merged : report.branchwise;
    for (int i = 0; i < cfg.warmup; ++i)
      mode_forward(input, params, task, path, BNMode::Infer);

    std::vector<std::uint64_t> bytes;
    for (int i = 0; i < cfg.reps; ++i) {
      alloc_meter::reset();
      const auto t0 = std::chrono::steady_clock::now();
      Tensor5<float> out = mode_forward(input, params, task, path, BNMode::Infer);
      const auto t1 = std::chrono::steady_clock::now();
      bytes.push_back(alloc_meter::total());
      stats.times_ms.push_back(
          std::chrono::duration<double, std::milli>(t1 - t0).count());
      if (i == 0) (path == Path::Merged ? out_merged : out_branch) = std::move(out);
    }
    std::sort(bytes.begin(), bytes.end());
    stats.alloc_bytes = bytes[bytes.size() / 2];
    detail::finalize_stats(stats);
  }

  report.rel_dev = rel_deviation(out_branch, out_merged);
  return report;
}

}  // namespace mixconv
