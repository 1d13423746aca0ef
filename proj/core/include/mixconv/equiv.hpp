#pragma once

#include <string>
#include <vector>

#include "mixconv/network.hpp"

namespace mixconv {

// Randomized agreement suites between the two forward strategies. Branch-wise
// evaluation is the reference (it applies each expert literally); the merged
// path must reproduce it to tight tolerance in both precisions. The CLI's
// check-equiv subcommand and the release gate both run these.

struct EquivCase {
  int index = 0;
  std::string desc;
  double dev_f64 = 0;
  double dev_f32 = 0;
};

struct EquivReport {
  std::vector<EquivCase> cases;
  double max_f64 = 0;
  double max_f32 = 0;
};

namespace detail {

// One random block setup per case: expert subset, gating flavor, channel
// counts, and input extents all vary so the suite sweeps the whole
// configuration surface.
struct EquivSetup {
  BlockConfig block;
  int ci = 1, co = 1, tasks = 2, task = 1;
  EmbedKind embed = EmbedKind::OneHot;
  int n = 1, d = 4, h = 4, w = 4;
};

inline EquivSetup draw_equiv_setup(Rng& rng) {
  EquivSetup s;
  s.ci = static_cast<int>(rng.uniform_int(1, 5));
  s.co = static_cast<int>(rng.uniform_int(1, 6));
  s.tasks = static_cast<int>(rng.uniform_int(2, 5));
  s.task = static_cast<int>(rng.uniform_int(1, s.tasks));
  s.embed = rng.coin() ? EmbedKind::OneHot : EmbedKind::Gaussian;
  s.n = static_cast<int>(rng.uniform_int(1, 2));
  s.d = static_cast<int>(rng.uniform_int(4, 7));
  s.h = static_cast<int>(rng.uniform_int(4, 8));
  s.w = static_cast<int>(rng.uniform_int(4, 8));

  s.block.experts.clear();
  for (const ExpertSpec& e : default_experts())
    if (rng.coin()) s.block.experts.push_back(e);
  if (s.block.experts.empty())
    s.block.experts.push_back(
        default_experts()[rng.uniform_int(0, 4)]);

  s.block.gating.fcn = rng.coin() ? FcnKind::SingleLayer : FcnKind::TwoLayer;
  s.block.gating.activation =
      rng.coin() ? GateActivation::Softmax : GateActivation::Sigmoid;
  s.block.gating.source =
      rng.coin() ? GateSource::TaskPrior : GateSource::InputDependent;
  s.block.batch_norm = rng.coin();
  s.block.relu = rng.coin();
  // Biases live only on blocks without a following BN (the head position).
  s.block.bias = !s.block.batch_norm && rng.coin();
  return s;
}

inline std::string describe(const EquivSetup& s) {
  std::string experts;
  for (const auto& e : s.block.experts) {
    if (!experts.empty()) experts += "+";
    experts += expert_name(e);
  }
  return experts + " " + std::to_string(s.ci) + "->" + std::to_string(s.co) +
         " " + fcn_name(s.block.gating.fcn) + "/" +
         activation_name(s.block.gating.activation) + "/" +
         gate_source_name(s.block.gating.source) +
         (s.block.batch_norm ? " bn" : "") + (s.block.bias ? " bias" : "");
}

// Merged-vs-branchwise deviation for one precision. A nonzero perturbation
// nudges a single expert weight on the merged side only, giving the
// sensitivity check something the suite is guaranteed to notice.
template <class T>
double equiv_deviation(const EquivSetup& s, uint64_t seed, int index,
                       double perturb) {
  Rng prng = Rng(seed).stream("equiv-params", static_cast<uint64_t>(index));
  const int gate_in =
      s.block.gating.source == GateSource::TaskPrior ? s.tasks : s.ci;
  MoEBlockParams<T> params =
      init_mode_block<T>(s.ci, s.co, gate_in, s.block, prng);
  // Zero-initialized gating weights make every case degenerate; randomize
  // them so the gates are genuinely mixed.
  for (auto& v : params.fc1.w) v = static_cast<T>(prng.normal(0.0, 0.5));
  for (auto& v : params.fc1.b) v = static_cast<T>(prng.normal(0.0, 0.5));
  for (auto& v : params.fc2.w) v = static_cast<T>(prng.normal(0.0, 0.5));
  for (auto& v : params.fc2.b) v = static_cast<T>(prng.normal(0.0, 0.5));
  if (params.bn) {
    Rng brng = Rng(seed).stream("equiv-bn", static_cast<uint64_t>(index));
    for (auto& v : params.bn->gamma) v = static_cast<T>(brng.uniform(0.5, 1.5));
    for (auto& v : params.bn->beta) v = static_cast<T>(brng.normal(0.0, 0.3));
    for (auto& v : params.bn->running_mean) v = static_cast<T>(brng.normal());
    for (auto& v : params.bn->running_var) v = static_cast<T>(brng.uniform(0.2, 2.0));
  }

  Rng irng = Rng(seed).stream("equiv-input", static_cast<uint64_t>(index));
  const Tensor5<T> input = random_tensor<T>(s.n, s.ci, s.d, s.h, s.w, irng);
  const TaskEmbedding task =
      s.embed == EmbedKind::OneHot
          ? one_hot_embed(s.task, s.tasks)
          : gaussian_embed(s.task, s.tasks, seed ^ 0x9e3779b9u);

  const Tensor5<T> branch =
      mode_forward(input, params, task, Path::Branchwise, BNMode::Infer);
  if (perturb != 0)
    params.experts[0].conv_weights.data[0] += static_cast<T>(perturb);
  const Tensor5<T> merged =
      mode_forward(input, params, task, Path::Merged, BNMode::Infer);
  return rel_deviation(branch, merged);
}

}  // namespace detail

// Block-level suite: `trials` random configurations, each checked in f64 and
// f32. `perturb` injects a single-weight error into the merged side so the
// suite's sensitivity can be demonstrated (0 disables).
inline EquivReport run_block_equiv_suite(int trials, uint64_t seed,
                                         double perturb = 0) {
  if (trials < 1) throw ConfigError("equivalence suite needs at least one trial");
  EquivReport report;
  for (int i = 0; i < trials; ++i) {
    Rng crng = Rng(seed).stream("equiv-case", static_cast<uint64_t>(i));
    const detail::EquivSetup setup = detail::draw_equiv_setup(crng);
    EquivCase c;
    c.index = i;
    c.desc = detail::describe(setup);
    c.dev_f64 = detail::equiv_deviation<double>(setup, seed, i, perturb);
    c.dev_f32 = detail::equiv_deviation<float>(setup, seed, i, perturb);
    report.max_f64 = std::max(report.max_f64, c.dev_f64);
    report.max_f32 = std::max(report.max_f32, c.dev_f32);
    report.cases.push_back(std::move(c));
  }
  return report;
}

// End-to-end suite: whole networks, all three variants, f64 only. Returns
// per-case deviations; the caller applies its tolerance.
inline EquivReport run_network_equiv_suite(int trials, uint64_t seed) {
  if (trials < 1) throw ConfigError("equivalence suite needs at least one trial");
  EquivReport report;
  for (int i = 0; i < trials; ++i) {
    Rng crng = Rng(seed).stream("net-equiv", static_cast<uint64_t>(i));
    ArchConfig arch;
    arch.depth = static_cast<int>(crng.uniform_int(1, 2));
    arch.base_channels = static_cast<int>(crng.uniform_int(2, 4));
    arch.tasks = static_cast<int>(crng.uniform_int(2, 3));
    const int v = static_cast<int>(crng.uniform_int(0, 2));
    arch.variant = v == 0   ? NetVariant::TaskConditional
                   : v == 1 ? NetVariant::Plain
                            : NetVariant::MultiDecoder;
    arch.embed = crng.coin() ? EmbedKind::OneHot : EmbedKind::Gaussian;
    arch.embed_seed = seed + static_cast<uint64_t>(i);
    arch.gating.fcn = crng.coin() ? FcnKind::SingleLayer : FcnKind::TwoLayer;
    arch.gating.activation =
        crng.coin() ? GateActivation::Softmax : GateActivation::Sigmoid;
    arch.gating.source =
        crng.coin() ? GateSource::TaskPrior : GateSource::InputDependent;

    Rng prng = Rng(seed).stream("net-params", static_cast<uint64_t>(i));
    NetworkParams<double> params = build_network<double>(arch, prng);
    // Same motivation as the block suite: non-uniform gates.
    for_each_group<double>(params, nullptr, [&](const ParamGroup<double>& g) {
      if (g.name.find(".fc") != std::string::npos)
        for (std::size_t k = 0; k < g.count; ++k)
          g.param[k] = prng.normal(0.0, 0.5);
    });

    const int side = 4 << arch.depth;
    Rng irng = Rng(seed).stream("net-input", static_cast<uint64_t>(i));
    const Tensor5<double> input =
        random_tensor<double>(1, 1, side, side, side, irng);
    const int task = static_cast<int>(crng.uniform_int(1, arch.tasks));

    const Tensor5<double> branch =
        net_forward(input, params, task, Path::Branchwise, BNMode::Infer);
    const Tensor5<double> merged =
        net_forward(input, params, task, Path::Merged, BNMode::Infer);

    EquivCase c;
    c.index = i;
    c.desc = variant_name(arch.variant) + " depth" + std::to_string(arch.depth) +
             " base" + std::to_string(arch.base_channels) + " task" +
             std::to_string(task);
    c.dev_f64 = rel_deviation(branch, merged);
    report.max_f64 = std::max(report.max_f64, c.dev_f64);
    report.cases.push_back(std::move(c));
  }
  return report;
}

}  // namespace mixconv
