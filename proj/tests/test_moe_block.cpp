#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mixconv/moe_block.hpp"
#include "mixconv/ops.hpp"
#include "mixconv/rng.hpp"
#include "mixconv/tensor.hpp"

using namespace mixconv;

namespace {

double dot(const Tensor5<double>& a, const Tensor5<double>& b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) acc += a.data[i] * b.data[i];
  return acc;
}

// Forward pass on throwaway copies so BN running-stat updates from Train
// mode never leak into the finite-difference baseline.
double block_loss(const Tensor5<double>& x, const MoEBlockParams<double>& p,
                  const TaskEmbedding& task, Path path, BNMode mode,
                  const Tensor5<double>& r) {
  MoEBlockParams<double> copy = p;
  return dot(mode_forward(x, copy, task, path, mode), r);
}

}  // namespace

TEST_CASE("one_hot_embed marks the 1-based task slot") {
  const TaskEmbedding e = one_hot_embed(3, 12);
  REQUIRE(e.values.size() == 12);
  for (int i = 0; i < 12; ++i) CHECK(e.values[i] == (i == 2 ? 1.0 : 0.0));
  CHECK(one_hot_embed(1, 1).values == std::vector<double>{1.0});

  for (int s = 1; s <= 12; ++s)
    for (int l = 1; l <= s; ++l) {
      double sum = 0;
      for (double v : one_hot_embed(l, s).values) sum += v;
      CHECK(sum == 1.0);
    }

  CHECK_THROWS_AS(one_hot_embed(0, 3), const DimensionError&);
  CHECK_THROWS_AS(one_hot_embed(4, 3), const DimensionError&);
  CHECK_THROWS_AS(one_hot_embed(1, 0), const DimensionError&);
}

TEST_CASE("gaussian_embed is frozen per (seed, task)") {
  const TaskEmbedding a = gaussian_embed(2, 4, 77);
  const TaskEmbedding b = gaussian_embed(2, 4, 77);
  CHECK(a.values == b.values);
  CHECK(a.origin == EmbedKind::Gaussian);

  const TaskEmbedding other_task = gaussian_embed(3, 4, 77);
  CHECK(a.values != other_task.values);
  const TaskEmbedding other_seed = gaussian_embed(2, 4, 78);
  CHECK(a.values != other_seed.values);
  CHECK_THROWS_AS(gaussian_embed(5, 4, 77), const DimensionError&);
}

TEST_CASE("enum helpers round-trip and reject unknown names") {
  CHECK(embed_from_name(embed_name(EmbedKind::Gaussian)) == EmbedKind::Gaussian);
  CHECK(fcn_from_name(fcn_name(FcnKind::TwoLayer)) == FcnKind::TwoLayer);
  CHECK(activation_from_name(activation_name(GateActivation::Sigmoid)) ==
        GateActivation::Sigmoid);
  CHECK(gate_source_from_name(gate_source_name(GateSource::InputDependent)) ==
        GateSource::InputDependent);
  CHECK_THROWS_AS(embed_from_name("onehot"), const ConfigError&);
  CHECK_THROWS_AS(fcn_from_name(""), const ConfigError&);
  CHECK_THROWS_AS(activation_from_name("relu"), const ConfigError&);
  CHECK_THROWS_AS(gate_source_from_name("prior"), const ConfigError&);

  const auto names = {"conv1", "conv3", "aconv3", "conv5", "aconv5"};
  auto inventory = default_experts();
  REQUIRE(inventory.size() == names.size());
  std::size_t i = 0;
  for (const char* n : names) {
    CHECK(expert_name(inventory[i]) == n);
    const ExpertSpec s = expert_spec_from_name(n);
    CHECK(s.kind == inventory[i].kind);
    CHECK(s.k == inventory[i].k);
    ++i;
  }
  CHECK_THROWS_AS(expert_spec_from_name("conv7"), const ConfigError&);
  CHECK_THROWS_AS(expert_spec_from_name("aconv1"), const ConfigError&);
}

TEST_CASE("softmax gate with zero logits is exactly uniform") {
  Rng rng(1);
  for (int t : {2, 4, 5}) {
    BlockConfig cfg;
    cfg.experts.assign(t, ExpertSpec{ExpertKind::Conv, 3});
    auto p = init_mode_block<double>(2, 3, 4, cfg, rng);
    const auto g = gate(std::vector<double>{0.3, -1.0, 2.0, 0.0}, p);
    REQUIRE(g.experts() == t);
    for (int e = 0; e < t; ++e)
      for (int c = 0; c < 3; ++c) CHECK(g.values[e][c] == 1.0 / t);
  }

  BlockConfig sig;
  sig.gating.activation = GateActivation::Sigmoid;
  auto p = init_mode_block<double>(2, 3, 4, sig, rng);
  const auto g = gate(std::vector<double>{1.0, 2.0, 3.0, 4.0}, p);
  for (const auto& row : g.values)
    for (double v : row) CHECK(v == 0.5);
}

TEST_CASE("softmax gate matches the closed form for a known logit vector") {
  Rng rng(2);
  BlockConfig cfg;  // default 5 experts
  auto p = init_mode_block<double>(1, 1, 1, cfg, rng);
  REQUIRE(p.fc1.rows == 5);
  p.fc1.w = {std::log(2.0), 0.0, 0.0, 0.0, 0.0};
  const auto g = gate(std::vector<double>{1.0}, p);
  CHECK(g.values[0][0] == doctest::Approx(2.0 / 6.0).epsilon(1e-12));
  for (int e = 1; e < 5; ++e)
    CHECK(g.values[e][0] == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
}

TEST_CASE("softmax gates form a simplex even under extreme logits") {
  Rng rng(3);
  BlockConfig cfg;
  auto p = init_mode_block<double>(2, 4, 3, cfg, rng);
  for (auto& w : p.fc1.w) w = rng.normal(0.0, 5.0);
  for (auto& b : p.fc1.b) b = rng.normal(0.0, 400.0);  // exp() would overflow
  const auto g = gate(std::vector<double>{1.5, -2.0, 0.5}, p);
  for (int c = 0; c < 4; ++c) {
    double sum = 0;
    for (int e = 0; e < 5; ++e) {
      const double v = g.values[e][c];
      CHECK(std::isfinite(v));
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("two-layer gate reproduces a hand-computed forward pass") {
  Rng rng(4);
  BlockConfig cfg;
  cfg.experts = {{ExpertKind::Conv, 1}, {ExpertKind::Conv, 3}};
  cfg.gating.fcn = FcnKind::TwoLayer;
  cfg.gating.hidden = 2;
  auto p = init_mode_block<double>(1, 1, 2, cfg, rng);
  p.fc1.w = {1.0, -1.0, -1.0, 2.0};
  p.fc1.b = {0.5, -0.25};
  p.fc2.w = {0.3, -0.2, 0.1, 0.4};
  p.fc2.b = {0.05, -0.05};

  const std::vector<double> x{0.8, 0.1};
  const double h0 = std::max(0.0, 1.0 * 0.8 - 1.0 * 0.1 + 0.5);
  const double h1 = std::max(0.0, -1.0 * 0.8 + 2.0 * 0.1 - 0.25);
  const double l0 = 0.3 * h0 - 0.2 * h1 + 0.05;
  const double l1 = 0.1 * h0 + 0.4 * h1 - 0.05;
  const double z = std::exp(l0) + std::exp(l1);

  const auto g = gate(x, p);
  CHECK(g.values[0][0] == doctest::Approx(std::exp(l0) / z).epsilon(1e-12));
  CHECK(g.values[1][0] == doctest::Approx(std::exp(l1) / z).epsilon(1e-12));
}

TEST_CASE("freshly initialized blocks gate uniformly for every task") {
  Rng rng(5);
  for (const FcnKind fcn : {FcnKind::SingleLayer, FcnKind::TwoLayer}) {
    BlockConfig cfg;
    cfg.gating.fcn = fcn;
    auto p = init_mode_block<double>(2, 2, 3, cfg, rng);
    for (int l = 1; l <= 3; ++l) {
      const auto emb = one_hot_embed(l, 3);
      std::vector<double> gin(emb.values.begin(), emb.values.end());
      const auto g = gate(gin, p);
      for (const auto& row : g.values)
        for (double v : row) CHECK(v == 1.0 / 5.0);
    }
  }
}

TEST_CASE("block init is seed-reproducible with fan-in-scaled spread") {
  Rng a(42), b(42);
  BlockConfig cfg;
  auto p1 = init_mode_block<double>(3, 2, 3, cfg, a);
  auto p2 = init_mode_block<double>(3, 2, 3, cfg, b);
  for (std::size_t e = 0; e < p1.experts.size(); ++e)
    CHECK(max_abs_diff(p1.experts[e].conv_weights,
                       p2.experts[e].conv_weights) == 0.0);

  // 10k pointwise weights: the sample spread must sit near sqrt(2/C_I).
  Rng c(43);
  BlockConfig pw;
  pw.experts = {{ExpertKind::Conv, 1}};
  auto wide = init_mode_block<double>(4, 2500, 1, pw, c);
  const auto& w = wide.experts[0].conv_weights.data;
  double mean = 0;
  for (double v : w) mean += v;
  mean /= static_cast<double>(w.size());
  double var = 0;
  for (double v : w) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(w.size()));
  const double want = std::sqrt(2.0 / 4.0);
  CHECK(sd == doctest::Approx(want).epsilon(0.10));

  // 3x3x3 conv expert weights scale by the full receptive-field fan-in.
  Rng d(44);
  BlockConfig k3;
  k3.experts = {{ExpertKind::Conv, 3}};
  auto deep = init_mode_block<double>(4, 400, 1, k3, d);
  const auto& w3 = deep.experts[0].conv_weights.data;
  double m3 = 0;
  for (double v : w3) m3 += v;
  m3 /= static_cast<double>(w3.size());
  double v3 = 0;
  for (double v : w3) v3 += (v - m3) * (v - m3);
  CHECK(std::sqrt(v3 / static_cast<double>(w3.size())) ==
        doctest::Approx(std::sqrt(2.0 / (4.0 * 27.0))).epsilon(0.10));
}

TEST_CASE("merged and branchwise paths agree through BN and ReLU") {
  Rng rng(6);
  for (int trial = 0; trial < 4; ++trial) {
    const int ci = rng.uniform_int(1, 3);
    const int co = rng.uniform_int(1, 3);
    BlockConfig cfg;
    cfg.bias = trial % 2 == 0;
    auto p = init_mode_block<double>(ci, co, 3, cfg, rng);
    for (auto& w : p.fc1.w) w = rng.normal();  // non-uniform gates
    if (cfg.bias)
      for (auto& e : p.experts)
        for (auto& b : *e.bias) b = rng.normal(0.0, 0.1);

    const auto x = random_tensor<double>(2, ci, 5, 6, 7, rng);
    const auto task = one_hot_embed(2, 3);
    MoECache<double> cm, cb;
    auto pm = p, pb = p;
    const auto ym = mode_forward(x, pm, task, Path::Merged, BNMode::Infer, &cm);
    const auto yb = mode_forward(x, pb, task, Path::Branchwise, BNMode::Infer, &cb);
    CHECK(rel_deviation(ym, yb) <= 1e-10);
    CHECK(rel_deviation(cm.conv_out, cb.conv_out) <= 1e-10);
  }
}

TEST_CASE("a one-hot gate on the dense 3x3x3 expert is a plain conv") {
  Rng rng(7);
  BlockConfig cfg;
  cfg.batch_norm = false;
  cfg.relu = false;
  auto p = init_mode_block<double>(2, 3, 2, cfg, rng);

  GateVector<double> g;
  g.values.assign(5, std::vector<double>(3, 0.0));
  for (int c = 0; c < 3; ++c) g.values[1][c] = 1.0;  // conv3 expert

  const auto x = random_tensor<double>(1, 2, 6, 6, 6, rng);
  const auto plain = conv3d(x, p.experts[1].conv_weights, Padding3::same(3));
  for (const Path path : {Path::Merged, Path::Branchwise}) {
    auto copy = p;
    const auto y = mode_forward_gated(x, copy, g, path);
    CHECK(rel_deviation(plain, y) <= 1e-12);
  }
}

TEST_CASE("different tasks produce different effective kernels") {
  Rng rng(8);
  BlockConfig cfg;
  auto p = init_mode_block<double>(2, 2, 3, cfg, rng);
  for (auto& w : p.fc1.w) w = rng.normal();

  auto kernel_for = [&](int l) {
    const auto emb = one_hot_embed(l, 3);
    std::vector<double> gin(emb.values.begin(), emb.values.end());
    return effective_kernel(p, gin);
  };
  const auto k1 = kernel_for(1);
  const auto k2 = kernel_for(2);
  CHECK(k1.extent() == 5);
  CHECK(max_abs_diff(k1.weights, k2.weights) > 1e-6);

  // Convolving with the effective kernel reproduces the raw block output.
  BlockConfig bare = cfg;
  bare.batch_norm = false;
  bare.relu = false;
  auto q = init_mode_block<double>(2, 2, 3, bare, rng);
  q.experts = p.experts;
  q.fc1 = p.fc1;
  const auto x = random_tensor<double>(1, 2, 6, 6, 6, rng);
  auto qc = q;
  const auto emb = one_hot_embed(1, 3);
  const auto y = mode_forward(x, qc, emb, Path::Merged);
  const auto via_kernel = conv3d(x, k1.weights, Padding3::same(5));
  CHECK(rel_deviation(via_kernel, y) <= 1e-12);
}

TEST_CASE("global_avg_pool reduces over batch and space per channel") {
  Tensor5<double> x(2, 2, 1, 1, 2);
  // channel 0 entries: 1,2 (n=0) and 3,4 (n=1) -> mean 2.5
  x.at(0, 0, 0, 0, 0) = 1.0;
  x.at(0, 0, 0, 0, 1) = 2.0;
  x.at(1, 0, 0, 0, 0) = 3.0;
  x.at(1, 0, 0, 0, 1) = 4.0;
  x.at(0, 1, 0, 0, 0) = -1.0;
  x.at(0, 1, 0, 0, 1) = 1.0;
  x.at(1, 1, 0, 0, 0) = -2.0;
  x.at(1, 1, 0, 0, 1) = 2.0;
  const auto pooled = global_avg_pool(x);
  CHECK(pooled == std::vector<double>{2.5, 0.0});

  Tensor5<double> empty(0, 2, 1, 1, 2);
  CHECK_THROWS_AS(global_avg_pool(empty), const StatisticsError&);

  GatingConfig dep;
  dep.source = GateSource::InputDependent;
  const auto gin = block_gate_input<double>(x, one_hot_embed(1, 3), dep);
  CHECK(gin == pooled);

  GatingConfig prior;
  const auto pin = block_gate_input<double>(x, one_hot_embed(2, 3), prior);
  CHECK(pin == std::vector<double>{0.0, 1.0, 0.0});
}

TEST_CASE("block gradients match finite differences") {
  Rng rng(9);
  BlockConfig cfg;
  cfg.experts = {{ExpertKind::Conv, 1}, {ExpertKind::AvgpConv, 3}};
  auto p = init_mode_block<double>(2, 2, 3, cfg, rng);
  for (auto& w : p.fc1.w) w = rng.normal(0.0, 0.5);

  auto x = random_tensor<double>(2, 2, 4, 4, 4, rng);
  const auto task = one_hot_embed(1, 3);
  const auto r = random_tensor<double>(2, 2, 4, 4, 4, rng);

  auto pc = p;
  MoECache<double> cache;
  mode_forward(x, pc, task, Path::Merged, BNMode::Train, &cache);
  MoEBlockGrads<double> grads;
  grads.resize_like(p);
  const auto dx = mode_backward(r, cache, p, grads, true);

  const double h = 1e-5;
  auto fd = [&](double* slot) {
    const double save = *slot;
    *slot = save + h;
    const double up = block_loss(x, p, task, Path::Merged, BNMode::Train, r);
    *slot = save - h;
    const double dn = block_loss(x, p, task, Path::Merged, BNMode::Train, r);
    *slot = save;
    return (up - dn) / (2 * h);
  };
  auto close = [](double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}) <= 1e-5;
  };

  for (std::size_t e = 0; e < p.experts.size(); ++e)
    for (std::size_t i = 0; i < p.experts[e].conv_weights.data.size(); i += 3)
      CHECK(close(grads.expert_w[e].data[i], fd(&p.experts[e].conv_weights.data[i])));
  for (std::size_t i = 0; i < p.fc1.w.size(); ++i)
    CHECK(close(grads.fc1.w[i], fd(&p.fc1.w[i])));
  for (std::size_t i = 0; i < p.fc1.b.size(); ++i)
    CHECK(close(grads.fc1.b[i], fd(&p.fc1.b[i])));
  for (int c = 0; c < 2; ++c) {
    CHECK(close(grads.bn_gamma[c], fd(&p.bn->gamma[c])));
    CHECK(close(grads.bn_beta[c], fd(&p.bn->beta[c])));
  }
  for (std::size_t i = 0; i < x.data.size(); i += 17)
    CHECK(close(dx.data[i], fd(&x.data[i])));
}

TEST_CASE("two-layer and input-dependent gradients match finite differences") {
  Rng rng(10);
  BlockConfig cfg;
  cfg.experts = {{ExpertKind::Conv, 1}, {ExpertKind::Conv, 3}};
  cfg.gating.fcn = FcnKind::TwoLayer;
  cfg.gating.hidden = 3;
  cfg.gating.source = GateSource::InputDependent;
  auto p = init_mode_block<double>(2, 2, 2, cfg, rng);
  for (auto& w : p.fc2.w) w = rng.normal(0.0, 0.5);

  auto x = random_tensor<double>(1, 2, 4, 4, 4, rng);
  const auto task = one_hot_embed(1, 2);
  const auto r = random_tensor<double>(1, 2, 4, 4, 4, rng);

  auto pc = p;
  MoECache<double> cache;
  mode_forward(x, pc, task, Path::Branchwise, BNMode::Train, &cache);
  MoEBlockGrads<double> grads;
  grads.resize_like(p);
  const auto dx = mode_backward(r, cache, p, grads, true);

  const double h = 1e-5;
  auto fd = [&](double* slot) {
    const double save = *slot;
    *slot = save + h;
    const double up = block_loss(x, p, task, Path::Branchwise, BNMode::Train, r);
    *slot = save - h;
    const double dn = block_loss(x, p, task, Path::Branchwise, BNMode::Train, r);
    *slot = save;
    return (up - dn) / (2 * h);
  };
  auto close = [](double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}) <= 1e-5;
  };

  for (std::size_t i = 0; i < p.fc1.w.size(); ++i)
    CHECK(close(grads.fc1.w[i], fd(&p.fc1.w[i])));
  for (std::size_t i = 0; i < p.fc2.w.size(); ++i)
    CHECK(close(grads.fc2.w[i], fd(&p.fc2.w[i])));
  for (std::size_t i = 0; i < p.fc2.b.size(); ++i)
    CHECK(close(grads.fc2.b[i], fd(&p.fc2.b[i])));
  // dx picks up the gate path through the global average pool as well.
  for (std::size_t i = 0; i < x.data.size(); i += 13)
    CHECK(close(dx.data[i], fd(&x.data[i])));
}

TEST_CASE("merged and branchwise backward passes agree") {
  Rng rng(11);
  BlockConfig cfg;
  auto p = init_mode_block<double>(2, 3, 3, cfg, rng);
  for (auto& w : p.fc1.w) w = rng.normal(0.0, 0.5);
  const auto x = random_tensor<double>(2, 2, 4, 5, 6, rng);
  const auto task = one_hot_embed(2, 3);
  const auto r = random_tensor<double>(2, 3, 4, 5, 6, rng);

  auto run = [&](Path path) {
    auto copy = p;
    MoECache<double> cache;
    mode_forward(x, copy, task, path, BNMode::Train, &cache);
    MoEBlockGrads<double> grads;
    grads.resize_like(p);
    const auto dx = mode_backward(r, cache, copy, grads, true);
    return std::pair{std::move(grads), dx};
  };
  const auto [gm, dxm] = run(Path::Merged);
  const auto [gb, dxb] = run(Path::Branchwise);

  CHECK(rel_deviation(dxm, dxb) <= 1e-8);
  for (std::size_t e = 0; e < p.experts.size(); ++e)
    CHECK(rel_deviation(gm.expert_w[e], gb.expert_w[e]) <= 1e-8);
  for (std::size_t i = 0; i < gm.fc1.w.size(); ++i)
    CHECK(gm.fc1.w[i] == doctest::Approx(gb.fc1.w[i]).epsilon(1e-8));
  for (int c = 0; c < 3; ++c) {
    CHECK(gm.bn_gamma[c] == doctest::Approx(gb.bn_gamma[c]).epsilon(1e-8));
    CHECK(gm.bn_beta[c] == doctest::Approx(gb.bn_beta[c]).epsilon(1e-8));
  }
}

TEST_CASE("externally supplied gates receive no gating gradient") {
  Rng rng(12);
  BlockConfig cfg;
  auto p = init_mode_block<double>(2, 2, 2, cfg, rng);
  const auto x = random_tensor<double>(1, 2, 4, 4, 4, rng);
  const auto r = random_tensor<double>(1, 2, 4, 4, 4, rng);

  GateVector<double> g;
  g.values.assign(5, std::vector<double>(2, 0.2));
  MoECache<double> cache;
  mode_forward_gated(x, p, g, Path::Merged, BNMode::Train, &cache);
  cache.gates_external = true;

  MoEBlockGrads<double> grads;
  grads.resize_like(p);
  mode_backward(r, cache, p, grads, true);
  for (double v : grads.fc1.w) CHECK(v == 0.0);
  for (double v : grads.fc1.b) CHECK(v == 0.0);
  // The expert weights still learn.
  double mag = 0;
  for (const auto& gw : grads.expert_w)
    for (double v : gw.data) mag += std::abs(v);
  CHECK(mag > 0.0);
}
