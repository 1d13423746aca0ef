#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "mixconv/network.hpp"
#include "mixconv/rng.hpp"
#include "mixconv/synth.hpp"
#include "mixconv/train.hpp"

using namespace mixconv;

namespace {

ArchConfig tiny_arch(int tasks = 1) {
  ArchConfig a;
  a.depth = 1;
  a.base_channels = 2;
  a.tasks = tasks;
  return a;
}

// In-memory sample with a deterministic input and a linearly coupled target.
Sample make_sample(int label, uint64_t seed, float coupling = 0.5f) {
  Volume in(8, 8, 8), tg(8, 8, 8);
  Rng rng(seed);
  for (std::size_t i = 0; i < in.data.size(); ++i) {
    in.data[i] = static_cast<float>(rng.normal());
    tg.data[i] = coupling * in.data[i];
  }
  return {in, tg, label, Split::Train};
}

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 2;
  cfg.patch_d = cfg.patch_h = cfg.patch_w = 4;
  cfg.val_interval = 1;
  cfg.lr = 1e-3;
  return cfg;
}

template <class T>
std::map<std::string, std::vector<T>> snapshot(NetworkParams<T>& p,
                                               bool frozen_only = false) {
  std::map<std::string, std::vector<T>> out;
  for_each_group<T>(p, nullptr, [&](const ParamGroup<T>& g) {
    if (frozen_only && g.trainable) return;
    out[g.name].assign(g.param, g.param + g.count);
  });
  return out;
}

}  // namespace

TEST_CASE("mse_loss value and gradient") {
  Tensor5<double> a(1, 1, 1, 1, 4);
  a.data = {1.0, -2.0, 0.5, 3.0};
  const auto [zero_loss, zero_grad] = mse_loss(a, a);
  CHECK(zero_loss == 0.0);
  for (double g : zero_grad.data) CHECK(g == 0.0);

  Tensor5<double> p(1, 1, 1, 1, 1), t(1, 1, 1, 1, 1);
  p.data = {0.0};
  t.data = {2.0};
  const auto [loss, grad] = mse_loss(p, t);
  CHECK(loss == 4.0);
  CHECK(grad.data[0] == -4.0);

  // Voxel order does not matter as long as pred and target permute together.
  Tensor5<double> pp = a, tt = a;
  for (auto& v : tt.data) v += 1.0;
  const double base = mse_loss(pp, tt).first;
  std::reverse(pp.data.begin(), pp.data.end());
  std::reverse(tt.data.begin(), tt.data.end());
  CHECK(mse_loss(pp, tt).first == base);

  Tensor5<double> wrong(1, 1, 1, 4, 1);
  CHECK_THROWS_AS(mse_loss(a, wrong), const DimensionError&);
  Tensor5<double> empty;
  CHECK_THROWS_AS(mse_loss(empty, empty), const DimensionError&);
}

TEST_CASE("adam leaves untouched groups alone and sizes its first step by lr") {
  Rng rng(51);
  auto p = build_network<double>(tiny_arch(), rng);
  NetGrads<double> grads;
  grads.resize_like(p);
  AdamState<double> st;
  st.lr = 1e-4;

  const auto before = snapshot(p);
  zero_grads(grads, p);
  adam_step(p, grads, st);
  CHECK(st.step_count == 1);
  for (auto& [name, vals] : snapshot(p)) CHECK(vals == before.at(name));

  // Constant gradient 0.5: bias-corrected first step is lr * g/(|g|+eps).
  for_each_group<double>(p, &grads, [&](const ParamGroup<double>& g) {
    if (g.name != "enc0.e1.w" || !g.grad) return;
    std::fill(g.grad, g.grad + g.count, 0.5);
  });
  adam_step(p, grads, st);
  CHECK(st.step_count == 2);
  const auto after = snapshot(p);
  for (std::size_t i = 0; i < after.at("enc0.e1.w").size(); ++i) {
    const double delta = after.at("enc0.e1.w")[i] - before.at("enc0.e1.w")[i];
    CHECK(delta == doctest::Approx(-1e-4).epsilon(1e-6));
  }
  CHECK(after.at("enc0.e0.w") == before.at("enc0.e0.w"));
  CHECK(after.at("mid0.fc1.w") == before.at("mid0.fc1.w"));
}

TEST_CASE("adam moment clocks start when a group first sees gradient") {
  Rng rng(52);
  auto p = build_network<double>(tiny_arch(), rng);
  NetGrads<double> grads;
  grads.resize_like(p);
  AdamState<double> st;
  st.lr = 1e-4;

  auto set_grad = [&](const std::string& name, double value) {
    for_each_group<double>(p, &grads, [&](const ParamGroup<double>& g) {
      if (g.name == name && g.grad) std::fill(g.grad, g.grad + g.count, value);
    });
  };

  // Two steps that only exercise enc0.e1.w, then mid0.e1.w wakes up.
  zero_grads(grads, p);
  set_grad("enc0.e1.w", 0.5);
  adam_step(p, grads, st);
  adam_step(p, grads, st);

  const auto before = snapshot(p);
  zero_grads(grads, p);
  set_grad("mid0.e1.w", 0.5);
  adam_step(p, grads, st);
  CHECK(st.step_count == 3);

  // A fresh group takes a full-size first step; had it inherited the global
  // step-3 bias correction the move would shrink to ~0.64 lr.
  const auto after = snapshot(p);
  for (std::size_t i = 0; i < after.at("mid0.e1.w").size(); ++i) {
    const double delta = after.at("mid0.e1.w")[i] - before.at("mid0.e1.w")[i];
    CHECK(delta == doctest::Approx(-1e-4).epsilon(0.01));
  }

  AdamState<double> bad;
  bad.groups["enc0.e1.w"].m.assign(3, 0.0);
  bad.groups["enc0.e1.w"].v.assign(3, 0.0);
  zero_grads(grads, p);
  set_grad("enc0.e1.w", 0.5);
  CHECK_THROWS_AS(adam_step(p, grads, bad), const DimensionError&);
}

TEST_CASE("crop_patch stays in bounds and keeps input/target aligned") {
  Volume in(6, 5, 4), tg(6, 5, 4);
  for (int z = 0; z < 6; ++z)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 4; ++x) {
        in.at(z, y, x) = static_cast<float>(z * 10000 + y * 100 + x);
        tg.at(z, y, x) = in.at(z, y, x) + 0.5f;
      }
  Sample s{in, tg, 1, Split::Train};

  Rng full(1);
  const auto [fin, ftg] = crop_patch<double>(s, 6, 5, 4, full);
  for (std::size_t i = 0; i < fin.data.size(); ++i) {
    CHECK(fin.data[i] == static_cast<double>(in.data[i]));
    CHECK(ftg.data[i] == static_cast<double>(tg.data[i]));
  }

  Rng over(2);
  CHECK_THROWS_AS(crop_patch<double>(s, 7, 5, 4, over), const GeometryError&);

  Rng draws(3);
  bool corner_min = false, corner_max = false;
  for (int i = 0; i < 10000; ++i) {
    const auto [pin, ptg] = crop_patch<double>(s, 2, 2, 2, draws);
    const int code = static_cast<int>(pin.at(0, 0, 0, 0, 0));
    const int z = code / 10000, y = (code / 100) % 100, x = code % 100;
    REQUIRE(z >= 0);
    REQUIRE(z <= 4);
    REQUIRE(y <= 3);
    REQUIRE(x <= 2);
    if (z == 0 && y == 0 && x == 0) corner_min = true;
    if (z == 4 && y == 3 && x == 2) corner_max = true;
    CHECK(ptg.at(0, 0, 0, 0, 0) == pin.at(0, 0, 0, 0, 0) + 0.5);
  }
  CHECK(corner_min);
  CHECK(corner_max);
}

TEST_CASE("axis flips reverse, invert themselves, and stay paired") {
  Tensor5<double> t(1, 1, 1, 1, 3);
  t.data = {1.0, 2.0, 3.0};
  flip_axis(t, 4);
  CHECK(t.data == std::vector<double>{3.0, 2.0, 1.0});

  Rng rng(53);
  auto x = random_tensor<double>(2, 2, 3, 4, 5, rng);
  const auto orig = x;
  for (int axis : {2, 3, 4}) {
    flip_axis(x, axis);
    flip_axis(x, axis);
    CHECK(max_abs_diff(x, orig) == 0.0);
  }

  auto in = random_tensor<double>(1, 1, 4, 4, 4, rng);
  Tensor5<double> tg = in;
  for (auto& v : tg.data) v *= 2.0;
  Rng arng(54);
  augment_flip(in, tg, arng);
  for (std::size_t i = 0; i < in.data.size(); ++i)
    CHECK(tg.data[i] == 2.0 * in.data[i]);
}

TEST_CASE("training is reproducible for a fixed seed") {
  Rng rng(55);
  auto p = build_network<double>(tiny_arch(), rng);
  const std::vector<Sample> train_set{make_sample(1, 10), make_sample(1, 11)};
  const std::vector<Sample> val_set{make_sample(1, 12)};
  const TrainConfig cfg = quick_config();

  const auto r1 = train(p, train_set, val_set, cfg);
  const auto r2 = train(p, train_set, val_set, cfg);
  REQUIRE(r1.log.size() == r2.log.size());
  for (std::size_t i = 0; i < r1.log.size(); ++i) {
    CHECK(r1.log[i].train_loss == r2.log[i].train_loss);
    CHECK(r1.log[i].val_mse.has_value() == r2.log[i].val_mse.has_value());
    if (r1.log[i].val_mse) CHECK(*r1.log[i].val_mse == *r2.log[i].val_mse);
  }
  auto f1 = r1.final, f2 = r2.final;
  const auto s1 = snapshot(f1), s2 = snapshot(f2);
  for (const auto& [name, vals] : s1) CHECK(vals == s2.at(name));

  TrainConfig other = cfg;
  other.seed = 2;
  const auto r3 = train(p, train_set, val_set, other);
  CHECK(r3.log[0].train_loss != r1.log[0].train_loss);
}

TEST_CASE("training drives the loss down on a learnable mapping") {
  Rng rng(56);
  auto p = build_network<double>(tiny_arch(), rng);
  const std::vector<Sample> train_set{make_sample(1, 20)};
  TrainConfig cfg = quick_config();
  cfg.epochs = 25;
  cfg.batch_size = 1;
  cfg.flip_augment = false;
  cfg.lr = 1e-2;

  const auto r = train(p, train_set, {}, cfg);
  CHECK(!r.diverged);
  REQUIRE(r.log.size() == 25);
  CHECK(r.log.back().train_loss < 0.5 * r.log.front().train_loss);
  // No validation set: best falls back to the final parameters.
  CHECK(r.best_epoch == cfg.epochs);
}

TEST_CASE("non-finite loss aborts training with the divergence flag") {
  Rng rng(57);
  auto p = build_network<double>(tiny_arch(), rng);
  Sample bad = make_sample(1, 30);
  bad.target.data[5] = std::numeric_limits<float>::quiet_NaN();
  // Patch covers the whole sample so the poisoned voxel is in every batch
  // and the abort happens in the very first epoch.
  TrainConfig full = quick_config();
  full.patch_d = full.patch_h = full.patch_w = 8;
  const auto r = train(p, {bad}, {}, full);
  CHECK(r.diverged);
  CHECK(r.log.empty());

  CHECK_THROWS_AS(train(p, {}, {}, quick_config()), const ConfigError&);
  TrainConfig zero_epochs = quick_config();
  zero_epochs.epochs = 0;
  CHECK_THROWS_AS(train(p, {bad}, {}, zero_epochs), const ConfigError&);
  TrainConfig odd_patch = quick_config();
  odd_patch.patch_d = 3;  // depth-1 net needs extents divisible by 2
  CHECK_THROWS_AS(train(p, {bad}, {}, odd_patch), const ConfigError&);
  CHECK_THROWS_AS(validate(p, {}, quick_config()), const StatisticsError&);
}

TEST_CASE("samples only update the decoder of their own task") {
  Rng rng(58);
  ArchConfig a = tiny_arch(2);
  a.variant = NetVariant::MultiDecoder;
  auto p = build_network<double>(a, rng);

  const auto before = snapshot(p);
  const std::vector<Sample> only_task1{make_sample(1, 40), make_sample(1, 41)};
  const auto r = train(p, only_task1, {}, quick_config());

  auto trained = r.final;
  const auto after = snapshot(trained);
  bool t1_moved = false;
  for (const auto& [name, vals] : after) {
    if (name.starts_with("dec.t2.")) {
      CHECK(vals == before.at(name));  // untouched task decoder, bit for bit
    } else if (name.starts_with("dec.t1.") && vals != before.at(name)) {
      t1_moved = true;
    }
  }
  CHECK(t1_moved);
}

TEST_CASE("fine-tuning an extended net leaves every frozen group untouched") {
  Rng rng(59);
  auto p = build_network<double>(tiny_arch(2), rng);
  Rng ext(60);
  extend_for_new_task(p, ext);
  REQUIRE(p.arch.tasks == 3);

  const auto frozen_before = snapshot(p, /*frozen_only=*/true);
  const auto all_before = snapshot(p);
  const std::vector<Sample> new_task{make_sample(3, 50), make_sample(3, 51)};
  const auto r = train(p, new_task, {}, quick_config());

  auto tuned = r.final;
  auto frozen_after = snapshot(tuned, /*frozen_only=*/true);
  REQUIRE(frozen_after.size() == frozen_before.size());
  for (const auto& [name, vals] : frozen_after) CHECK(vals == frozen_before.at(name));

  // The fresh expert actually learns.
  bool e5_moved = false;
  for_each_group<double>(tuned, nullptr, [&](const ParamGroup<double>& g) {
    if (g.name == "enc0.e5.w") {
      const auto& init = all_before.at(g.name);
      for (std::size_t i = 0; i < g.count; ++i)
        if (g.param[i] != init[i]) e5_moved = true;
    }
  });
  CHECK(e5_moved);
}

TEST_CASE("the best snapshot reproduces its recorded validation score") {
  Rng rng(61);
  auto p = build_network<double>(tiny_arch(), rng);
  const std::vector<Sample> train_set{make_sample(1, 70), make_sample(1, 71)};
  const std::vector<Sample> val_set{make_sample(1, 72)};
  TrainConfig cfg = quick_config();
  cfg.epochs = 5;

  auto r = train(p, train_set, val_set, cfg);
  double best_seen = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  for (const auto& e : r.log)
    if (e.val_mse && *e.val_mse < best_seen) {
      best_seen = *e.val_mse;
      best_epoch = e.epoch;
    }
  CHECK(r.best_val == best_seen);
  CHECK(r.best_epoch == best_epoch);
  CHECK(validate(r.best, val_set, cfg) == r.best_val);
}

TEST_CASE("merged and branchwise training walk the same loss curve") {
  Rng rng(62);
  auto p = build_network<double>(tiny_arch(2), rng);
  const std::vector<Sample> train_set{make_sample(1, 80), make_sample(2, 81),
                                      make_sample(1, 82), make_sample(2, 83)};
  TrainConfig cfg = quick_config();
  cfg.epochs = 4;
  cfg.val_interval = 10;  // loss curve comparison only

  TrainConfig branch = cfg;
  branch.path = Path::Branchwise;
  const auto rm = train(p, train_set, {}, cfg);
  const auto rb = train(p, train_set, {}, branch);
  REQUIRE(rm.log.size() == rb.log.size());
  for (std::size_t i = 0; i < rm.log.size(); ++i)
    CHECK(std::abs(rm.log[i].train_loss - rb.log[i].train_loss) <= 1e-6);
}
