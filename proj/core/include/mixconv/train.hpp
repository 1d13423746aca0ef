#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mixconv/metrics.hpp"
#include "mixconv/network.hpp"
#include "mixconv/sliding_window.hpp"
#include "mixconv/synth.hpp"

namespace mixconv {

struct TrainConfig {
  int epochs = 200;
  int batch_size = 4;
  int patch_d = 16, patch_h = 32, patch_w = 32;
  int val_interval = 10;
  uint64_t seed = 1;
  bool flip_augment = true;
  double lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  Path path = Path::Merged;
};

// Mean squared error over all voxels, plus its gradient wrt the prediction.
template <class T>
std::pair<double, Tensor5<T>> mse_loss(const Tensor5<T>& pred,
                                       const Tensor5<T>& target) {
  if (!pred.same_shape(target))
    throw DimensionError("mse_loss: shape mismatch " + pred.shape_str() +
                         " vs " + target.shape_str());
  const std::size_t n = pred.data.size();
  if (n == 0) throw DimensionError("mse_loss: empty tensors");
  Tensor5<T> grad(pred.shape[0], pred.shape[1], pred.shape[2], pred.shape[3],
                  pred.shape[4]);
  double acc = 0;
  const T scale = T(2) / static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pred.data[i]) - target.data[i];
    acc += d * d;
    grad.data[i] = scale * static_cast<T>(d);
  }
  return {acc / static_cast<double>(n), std::move(grad)};
}

// Adam with per-group lazy activation: a group's moments and step counter
// start only once it first sees a nonzero gradient, so parameter groups a
// run never touches (e.g. other tasks' decoders) stay exactly put.
template <class T>
struct AdamGroup {
  std::vector<T> m, v;
  int64_t t = 0;
  bool active = false;
};

template <class T>
struct AdamState {
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t step_count = 0;
  std::map<std::string, AdamGroup<T>> groups;

  static AdamState from_config(const TrainConfig& c) {
    AdamState s;
    s.lr = c.lr;
    s.beta1 = c.beta1;
    s.beta2 = c.beta2;
    s.eps = c.eps;
    return s;
  }
};

template <class T>
void adam_step(NetworkParams<T>& params, NetGrads<T>& grads, AdamState<T>& st) {
  st.step_count += 1;
  for_each_group<T>(params, &grads, [&](const ParamGroup<T>& g) {
    if (!g.trainable || !g.grad || g.count == 0) return;
    AdamGroup<T>& a = st.groups[g.name];
    if (a.m.size() != g.count) {
      if (!a.m.empty())
        throw DimensionError("adam_step: group " + g.name + " changed size");
      a.m.assign(g.count, T(0));
      a.v.assign(g.count, T(0));
    }
    if (!a.active) {
      bool any = false;
      for (std::size_t i = 0; i < g.count; ++i)
        if (g.grad[i] != T(0)) {
          any = true;
          break;
        }
      if (!any) return;
      a.active = true;
    }
    a.t += 1;
    const T b1 = static_cast<T>(st.beta1), b2 = static_cast<T>(st.beta2);
    const T corr1 = T(1) - std::pow(b1, static_cast<T>(a.t));
    const T corr2 = T(1) - std::pow(b2, static_cast<T>(a.t));
    const T lr = static_cast<T>(st.lr);
    const T eps = static_cast<T>(st.eps);
    for (std::size_t i = 0; i < g.count; ++i) {
      const T gr = g.grad[i];
      a.m[i] = b1 * a.m[i] + (T(1) - b1) * gr;
      a.v[i] = b2 * a.v[i] + (T(1) - b2) * gr * gr;
      const T mhat = a.m[i] / corr1;
      const T vhat = a.v[i] / corr2;
      g.param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  });
}

template <class T>
void zero_grads(NetGrads<T>& grads, NetworkParams<T>& params) {
  for_each_group<T>(params, &grads, [](const ParamGroup<T>& g) {
    if (g.grad) std::fill(g.grad, g.grad + g.count, T(0));
  });
}

// Uniform random corner crop, applied to input and target at the same
// offsets.
template <class T>
std::pair<Tensor5<T>, Tensor5<T>> crop_patch(const Sample& s, int pd, int ph,
                                             int pw, Rng& rng) {
  if (pd > s.input.d || ph > s.input.h || pw > s.input.w)
    throw GeometryError("patch " + std::to_string(pd) + "x" +
                        std::to_string(ph) + "x" + std::to_string(pw) +
                        " exceeds volume extents");
  const int z = static_cast<int>(rng.uniform_int(0, s.input.d - pd));
  const int y = static_cast<int>(rng.uniform_int(0, s.input.h - ph));
  const int x = static_cast<int>(rng.uniform_int(0, s.input.w - pw));
  Tensor5<T> in(1, 1, pd, ph, pw), tg(1, 1, pd, ph, pw);
  for (int dz = 0; dz < pd; ++dz)
    for (int dy = 0; dy < ph; ++dy)
      for (int dx = 0; dx < pw; ++dx) {
        in.at(0, 0, dz, dy, dx) = static_cast<T>(s.input.at(z + dz, y + dy, x + dx));
        tg.at(0, 0, dz, dy, dx) = static_cast<T>(s.target.at(z + dz, y + dy, x + dx));
      }
  return {std::move(in), std::move(tg)};
}

template <class T>
void flip_axis(Tensor5<T>& t, int axis) {
  const int n = t.shape[0], c = t.shape[1];
  const int ext = t.shape[axis];
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic)
      for (int z = 0; z < t.shape[2]; ++z)
        for (int y = 0; y < t.shape[3]; ++y)
          for (int x = 0; x < t.shape[4]; ++x) {
            int idx[3] = {z, y, x};
            if (idx[axis - 2] * 2 >= ext) continue;
            int mirror[3] = {z, y, x};
            mirror[axis - 2] = ext - 1 - idx[axis - 2];
            std::swap(t.at(in, ic, z, y, x),
                      t.at(in, ic, mirror[0], mirror[1], mirror[2]));
          }
}

// Independent coin flip per spatial axis, identical for input and target.
template <class T>
void augment_flip(Tensor5<T>& input, Tensor5<T>& target, Rng& rng) {
  for (int axis = 2; axis < 5; ++axis) {
    if (rng.coin()) {
      flip_axis(input, axis);
      flip_axis(target, axis);
    }
  }
}

struct EpochLog {
  int epoch = 0;
  double train_loss = 0;
  std::optional<double> val_mse;
};

template <class T>
struct TrainResult {
  NetworkParams<T> best;   // lowest validation MSE (final params if never validated)
  NetworkParams<T> final;  // params after the last epoch
  double best_val = 0;
  int best_epoch = 0;
  std::vector<EpochLog> log;
  bool diverged = false;
};

// Mean sliding-window MSE over a validation set (the same protocol the
// final evaluation uses, at the training patch size).
template <class T>
double validate(NetworkParams<T>& params, const std::vector<Sample>& val_set,
                const TrainConfig& cfg, bool replay_stored_gates = false) {
  if (val_set.empty()) throw StatisticsError("validate: empty validation set");
  double acc = 0;
  for (const auto& s : val_set) {
    VolumeT<T> vol(s.input.d, s.input.h, s.input.w);
    for (std::size_t i = 0; i < vol.data.size(); ++i)
      vol.data[i] = static_cast<T>(s.input.data[i]);
    const WindowPlan plan = make_window_plan(vol.d, vol.h, vol.w, cfg.patch_d,
                                             cfg.patch_h, cfg.patch_w);
    const VolumeT<T> pred = sliding_window_predict(vol, params, s.label, plan,
                                                   cfg.path, replay_stored_gates);
    double se = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
      const double d = static_cast<double>(pred.data[i]) - s.target.data[i];
      se += d * d;
    }
    acc += se / static_cast<double>(pred.data.size());
  }
  return acc / static_cast<double>(val_set.size());
}

// Partial-label training: every sample supervises only its own structure
// class, batches are grouped by task so each group runs under one merged
// kernel, and the best-validation snapshot is retained.
template <class T>
TrainResult<T> train(NetworkParams<T> params, const std::vector<Sample>& train_set,
                     const std::vector<Sample>& val_set, const TrainConfig& cfg,
                     std::ostream* log_stream = nullptr) {
  if (train_set.empty()) throw ConfigError("train: empty training set");
  if (cfg.epochs < 1) throw ConfigError("train: epochs must be positive");
  if (cfg.batch_size < 1) throw ConfigError("train: batch size must be positive");
  const int div = 1 << params.arch.depth;
  if (cfg.patch_d % div || cfg.patch_h % div || cfg.patch_w % div)
    throw ConfigError("train: patch extents must be divisible by " +
                      std::to_string(div));

  Rng root(cfg.seed);
  AdamState<T> adam = AdamState<T>::from_config(cfg);
  NetGrads<T> grads;
  grads.resize_like(params);

  TrainResult<T> result;
  bool have_best = false;

  const int n = static_cast<int>(train_set.size());
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng erng = root.stream("epoch", static_cast<uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), erng.engine());

    double epoch_loss = 0;
    int batches = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int bsz = std::min(cfg.batch_size, n - start);

      // Crop/flip each sample, then bucket the mini-batch by task.
      std::map<int, std::vector<std::pair<Tensor5<T>, Tensor5<T>>>> buckets;
      for (int b = 0; b < bsz; ++b) {
        const Sample& s = train_set[order[start + b]];
        Rng arng = erng.stream("augment", static_cast<uint64_t>(start + b));
        auto [in, tg] = crop_patch<T>(s, cfg.patch_d, cfg.patch_h, cfg.patch_w, arng);
        if (cfg.flip_augment) augment_flip(in, tg, arng);
        buckets[s.label].emplace_back(std::move(in), std::move(tg));
      }

      zero_grads(grads, params);
      double batch_loss = 0;
      for (auto& [task, items] : buckets) {
        const int m = static_cast<int>(items.size());
        Tensor5<T> in(m, 1, cfg.patch_d, cfg.patch_h, cfg.patch_w);
        Tensor5<T> tg(m, 1, cfg.patch_d, cfg.patch_h, cfg.patch_w);
        const std::size_t vox = items[0].first.data.size();
        for (int i = 0; i < m; ++i) {
          std::copy(items[i].first.data.begin(), items[i].first.data.end(),
                    in.data.begin() + i * vox);
          std::copy(items[i].second.data.begin(), items[i].second.data.end(),
                    tg.data.begin() + i * vox);
        }
        NetCache<T> cache;
        // After an extension the frozen BN layers keep their running stats
        // and normalize in infer mode while the new parts fine-tune.
        const BNMode mode = params.frozen_base ? BNMode::Infer : BNMode::Train;
        Tensor5<T> pred = net_forward(in, params, task, cfg.path, mode, &cache);
        auto [loss, dpred] = mse_loss(pred, tg);
        // Weight each task group by its share of the mini-batch so the step
        // optimizes the mean per-sample loss regardless of grouping.
        const T scale = static_cast<T>(m) / static_cast<T>(bsz);
        for (auto& v : dpred.data) v *= scale;
        batch_loss += loss * m / bsz;
        net_backward(dpred, cache, params, grads,
                     /*bn_train_stats=*/!params.frozen_base);
      }

      if (!std::isfinite(batch_loss)) {
        result.diverged = true;
        if (log_stream)
          *log_stream << "epoch " << epoch << " loss diverged\n" << std::flush;
        result.final = params;
        if (!have_best) result.best = params;
        return result;
      }
      adam_step(params, grads, adam);
      epoch_loss += batch_loss;
      ++batches;
    }
    epoch_loss /= std::max(1, batches);

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = epoch_loss;
    const bool do_val = !val_set.empty() &&
                        (epoch % cfg.val_interval == 0 || epoch == cfg.epochs);
    if (do_val) {
      const double v = validate(params, val_set, cfg);
      entry.val_mse = v;
      if (!have_best || v < result.best_val) {
        have_best = true;
        result.best_val = v;
        result.best_epoch = epoch;
        result.best = params;
      }
    }
    if (log_stream) {
      *log_stream << "epoch " << entry.epoch << " train " << entry.train_loss;
      if (entry.val_mse) *log_stream << " val " << *entry.val_mse;
      *log_stream << '\n' << std::flush;
    }
    result.log.push_back(entry);
  }

  result.final = params;
  if (!have_best) {
    result.best = params;
    result.best_epoch = cfg.epochs;
  }
  return result;
}

}  // namespace mixconv
