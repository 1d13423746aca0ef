#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mixconv/kernel_merge.hpp"
#include "mixconv/ops.hpp"
#include "mixconv/rng.hpp"

namespace mixconv {

enum class EmbedKind { OneHot, Gaussian };

inline std::string embed_name(EmbedKind e) {
  return e == EmbedKind::OneHot ? "one_hot" : "gaussian";
}

inline EmbedKind embed_from_name(const std::string& s) {
  if (s == "one_hot") return EmbedKind::OneHot;
  if (s == "gaussian") return EmbedKind::Gaussian;
  throw ConfigError("unknown embedding '" + s + "' (expected one_hot|gaussian)");
}

struct TaskEmbedding {
  std::vector<double> values;
  EmbedKind origin = EmbedKind::OneHot;
};

// Task indices are 1-based throughout: task l of S occupies entry l-1.
inline TaskEmbedding one_hot_embed(int l, int s) {
  if (s < 1) throw DimensionError("one_hot_embed: task count must be positive");
  if (l < 1 || l > s)
    throw DimensionError("one_hot_embed: task " + std::to_string(l) +
                         " out of range 1.." + std::to_string(s));
  TaskEmbedding e;
  e.values.assign(s, 0.0);
  e.values[l - 1] = 1.0;
  return e;
}

// Standard-normal embedding drawn once per task from a seed-derived stream,
// so every run with the same seed sees the same frozen vectors.
inline TaskEmbedding gaussian_embed(int l, int s, uint64_t seed) {
  if (l < 1 || l > s) throw DimensionError("gaussian_embed: task out of range");
  TaskEmbedding e;
  e.origin = EmbedKind::Gaussian;
  Rng rng = Rng(seed).stream("task-embedding", static_cast<uint64_t>(l));
  e.values.resize(s);
  for (int i = 0; i < s; ++i) e.values[i] = rng.normal();
  return e;
}

enum class FcnKind { SingleLayer, TwoLayer };
enum class GateActivation { Softmax, Sigmoid };
enum class GateSource { TaskPrior, InputDependent };

struct GatingConfig {
  FcnKind fcn = FcnKind::SingleLayer;
  int hidden = 6;
  GateActivation activation = GateActivation::Softmax;
  GateSource source = GateSource::TaskPrior;
};

inline std::string fcn_name(FcnKind f) {
  return f == FcnKind::SingleLayer ? "single_layer" : "two_layer";
}

inline FcnKind fcn_from_name(const std::string& s) {
  if (s == "single_layer") return FcnKind::SingleLayer;
  if (s == "two_layer") return FcnKind::TwoLayer;
  throw ConfigError("unknown gating fcn '" + s +
                    "' (expected single_layer|two_layer)");
}

inline std::string activation_name(GateActivation a) {
  return a == GateActivation::Softmax ? "softmax" : "sigmoid";
}

inline GateActivation activation_from_name(const std::string& s) {
  if (s == "softmax") return GateActivation::Softmax;
  if (s == "sigmoid") return GateActivation::Sigmoid;
  throw ConfigError("unknown gate activation '" + s +
                    "' (expected softmax|sigmoid)");
}

inline std::string gate_source_name(GateSource g) {
  return g == GateSource::TaskPrior ? "task_prior" : "input_dependent";
}

inline GateSource gate_source_from_name(const std::string& s) {
  if (s == "task_prior") return GateSource::TaskPrior;
  if (s == "input_dependent") return GateSource::InputDependent;
  throw ConfigError("unknown gate source '" + s +
                    "' (expected task_prior|input_dependent)");
}

struct ExpertSpec {
  ExpertKind kind = ExpertKind::Conv;
  int k = 3;
};

inline std::vector<ExpertSpec> default_experts() {
  return {{ExpertKind::Conv, 1},
          {ExpertKind::Conv, 3},
          {ExpertKind::AvgpConv, 3},
          {ExpertKind::Conv, 5},
          {ExpertKind::AvgpConv, 5}};
}

inline std::string expert_name(const ExpertSpec& s) {
  return (s.kind == ExpertKind::Conv ? "conv" : "aconv") + std::to_string(s.k);
}

inline ExpertSpec expert_spec_from_name(const std::string& name) {
  for (int k : {1, 3, 5}) {
    if (name == "conv" + std::to_string(k)) return {ExpertKind::Conv, k};
    // A 1^3 averaging stage is the identity, so "aconv1" would duplicate
    // "conv1"; only the genuine pooling extents get names.
    if (k > 1 && name == "aconv" + std::to_string(k)) return {ExpertKind::AvgpConv, k};
  }
  throw ConfigError("unknown expert name '" + name +
                    "' (expected conv1|conv3|conv5|aconv3|aconv5)");
}

// Everything a block needs besides its expert list: how gates are produced
// and what follows the gated convolution.
struct BlockConfig {
  std::vector<ExpertSpec> experts = default_experts();
  GatingConfig gating;
  bool batch_norm = true;
  bool relu = true;
  bool bias = false;
};

template <class T>
struct Linear {
  int rows = 0, cols = 0;
  std::vector<T> w;  // row-major [rows][cols]
  std::vector<T> b;  // [rows]

  void resize(int r, int c) {
    rows = r;
    cols = c;
    w.assign(static_cast<std::size_t>(r) * c, T(0));
    b.assign(r, T(0));
  }
  std::vector<T> apply(const std::vector<T>& x) const {
    if (static_cast<int>(x.size()) != cols)
      throw DimensionError("linear layer expects input length " +
                           std::to_string(cols) + ", got " +
                           std::to_string(x.size()));
    std::vector<T> y(rows);
    for (int r = 0; r < rows; ++r) {
      T acc = b[r];
      const T* row = w.data() + static_cast<std::size_t>(r) * cols;
      for (int c = 0; c < cols; ++c) acc += row[c] * x[c];
      y[r] = acc;
    }
    return y;
  }
};

template <class T>
struct MoEBlockParams {
  std::vector<ExpertKernel<T>> experts;
  Linear<T> fc1;  // single layer: [T*C_O x S_in]; two layer: [hidden x S_in]
  Linear<T> fc2;  // two layer only: [T*C_O x hidden]
  GatingConfig gating;
  std::optional<BNParams<T>> bn;
  bool relu = true;

  int expert_count() const { return static_cast<int>(experts.size()); }
  int in_channels() const { return experts.empty() ? 0 : experts[0].in_channels(); }
  int out_channels() const { return experts.empty() ? 0 : experts[0].out_channels(); }
  int gate_input_size() const { return fc1.cols; }
  int widest_extent() const {
    int k = 1;
    for (const auto& e : experts) k = std::max(k, e.k);
    return k;
  }
};

// Fan-in-scaled normal init for the expert convs; the gating FCN starts at
// zero so every task begins with uniform gates. The hidden layer of the
// two-layer variant gets a nonzero draw since an all-zero first layer would
// never receive gradient.
template <class T>
MoEBlockParams<T> init_mode_block(int ci, int co, int gate_in,
                                  const BlockConfig& config, Rng& rng) {
  if (ci < 1 || co < 1 || gate_in < 1)
    throw DimensionError("init_mode_block: extents must be positive");
  if (config.experts.empty())
    throw ConfigError("init_mode_block: block needs at least one expert");

  MoEBlockParams<T> p;
  p.gating = config.gating;
  p.relu = config.relu;
  for (const auto& spec : config.experts) {
    ExpertKernel<T> e;
    e.kind = spec.kind;
    e.k = spec.k;
    const int kw = spec.kind == ExpertKind::Conv ? spec.k : 1;
    const double std = std::sqrt(2.0 / (static_cast<double>(ci) * kw * kw * kw));
    e.conv_weights = random_tensor<T>(co, ci, kw, kw, kw, rng, std);
    if (config.bias) e.bias = std::vector<T>(co, T(0));
    validate_expert(e);
    p.experts.push_back(std::move(e));
  }

  const int t = static_cast<int>(config.experts.size());
  if (config.gating.fcn == FcnKind::SingleLayer) {
    p.fc1.resize(t * co, gate_in);
  } else {
    p.fc1.resize(config.gating.hidden, gate_in);
    const double std = std::sqrt(2.0 / gate_in);
    for (auto& v : p.fc1.w) v = static_cast<T>(rng.normal(0.0, std));
    p.fc2.resize(t * co, config.gating.hidden);
  }

  if (config.batch_norm) p.bn = BNParams<T>(co);
  return p;
}

template <class T>
struct GateCache {
  std::vector<T> input;
  std::vector<T> hidden;  // post-ReLU, two-layer only
  std::vector<T> logits;
  GateVector<T> gates;
};

// Run the gating FCN and activation. Softmax normalizes across experts for
// each output channel; with all logits equal it yields exactly 1/T.
template <class T>
GateVector<T> gate(const std::vector<T>& gate_input, const MoEBlockParams<T>& p,
                   GateCache<T>* cache = nullptr) {
  const int t = p.expert_count();
  const int co = p.out_channels();

  std::vector<T> hidden;
  std::vector<T> logits;
  if (p.gating.fcn == FcnKind::SingleLayer) {
    logits = p.fc1.apply(gate_input);
  } else {
    hidden = p.fc1.apply(gate_input);
    for (auto& v : hidden) v = v > T(0) ? v : T(0);
    logits = p.fc2.apply(hidden);
  }
  if (static_cast<int>(logits.size()) != t * co)
    throw DimensionError("gate: FCN output length does not match T*C_O");

  GateVector<T> g;
  g.values.assign(t, std::vector<T>(co));
  if (p.gating.activation == GateActivation::Softmax) {
    // logits laid out expert-major: entry [e*C_O + c].
    for (int c = 0; c < co; ++c) {
      T hi = logits[c];
      for (int e = 1; e < t; ++e) hi = std::max(hi, logits[e * co + c]);
      T sum = T(0);
      for (int e = 0; e < t; ++e) {
        const T x = std::exp(logits[e * co + c] - hi);
        g.values[e][c] = x;
        sum += x;
      }
      for (int e = 0; e < t; ++e) g.values[e][c] /= sum;
    }
  } else {
    for (int e = 0; e < t; ++e)
      for (int c = 0; c < co; ++c)
        g.values[e][c] = T(1) / (T(1) + std::exp(-logits[e * co + c]));
  }

  if (cache) {
    cache->input = gate_input;
    cache->hidden = std::move(hidden);
    cache->logits = std::move(logits);
    cache->gates = g;
  }
  return g;
}

// Mean over batch and all spatial positions, one value per channel; feeds
// the input-dependent gating variant.
template <class T>
std::vector<T> global_avg_pool(const Tensor5<T>& x) {
  const int n = x.shape[0], c = x.shape[1];
  const std::size_t spatial = static_cast<std::size_t>(x.shape[2]) * x.shape[3] * x.shape[4];
  const std::size_t m = static_cast<std::size_t>(n) * spatial;
  if (m == 0) throw StatisticsError("global_avg_pool: empty input");
  std::vector<T> out(c, T(0));
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      const T* p = x.ptr() + x.index(in, ic, 0, 0, 0);
      T acc = T(0);
      for (std::size_t i = 0; i < spatial; ++i) acc += p[i];
      out[ic] += acc;
    }
  for (auto& v : out) v /= static_cast<T>(m);
  return out;
}

template <class T>
std::vector<T> block_gate_input(const Tensor5<T>& input,
                                const TaskEmbedding& task,
                                const GatingConfig& cfg) {
  if (cfg.source == GateSource::InputDependent) return global_avg_pool(input);
  std::vector<T> v(task.values.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(task.values[i]);
  return v;
}

// The task-conditional dense kernel the block is equivalent to.
template <class T>
MergedKernel<T> effective_kernel(const MoEBlockParams<T>& p,
                                 const GateVector<T>& gates) {
  return merge_experts(p.experts, gates, p.widest_extent());
}

template <class T>
MergedKernel<T> effective_kernel(const MoEBlockParams<T>& p,
                                 const std::vector<T>& gate_input) {
  return effective_kernel(p, gate(gate_input, p));
}

enum class Path { Merged, Branchwise };

template <class T>
struct MoECache {
  Tensor5<T> input;
  GateCache<T> gate_cache;
  GateVector<T> gates;
  bool gates_external = false;  // frozen gates: skip the gating backward
  Path path = Path::Merged;
  // merged path
  std::vector<Tensor5<T>> expert_kernels;  // post serial-merge, pre-lift
  MergedKernel<T> merged;
  // branchwise path
  std::vector<Tensor5<T>> branch_outputs;  // pre-gate expert outputs
  std::vector<Tensor5<T>> branch_pooled;   // avgp outputs, empty for Conv experts
  // post-conv stages
  Tensor5<T> conv_out;  // pre-BN
  BNCache<T> bn_cache;
  Tensor5<T> out;  // block output (post ReLU when enabled)
};

// Core block forward with the gates already decided (either computed by
// gate() or replayed from storage).
template <class T>
Tensor5<T> mode_forward_gated(const Tensor5<T>& input, MoEBlockParams<T>& p,
                              const GateVector<T>& gates, Path path,
                              BNMode mode = BNMode::Infer,
                              MoECache<T>* cache = nullptr) {
  if (input.shape[1] != p.in_channels())
    throw DimensionError("mode block expects " + std::to_string(p.in_channels()) +
                         " input channels, got " + std::to_string(input.shape[1]));

  Tensor5<T> y;
  if (path == Path::Merged) {
    std::vector<Tensor5<T>> kernels;
    kernels.reserve(p.experts.size());
    bool any_bias = false;
    std::vector<std::vector<T>> biases;
    for (const auto& e : p.experts) {
      kernels.push_back(expert_effective_kernel(e));
      if (e.bias) {
        any_bias = true;
        biases.push_back(*e.bias);
      }
    }
    if (any_bias && biases.size() != p.experts.size())
      throw DimensionError("mode block: biases must be on all experts or none");
    MergedKernel<T> merged = parallel_merge(kernels, gates, p.widest_extent(),
                                            any_bias ? &biases : nullptr);
    y = conv3d(input, merged.weights, merged.bias ? &*merged.bias : nullptr,
               Padding3::same(merged.extent()));
    if (cache) {
      cache->expert_kernels = std::move(kernels);
      cache->merged = std::move(merged);
    }
  } else {
    // Expanded branch loop (rather than calling branchwise_forward) so the
    // per-branch intermediates are available to the backward pass.
    const int co = p.out_channels();
    std::vector<Tensor5<T>> outs, pooled(p.experts.size());
    for (std::size_t e = 0; e < p.experts.size(); ++e) {
      const auto& ex = p.experts[e];
      if (ex.kind == ExpertKind::Conv) {
        outs.push_back(conv3d(input, ex.conv_weights,
                              ex.bias ? &*ex.bias : nullptr, Padding3::same(ex.k)));
      } else {
        pooled[e] = avgpool3d(input, ex.k);
        outs.push_back(conv3d(pooled[e], ex.conv_weights,
                              ex.bias ? &*ex.bias : nullptr, Padding3::none()));
      }
    }
    y.resize(outs[0].shape[0], outs[0].shape[1], outs[0].shape[2],
             outs[0].shape[3], outs[0].shape[4]);
    const std::size_t spatial = static_cast<std::size_t>(y.shape[2]) * y.shape[3] * y.shape[4];
    for (std::size_t e = 0; e < outs.size(); ++e)
      for (int in = 0; in < y.shape[0]; ++in)
        for (int oc = 0; oc < co; ++oc) {
          const T g = gates.values[e][oc];
          const T* src = outs[e].ptr() + outs[e].index(in, oc, 0, 0, 0);
          T* dst = y.ptr() + y.index(in, oc, 0, 0, 0);
          for (std::size_t i = 0; i < spatial; ++i) dst[i] += g * src[i];
        }
    if (cache) {
      cache->branch_outputs = std::move(outs);
      cache->branch_pooled = std::move(pooled);
    }
  }

  if (cache) {
    cache->input = input;
    cache->gates = gates;
    cache->path = path;
    cache->conv_out = y;
  }
  if (p.bn) y = batchnorm(y, *p.bn, mode, cache ? &cache->bn_cache : nullptr);
  if (p.relu) y = relu(y);
  if (cache) cache->out = y;
  return y;
}

template <class T>
Tensor5<T> mode_forward(const Tensor5<T>& input, MoEBlockParams<T>& p,
                        const TaskEmbedding& task, Path path,
                        BNMode mode = BNMode::Infer,
                        MoECache<T>* cache = nullptr) {
  const std::vector<T> gin = block_gate_input<T>(input, task, p.gating);
  GateVector<T> g = gate(gin, p, cache ? &cache->gate_cache : nullptr);
  return mode_forward_gated(input, p, g, path, mode, cache);
}

template <class T>
struct MoEBlockGrads {
  std::vector<Tensor5<T>> expert_w;
  std::vector<std::vector<T>> expert_b;  // empty vectors when bias disabled
  Linear<T> fc1, fc2;                    // same shapes as params, gradient values
  std::vector<T> bn_gamma, bn_beta;

  template <class P>
  void resize_like(const P& p) {
    expert_w.assign(p.experts.size(), Tensor5<T>());
    expert_b.assign(p.experts.size(), {});
    for (std::size_t e = 0; e < p.experts.size(); ++e) {
      const auto& s = p.experts[e].conv_weights.shape;
      expert_w[e].resize(s[0], s[1], s[2], s[3], s[4]);
      if (p.experts[e].bias) expert_b[e].assign(s[0], T(0));
    }
    fc1.resize(p.fc1.rows, p.fc1.cols);
    fc2.resize(p.fc2.rows, p.fc2.cols);
    if (p.bn) {
      bn_gamma.assign(p.bn->channels(), T(0));
      bn_beta.assign(p.bn->channels(), T(0));
    }
  }
};

namespace detail {

// Center-crop the adjoint of pad_kernel: take the K^3 core of a K'^3 grad.
template <class T>
Tensor5<T> crop_kernel_grad(const Tensor5<T>& grad, int k) {
  const int kp = grad.shape[2];
  if (k == kp) return grad;
  const int off = (kp - k) / 2;
  Tensor5<T> out(grad.shape[0], grad.shape[1], k, k, k);
  for (int oc = 0; oc < grad.shape[0]; ++oc)
    for (int ic = 0; ic < grad.shape[1]; ++ic)
      for (int d = 0; d < k; ++d)
        for (int h = 0; h < k; ++h) {
          const T* src = grad.ptr() + grad.index(oc, ic, d + off, h + off, off);
          T* dst = out.ptr() + out.index(oc, ic, d, h, 0);
          std::copy(src, src + k, dst);
        }
  return out;
}

// Backward through activation + FCN of the gating module. dgate arrives as
// [T][C_O]; returns d(gate_input).
template <class T>
std::vector<T> gate_backward(const std::vector<std::vector<T>>& dgate,
                             const GateCache<T>& cache,
                             const MoEBlockParams<T>& p, MoEBlockGrads<T>& g) {
  const int t = p.expert_count();
  const int co = p.out_channels();
  std::vector<T> dlogits(static_cast<std::size_t>(t) * co);

  if (p.gating.activation == GateActivation::Softmax) {
    for (int c = 0; c < co; ++c) {
      T dot = T(0);
      for (int e = 0; e < t; ++e)
        dot += cache.gates.values[e][c] * dgate[e][c];
      for (int e = 0; e < t; ++e)
        dlogits[static_cast<std::size_t>(e) * co + c] =
            cache.gates.values[e][c] * (dgate[e][c] - dot);
    }
  } else {
    for (int e = 0; e < t; ++e)
      for (int c = 0; c < co; ++c) {
        const T s = cache.gates.values[e][c];
        dlogits[static_cast<std::size_t>(e) * co + c] = dgate[e][c] * s * (T(1) - s);
      }
  }

  auto linear_backward = [](const std::vector<T>& dout, const std::vector<T>& in,
                            const Linear<T>& lin, Linear<T>& dlin) {
    std::vector<T> din(lin.cols, T(0));
    for (int r = 0; r < lin.rows; ++r) {
      const T d = dout[r];
      dlin.b[r] += d;
      const T* wrow = lin.w.data() + static_cast<std::size_t>(r) * lin.cols;
      T* grow = dlin.w.data() + static_cast<std::size_t>(r) * lin.cols;
      for (int c = 0; c < lin.cols; ++c) {
        grow[c] += d * in[c];
        din[c] += d * wrow[c];
      }
    }
    return din;
  };

  if (p.gating.fcn == FcnKind::SingleLayer)
    return linear_backward(dlogits, cache.input, p.fc1, g.fc1);

  std::vector<T> dhidden = linear_backward(dlogits, cache.hidden, p.fc2, g.fc2);
  for (std::size_t i = 0; i < dhidden.size(); ++i)
    if (cache.hidden[i] <= T(0)) dhidden[i] = T(0);
  return linear_backward(dhidden, cache.input, p.fc1, g.fc1);
}

}  // namespace detail

// Full block backward. Accumulates parameter grads into `grads` and returns
// the gradient wrt the block input. With frozen external gates the gating
// module is skipped entirely. `bn_train_stats` mirrors the forward BN mode.
template <class T>
Tensor5<T> mode_backward(const Tensor5<T>& grad_out, const MoECache<T>& cache,
                         MoEBlockParams<T>& p, MoEBlockGrads<T>& grads,
                         bool bn_train_stats = true) {
  Tensor5<T> g = grad_out;
  if (p.relu) g = relu_backward(g, cache.out);
  if (p.bn) {
    BNGrads<T> bng;
    g = batchnorm_backward(g, cache.bn_cache, *p.bn, bng, bn_train_stats);
    for (int c = 0; c < p.bn->channels(); ++c) {
      grads.bn_gamma[c] += bng.dgamma[c];
      grads.bn_beta[c] += bng.dbeta[c];
    }
  }

  const int t = p.expert_count();
  const int co = p.out_channels();
  const bool any_bias = static_cast<bool>(p.experts[0].bias);
  std::vector<std::vector<T>> dgate(t, std::vector<T>(co, T(0)));
  Tensor5<T> dx;

  if (cache.path == Path::Merged) {
    const int kp = cache.merged.extent();
    Tensor5<T> dW = conv3d_backward_weights(g, cache.input,
                                            cache.merged.weights.shape,
                                            Padding3::same(kp));
    std::vector<T> dB;
    if (any_bias) dB = conv3d_backward_bias(g);
    dx = conv3d_backward_input(g, cache.merged.weights, cache.input.shape,
                               Padding3::same(kp));

    // dŴ fans out to every expert through the gate-weighted lift; the gate
    // gradient is the inner product of dŴ with the expert's lifted kernel.
    const std::size_t slice = static_cast<std::size_t>(dW.shape[1]) * kp * kp * kp;
    for (int e = 0; e < t; ++e) {
      const auto& ex = p.experts[e];
      const Tensor5<T> lifted = pad_kernel(cache.expert_kernels[e], kp);
      Tensor5<T> dWe(dW.shape[0], dW.shape[1], kp, kp, kp);
      for (int oc = 0; oc < co; ++oc) {
        const T* dwp = dW.ptr() + dW.index(oc, 0, 0, 0, 0);
        const T* lp = lifted.ptr() + lifted.index(oc, 0, 0, 0, 0);
        T* dep = dWe.ptr() + dWe.index(oc, 0, 0, 0, 0);
        T dot = T(0);
        const T gv = cache.gates.values[e][oc];
        for (std::size_t i = 0; i < slice; ++i) {
          dot += dwp[i] * lp[i];
          dep[i] = gv * dwp[i];
        }
        dgate[e][oc] += dot;
        if (any_bias) {
          dgate[e][oc] += dB[oc] * (*ex.bias)[oc];
          grads.expert_b[e][oc] += cache.gates.values[e][oc] * dB[oc];
        }
      }
      Tensor5<T> core = detail::crop_kernel_grad(dWe, ex.k);
      if (ex.kind == ExpertKind::Conv) {
        for (std::size_t i = 0; i < core.data.size(); ++i)
          grads.expert_w[e].data[i] += core.data[i];
      } else {
        // Serial-merge adjoint against the fixed diagonal pooling kernel:
        // each 1x1x1 weight collects its K^3 window sum scaled by 1/K^3.
        const T inv = T(1) / static_cast<T>(ex.k * ex.k * ex.k);
        const std::size_t vol = static_cast<std::size_t>(ex.k) * ex.k * ex.k;
        for (int oc = 0; oc < core.shape[0]; ++oc)
          for (int ic = 0; ic < core.shape[1]; ++ic) {
            const T* src = core.ptr() + core.index(oc, ic, 0, 0, 0);
            T acc = T(0);
            for (std::size_t i = 0; i < vol; ++i) acc += src[i];
            grads.expert_w[e].at(oc, ic, 0, 0, 0) += acc * inv;
          }
      }
    }
  } else {
    dx.resize(cache.input.shape[0], cache.input.shape[1], cache.input.shape[2],
              cache.input.shape[3], cache.input.shape[4]);
    const std::size_t spatial = static_cast<std::size_t>(g.shape[2]) * g.shape[3] * g.shape[4];
    for (int e = 0; e < t; ++e) {
      const auto& ex = p.experts[e];
      // dy_e = gate ⊙ g; gate grad = <g, y_e> per output channel.
      Tensor5<T> dye(g.shape[0], g.shape[1], g.shape[2], g.shape[3], g.shape[4]);
      for (int in = 0; in < g.shape[0]; ++in)
        for (int oc = 0; oc < co; ++oc) {
          const T gv = cache.gates.values[e][oc];
          const T* gp = g.ptr() + g.index(in, oc, 0, 0, 0);
          const T* yp = cache.branch_outputs[e].ptr() +
                        cache.branch_outputs[e].index(in, oc, 0, 0, 0);
          T* dp = dye.ptr() + dye.index(in, oc, 0, 0, 0);
          T dot = T(0);
          for (std::size_t i = 0; i < spatial; ++i) {
            dot += gp[i] * yp[i];
            dp[i] = gv * gp[i];
          }
          dgate[e][oc] += dot;
        }

      if (ex.kind == ExpertKind::Conv) {
        const Padding3 pad = Padding3::same(ex.k);
        Tensor5<T> dw = conv3d_backward_weights(dye, cache.input,
                                                ex.conv_weights.shape, pad);
        for (std::size_t i = 0; i < dw.data.size(); ++i)
          grads.expert_w[e].data[i] += dw.data[i];
        Tensor5<T> dxe = conv3d_backward_input(dye, ex.conv_weights,
                                               cache.input.shape, pad);
        for (std::size_t i = 0; i < dxe.data.size(); ++i) dx.data[i] += dxe.data[i];
      } else {
        Tensor5<T> dw = conv3d_backward_weights(dye, cache.branch_pooled[e],
                                                ex.conv_weights.shape,
                                                Padding3::none());
        for (std::size_t i = 0; i < dw.data.size(); ++i)
          grads.expert_w[e].data[i] += dw.data[i];
        Tensor5<T> dpool = conv3d_backward_input(dye, ex.conv_weights,
                                                 cache.branch_pooled[e].shape,
                                                 Padding3::none());
        Tensor5<T> dxe = avgpool3d_backward(dpool, ex.k);
        for (std::size_t i = 0; i < dxe.data.size(); ++i) dx.data[i] += dxe.data[i];
      }
      if (any_bias) {
        std::vector<T> db = conv3d_backward_bias(dye);
        for (int oc = 0; oc < co; ++oc) grads.expert_b[e][oc] += db[oc];
      }
    }
  }

  if (!cache.gates_external) {
    std::vector<T> dgin = detail::gate_backward(dgate, cache.gate_cache, p, grads);
    if (p.gating.source == GateSource::InputDependent) {
      // Adjoint of the global average pool: spread each channel's gradient
      // uniformly over batch and space.
      const std::size_t spatial = static_cast<std::size_t>(dx.shape[2]) *
                                  dx.shape[3] * dx.shape[4];
      const T inv = T(1) / static_cast<T>(static_cast<std::size_t>(dx.shape[0]) * spatial);
      for (int in = 0; in < dx.shape[0]; ++in)
        for (int c = 0; c < dx.shape[1]; ++c) {
          const T add = dgin[c] * inv;
          T* d = dx.ptr() + dx.index(in, c, 0, 0, 0);
          for (std::size_t i = 0; i < spatial; ++i) d[i] += add;
        }
    }
  }
  return dx;
}

}  // namespace mixconv
