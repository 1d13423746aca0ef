#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mixconv/ops.hpp"
#include "mixconv/tensor.hpp"

namespace mixconv {

enum class ExpertKind { Conv, AvgpConv };

// One expert branch of a mixture block. Conv(K) holds a dense K^3 kernel;
// AvgpConv(K) is a fixed K^3 average pooling followed by a learnable 1x1x1
// conv, so its learnable weights are [C_O,C_I,1,1,1].
template <class T>
struct ExpertKernel {
  ExpertKind kind = ExpertKind::Conv;
  int k = 3;
  Tensor5<T> conv_weights;
  std::optional<std::vector<T>> bias;

  int out_channels() const { return conv_weights.shape[0]; }
  int in_channels() const { return conv_weights.shape[1]; }
};

template <class T>
void validate_expert(const ExpertKernel<T>& e) {
  if (e.k != 1 && e.k != 3 && e.k != 5)
    throw GeometryError("expert kernel extent must be 1, 3 or 5, got " +
                        std::to_string(e.k));
  if (e.kind == ExpertKind::AvgpConv && e.k == 1)
    throw GeometryError("avgp-conv with extent 1 duplicates the 1x1x1 conv expert");
  const int want = e.kind == ExpertKind::Conv ? e.k : 1;
  if (e.conv_weights.shape[2] != want || e.conv_weights.shape[3] != want ||
      e.conv_weights.shape[4] != want)
    throw DimensionError("expert weights have spatial extent " +
                         std::to_string(e.conv_weights.shape[2]) +
                         ", expected " + std::to_string(want));
  if (e.bias && static_cast<int>(e.bias->size()) != e.out_channels())
    throw DimensionError("expert bias length does not match output channels");
}

// Per-expert, per-output-channel mixing weights: values[t][c_o].
template <class T>
struct GateVector {
  std::vector<std::vector<T>> values;

  int experts() const { return static_cast<int>(values.size()); }
  int channels() const { return values.empty() ? 0 : static_cast<int>(values[0].size()); }
};

template <class T>
struct MergedKernel {
  Tensor5<T> weights;  // [C_O, C_I, K', K', K']
  std::optional<std::vector<T>> bias;

  int extent() const { return weights.shape[2]; }
};

// Fixed average-pooling kernel as an explicit conv kernel: diagonal channel
// blocks filled with 1/K^3, zero elsewhere. Pure algebra, so any K >= 1 is
// accepted; parity constraints live where same-padding is actually applied.
template <class T>
Tensor5<T> build_avgp_kernel(int ci, int k) {
  if (ci < 1) throw DimensionError("build_avgp_kernel: need at least one channel");
  if (k < 1) throw GeometryError("build_avgp_kernel: kernel extent must be positive");
  Tensor5<T> out(ci, ci, k, k, k);
  const T v = T(1) / static_cast<T>(k * k * k);
  for (int c = 0; c < ci; ++c)
    for (int d = 0; d < k; ++d)
      for (int h = 0; h < k; ++h)
        for (int w = 0; w < k; ++w) out.at(c, c, d, h, w) = v;
  return out;
}

// Collapse a 1x1x1 conv following a K^3 conv into a single K^3 kernel by
// contracting over the middle channel:
//   out[co,ci,d,h,w] = sum_i conv1x1[co,i] * inner[i,ci,d,h,w].
template <class T>
Tensor5<T> serial_merge(const Tensor5<T>& conv1x1, const Tensor5<T>& inner) {
  if (conv1x1.shape[2] != 1 || conv1x1.shape[3] != 1 || conv1x1.shape[4] != 1)
    throw DimensionError("serial_merge: first kernel must be 1x1x1");
  if (conv1x1.shape[1] != inner.shape[0])
    throw DimensionError("serial_merge: channel contraction mismatch (" +
                         std::to_string(conv1x1.shape[1]) + " vs " +
                         std::to_string(inner.shape[0]) + ")");
  const int co = conv1x1.shape[0], mid = conv1x1.shape[1];
  const int ci = inner.shape[1];
  const int k = inner.shape[2];
  const std::size_t vol = static_cast<std::size_t>(k) * inner.shape[3] * inner.shape[4];

  Tensor5<T> out(co, ci, inner.shape[2], inner.shape[3], inner.shape[4]);
  for (int oc = 0; oc < co; ++oc)
    for (int i = 0; i < mid; ++i) {
      const T w1 = conv1x1.at(oc, i, 0, 0, 0);
      if (w1 == T(0)) continue;
      for (int c = 0; c < ci; ++c) {
        const T* src = inner.ptr() + inner.index(i, c, 0, 0, 0);
        T* dst = out.ptr() + out.index(oc, c, 0, 0, 0);
        for (std::size_t p = 0; p < vol; ++p) dst[p] += w1 * src[p];
      }
    }
  return out;
}

// Lift a K^3 kernel into the K'^3 kernel space by centering it in zeros.
// Same-padded convs with the lifted kernel match the original exactly.
template <class T>
Tensor5<T> pad_kernel(const Tensor5<T>& kernel, int kprime) {
  const int k = kernel.shape[2];
  if (kernel.shape[3] != k || kernel.shape[4] != k)
    throw DimensionError("pad_kernel: kernel must be cubic");
  if (k % 2 == 0 || kprime % 2 == 0)
    throw GeometryError("pad_kernel: extents must be odd");
  if (k > kprime)
    throw GeometryError("pad_kernel: cannot shrink a kernel (" +
                        std::to_string(k) + " > " + std::to_string(kprime) + ")");
  if (k == kprime) return kernel;

  const int off = (kprime - k) / 2;
  Tensor5<T> out(kernel.shape[0], kernel.shape[1], kprime, kprime, kprime);
  for (int oc = 0; oc < kernel.shape[0]; ++oc)
    for (int ic = 0; ic < kernel.shape[1]; ++ic)
      for (int d = 0; d < k; ++d)
        for (int h = 0; h < k; ++h) {
          const T* src = kernel.ptr() + kernel.index(oc, ic, d, h, 0);
          T* dst = out.ptr() + out.index(oc, ic, d + off, h + off, off);
          std::copy(src, src + k, dst);
        }
  return out;
}

// The dense kernel an expert is equivalent to: Conv experts pass through,
// AvgpConv experts collapse pooling + 1x1x1 into one K^3 kernel whose entries
// are constant across space (weight / K^3 per channel pair).
template <class T>
Tensor5<T> expert_effective_kernel(const ExpertKernel<T>& e) {
  validate_expert(e);
  if (e.kind == ExpertKind::Conv) return e.conv_weights;
  return serial_merge(e.conv_weights, build_avgp_kernel<T>(e.in_channels(), e.k));
}

// Gated sum of lifted expert kernels: out[co] = sum_t gates[t][co] *
// pad(kernels[t], K')[co]. Biases, when supplied, merge the same way.
template <class T>
MergedKernel<T> parallel_merge(const std::vector<Tensor5<T>>& kernels,
                               const GateVector<T>& gates, int kprime = 5,
                               const std::vector<std::vector<T>>* biases = nullptr) {
  const int t = static_cast<int>(kernels.size());
  if (t == 0) throw DimensionError("parallel_merge: no expert kernels");
  if (gates.experts() != t)
    throw DimensionError("parallel_merge: " + std::to_string(t) +
                         " kernels but " + std::to_string(gates.experts()) +
                         " gate vectors");
  const int co = kernels[0].shape[0], ci = kernels[0].shape[1];
  if (gates.channels() != co)
    throw DimensionError("parallel_merge: gate length " +
                         std::to_string(gates.channels()) +
                         " does not match output channels " + std::to_string(co));
  if (biases && static_cast<int>(biases->size()) != t)
    throw DimensionError("parallel_merge: bias list length mismatch");

  MergedKernel<T> merged;
  merged.weights.resize(co, ci, kprime, kprime, kprime);
  if (biases) merged.bias = std::vector<T>(co, T(0));

  const std::size_t slice = static_cast<std::size_t>(ci) * kprime * kprime * kprime;
  for (int e = 0; e < t; ++e) {
    if (kernels[e].shape[0] != co || kernels[e].shape[1] != ci)
      throw DimensionError("parallel_merge: expert " + std::to_string(e) +
                           " has channel shape " + kernels[e].shape_str());
    const Tensor5<T> lifted = pad_kernel(kernels[e], kprime);
    for (int oc = 0; oc < co; ++oc) {
      const T g = gates.values[e][oc];
      const T* src = lifted.ptr() + lifted.index(oc, 0, 0, 0, 0);
      T* dst = merged.weights.ptr() + merged.weights.index(oc, 0, 0, 0, 0);
      for (std::size_t p = 0; p < slice; ++p) dst[p] += g * src[p];
      if (biases) (*merged.bias)[oc] += g * (*biases)[e][oc];
    }
  }
  return merged;
}

// Convenience wrapper over a full expert list: serial-merge each AvgpConv,
// then gate-sum everything into one K'^3 kernel (K' = widest expert unless
// overridden). Bias merging kicks in when any expert carries one.
template <class T>
MergedKernel<T> merge_experts(const std::vector<ExpertKernel<T>>& experts,
                              const GateVector<T>& gates, int kprime = 0) {
  if (experts.empty()) throw DimensionError("merge_experts: empty expert list");
  bool any_bias = false;
  int widest = 1;
  for (const auto& e : experts) {
    validate_expert(e);
    widest = std::max(widest, e.k);
    if (e.bias) any_bias = true;
  }
  if (kprime == 0) kprime = widest;

  std::vector<Tensor5<T>> kernels;
  kernels.reserve(experts.size());
  for (const auto& e : experts) kernels.push_back(expert_effective_kernel(e));

  std::vector<std::vector<T>> biases;
  if (any_bias) {
    for (const auto& e : experts) {
      if (!e.bias)
        throw DimensionError("merge_experts: biases must be present on all experts or none");
      biases.push_back(*e.bias);
    }
  }
  return parallel_merge(kernels, gates, kprime, any_bias ? &biases : nullptr);
}

// Reference path: run every expert branch explicitly (pooling included),
// scale each output channel by its gate, and sum. This is the oracle the
// merged path is checked against.
template <class T>
Tensor5<T> branchwise_forward(const Tensor5<T>& input,
                              const std::vector<ExpertKernel<T>>& experts,
                              const GateVector<T>& gates) {
  if (experts.empty()) throw DimensionError("branchwise_forward: empty expert list");
  if (gates.experts() != static_cast<int>(experts.size()))
    throw DimensionError("branchwise_forward: gate count mismatch");
  const int co = experts[0].out_channels();
  if (gates.channels() != co)
    throw DimensionError("branchwise_forward: gate length mismatch");

  Tensor5<T> sum;
  for (std::size_t e = 0; e < experts.size(); ++e) {
    const auto& ex = experts[e];
    validate_expert(ex);
    Tensor5<T> y;
    if (ex.kind == ExpertKind::Conv) {
      y = conv3d(input, ex.conv_weights, ex.bias ? &*ex.bias : nullptr,
                 Padding3::same(ex.k));
    } else {
      const Tensor5<T> pooled = avgpool3d(input, ex.k);
      y = conv3d(pooled, ex.conv_weights, ex.bias ? &*ex.bias : nullptr,
                 Padding3::none());
    }
    if (e == 0) {
      sum.resize(y.shape[0], y.shape[1], y.shape[2], y.shape[3], y.shape[4]);
    } else if (!sum.same_shape(y)) {
      throw DimensionError("branchwise_forward: expert output shapes disagree");
    }
    const std::size_t spatial = static_cast<std::size_t>(y.shape[2]) * y.shape[3] * y.shape[4];
    for (int in = 0; in < y.shape[0]; ++in)
      for (int oc = 0; oc < co; ++oc) {
        const T g = gates.values[e][oc];
        const T* src = y.ptr() + y.index(in, oc, 0, 0, 0);
        T* dst = sum.ptr() + sum.index(in, oc, 0, 0, 0);
        for (std::size_t i = 0; i < spatial; ++i) dst[i] += g * src[i];
      }
  }
  return sum;
}

}  // namespace mixconv
