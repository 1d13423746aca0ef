#pragma once

#include <map>
#include <string>
#include <vector>

#include "mixconv/moe_block.hpp"

namespace mixconv {

enum class NetVariant { TaskConditional, Plain, MultiDecoder };

inline std::string variant_name(NetVariant v) {
  switch (v) {
    case NetVariant::TaskConditional: return "task_conditional";
    case NetVariant::Plain: return "plain";
    case NetVariant::MultiDecoder: return "multi_decoder";
  }
  return "?";
}

inline NetVariant variant_from_name(const std::string& s) {
  if (s == "task_conditional") return NetVariant::TaskConditional;
  if (s == "plain") return NetVariant::Plain;
  if (s == "multi_decoder") return NetVariant::MultiDecoder;
  throw ConfigError("unknown network variant '" + s + "'");
}

// Shape of the whole backbone. Encoder/decoder channel counts double/halve
// per stage starting from base_channels; the plain and multi-decoder
// variants drop the expert mixture and use a single dense 3^3 conv per block.
struct ArchConfig {
  int depth = 2;
  int base_channels = 8;
  int in_channels = 1;
  int out_channels = 1;
  int tasks = 3;
  NetVariant variant = NetVariant::TaskConditional;
  EmbedKind embed = EmbedKind::OneHot;
  uint64_t embed_seed = 0;
  std::vector<ExpertSpec> experts = default_experts();
  GatingConfig gating;

  int stage_channels(int stage) const { return base_channels << stage; }
  std::vector<ExpertSpec> block_experts() const {
    if (variant == NetVariant::TaskConditional) return experts;
    return {{ExpertKind::Conv, 3}};
  }
};

inline TaskEmbedding embed_for_task(const ArchConfig& a, int l) {
  if (a.embed == EmbedKind::OneHot) return one_hot_embed(l, a.tasks);
  return gaussian_embed(l, a.tasks, a.embed_seed);
}

// Strided 2x2x2 conv (or its transpose) followed by BN and ReLU.
template <class T>
struct ResampleParams {
  Tensor5<T> w;
  BNParams<T> bn;
};

template <class T>
struct DecoderParams {
  std::vector<ResampleParams<T>> up;        // stage depth-1 .. 0 order
  std::vector<MoEBlockParams<T>> blocks;    // two per stage, same order
  MoEBlockParams<T> head;
};

template <class T>
struct NetworkParams {
  ArchConfig arch;
  std::vector<MoEBlockParams<T>> enc_blocks;  // two per stage
  std::vector<ResampleParams<T>> down;        // one per stage
  std::vector<MoEBlockParams<T>> mid_blocks;  // two
  std::vector<DecoderParams<T>> decoders;     // one, or S for MultiDecoder

  // Task-incremental state: experts below frozen_expert_count, all BN and
  // all resampling convs stop training; gate vectors captured before the
  // extension allow bit-exact replay of the old tasks.
  bool frozen_base = false;
  int frozen_expert_count = 0;
  std::map<int, std::vector<GateVector<T>>> stored_gates;  // task -> per block

  int decoder_for_task(int l) const {
    if (arch.variant != NetVariant::MultiDecoder) return 0;
    if (l < 1 || l > static_cast<int>(decoders.size()))
      throw DimensionError("task " + std::to_string(l) +
                           " has no decoder (have " +
                           std::to_string(decoders.size()) + ")");
    return l - 1;
  }
};

namespace detail {

template <class T>
ResampleParams<T> init_resample(int ci, int co, Rng& rng) {
  ResampleParams<T> r;
  const double std = std::sqrt(2.0 / (static_cast<double>(ci) * 8));
  r.w = random_tensor<T>(ci, co, 2, 2, 2, rng, std);
  r.bn = BNParams<T>(co);
  return r;
}

template <class T>
DecoderParams<T> init_decoder(const ArchConfig& a, const BlockConfig& hidden,
                              Rng& rng) {
  const int gate_in = hidden.gating.source == GateSource::TaskPrior ? a.tasks : 0;
  DecoderParams<T> dec;
  for (int s = a.depth - 1; s >= 0; --s) {
    const int c = a.stage_channels(s);
    dec.up.push_back(init_resample<T>(2 * c, c, rng));
    BlockConfig cfg = hidden;
    dec.blocks.push_back(init_mode_block<T>(
        2 * c, c, hidden.gating.source == GateSource::TaskPrior ? gate_in : 2 * c,
        cfg, rng));
    dec.blocks.push_back(init_mode_block<T>(
        c, c, hidden.gating.source == GateSource::TaskPrior ? gate_in : c, cfg,
        rng));
  }
  BlockConfig headcfg = hidden;
  headcfg.batch_norm = false;
  headcfg.relu = false;
  headcfg.bias = true;
  dec.head = init_mode_block<T>(
      a.base_channels, a.out_channels,
      hidden.gating.source == GateSource::TaskPrior ? gate_in : a.base_channels,
      headcfg, rng);
  return dec;
}

}  // namespace detail

template <class T>
NetworkParams<T> build_network(const ArchConfig& arch, Rng& rng) {
  if (arch.depth < 1) throw ConfigError("network depth must be at least 1");
  if (arch.base_channels < 1 || arch.in_channels < 1 || arch.out_channels < 1)
    throw ConfigError("channel counts must be positive");
  if (arch.tasks < 1) throw ConfigError("task count must be positive");

  BlockConfig hidden;
  hidden.experts = arch.block_experts();
  hidden.gating = arch.gating;
  const int gate_in = arch.gating.source == GateSource::TaskPrior ? arch.tasks : 0;

  NetworkParams<T> p;
  p.arch = arch;
  for (int s = 0; s < arch.depth; ++s) {
    const int cin = s == 0 ? arch.in_channels : arch.stage_channels(s - 1);
    const int c = arch.stage_channels(s);
    p.enc_blocks.push_back(init_mode_block<T>(
        cin, c, arch.gating.source == GateSource::TaskPrior ? gate_in : cin,
        hidden, rng));
    p.enc_blocks.push_back(init_mode_block<T>(
        c, c, arch.gating.source == GateSource::TaskPrior ? gate_in : c, hidden,
        rng));
    p.down.push_back(detail::init_resample<T>(c, c, rng));
  }
  const int cb = arch.stage_channels(arch.depth - 1);
  const int cm = arch.stage_channels(arch.depth);
  p.mid_blocks.push_back(init_mode_block<T>(
      cb, cm, arch.gating.source == GateSource::TaskPrior ? gate_in : cb, hidden,
      rng));
  p.mid_blocks.push_back(init_mode_block<T>(
      cm, cm, arch.gating.source == GateSource::TaskPrior ? gate_in : cm, hidden,
      rng));

  const int ndec = arch.variant == NetVariant::MultiDecoder ? arch.tasks : 1;
  for (int d = 0; d < ndec; ++d)
    p.decoders.push_back(detail::init_decoder<T>(arch, hidden, rng));
  return p;
}

template <class T>
struct ResampleCache {
  Tensor5<T> input, conv;  // conv = pre-BN
  BNCache<T> bn;
  Tensor5<T> out;  // post-ReLU
};

template <class T>
struct NetCache {
  std::vector<MoECache<T>> enc;
  std::vector<ResampleCache<T>> down;
  std::vector<MoECache<T>> mid;
  std::vector<ResampleCache<T>> up;
  std::vector<MoECache<T>> dec;
  MoECache<T> head;
  int decoder_index = 0;
  int task = 0;
};

namespace detail {

template <class T>
Tensor5<T> concat_channels(const Tensor5<T>& a, const Tensor5<T>& b) {
  if (a.shape[0] != b.shape[0] || a.shape[2] != b.shape[2] ||
      a.shape[3] != b.shape[3] || a.shape[4] != b.shape[4])
    throw DimensionError("concat_channels: non-channel extents differ (" +
                         a.shape_str() + " vs " + b.shape_str() + ")");
  Tensor5<T> out(a.shape[0], a.shape[1] + b.shape[1], a.shape[2], a.shape[3],
                 a.shape[4]);
  const std::size_t spatial = static_cast<std::size_t>(a.shape[2]) * a.shape[3] * a.shape[4];
  for (int n = 0; n < a.shape[0]; ++n) {
    for (int c = 0; c < a.shape[1]; ++c)
      std::copy(a.ptr() + a.index(n, c, 0, 0, 0),
                a.ptr() + a.index(n, c, 0, 0, 0) + spatial,
                out.ptr() + out.index(n, c, 0, 0, 0));
    for (int c = 0; c < b.shape[1]; ++c)
      std::copy(b.ptr() + b.index(n, c, 0, 0, 0),
                b.ptr() + b.index(n, c, 0, 0, 0) + spatial,
                out.ptr() + out.index(n, a.shape[1] + c, 0, 0, 0));
  }
  return out;
}

template <class T>
std::pair<Tensor5<T>, Tensor5<T>> split_channels(const Tensor5<T>& x, int c1) {
  Tensor5<T> a(x.shape[0], c1, x.shape[2], x.shape[3], x.shape[4]);
  Tensor5<T> b(x.shape[0], x.shape[1] - c1, x.shape[2], x.shape[3], x.shape[4]);
  const std::size_t spatial = static_cast<std::size_t>(x.shape[2]) * x.shape[3] * x.shape[4];
  for (int n = 0; n < x.shape[0]; ++n) {
    for (int c = 0; c < c1; ++c)
      std::copy(x.ptr() + x.index(n, c, 0, 0, 0),
                x.ptr() + x.index(n, c, 0, 0, 0) + spatial,
                a.ptr() + a.index(n, c, 0, 0, 0));
    for (int c = c1; c < x.shape[1]; ++c)
      std::copy(x.ptr() + x.index(n, c, 0, 0, 0),
                x.ptr() + x.index(n, c, 0, 0, 0) + spatial,
                b.ptr() + b.index(n, c - c1, 0, 0, 0));
  }
  return {std::move(a), std::move(b)};
}

template <class T>
Tensor5<T> downsample_forward(const Tensor5<T>& x, ResampleParams<T>& r,
                              BNMode mode, ResampleCache<T>* cache) {
  Tensor5<T> y = conv3d(x, r.w, Padding3::none(), 2);
  if (cache) {
    cache->input = x;
    cache->conv = y;
  }
  y = batchnorm(y, r.bn, mode, cache ? &cache->bn : nullptr);
  y = relu(y);
  if (cache) cache->out = y;
  return y;
}

template <class T>
Tensor5<T> upsample_forward(const Tensor5<T>& x, ResampleParams<T>& r,
                            BNMode mode, ResampleCache<T>* cache) {
  Tensor5<T> y = conv_transpose3d(x, r.w);
  if (cache) {
    cache->input = x;
    cache->conv = y;
  }
  y = batchnorm(y, r.bn, mode, cache ? &cache->bn : nullptr);
  y = relu(y);
  if (cache) cache->out = y;
  return y;
}

// Run one block, honoring stored gates when replay asks for them.
template <class T>
Tensor5<T> run_block(const Tensor5<T>& x, MoEBlockParams<T>& blk,
                     const TaskEmbedding& task, Path path, BNMode mode,
                     MoECache<T>* cache, const GateVector<T>* frozen_gates) {
  if (frozen_gates) {
    // Replay merges exactly the experts the gates were captured for, in the
    // original order, so the arithmetic matches the pre-extension forward
    // bit for bit.
    const int limit = frozen_gates->experts();
    MoECache<T> local;
    MoECache<T>* c = cache ? cache : &local;
    c->gates_external = true;
    std::vector<ExpertKernel<T>> trimmed(blk.experts.begin(),
                                         blk.experts.begin() + limit);
    std::swap(blk.experts, trimmed);
    Tensor5<T> y;
    try {
      y = mode_forward_gated(x, blk, *frozen_gates, path, mode, c);
    } catch (...) {
      std::swap(blk.experts, trimmed);
      throw;
    }
    std::swap(blk.experts, trimmed);
    return y;
  }
  const std::vector<T> gin = block_gate_input<T>(x, task, blk.gating);
  GateVector<T> g = gate(gin, blk, cache ? &cache->gate_cache : nullptr);
  return mode_forward_gated(x, blk, g, path, mode, cache);
}

}  // namespace detail

// Full forward pass. `replay_stored_gates` switches every block to the gate
// vectors captured for this task before an extension (exact old-task
// behavior); it requires those gates to exist.
template <class T>
Tensor5<T> net_forward(const Tensor5<T>& input, NetworkParams<T>& p, int task,
                       Path path = Path::Merged, BNMode mode = BNMode::Infer,
                       NetCache<T>* cache = nullptr,
                       bool replay_stored_gates = false) {
  const ArchConfig& a = p.arch;
  if (input.shape[1] != a.in_channels)
    throw DimensionError("network expects " + std::to_string(a.in_channels) +
                         " input channels, got " + std::to_string(input.shape[1]));
  const int div = 1 << a.depth;
  for (int ax = 2; ax < 5; ++ax)
    if (input.shape[ax] % div != 0)
      throw GeometryError("input extent " + std::to_string(input.shape[ax]) +
                          " on axis " + std::to_string(ax - 2) +
                          " not divisible by " + std::to_string(div));

  const TaskEmbedding emb = embed_for_task(a, task);
  const std::vector<GateVector<T>>* stored = nullptr;
  if (replay_stored_gates) {
    auto it = p.stored_gates.find(task);
    if (it == p.stored_gates.end())
      throw ConfigError("no stored gates for task " + std::to_string(task));
    stored = &it->second;
  }
  std::size_t gate_idx = 0;
  auto next_gates = [&]() -> const GateVector<T>* {
    if (!stored) return nullptr;
    if (gate_idx >= stored->size())
      throw DimensionError("stored gate list shorter than block count");
    return &(*stored)[gate_idx++];
  };

  const int dec_i = p.decoder_for_task(task);
  if (cache) {
    cache->enc.resize(p.enc_blocks.size());
    cache->down.resize(p.down.size());
    cache->mid.resize(p.mid_blocks.size());
    cache->decoder_index = dec_i;
    cache->task = task;
  }

  Tensor5<T> x = input;
  std::vector<Tensor5<T>> skips;
  for (int s = 0; s < a.depth; ++s) {
    x = detail::run_block(x, p.enc_blocks[2 * s], emb, path, mode,
                          cache ? &cache->enc[2 * s] : nullptr, next_gates());
    x = detail::run_block(x, p.enc_blocks[2 * s + 1], emb, path, mode,
                          cache ? &cache->enc[2 * s + 1] : nullptr, next_gates());
    skips.push_back(x);
    x = detail::downsample_forward(x, p.down[s], mode,
                                   cache ? &cache->down[s] : nullptr);
  }
  x = detail::run_block(x, p.mid_blocks[0], emb, path, mode,
                        cache ? &cache->mid[0] : nullptr, next_gates());
  x = detail::run_block(x, p.mid_blocks[1], emb, path, mode,
                        cache ? &cache->mid[1] : nullptr, next_gates());

  DecoderParams<T>& dec = p.decoders[dec_i];
  if (cache) {
    cache->up.resize(dec.up.size());
    cache->dec.resize(dec.blocks.size());
  }
  for (int i = 0; i < a.depth; ++i) {
    const int s = a.depth - 1 - i;  // stage this up step lands on
    x = detail::upsample_forward(x, dec.up[i], mode,
                                 cache ? &cache->up[i] : nullptr);
    x = detail::concat_channels(x, skips[s]);
    x = detail::run_block(x, dec.blocks[2 * i], emb, path, mode,
                          cache ? &cache->dec[2 * i] : nullptr, next_gates());
    x = detail::run_block(x, dec.blocks[2 * i + 1], emb, path, mode,
                          cache ? &cache->dec[2 * i + 1] : nullptr, next_gates());
  }
  x = detail::run_block(x, dec.head, emb, path, mode,
                        cache ? &cache->head : nullptr, next_gates());
  return x;
}

template <class T>
struct ResampleGrads {
  Tensor5<T> w;
  std::vector<T> gamma, beta;

  void resize_like(const ResampleParams<T>& r) {
    const auto& s = r.w.shape;
    w.resize(s[0], s[1], s[2], s[3], s[4]);
    gamma.assign(r.bn.channels(), T(0));
    beta.assign(r.bn.channels(), T(0));
  }
};

template <class T>
struct DecoderGrads {
  std::vector<ResampleGrads<T>> up;
  std::vector<MoEBlockGrads<T>> blocks;
  MoEBlockGrads<T> head;
};

template <class T>
struct NetGrads {
  std::vector<MoEBlockGrads<T>> enc;
  std::vector<ResampleGrads<T>> down;
  std::vector<MoEBlockGrads<T>> mid;
  std::vector<DecoderGrads<T>> decoders;

  void resize_like(const NetworkParams<T>& p) {
    enc.resize(p.enc_blocks.size());
    for (std::size_t i = 0; i < enc.size(); ++i) enc[i].resize_like(p.enc_blocks[i]);
    down.resize(p.down.size());
    for (std::size_t i = 0; i < down.size(); ++i) down[i].resize_like(p.down[i]);
    mid.resize(p.mid_blocks.size());
    for (std::size_t i = 0; i < mid.size(); ++i) mid[i].resize_like(p.mid_blocks[i]);
    decoders.resize(p.decoders.size());
    for (std::size_t d = 0; d < decoders.size(); ++d) {
      decoders[d].up.resize(p.decoders[d].up.size());
      for (std::size_t i = 0; i < decoders[d].up.size(); ++i)
        decoders[d].up[i].resize_like(p.decoders[d].up[i]);
      decoders[d].blocks.resize(p.decoders[d].blocks.size());
      for (std::size_t i = 0; i < decoders[d].blocks.size(); ++i)
        decoders[d].blocks[i].resize_like(p.decoders[d].blocks[i]);
      decoders[d].head.resize_like(p.decoders[d].head);
    }
  }
};

namespace detail {

template <class T>
Tensor5<T> downsample_backward(const Tensor5<T>& grad_out,
                               const ResampleCache<T>& cache,
                               ResampleParams<T>& r, ResampleGrads<T>& g,
                               bool train_stats) {
  Tensor5<T> d = relu_backward(grad_out, cache.out);
  BNGrads<T> bng;
  d = batchnorm_backward(d, cache.bn, r.bn, bng, train_stats);
  for (std::size_t i = 0; i < bng.dgamma.size(); ++i) {
    g.gamma[i] += bng.dgamma[i];
    g.beta[i] += bng.dbeta[i];
  }
  Tensor5<T> dw = conv3d_backward_weights(d, cache.input, r.w.shape,
                                          Padding3::none(), 2);
  for (std::size_t i = 0; i < dw.data.size(); ++i) g.w.data[i] += dw.data[i];
  return conv3d_backward_input(d, r.w, cache.input.shape, Padding3::none(), 2);
}

template <class T>
Tensor5<T> upsample_backward(const Tensor5<T>& grad_out,
                             const ResampleCache<T>& cache, ResampleParams<T>& r,
                             ResampleGrads<T>& g, bool train_stats) {
  Tensor5<T> d = relu_backward(grad_out, cache.out);
  BNGrads<T> bng;
  d = batchnorm_backward(d, cache.bn, r.bn, bng, train_stats);
  for (std::size_t i = 0; i < bng.dgamma.size(); ++i) {
    g.gamma[i] += bng.dgamma[i];
    g.beta[i] += bng.dbeta[i];
  }
  Tensor5<T> dw = conv_transpose3d_backward_weights(d, cache.input);
  for (std::size_t i = 0; i < dw.data.size(); ++i) g.w.data[i] += dw.data[i];
  return conv_transpose3d_backward_input(d, r.w);
}

}  // namespace detail

// Reverse pass through the whole network; mirrors net_forward exactly.
// Gradients accumulate into `grads` (zero it between optimizer steps).
template <class T>
Tensor5<T> net_backward(const Tensor5<T>& grad_out, NetCache<T>& cache,
                        NetworkParams<T>& p, NetGrads<T>& grads,
                        bool bn_train_stats = true) {
  const ArchConfig& a = p.arch;
  const int dec_i = cache.decoder_index;
  DecoderParams<T>& dec = p.decoders[dec_i];
  DecoderGrads<T>& dgr = grads.decoders[dec_i];

  Tensor5<T> d = mode_backward(grad_out, cache.head, dec.head, dgr.head,
                               bn_train_stats);

  std::vector<Tensor5<T>> skip_grads(a.depth);
  for (int i = a.depth - 1; i >= 0; --i) {
    const int s = a.depth - 1 - i;
    d = mode_backward(d, cache.dec[2 * i + 1], dec.blocks[2 * i + 1],
                      dgr.blocks[2 * i + 1], bn_train_stats);
    d = mode_backward(d, cache.dec[2 * i], dec.blocks[2 * i], dgr.blocks[2 * i],
                      bn_train_stats);
    const int up_channels = cache.up[i].out.shape[1];
    auto [dup, dskip] = detail::split_channels(d, up_channels);
    skip_grads[s] = std::move(dskip);
    d = detail::upsample_backward(dup, cache.up[i], dec.up[i], dgr.up[i],
                                  bn_train_stats);
  }

  d = mode_backward(d, cache.mid[1], p.mid_blocks[1], grads.mid[1], bn_train_stats);
  d = mode_backward(d, cache.mid[0], p.mid_blocks[0], grads.mid[0], bn_train_stats);

  for (int s = a.depth - 1; s >= 0; --s) {
    d = detail::downsample_backward(d, cache.down[s], p.down[s], grads.down[s],
                                    bn_train_stats);
    for (std::size_t i = 0; i < d.data.size(); ++i)
      d.data[i] += skip_grads[s].data[i];
    d = mode_backward(d, cache.enc[2 * s + 1], p.enc_blocks[2 * s + 1],
                      grads.enc[2 * s + 1], bn_train_stats);
    d = mode_backward(d, cache.enc[2 * s], p.enc_blocks[2 * s], grads.enc[2 * s],
                      bn_train_stats);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Uniform parameter-group traversal. One walker serves the optimizer, the
// checkpoint writer and the freeze logic, so group names and order can never
// drift apart. Groups flagged !trainable are persisted but never updated
// (BN running stats always; frozen groups after an extension).

template <class T>
struct ParamGroup {
  std::string name;
  T* param = nullptr;
  T* grad = nullptr;  // null when traversing without a grad store
  std::size_t count = 0;
  bool trainable = true;
};

namespace detail {

template <class T, class F>
void visit_block(const std::string& prefix, MoEBlockParams<T>& b,
                 MoEBlockGrads<T>* g, bool base_frozen, int frozen_experts,
                 F&& fn) {
  for (std::size_t e = 0; e < b.experts.size(); ++e) {
    const bool frozen = base_frozen && static_cast<int>(e) < frozen_experts;
    auto& w = b.experts[e].conv_weights;
    fn(ParamGroup<T>{prefix + ".e" + std::to_string(e) + ".w", w.ptr(),
                     g ? g->expert_w[e].ptr() : nullptr, w.data.size(), !frozen});
    if (b.experts[e].bias)
      fn(ParamGroup<T>{prefix + ".e" + std::to_string(e) + ".b",
                       b.experts[e].bias->data(),
                       g ? g->expert_b[e].data() : nullptr,
                       b.experts[e].bias->size(), !frozen});
  }
  fn(ParamGroup<T>{prefix + ".fc1.w", b.fc1.w.data(),
                   g ? g->fc1.w.data() : nullptr, b.fc1.w.size(), true});
  fn(ParamGroup<T>{prefix + ".fc1.b", b.fc1.b.data(),
                   g ? g->fc1.b.data() : nullptr, b.fc1.b.size(), true});
  if (!b.fc2.w.empty()) {
    fn(ParamGroup<T>{prefix + ".fc2.w", b.fc2.w.data(),
                     g ? g->fc2.w.data() : nullptr, b.fc2.w.size(), true});
    fn(ParamGroup<T>{prefix + ".fc2.b", b.fc2.b.data(),
                     g ? g->fc2.b.data() : nullptr, b.fc2.b.size(), true});
  }
  if (b.bn) {
    fn(ParamGroup<T>{prefix + ".bn.g", b.bn->gamma.data(),
                     g ? g->bn_gamma.data() : nullptr, b.bn->gamma.size(),
                     !base_frozen});
    fn(ParamGroup<T>{prefix + ".bn.b", b.bn->beta.data(),
                     g ? g->bn_beta.data() : nullptr, b.bn->beta.size(),
                     !base_frozen});
    fn(ParamGroup<T>{prefix + ".bn.rm", b.bn->running_mean.data(), nullptr,
                     b.bn->running_mean.size(), false});
    fn(ParamGroup<T>{prefix + ".bn.rv", b.bn->running_var.data(), nullptr,
                     b.bn->running_var.size(), false});
  }
}

template <class T, class F>
void visit_resample(const std::string& prefix, ResampleParams<T>& r,
                    ResampleGrads<T>* g, bool frozen, F&& fn) {
  fn(ParamGroup<T>{prefix + ".w", r.w.ptr(), g ? g->w.ptr() : nullptr,
                   r.w.data.size(), !frozen});
  fn(ParamGroup<T>{prefix + ".bn.g", r.bn.gamma.data(),
                   g ? g->gamma.data() : nullptr, r.bn.gamma.size(), !frozen});
  fn(ParamGroup<T>{prefix + ".bn.b", r.bn.beta.data(),
                   g ? g->beta.data() : nullptr, r.bn.beta.size(), !frozen});
  fn(ParamGroup<T>{prefix + ".bn.rm", r.bn.running_mean.data(), nullptr,
                   r.bn.running_mean.size(), false});
  fn(ParamGroup<T>{prefix + ".bn.rv", r.bn.running_var.data(), nullptr,
                   r.bn.running_var.size(), false});
}

}  // namespace detail

template <class T, class F>
void for_each_group(NetworkParams<T>& p, NetGrads<T>* grads, F&& fn) {
  const bool fb = p.frozen_base;
  const int fe = p.frozen_expert_count;
  for (std::size_t i = 0; i < p.enc_blocks.size(); ++i)
    detail::visit_block("enc" + std::to_string(i), p.enc_blocks[i],
                        grads ? &grads->enc[i] : nullptr, fb, fe, fn);
  for (std::size_t i = 0; i < p.down.size(); ++i)
    detail::visit_resample("down" + std::to_string(i), p.down[i],
                           grads ? &grads->down[i] : nullptr, fb, fn);
  for (std::size_t i = 0; i < p.mid_blocks.size(); ++i)
    detail::visit_block("mid" + std::to_string(i), p.mid_blocks[i],
                        grads ? &grads->mid[i] : nullptr, fb, fe, fn);
  for (std::size_t d = 0; d < p.decoders.size(); ++d) {
    const std::string dp = p.decoders.size() == 1
                               ? std::string("dec")
                               : "dec.t" + std::to_string(d + 1);
    for (std::size_t i = 0; i < p.decoders[d].up.size(); ++i)
      detail::visit_resample(dp + ".up" + std::to_string(i), p.decoders[d].up[i],
                             grads ? &grads->decoders[d].up[i] : nullptr, fb, fn);
    for (std::size_t i = 0; i < p.decoders[d].blocks.size(); ++i)
      detail::visit_block(dp + ".b" + std::to_string(i), p.decoders[d].blocks[i],
                          grads ? &grads->decoders[d].blocks[i] : nullptr, fb,
                          fe, fn);
    detail::visit_block(dp + ".head", p.decoders[d].head,
                        grads ? &grads->decoders[d].head : nullptr, fb, fe, fn);
  }
}

template <class T>
std::size_t parameter_count(NetworkParams<T>& p, bool trainable_only = false) {
  std::size_t n = 0;
  for_each_group<T>(p, nullptr, [&](const ParamGroup<T>& g) {
    const bool stats = g.name.ends_with(".bn.rm") || g.name.ends_with(".bn.rv");
    if (trainable_only ? g.trainable : !stats) n += g.count;
  });
  return n;
}

// All MoDE blocks of the network in forward-traversal order (the order
// stored gate lists use). For the multi-decoder variant this covers every
// decoder, task by task.
template <class T>
std::vector<std::pair<std::string, MoEBlockParams<T>*>> block_list(
    NetworkParams<T>& p) {
  std::vector<std::pair<std::string, MoEBlockParams<T>*>> out;
  for (std::size_t i = 0; i < p.enc_blocks.size(); ++i)
    out.emplace_back("enc" + std::to_string(i), &p.enc_blocks[i]);
  for (std::size_t i = 0; i < p.mid_blocks.size(); ++i)
    out.emplace_back("mid" + std::to_string(i), &p.mid_blocks[i]);
  for (std::size_t d = 0; d < p.decoders.size(); ++d) {
    const std::string dp = p.decoders.size() == 1
                               ? std::string("dec")
                               : "dec.t" + std::to_string(d + 1);
    for (std::size_t i = 0; i < p.decoders[d].blocks.size(); ++i)
      out.emplace_back(dp + ".b" + std::to_string(i), &p.decoders[d].blocks[i]);
    out.emplace_back(dp + ".head", &p.decoders[d].head);
  }
  return out;
}

// Gate vectors of every block for one task (task-prior gating only, since
// input-dependent gates have no task-fixed value).
template <class T>
std::vector<GateVector<T>> gates_for_task(NetworkParams<T>& p, int task) {
  if (p.arch.gating.source != GateSource::TaskPrior)
    throw ConfigError("task-fixed gate vectors require task-prior gating");
  const TaskEmbedding emb = embed_for_task(p.arch, task);
  std::vector<T> gin(emb.values.size());
  for (std::size_t i = 0; i < gin.size(); ++i) gin[i] = static_cast<T>(emb.values[i]);
  std::vector<GateVector<T>> out;
  for (auto& [name, blk] : block_list(p)) out.push_back(gate(gin, *blk));
  return out;
}

// Channel-averaged gate mass per expert for each block, the view used to
// compare how tasks deploy the expert inventory.
template <class T>
std::vector<std::pair<std::string, std::vector<T>>> gating_summary(
    NetworkParams<T>& p, int task) {
  std::vector<GateVector<T>> gates = gates_for_task(p, task);
  auto blocks = block_list(p);
  std::vector<std::pair<std::string, std::vector<T>>> out;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    std::vector<T> avg(gates[b].experts(), T(0));
    for (int e = 0; e < gates[b].experts(); ++e) {
      for (int c = 0; c < gates[b].channels(); ++c)
        avg[e] += gates[b].values[e][c];
      avg[e] /= static_cast<T>(gates[b].channels());
    }
    out.emplace_back(blocks[b].first, std::move(avg));
  }
  return out;
}

// Task-incremental extension: capture every old task's gate vectors, then
// give each block one fresh expert and a rebuilt gating module sized for
// S+1 tasks. Everything that existed before freezes.
template <class T>
void extend_for_new_task(NetworkParams<T>& p, Rng& rng,
                         ExpertSpec new_expert = {ExpertKind::Conv, 3}) {
  if (p.arch.variant != NetVariant::TaskConditional)
    throw ConfigError("task-incremental extension requires the task-conditional variant");
  if (p.arch.gating.source != GateSource::TaskPrior)
    throw ConfigError("task-incremental extension requires task-prior gating");
  if (p.frozen_base)
    throw ConfigError("network was already extended once");

  p.stored_gates.clear();
  for (int l = 1; l <= p.arch.tasks; ++l)
    p.stored_gates[l] = gates_for_task(p, l);

  const int old_t = static_cast<int>(p.arch.experts.size());
  p.frozen_base = true;
  p.frozen_expert_count = old_t;
  p.arch.tasks += 1;
  p.arch.experts.push_back(new_expert);

  for (auto& [name, blk] : block_list(p)) {
    const int ci = blk->in_channels();
    const int co = blk->out_channels();
    ExpertKernel<T> e;
    e.kind = new_expert.kind;
    e.k = new_expert.k;
    const int kw = new_expert.kind == ExpertKind::Conv ? new_expert.k : 1;
    const double std = std::sqrt(2.0 / (static_cast<double>(ci) * kw * kw * kw));
    e.conv_weights = random_tensor<T>(co, ci, kw, kw, kw, rng, std);
    if (blk->experts[0].bias) e.bias = std::vector<T>(co, T(0));
    validate_expert(e);
    blk->experts.push_back(std::move(e));

    const int t = blk->expert_count();
    if (blk->gating.fcn == FcnKind::SingleLayer) {
      blk->fc1.resize(t * co, p.arch.tasks);
    } else {
      blk->fc1.resize(blk->gating.hidden, p.arch.tasks);
      const double std1 = std::sqrt(2.0 / p.arch.tasks);
      for (auto& v : blk->fc1.w) v = static_cast<T>(rng.normal(0.0, std1));
      blk->fc2.resize(t * co, blk->gating.hidden);
    }
  }
}

}  // namespace mixconv
