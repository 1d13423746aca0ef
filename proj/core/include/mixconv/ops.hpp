#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "mixconv/tensor.hpp"

namespace mixconv {

// Per-axis symmetric zero padding.
struct Padding3 {
  int d = 0, h = 0, w = 0;

  static Padding3 same(int k) {
    if (k < 1 || k % 2 == 0)
      throw GeometryError("same-padding requires odd kernel extent, got " +
                          std::to_string(k));
    return Padding3{(k - 1) / 2, (k - 1) / 2, (k - 1) / 2};
  }
  static Padding3 none() { return Padding3{0, 0, 0}; }
};

namespace detail {

// Zero-padded copy of the spatial axes, shared by the conv kernels so the
// hot loops run without bounds checks.
template <class T>
Tensor5<T> pad_input(const Tensor5<T>& x, const Padding3& p) {
  const int n = x.shape[0], c = x.shape[1];
  const int d = x.shape[2], h = x.shape[3], w = x.shape[4];
  Tensor5<T> xp(n, c, d + 2 * p.d, h + 2 * p.h, w + 2 * p.w);
  const int hp = h + 2 * p.h, wp = w + 2 * p.w;
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic)
      for (int id = 0; id < d; ++id)
        for (int ih = 0; ih < h; ++ih) {
          const T* src = x.ptr() + x.index(in, ic, id, ih, 0);
          T* dst = xp.ptr() + xp.index(in, ic, id + p.d, ih + p.h, p.w);
          std::copy(src, src + w, dst);
        }
  (void)hp;
  (void)wp;
  return xp;
}

template <class T>
Tensor5<T> crop_padding(const Tensor5<T>& xp, const Padding3& p,
                        const std::array<int, 5>& shape) {
  Tensor5<T> x(shape[0], shape[1], shape[2], shape[3], shape[4]);
  for (int in = 0; in < shape[0]; ++in)
    for (int ic = 0; ic < shape[1]; ++ic)
      for (int id = 0; id < shape[2]; ++id)
        for (int ih = 0; ih < shape[3]; ++ih) {
          const T* src = xp.ptr() + xp.index(in, ic, id + p.d, ih + p.h, p.w);
          T* dst = x.ptr() + x.index(in, ic, id, ih, 0);
          std::copy(src, src + shape[4], dst);
        }
  return x;
}

inline int out_extent(int in, int pad, int k, int stride, const char* axis) {
  const int span = in + 2 * pad - k;
  if (span < 0)
    throw GeometryError(std::string("conv3d: kernel does not fit along ") + axis);
  if (span % stride != 0)
    throw GeometryError(std::string("conv3d: non-exact output extent along ") +
                        axis + " (span " + std::to_string(span) + ", stride " +
                        std::to_string(stride) + ")");
  return span / stride + 1;
}

// One kernel row swept across one input row: acc[x] += sum_fw kk[fw] *
// src[x*stride + fw]. The width is a template parameter so the tap weights
// stay in registers and the x loop vectorizes; convs dominate the runtime
// and this routine is their inner loop.
template <class T, int KW, int STRIDE>
void conv_row_fixed(T* acc, const T* src, const T* kk, int ow) {
  for (int x = 0; x < ow; ++x) {
    const T* s = src + x * STRIDE;
    T sum = acc[x];
    for (int fw = 0; fw < KW; ++fw) sum += kk[fw] * s[fw];
    acc[x] = sum;
  }
}

template <class T>
void conv_row(T* acc, const T* src, const T* kk, int kw, int stride, int ow) {
  if (stride == 1) {
    switch (kw) {
      case 1: return conv_row_fixed<T, 1, 1>(acc, src, kk, ow);
      case 2: return conv_row_fixed<T, 2, 1>(acc, src, kk, ow);
      case 3: return conv_row_fixed<T, 3, 1>(acc, src, kk, ow);
      case 5: return conv_row_fixed<T, 5, 1>(acc, src, kk, ow);
    }
  } else {
    switch (kw) {
      case 1: return conv_row_fixed<T, 1, 2>(acc, src, kk, ow);
      case 2: return conv_row_fixed<T, 2, 2>(acc, src, kk, ow);
      case 3: return conv_row_fixed<T, 3, 2>(acc, src, kk, ow);
      case 5: return conv_row_fixed<T, 5, 2>(acc, src, kk, ow);
    }
  }
  for (int fw = 0; fw < kw; ++fw) {
    const T wv = kk[fw];
    const T* s = src + fw;
    if (stride == 1) {
      for (int x = 0; x < ow; ++x) acc[x] += wv * s[x];
    } else {
      for (int x = 0; x < ow; ++x) acc[x] += wv * s[2 * x];
    }
  }
}

}  // namespace detail

// Direct 3D cross-correlation over a zero-padded input.
// input [N,C_I,D,H,W], kernel [C_O,C_I,Kd,Kh,Kw] -> [N,C_O,D',H',W'].
template <class T>
Tensor5<T> conv3d(const Tensor5<T>& input, const Tensor5<T>& kernel,
                  const std::vector<T>* bias, const Padding3& pad,
                  int stride = 1) {
  const int n = input.shape[0], ci = input.shape[1];
  const int co = kernel.shape[0];
  const int kd = kernel.shape[2], kh = kernel.shape[3], kw = kernel.shape[4];
  if (kernel.shape[1] != ci)
    throw DimensionError("conv3d: kernel expects " +
                         std::to_string(kernel.shape[1]) +
                         " input channels, input has " + std::to_string(ci));
  if (stride != 1 && stride != 2)
    throw GeometryError("conv3d: stride must be 1 or 2");
  if (bias && static_cast<int>(bias->size()) != co)
    throw DimensionError("conv3d: bias length does not match output channels");

  const int od = detail::out_extent(input.shape[2], pad.d, kd, stride, "D");
  const int oh = detail::out_extent(input.shape[3], pad.h, kh, stride, "H");
  const int ow = detail::out_extent(input.shape[4], pad.w, kw, stride, "W");

  const Tensor5<T> xp = detail::pad_input(input, pad);
  const int hp = xp.shape[3], wp = xp.shape[4];

  Tensor5<T> out(n, co, od, oh, ow);
  std::vector<T> acc(ow);

  for (int in = 0; in < n; ++in) {
    for (int oc = 0; oc < co; ++oc) {
      const T* kbase = kernel.ptr() + kernel.index(oc, 0, 0, 0, 0);
      const T b = bias ? (*bias)[oc] : T(0);
      for (int zd = 0; zd < od; ++zd) {
        for (int zh = 0; zh < oh; ++zh) {
          std::fill(acc.begin(), acc.end(), b);
          for (int c = 0; c < ci; ++c) {
            const T* plane = xp.ptr() + xp.index(in, c, 0, 0, 0);
            for (int fd = 0; fd < kd; ++fd) {
              const int id = zd * stride + fd;
              for (int fh = 0; fh < kh; ++fh) {
                const int ih = zh * stride + fh;
                const T* row = plane + (static_cast<std::size_t>(id) * hp + ih) * wp;
                const T* kk = kbase + ((static_cast<std::size_t>(c) * kd + fd) * kh + fh) * kw;
                detail::conv_row(acc.data(), row, kk, kw, stride, ow);
              }
            }
          }
          std::copy(acc.begin(), acc.end(),
                    out.ptr() + out.index(in, oc, zd, zh, 0));
        }
      }
    }
  }
  return out;
}

template <class T>
Tensor5<T> conv3d(const Tensor5<T>& input, const Tensor5<T>& kernel,
                  const Padding3& pad, int stride = 1) {
  return conv3d(input, kernel, static_cast<const std::vector<T>*>(nullptr), pad,
                stride);
}

// Gradient of conv3d wrt its input: scatter grad_out through the kernel into
// a padded buffer, then crop the padding away.
template <class T>
Tensor5<T> conv3d_backward_input(const Tensor5<T>& grad_out,
                                 const Tensor5<T>& kernel,
                                 const std::array<int, 5>& input_shape,
                                 const Padding3& pad, int stride = 1) {
  const int n = input_shape[0], ci = input_shape[1];
  const int co = kernel.shape[0];
  const int kd = kernel.shape[2], kh = kernel.shape[3], kw = kernel.shape[4];
  const int od = grad_out.shape[2], oh = grad_out.shape[3], ow = grad_out.shape[4];

  // At stride 1 the adjoint is itself a correlation: the output gradient,
  // padded by the complementary margin, against the centrally flipped and
  // channel-transposed kernel. Routing through conv3d reuses its fast row
  // loop; the scatter below stays for stride 2 and oversized padding.
  if (stride == 1 && pad.d < kd && pad.h < kh && pad.w < kw) {
    Tensor5<T> flipped(ci, co, kd, kh, kw);
    for (int oc = 0; oc < co; ++oc)
      for (int c = 0; c < ci; ++c)
        for (int fd = 0; fd < kd; ++fd)
          for (int fh = 0; fh < kh; ++fh)
            for (int fw = 0; fw < kw; ++fw)
              flipped.at(c, oc, kd - 1 - fd, kh - 1 - fh, kw - 1 - fw) =
                  kernel.at(oc, c, fd, fh, fw);
    return conv3d(grad_out, flipped,
                  Padding3{kd - 1 - pad.d, kh - 1 - pad.h, kw - 1 - pad.w});
  }

  Tensor5<T> dxp(n, ci, input_shape[2] + 2 * pad.d, input_shape[3] + 2 * pad.h,
                 input_shape[4] + 2 * pad.w);
  const int hp = dxp.shape[3], wp = dxp.shape[4];

  for (int in = 0; in < n; ++in) {
    for (int c = 0; c < ci; ++c) {
      T* plane = dxp.ptr() + dxp.index(in, c, 0, 0, 0);
      for (int oc = 0; oc < co; ++oc) {
        const T* gplane = grad_out.ptr() + grad_out.index(in, oc, 0, 0, 0);
        const T* kbase = kernel.ptr() + kernel.index(oc, c, 0, 0, 0);
        for (int fd = 0; fd < kd; ++fd) {
          for (int fh = 0; fh < kh; ++fh) {
            const T* kk = kbase + (static_cast<std::size_t>(fd) * kh + fh) * kw;
            for (int zd = 0; zd < od; ++zd) {
              const int id = zd * stride + fd;
              for (int zh = 0; zh < oh; ++zh) {
                const int ih = zh * stride + fh;
                T* drow = plane + (static_cast<std::size_t>(id) * hp + ih) * wp;
                const T* grow = gplane + (static_cast<std::size_t>(zd) * oh + zh) * ow;
                if (stride == 1) {
                  for (int fw = 0; fw < kw; ++fw) {
                    const T wv = kk[fw];
                    T* dst = drow + fw;
                    for (int x = 0; x < ow; ++x) dst[x] += wv * grow[x];
                  }
                } else {
                  for (int fw = 0; fw < kw; ++fw) {
                    const T wv = kk[fw];
                    T* dst = drow + fw;
                    for (int x = 0; x < ow; ++x) dst[2 * x] += wv * grow[x];
                  }
                }
              }
            }
          }
        }
      }
    }
  }
  return detail::crop_padding(dxp, pad, input_shape);
}

// Gradient of conv3d wrt the kernel.
template <class T>
Tensor5<T> conv3d_backward_weights(const Tensor5<T>& grad_out,
                                   const Tensor5<T>& input,
                                   const std::array<int, 5>& kernel_shape,
                                   const Padding3& pad, int stride = 1) {
  const int n = input.shape[0], ci = input.shape[1];
  const int co = kernel_shape[0];
  const int kd = kernel_shape[2], kh = kernel_shape[3], kw = kernel_shape[4];
  const int od = grad_out.shape[2], oh = grad_out.shape[3], ow = grad_out.shape[4];

  const Tensor5<T> xp = detail::pad_input(input, pad);
  const int hp = xp.shape[3], wp = xp.shape[4];

  // Per-tap lanes of partial sums, one x-width row per kernel tap, so the
  // inner loops are elementwise multiply-accumulates instead of serial
  // reductions. The lanes collapse to scalars once per channel pair. For a
  // 5x5x5 kernel over 32-wide rows the lane block is 16 KB, inside L1.
  const int taps = kd * kh * kw;
  std::vector<T> lanes(static_cast<std::size_t>(taps) * ow);

  Tensor5<T> dk(kernel_shape[0], kernel_shape[1], kd, kh, kw);
  for (int oc = 0; oc < co; ++oc) {
    for (int c = 0; c < ci; ++c) {
      std::fill(lanes.begin(), lanes.end(), T(0));
      for (int in = 0; in < n; ++in) {
        const T* gplane = grad_out.ptr() + grad_out.index(in, oc, 0, 0, 0);
        const T* plane = xp.ptr() + xp.index(in, c, 0, 0, 0);
        for (int zd = 0; zd < od; ++zd) {
          for (int zh = 0; zh < oh; ++zh) {
            const T* grow = gplane + (static_cast<std::size_t>(zd) * oh + zh) * ow;
            for (int fd = 0; fd < kd; ++fd) {
              const int id = zd * stride + fd;
              for (int fh = 0; fh < kh; ++fh) {
                const int ih = zh * stride + fh;
                const T* row = plane + (static_cast<std::size_t>(id) * hp + ih) * wp;
                T* lane = lanes.data() +
                          (static_cast<std::size_t>(fd) * kh + fh) * kw * ow;
                for (int fw = 0; fw < kw; ++fw) {
                  const T* s = row + fw;
                  T* lx = lane + static_cast<std::size_t>(fw) * ow;
                  if (stride == 1) {
                    for (int x = 0; x < ow; ++x) lx[x] += grow[x] * s[x];
                  } else {
                    for (int x = 0; x < ow; ++x) lx[x] += grow[x] * s[2 * x];
                  }
                }
              }
            }
          }
        }
      }
      T* dst = dk.ptr() + dk.index(oc, c, 0, 0, 0);
      for (int t = 0; t < taps; ++t) {
        T sum = T(0);
        const T* lane = lanes.data() + static_cast<std::size_t>(t) * ow;
        for (int x = 0; x < ow; ++x) sum += lane[x];
        dst[t] = sum;
      }
    }
  }
  return dk;
}

template <class T>
std::vector<T> conv3d_backward_bias(const Tensor5<T>& grad_out) {
  const int n = grad_out.shape[0], co = grad_out.shape[1];
  const std::size_t spatial = static_cast<std::size_t>(grad_out.shape[2]) *
                              grad_out.shape[3] * grad_out.shape[4];
  std::vector<T> db(co, T(0));
  for (int in = 0; in < n; ++in)
    for (int oc = 0; oc < co; ++oc) {
      const T* g = grad_out.ptr() + grad_out.index(in, oc, 0, 0, 0);
      T acc = T(0);
      for (std::size_t i = 0; i < spatial; ++i) acc += g[i];
      db[oc] += acc;
    }
  return db;
}

// Transposed convolution, fixed 2x2x2 kernel and stride 2: exact doubling of
// the spatial extents, the adjoint of the matching stride-2 conv3d.
// kernel layout is [C_I, C_O, 2, 2, 2].
template <class T>
Tensor5<T> conv_transpose3d(const Tensor5<T>& input, const Tensor5<T>& kernel,
                            const std::vector<T>* bias = nullptr) {
  const int n = input.shape[0], ci = input.shape[1];
  const int d = input.shape[2], h = input.shape[3], w = input.shape[4];
  if (kernel.shape[0] != ci)
    throw DimensionError("conv_transpose3d: kernel expects " +
                         std::to_string(kernel.shape[0]) +
                         " input channels, input has " + std::to_string(ci));
  if (kernel.shape[2] != 2 || kernel.shape[3] != 2 || kernel.shape[4] != 2)
    throw GeometryError("conv_transpose3d: kernel extent must be 2x2x2");
  const int co = kernel.shape[1];
  if (bias && static_cast<int>(bias->size()) != co)
    throw DimensionError("conv_transpose3d: bias length mismatch");

  Tensor5<T> out(n, co, 2 * d, 2 * h, 2 * w);
  const int oh = 2 * h, ow = 2 * w;
  for (int in = 0; in < n; ++in) {
    for (int oc = 0; oc < co; ++oc) {
      T* oplane = out.ptr() + out.index(in, oc, 0, 0, 0);
      if (bias) {
        const std::size_t spatial = static_cast<std::size_t>(2 * d) * oh * ow;
        for (std::size_t i = 0; i < spatial; ++i) oplane[i] = (*bias)[oc];
      }
      for (int c = 0; c < ci; ++c) {
        const T* plane = input.ptr() + input.index(in, c, 0, 0, 0);
        for (int fd = 0; fd < 2; ++fd)
          for (int fh = 0; fh < 2; ++fh)
            for (int fw = 0; fw < 2; ++fw) {
              const T wv = kernel.at(c, oc, fd, fh, fw);
              for (int zd = 0; zd < d; ++zd)
                for (int zh = 0; zh < h; ++zh) {
                  const T* src = plane + (static_cast<std::size_t>(zd) * h + zh) * w;
                  T* dst = oplane +
                           (static_cast<std::size_t>(2 * zd + fd) * oh + 2 * zh + fh) * ow + fw;
                  for (int x = 0; x < w; ++x) dst[2 * x] += wv * src[x];
                }
            }
      }
    }
  }
  return out;
}

// Gradient of conv_transpose3d wrt its input: the matching stride-2 conv.
template <class T>
Tensor5<T> conv_transpose3d_backward_input(const Tensor5<T>& grad_out,
                                           const Tensor5<T>& kernel) {
  const int n = grad_out.shape[0];
  const int ci = kernel.shape[0], co = kernel.shape[1];
  const int d = grad_out.shape[2] / 2, h = grad_out.shape[3] / 2,
            w = grad_out.shape[4] / 2;
  Tensor5<T> dx(n, ci, d, h, w);
  for (int in = 0; in < n; ++in)
    for (int c = 0; c < ci; ++c) {
      T* dplane = dx.ptr() + dx.index(in, c, 0, 0, 0);
      for (int oc = 0; oc < co; ++oc) {
        const T* gplane = grad_out.ptr() + grad_out.index(in, oc, 0, 0, 0);
        const int goh = grad_out.shape[3], gow = grad_out.shape[4];
        for (int fd = 0; fd < 2; ++fd)
          for (int fh = 0; fh < 2; ++fh)
            for (int fw = 0; fw < 2; ++fw) {
              const T wv = kernel.at(c, oc, fd, fh, fw);
              for (int zd = 0; zd < d; ++zd)
                for (int zh = 0; zh < h; ++zh) {
                  const T* src = gplane +
                                 (static_cast<std::size_t>(2 * zd + fd) * goh + 2 * zh + fh) * gow + fw;
                  T* dst = dplane + (static_cast<std::size_t>(zd) * h + zh) * w;
                  for (int x = 0; x < w; ++x) dst[x] += wv * src[2 * x];
                }
            }
      }
    }
  return dx;
}

template <class T>
Tensor5<T> conv_transpose3d_backward_weights(const Tensor5<T>& grad_out,
                                             const Tensor5<T>& input) {
  const int n = input.shape[0], ci = input.shape[1];
  const int co = grad_out.shape[1];
  const int d = input.shape[2], h = input.shape[3], w = input.shape[4];
  Tensor5<T> dk(ci, co, 2, 2, 2);
  for (int c = 0; c < ci; ++c)
    for (int oc = 0; oc < co; ++oc)
      for (int fd = 0; fd < 2; ++fd)
        for (int fh = 0; fh < 2; ++fh)
          for (int fw = 0; fw < 2; ++fw) {
            T acc = T(0);
            for (int in = 0; in < n; ++in) {
              const T* plane = input.ptr() + input.index(in, c, 0, 0, 0);
              const T* gplane = grad_out.ptr() + grad_out.index(in, oc, 0, 0, 0);
              const int goh = grad_out.shape[3], gow = grad_out.shape[4];
              for (int zd = 0; zd < d; ++zd)
                for (int zh = 0; zh < h; ++zh) {
                  const T* src = plane + (static_cast<std::size_t>(zd) * h + zh) * w;
                  const T* grow = gplane +
                                  (static_cast<std::size_t>(2 * zd + fd) * goh + 2 * zh + fh) * gow + fw;
                  for (int x = 0; x < w; ++x) acc += src[x] * grow[2 * x];
                }
            }
            dk.at(c, oc, fd, fh, fw) = acc;
          }
  return dk;
}

// 3D average pooling, stride 1, same-padding, odd K. The divisor is fixed at
// K^3 with padded zeros counted, matching the fixed 1/K^3 pooling kernel.
template <class T>
Tensor5<T> avgpool3d(const Tensor5<T>& input, int k) {
  if (k < 1 || k % 2 == 0)
    throw GeometryError("avgpool3d: kernel extent must be odd, got " +
                        std::to_string(k));
  if (k == 1) return input;
  const Padding3 pad = Padding3::same(k);
  const Tensor5<T> xp = detail::pad_input(input, pad);
  const int n = input.shape[0], c = input.shape[1];
  const int d = input.shape[2], h = input.shape[3], w = input.shape[4];
  const int hp = xp.shape[3], wp = xp.shape[4];
  const T inv = T(1) / static_cast<T>(k * k * k);

  Tensor5<T> out(n, c, d, h, w);
  std::vector<T> acc(w);
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      const T* plane = xp.ptr() + xp.index(in, ic, 0, 0, 0);
      for (int zd = 0; zd < d; ++zd)
        for (int zh = 0; zh < h; ++zh) {
          std::fill(acc.begin(), acc.end(), T(0));
          for (int fd = 0; fd < k; ++fd)
            for (int fh = 0; fh < k; ++fh) {
              const T* row = plane + (static_cast<std::size_t>(zd + fd) * hp + zh + fh) * wp;
              for (int fw = 0; fw < k; ++fw) {
                const T* src = row + fw;
                for (int x = 0; x < w; ++x) acc[x] += src[x];
              }
            }
          T* dst = out.ptr() + out.index(in, ic, zd, zh, 0);
          for (int x = 0; x < w; ++x) dst[x] = acc[x] * inv;
        }
    }
  return out;
}

// avgpool3d is self-adjoint under zero padding, so the input gradient is the
// same box filter applied to the output gradient.
template <class T>
Tensor5<T> avgpool3d_backward(const Tensor5<T>& grad_out, int k) {
  return avgpool3d(grad_out, k);
}

template <class T>
struct BNParams {
  std::vector<T> gamma, beta;
  std::vector<T> running_mean, running_var;
  T momentum = T(0.1);
  T epsilon = T(1e-5);

  explicit BNParams(int channels = 0) { resize(channels); }
  void resize(int channels) {
    gamma.assign(channels, T(1));
    beta.assign(channels, T(0));
    running_mean.assign(channels, T(0));
    running_var.assign(channels, T(1));
  }
  int channels() const { return static_cast<int>(gamma.size()); }
};

template <class T>
struct BNCache {
  std::vector<T> mean, inv_std;  // batch statistics used by the forward pass
  Tensor5<T> xhat;               // normalized activations, pre-affine
};

enum class BNMode { Train, Infer };

// Batch normalization over (N, D, H, W) per channel. Train mode normalizes
// with batch statistics and updates the running stats (biased variance for
// normalization, unbiased for the running estimate); infer mode uses the
// stored running statistics.
template <class T>
Tensor5<T> batchnorm(const Tensor5<T>& x, BNParams<T>& params, BNMode mode,
                     BNCache<T>* cache = nullptr) {
  const int n = x.shape[0], c = x.shape[1];
  if (params.channels() != c)
    throw DimensionError("batchnorm: params have " +
                         std::to_string(params.channels()) +
                         " channels, input has " + std::to_string(c));
  const std::size_t spatial = static_cast<std::size_t>(x.shape[2]) * x.shape[3] * x.shape[4];
  const std::size_t m = static_cast<std::size_t>(n) * spatial;
  if (m == 0) throw StatisticsError("batchnorm: empty batch-spatial extent");

  Tensor5<T> out(x.shape[0], x.shape[1], x.shape[2], x.shape[3], x.shape[4]);
  std::vector<T> mean(c, T(0)), var(c, T(0));

  if (mode == BNMode::Train) {
    for (int ic = 0; ic < c; ++ic) {
      double acc = 0.0;
      for (int in = 0; in < n; ++in) {
        const T* p = x.ptr() + x.index(in, ic, 0, 0, 0);
        for (std::size_t i = 0; i < spatial; ++i) acc += static_cast<double>(p[i]);
      }
      const double mu = acc / static_cast<double>(m);
      double vacc = 0.0;
      for (int in = 0; in < n; ++in) {
        const T* p = x.ptr() + x.index(in, ic, 0, 0, 0);
        for (std::size_t i = 0; i < spatial; ++i) {
          const double dlt = static_cast<double>(p[i]) - mu;
          vacc += dlt * dlt;
        }
      }
      mean[ic] = static_cast<T>(mu);
      var[ic] = static_cast<T>(vacc / static_cast<double>(m));
      const T unbiased = m > 1 ? static_cast<T>(vacc / static_cast<double>(m - 1)) : var[ic];
      params.running_mean[ic] = (T(1) - params.momentum) * params.running_mean[ic] +
                                params.momentum * mean[ic];
      params.running_var[ic] = (T(1) - params.momentum) * params.running_var[ic] +
                               params.momentum * unbiased;
    }
  } else {
    mean = params.running_mean;
    var = params.running_var;
  }

  if (cache) {
    cache->mean = mean;
    cache->inv_std.assign(c, T(0));
    cache->xhat.resize(x.shape[0], x.shape[1], x.shape[2], x.shape[3], x.shape[4]);
  }

  for (int ic = 0; ic < c; ++ic) {
    const T inv_std = T(1) / std::sqrt(var[ic] + params.epsilon);
    if (cache) cache->inv_std[ic] = inv_std;
    const T g = params.gamma[ic], b = params.beta[ic], mu = mean[ic];
    for (int in = 0; in < n; ++in) {
      const T* p = x.ptr() + x.index(in, ic, 0, 0, 0);
      T* o = out.ptr() + out.index(in, ic, 0, 0, 0);
      T* xh = cache ? cache->xhat.ptr() + cache->xhat.index(in, ic, 0, 0, 0) : nullptr;
      for (std::size_t i = 0; i < spatial; ++i) {
        const T nrm = (p[i] - mu) * inv_std;
        if (xh) xh[i] = nrm;
        o[i] = g * nrm + b;
      }
    }
  }
  return out;
}

template <class T>
struct BNGrads {
  std::vector<T> dgamma, dbeta;
};

// Backward through train-mode batchnorm (gradient flows through the batch
// statistics). For infer mode pass train_stats=false.
template <class T>
Tensor5<T> batchnorm_backward(const Tensor5<T>& grad_out, const BNCache<T>& cache,
                              const BNParams<T>& params, BNGrads<T>& grads,
                              bool train_stats = true) {
  const int n = grad_out.shape[0], c = grad_out.shape[1];
  const std::size_t spatial = static_cast<std::size_t>(grad_out.shape[2]) *
                              grad_out.shape[3] * grad_out.shape[4];
  const std::size_t m = static_cast<std::size_t>(n) * spatial;

  grads.dgamma.assign(c, T(0));
  grads.dbeta.assign(c, T(0));
  Tensor5<T> dx(grad_out.shape[0], grad_out.shape[1], grad_out.shape[2],
                grad_out.shape[3], grad_out.shape[4]);

  for (int ic = 0; ic < c; ++ic) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (int in = 0; in < n; ++in) {
      const T* g = grad_out.ptr() + grad_out.index(in, ic, 0, 0, 0);
      const T* xh = cache.xhat.ptr() + cache.xhat.index(in, ic, 0, 0, 0);
      for (std::size_t i = 0; i < spatial; ++i) {
        sum_g += static_cast<double>(g[i]);
        sum_gx += static_cast<double>(g[i]) * static_cast<double>(xh[i]);
      }
    }
    grads.dbeta[ic] = static_cast<T>(sum_g);
    grads.dgamma[ic] = static_cast<T>(sum_gx);

    const T gamma = params.gamma[ic];
    const T inv_std = cache.inv_std[ic];
    if (train_stats) {
      const T mean_g = static_cast<T>(sum_g / static_cast<double>(m));
      const T mean_gx = static_cast<T>(sum_gx / static_cast<double>(m));
      for (int in = 0; in < n; ++in) {
        const T* g = grad_out.ptr() + grad_out.index(in, ic, 0, 0, 0);
        const T* xh = cache.xhat.ptr() + cache.xhat.index(in, ic, 0, 0, 0);
        T* d = dx.ptr() + dx.index(in, ic, 0, 0, 0);
        for (std::size_t i = 0; i < spatial; ++i)
          d[i] = gamma * inv_std * (g[i] - mean_g - xh[i] * mean_gx);
      }
    } else {
      for (int in = 0; in < n; ++in) {
        const T* g = grad_out.ptr() + grad_out.index(in, ic, 0, 0, 0);
        T* d = dx.ptr() + dx.index(in, ic, 0, 0, 0);
        for (std::size_t i = 0; i < spatial; ++i) d[i] = gamma * inv_std * g[i];
      }
    }
  }
  return dx;
}

template <class T>
Tensor5<T> relu(const Tensor5<T>& x) {
  Tensor5<T> out(x.shape[0], x.shape[1], x.shape[2], x.shape[3], x.shape[4]);
  for (std::size_t i = 0; i < x.data.size(); ++i)
    out.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
  return out;
}

// Uses the forward output as the mask, valid because relu(x) > 0 iff x > 0.
template <class T>
Tensor5<T> relu_backward(const Tensor5<T>& grad_out, const Tensor5<T>& fwd_out) {
  Tensor5<T> dx(grad_out.shape[0], grad_out.shape[1], grad_out.shape[2],
                grad_out.shape[3], grad_out.shape[4]);
  for (std::size_t i = 0; i < grad_out.data.size(); ++i)
    dx.data[i] = fwd_out.data[i] > T(0) ? grad_out.data[i] : T(0);
  return dx;
}

}  // namespace mixconv
