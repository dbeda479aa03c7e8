#pragma once

#include <cstring>

#include "msadnet/tensor.hpp"

namespace msad {

// ---------------------------------------------------------------------------
// Forward/backward kernels. All activations are [N, C, H, W]; kernels are
// [F, C, kh, kw]. Accumulation order per output element is fixed, so results
// are bit-identical for any worker-thread count.
// ---------------------------------------------------------------------------

enum class Padding { Same, Valid };

struct ConvOpts {
  std::size_t stride = 1;
  Padding padding = Padding::Valid;
  std::size_t dilation = 1;
};

namespace detail {

struct AxisPlan {
  std::size_t out = 0;
  std::ptrdiff_t pad_before = 0;
};

/// Output extent and leading pad for one spatial axis.
/// `same` pads a total of (k-1)*dilation, extra going after; `valid` requires
/// the effective kernel to fit.
inline AxisPlan conv_axis(std::size_t in, std::size_t k, std::size_t stride,
                          std::size_t dilation, Padding padding, const char* axis) {
  const std::size_t eff = (k - 1) * dilation + 1;
  if (padding == Padding::Valid) {
    if (in < eff)
      throw DimensionError(str("conv: ", axis, " extent ", in,
                               " is smaller than effective kernel extent ", eff,
                               " under valid padding (empty output)"));
    return {(in - eff) / stride + 1, 0};
  }
  const std::size_t total = (k - 1) * dilation;
  return {(in + total - eff) / stride + 1,
          static_cast<std::ptrdiff_t>(total / 2)};
}

/// Inclusive range of output positions whose tap lands inside the input.
/// offset = tap_index * dilation - pad_before.
inline std::pair<std::ptrdiff_t, std::ptrdiff_t> tap_range(
    std::ptrdiff_t out_extent, std::ptrdiff_t in_extent, std::ptrdiff_t stride,
    std::ptrdiff_t offset) {
  std::ptrdiff_t lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  std::ptrdiff_t hi = in_extent - 1 - offset < 0
                          ? -1
                          : (in_extent - 1 - offset) / stride;
  return {lo, std::min(hi, out_extent - 1)};
}

inline void maybe_parallel(std::size_t jobs, std::size_t work_per_job,
                           const std::function<void(std::size_t, std::size_t)>& body) {
  if (jobs * work_per_job < (1u << 14)) {
    body(0, jobs);
  } else {
    parallel_for(jobs, body);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel,
                 const Tensor<T>& bias, const ConvOpts& opt = {}) {
  if (input.rank() != 4)
    throw ShapeError(str("conv2d: input must be [N,C,H,W], got ", shape_str(input.shape())));
  if (kernel.rank() != 4)
    throw ShapeError(str("conv2d: kernel must be [F,C,kh,kw], got ", shape_str(kernel.shape())));
  if (opt.stride < 1 || opt.dilation < 1)
    throw ValueError("conv2d: stride and dilation must be positive");
  const std::size_t N = input.extent(0), C = input.extent(1);
  const std::size_t H = input.extent(2), W = input.extent(3);
  const std::size_t F = kernel.extent(0), kh = kernel.extent(2), kw = kernel.extent(3);
  if (kernel.extent(1) != C)
    throw ShapeError(str("conv2d: kernel channel axis (axis 1) is ", kernel.extent(1),
                         " but input channel axis (axis 1) is ", C));
  if (bias.rank() != 1 || bias.extent(0) != F)
    throw ShapeError(str("conv2d: bias axis 0 must equal filter count ", F,
                         ", got ", shape_str(bias.shape())));

  const auto ph = detail::conv_axis(H, kh, opt.stride, opt.dilation, opt.padding, "height");
  const auto pw = detail::conv_axis(W, kw, opt.stride, opt.dilation, opt.padding, "width");
  const std::size_t OH = ph.out, OW = pw.out;
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(opt.stride);
  const std::ptrdiff_t d = static_cast<std::ptrdiff_t>(opt.dilation);

  Tensor<T> out(Shape{N, F, OH, OW});
  {
    const T* in = input.values().data();
    const T* kp = kernel.values().data();
    const T* bp = bias.values().data();
    T* op = out.values().data();
    detail::maybe_parallel(N * F, C * kh * kw * OH * OW, [&](std::size_t b, std::size_t e) {
      for (std::size_t nf = b; nf < e; ++nf) {
        const std::size_t n = nf / F, f = nf % F;
        T* plane = op + (n * F + f) * OH * OW;
        std::fill(plane, plane + OH * OW, bp[f]);
        for (std::size_t c = 0; c < C; ++c) {
          const T* iplane = in + (n * C + c) * H * W;
          const T* kplane = kp + ((f * C + c) * kh) * kw;
          for (std::size_t ki = 0; ki < kh; ++ki) {
            const std::ptrdiff_t offy = static_cast<std::ptrdiff_t>(ki) * d - ph.pad_before;
            const auto [ylo, yhi] = detail::tap_range(OH, H, s, offy);
            for (std::size_t kj = 0; kj < kw; ++kj) {
              const T wv = kplane[ki * kw + kj];
              const std::ptrdiff_t offx = static_cast<std::ptrdiff_t>(kj) * d - pw.pad_before;
              const auto [xlo, xhi] = detail::tap_range(OW, W, s, offx);
              for (std::ptrdiff_t y = ylo; y <= yhi; ++y) {
                const T* irow = iplane + (y * s + offy) * static_cast<std::ptrdiff_t>(W);
                T* orow = plane + y * static_cast<std::ptrdiff_t>(OW);
                for (std::ptrdiff_t x = xlo; x <= xhi; ++x)
                  orow[x] += wv * irow[x * s + offx];
              }
            }
          }
        }
      }
    });
  }

  detail::record(out, "conv2d", {input, kernel, bias},
                 [input, kernel, bias, ph, pw, s, d, N, C, H, W, F, kh, kw, OH, OW](
                     detail::TensorNode<T>& self) {
    const std::vector<T>& g = self.grad;
    const T* gp = g.data();
    const T* in = input.values().data();
    const T* kp = kernel.values().data();

    if (detail::wants_grad(*bias.node())) {
      std::vector<T>& gb = detail::ensure_grad(*bias.node());
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t f = 0; f < F; ++f) {
          const T* plane = gp + (n * F + f) * OH * OW;
          T acc = T(0);
          for (std::size_t i = 0; i < OH * OW; ++i) acc += plane[i];
          gb[f] += acc;
        }
    }

    if (detail::wants_grad(*kernel.node())) {
      std::vector<T>& gk = detail::ensure_grad(*kernel.node());
      T* gkp = gk.data();
      detail::maybe_parallel(F * C, kh * kw * N * OH * OW, [&](std::size_t b, std::size_t e) {
        for (std::size_t fc = b; fc < e; ++fc) {
          const std::size_t f = fc / C, c = fc % C;
          for (std::size_t ki = 0; ki < kh; ++ki) {
            const std::ptrdiff_t offy = static_cast<std::ptrdiff_t>(ki) * d - ph.pad_before;
            const auto [ylo, yhi] = detail::tap_range(OH, H, s, offy);
            for (std::size_t kj = 0; kj < kw; ++kj) {
              const std::ptrdiff_t offx = static_cast<std::ptrdiff_t>(kj) * d - pw.pad_before;
              const auto [xlo, xhi] = detail::tap_range(OW, W, s, offx);
              T acc = T(0);
              for (std::size_t n = 0; n < N; ++n) {
                const T* gplane = gp + (n * F + f) * OH * OW;
                const T* iplane = in + (n * C + c) * H * W;
                for (std::ptrdiff_t y = ylo; y <= yhi; ++y) {
                  const T* irow = iplane + (y * s + offy) * static_cast<std::ptrdiff_t>(W);
                  const T* grow = gplane + y * static_cast<std::ptrdiff_t>(OW);
                  for (std::ptrdiff_t x = xlo; x <= xhi; ++x)
                    acc += grow[x] * irow[x * s + offx];
                }
              }
              gkp[((f * C + c) * kh + ki) * kw + kj] += acc;
            }
          }
        }
      });
    }

    if (detail::wants_grad(*input.node())) {
      std::vector<T>& gi = detail::ensure_grad(*input.node());
      T* gip = gi.data();
      detail::maybe_parallel(N * C, F * kh * kw * OH * OW, [&](std::size_t b, std::size_t e) {
        for (std::size_t nc = b; nc < e; ++nc) {
          const std::size_t n = nc / C, c = nc % C;
          T* giplane = gip + (n * C + c) * H * W;
          for (std::size_t f = 0; f < F; ++f) {
            const T* gplane = gp + (n * F + f) * OH * OW;
            const T* kplane = kp + ((f * C + c) * kh) * kw;
            for (std::size_t ki = 0; ki < kh; ++ki) {
              const std::ptrdiff_t offy = static_cast<std::ptrdiff_t>(ki) * d - ph.pad_before;
              const auto [ylo, yhi] = detail::tap_range(OH, H, s, offy);
              for (std::size_t kj = 0; kj < kw; ++kj) {
                const T wv = kplane[ki * kw + kj];
                const std::ptrdiff_t offx = static_cast<std::ptrdiff_t>(kj) * d - pw.pad_before;
                const auto [xlo, xhi] = detail::tap_range(OW, W, s, offx);
                for (std::ptrdiff_t y = ylo; y <= yhi; ++y) {
                  T* girow = giplane + (y * s + offy) * static_cast<std::ptrdiff_t>(W);
                  const T* grow = gplane + y * static_cast<std::ptrdiff_t>(OW);
                  for (std::ptrdiff_t x = xlo; x <= xhi; ++x)
                    girow[x * s + offx] += wv * grow[x];
                }
              }
            }
          }
        }
      });
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// conv1x1: per-pixel channel mixing. Equal to conv2d with k=1 (tested), kept
// as a dedicated kernel because bottleneck and pointwise stages dominate the
// layer count.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv1x1(const Tensor<T>& input, const Tensor<T>& kernel,
                  const Tensor<T>& bias) {
  if (input.rank() != 4)
    throw ShapeError(str("conv1x1: input must be [N,C,H,W], got ", shape_str(input.shape())));
  if (kernel.rank() != 4 || kernel.extent(2) != 1 || kernel.extent(3) != 1)
    throw ShapeError(str("conv1x1: kernel spatial axes (2,3) must be 1x1, got ",
                         shape_str(kernel.shape())));
  const std::size_t N = input.extent(0), C = input.extent(1);
  const std::size_t H = input.extent(2), W = input.extent(3);
  const std::size_t F = kernel.extent(0), P = H * W;
  if (kernel.extent(1) != C)
    throw ShapeError(str("conv1x1: kernel channel axis (axis 1) is ", kernel.extent(1),
                         " but input channel axis (axis 1) is ", C));
  if (bias.rank() != 1 || bias.extent(0) != F)
    throw ShapeError(str("conv1x1: bias axis 0 must equal filter count ", F));

  Tensor<T> out(Shape{N, F, H, W});
  {
    const T* in = input.values().data();
    const T* kp = kernel.values().data();
    const T* bp = bias.values().data();
    T* op = out.values().data();
    detail::maybe_parallel(N * F, C * P, [&](std::size_t b, std::size_t e) {
      for (std::size_t nf = b; nf < e; ++nf) {
        const std::size_t n = nf / F, f = nf % F;
        T* plane = op + (n * F + f) * P;
        std::fill(plane, plane + P, bp[f]);
        for (std::size_t c = 0; c < C; ++c) {
          const T wv = kp[f * C + c];
          const T* iplane = in + (n * C + c) * P;
          for (std::size_t i = 0; i < P; ++i) plane[i] += wv * iplane[i];
        }
      }
    });
  }

  detail::record(out, "conv1x1", {input, kernel, bias},
                 [input, kernel, bias, N, C, F, P](detail::TensorNode<T>& self) {
    const T* gp = self.grad.data();
    const T* in = input.values().data();
    const T* kp = kernel.values().data();

    if (detail::wants_grad(*bias.node())) {
      std::vector<T>& gb = detail::ensure_grad(*bias.node());
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t f = 0; f < F; ++f) {
          const T* plane = gp + (n * F + f) * P;
          T acc = T(0);
          for (std::size_t i = 0; i < P; ++i) acc += plane[i];
          gb[f] += acc;
        }
    }
    if (detail::wants_grad(*kernel.node())) {
      std::vector<T>& gk = detail::ensure_grad(*kernel.node());
      detail::maybe_parallel(F * C, N * P, [&](std::size_t b, std::size_t e) {
        for (std::size_t fc = b; fc < e; ++fc) {
          const std::size_t f = fc / C, c = fc % C;
          T acc = T(0);
          for (std::size_t n = 0; n < N; ++n) {
            const T* gplane = gp + (n * F + f) * P;
            const T* iplane = in + (n * C + c) * P;
            for (std::size_t i = 0; i < P; ++i) acc += gplane[i] * iplane[i];
          }
          gk[fc] += acc;
        }
      });
    }
    if (detail::wants_grad(*input.node())) {
      std::vector<T>& gi = detail::ensure_grad(*input.node());
      T* gip = gi.data();
      detail::maybe_parallel(N * C, F * P, [&](std::size_t b, std::size_t e) {
        for (std::size_t nc = b; nc < e; ++nc) {
          const std::size_t n = nc / C, c = nc % C;
          T* giplane = gip + (n * C + c) * P;
          for (std::size_t f = 0; f < F; ++f) {
            const T wv = kp[f * C + c];
            const T* gplane = gp + (n * F + f) * P;
            for (std::size_t i = 0; i < P; ++i) giplane[i] += wv * gplane[i];
          }
        }
      });
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Depthwise-separable convolution: one spatial plane per input channel, then
// a pointwise 1x1 mixing stage. Composed from two taped primitives.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> depthwise_spatial(const Tensor<T>& input, const Tensor<T>& depth_kernel,
                            Padding padding) {
  if (input.rank() != 4)
    throw ShapeError(str("depthwise: input must be [N,C,H,W], got ", shape_str(input.shape())));
  if (depth_kernel.rank() != 3)
    throw ShapeError(str("depthwise: depth kernel must be [C,k,k], got ",
                         shape_str(depth_kernel.shape())));
  const std::size_t N = input.extent(0), C = input.extent(1);
  const std::size_t H = input.extent(2), W = input.extent(3);
  const std::size_t kh = depth_kernel.extent(1), kw = depth_kernel.extent(2);
  if (depth_kernel.extent(0) != C)
    throw ShapeError(str("depthwise: depth kernel has ", depth_kernel.extent(0),
                         " planes (axis 0) but input channel axis (axis 1) is ", C));

  const auto ph = detail::conv_axis(H, kh, 1, 1, padding, "height");
  const auto pw = detail::conv_axis(W, kw, 1, 1, padding, "width");
  const std::size_t OH = ph.out, OW = pw.out;

  Tensor<T> out(Shape{N, C, OH, OW});
  {
    const T* in = input.values().data();
    const T* dp = depth_kernel.values().data();
    T* op = out.values().data();
    detail::maybe_parallel(N * C, kh * kw * OH * OW, [&](std::size_t b, std::size_t e) {
      for (std::size_t nc = b; nc < e; ++nc) {
        const std::size_t n = nc / C, c = nc % C;
        const T* iplane = in + (n * C + c) * H * W;
        const T* kplane = dp + c * kh * kw;
        T* plane = op + (n * C + c) * OH * OW;
        std::fill(plane, plane + OH * OW, T(0));
        for (std::size_t ki = 0; ki < kh; ++ki) {
          const std::ptrdiff_t offy = static_cast<std::ptrdiff_t>(ki) - ph.pad_before;
          const auto [ylo, yhi] = detail::tap_range(OH, H, 1, offy);
          for (std::size_t kj = 0; kj < kw; ++kj) {
            const T wv = kplane[ki * kw + kj];
            const std::ptrdiff_t offx = static_cast<std::ptrdiff_t>(kj) - pw.pad_before;
            const auto [xlo, xhi] = detail::tap_range(OW, W, 1, offx);
            for (std::ptrdiff_t y = ylo; y <= yhi; ++y) {
              const T* irow = iplane + (y + offy) * static_cast<std::ptrdiff_t>(W);
              T* orow = plane + y * static_cast<std::ptrdiff_t>(OW);
              for (std::ptrdiff_t x = xlo; x <= xhi; ++x)
                orow[x] += wv * irow[x + offx];
            }
          }
        }
      }
    });
  }

  detail::record(out, "depthwise_spatial", {input, depth_kernel},
                 [input, depth_kernel, ph, pw, N, C, H, W, kh, kw, OH, OW](
                     detail::TensorNode<T>& self) {
    const T* gp = self.grad.data();
    const T* in = input.values().data();
    const T* dp = depth_kernel.values().data();

    if (detail::wants_grad(*depth_kernel.node())) {
      std::vector<T>& gd = detail::ensure_grad(*depth_kernel.node());
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ki = 0; ki < kh; ++ki) {
          const std::ptrdiff_t offy = static_cast<std::ptrdiff_t>(ki) - ph.pad_before;
          const auto [ylo, yhi] = detail::tap_range(OH, H, 1, offy);
          for (std::size_t kj = 0; kj < kw; ++kj) {
            const std::ptrdiff_t offx = static_cast<std::ptrdiff_t>(kj) - pw.pad_before;
            const auto [xlo, xhi] = detail::tap_range(OW, W, 1, offx);
            T acc = T(0);
            for (std::size_t n = 0; n < N; ++n) {
              const T* gplane = gp + (n * C + c) * OH * OW;
              const T* iplane = in + (n * C + c) * H * W;
              for (std::ptrdiff_t y = ylo; y <= yhi; ++y)
                for (std::ptrdiff_t x = xlo; x <= xhi; ++x)
                  acc += gplane[y * static_cast<std::ptrdiff_t>(OW) + x] *
                         iplane[(y + offy) * static_cast<std::ptrdiff_t>(W) + x + offx];
            }
            gd[(c * kh + ki) * kw + kj] += acc;
          }
        }
    }
    if (detail::wants_grad(*input.node())) {
      std::vector<T>& gi = detail::ensure_grad(*input.node());
      T* gip = gi.data();
      detail::maybe_parallel(N * C, kh * kw * OH * OW, [&](std::size_t b, std::size_t e) {
        for (std::size_t nc = b; nc < e; ++nc) {
          const std::size_t n = nc / C, c = nc % C;
          T* giplane = gip + (n * C + c) * H * W;
          const T* gplane = gp + (n * C + c) * OH * OW;
          const T* kplane = dp + c * kh * kw;
          for (std::size_t ki = 0; ki < kh; ++ki) {
            const std::ptrdiff_t offy = static_cast<std::ptrdiff_t>(ki) - ph.pad_before;
            const auto [ylo, yhi] = detail::tap_range(OH, H, 1, offy);
            for (std::size_t kj = 0; kj < kw; ++kj) {
              const T wv = kplane[ki * kw + kj];
              const std::ptrdiff_t offx = static_cast<std::ptrdiff_t>(kj) - pw.pad_before;
              const auto [xlo, xhi] = detail::tap_range(OW, W, 1, offx);
              for (std::ptrdiff_t y = ylo; y <= yhi; ++y) {
                T* girow = giplane + (y + offy) * static_cast<std::ptrdiff_t>(W);
                const T* grow = gplane + y * static_cast<std::ptrdiff_t>(OW);
                for (std::ptrdiff_t x = xlo; x <= xhi; ++x)
                  girow[x + offx] += wv * grow[x];
              }
            }
          }
        }
      });
    }
  });
  return out;
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& input, const Tensor<T>& depth_kernel,
                           const Tensor<T>& point_kernel, const Tensor<T>& bias,
                           Padding padding) {
  Tensor<T> mid = depthwise_spatial(input, depth_kernel, padding);
  return conv1x1(mid, point_kernel, bias);
}

// ---------------------------------------------------------------------------
// Elementwise / pooling / normalization
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const std::vector<T>& xv = x.values();
  std::vector<T>& ov = out.values();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  // subgradient at exactly 0 is 0
  detail::record(out, "relu", {x}, [x](detail::TensorNode<T>& self) {
    if (!detail::wants_grad(*x.node())) return;
    std::vector<T>& gi = detail::ensure_grad(*x.node());
    const std::vector<T>& xv = x.values();
    const std::vector<T>& g = self.grad;
    for (std::size_t i = 0; i < gi.size(); ++i)
      if (xv[i] > T(0)) gi[i] += g[i];
  });
  return out;
}

/// 2x2 max pooling with stride 2; trailing odd rows/columns are dropped.
/// Backward routes the gradient to the first maximal element in row-major
/// window order.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x) {
  if (x.rank() != 4)
    throw ShapeError(str("max_pool2d: input must be [N,C,H,W], got ", shape_str(x.shape())));
  const std::size_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  if (H < 2 || W < 2)
    throw DimensionError(str("max_pool2d: spatial extent ", H, "x", W,
                             " is smaller than the 2x2 window"));
  const std::size_t OH = H / 2, OW = W / 2;

  Tensor<T> out(Shape{N, C, OH, OW});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(N * C * OH * OW);
  {
    const T* in = x.values().data();
    T* op = out.values().data();
    std::uint32_t* am = argmax->data();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
      const T* iplane = in + nc * H * W;
      T* plane = op + nc * OH * OW;
      std::uint32_t* aplane = am + nc * OH * OW;
      for (std::size_t y = 0; y < OH; ++y)
        for (std::size_t x2 = 0; x2 < OW; ++x2) {
          const std::size_t base = (2 * y) * W + 2 * x2;
          const std::size_t cand[4] = {base, base + 1, base + W, base + W + 1};
          std::size_t best = cand[0];
          T bv = iplane[best];
          for (int j = 1; j < 4; ++j)
            if (iplane[cand[j]] > bv) {
              best = cand[j];
              bv = iplane[best];
            }
          plane[y * OW + x2] = bv;
          aplane[y * OW + x2] = static_cast<std::uint32_t>(best);
        }
    }
  }

  detail::record(out, "max_pool2d", {x},
                 [x, argmax, N, C, H, W, OH, OW](detail::TensorNode<T>& self) {
    if (!detail::wants_grad(*x.node())) return;
    std::vector<T>& gi = detail::ensure_grad(*x.node());
    const std::vector<T>& g = self.grad;
    const std::uint32_t* am = argmax->data();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
      T* giplane = gi.data() + nc * H * W;
      const T* gplane = g.data() + nc * OH * OW;
      const std::uint32_t* aplane = am + nc * OH * OW;
      for (std::size_t i = 0; i < OH * OW; ++i) giplane[aplane[i]] += gplane[i];
    }
  });
  return out;
}

/// Spatial mean per channel: [N,C,H,W] -> [N,C].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4)
    throw ShapeError(str("global_avg_pool: input must be [N,C,H,W], got ",
                         shape_str(x.shape())));
  const std::size_t N = x.extent(0), C = x.extent(1), P = x.extent(2) * x.extent(3);
  Tensor<T> out(Shape{N, C});
  {
    const T* in = x.values().data();
    T* op = out.values().data();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
      const T* plane = in + nc * P;
      T acc = T(0);
      for (std::size_t i = 0; i < P; ++i) acc += plane[i];
      op[nc] = acc / static_cast<T>(P);
    }
  }
  detail::record(out, "global_avg_pool", {x}, [x, N, C, P](detail::TensorNode<T>& self) {
    if (!detail::wants_grad(*x.node())) return;
    std::vector<T>& gi = detail::ensure_grad(*x.node());
    const std::vector<T>& g = self.grad;
    const T inv = T(1) / static_cast<T>(P);
    for (std::size_t nc = 0; nc < N * C; ++nc) {
      const T gv = g[nc] * inv;
      T* plane = gi.data() + nc * P;
      for (std::size_t i = 0; i < P; ++i) plane[i] += gv;
    }
  });
  return out;
}

enum class BnMode { Train, Infer };

template <typename T>
struct BatchNormState {
  Tensor<T> gamma, beta;               // trainable
  Tensor<T> running_mean, running_var; // buffers, updated in train mode
  T eps = T(1e-3);
  T momentum = T(0.99);

  std::size_t channels() const { return gamma.extent(0); }
};

template <typename T>
BatchNormState<T> make_batch_norm_state(std::size_t channels, T eps = T(1e-3),
                                        T momentum = T(0.99)) {
  BatchNormState<T> st;
  st.gamma = Tensor<T>(Shape{channels}, T(1));
  st.beta = Tensor<T>(Shape{channels}, T(0));
  st.gamma.set_requires_grad(true);
  st.beta.set_requires_grad(true);
  st.running_mean = Tensor<T>(Shape{channels}, T(0));
  st.running_var = Tensor<T>(Shape{channels}, T(1));
  st.eps = eps;
  st.momentum = momentum;
  return st;
}

/// Per-channel normalization over N,H,W. Train mode uses batch statistics and
/// advances the running ones; infer mode uses the running statistics.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormState<T>& state, BnMode mode) {
  if (x.rank() != 4)
    throw ShapeError(str("batch_norm: input must be [N,C,H,W], got ", shape_str(x.shape())));
  const std::size_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  if (state.channels() != C)
    throw ShapeError(str("batch_norm: state has ", state.channels(),
                         " channels but input channel axis (axis 1) is ", C));
  const std::size_t P = H * W;
  const std::size_t m = N * P;

  Tensor<T> out(x.shape());
  auto mean = std::make_shared<std::vector<T>>(C, T(0));
  auto invstd = std::make_shared<std::vector<T>>(C, T(0));

  const T* in = x.values().data();
  T* op = out.values().data();
  const T* gam = state.gamma.values().data();
  const T* bet = state.beta.values().data();

  if (mode == BnMode::Train) {
    T* rm = state.running_mean.values().data();
    T* rv = state.running_var.values().data();
    for (std::size_t c = 0; c < C; ++c) {
      T sum = T(0);
      for (std::size_t n = 0; n < N; ++n) {
        const T* plane = in + (n * C + c) * P;
        for (std::size_t i = 0; i < P; ++i) sum += plane[i];
      }
      const T mu = sum / static_cast<T>(m);
      T var = T(0);
      for (std::size_t n = 0; n < N; ++n) {
        const T* plane = in + (n * C + c) * P;
        for (std::size_t i = 0; i < P; ++i) {
          const T d = plane[i] - mu;
          var += d * d;
        }
      }
      var /= static_cast<T>(m);
      const T istd = T(1) / std::sqrt(var + state.eps);
      (*mean)[c] = mu;
      (*invstd)[c] = istd;
      rm[c] = state.momentum * rm[c] + (T(1) - state.momentum) * mu;
      rv[c] = state.momentum * rv[c] + (T(1) - state.momentum) * var;
      const T scale = gam[c] * istd;
      const T shift = bet[c] - mu * scale;
      for (std::size_t n = 0; n < N; ++n) {
        const T* iplane = in + (n * C + c) * P;
        T* oplane = op + (n * C + c) * P;
        for (std::size_t i = 0; i < P; ++i) oplane[i] = iplane[i] * scale + shift;
      }
    }
  } else {
    const T* rm = state.running_mean.values().data();
    const T* rv = state.running_var.values().data();
    for (std::size_t c = 0; c < C; ++c) {
      const T istd = T(1) / std::sqrt(rv[c] + state.eps);
      (*mean)[c] = rm[c];
      (*invstd)[c] = istd;
      const T scale = gam[c] * istd;
      const T shift = bet[c] - rm[c] * scale;
      for (std::size_t n = 0; n < N; ++n) {
        const T* iplane = in + (n * C + c) * P;
        T* oplane = op + (n * C + c) * P;
        for (std::size_t i = 0; i < P; ++i) oplane[i] = iplane[i] * scale + shift;
      }
    }
  }

  Tensor<T> gamma = state.gamma, beta = state.beta;
  const bool train = mode == BnMode::Train;
  detail::record(out, "batch_norm", {x, gamma, beta},
                 [x, gamma, beta, mean, invstd, train, N, C, P, m](
                     detail::TensorNode<T>& self) {
    const std::vector<T>& g = self.grad;
    const T* gp = g.data();
    const T* in = x.values().data();
    const T* gam = gamma.values().data();
    const bool want_x = detail::wants_grad(*x.node());
    const bool want_g = detail::wants_grad(*gamma.node());
    const bool want_b = detail::wants_grad(*beta.node());

    std::vector<T>* gx = want_x ? &detail::ensure_grad(*x.node()) : nullptr;
    std::vector<T>* gg = want_g ? &detail::ensure_grad(*gamma.node()) : nullptr;
    std::vector<T>* gb = want_b ? &detail::ensure_grad(*beta.node()) : nullptr;

    for (std::size_t c = 0; c < C; ++c) {
      const T mu = (*mean)[c];
      const T istd = (*invstd)[c];
      T sum_g = T(0), sum_gx = T(0);
      for (std::size_t n = 0; n < N; ++n) {
        const T* gplane = gp + (n * C + c) * P;
        const T* iplane = in + (n * C + c) * P;
        for (std::size_t i = 0; i < P; ++i) {
          sum_g += gplane[i];
          sum_gx += gplane[i] * (iplane[i] - mu) * istd;
        }
      }
      if (gg) (*gg)[c] += sum_gx;
      if (gb) (*gb)[c] += sum_g;
      if (gx) {
        const T scale = gam[c] * istd;
        const T mg = sum_g / static_cast<T>(m);
        const T mgx = sum_gx / static_cast<T>(m);
        for (std::size_t n = 0; n < N; ++n) {
          const T* gplane = gp + (n * C + c) * P;
          const T* iplane = in + (n * C + c) * P;
          T* gxplane = gx->data() + (n * C + c) * P;
          for (std::size_t i = 0; i < P; ++i) {
            if (train) {
              const T xhat = (iplane[i] - mu) * istd;
              gxplane[i] += scale * (gplane[i] - mg - xhat * mgx);
            } else {
              gxplane[i] += scale * gplane[i];
            }
          }
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

/// Channel-axis concatenation for [N,C] and [N,C,H,W] tensors.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() || (a.rank() != 2 && a.rank() != 4))
    throw ShapeError(str("concat_channels: ranks must both be 2 or 4, got ",
                         shape_str(a.shape()), " and ", shape_str(b.shape())));
  for (std::size_t axis = 0; axis < a.rank(); ++axis)
    if (axis != 1 && a.extent(axis) != b.extent(axis))
      throw ShapeError(str("concat_channels: axis ", axis, " extents differ: ",
                           a.extent(axis), " vs ", b.extent(axis)));
  const std::size_t N = a.extent(0);
  const std::size_t Ca = a.extent(1), Cb = b.extent(1);
  const std::size_t P = a.rank() == 4 ? a.extent(2) * a.extent(3) : 1;

  Shape oshape = a.shape();
  oshape[1] = Ca + Cb;
  Tensor<T> out(oshape);
  {
    const T* ap = a.values().data();
    const T* bp = b.values().data();
    T* op = out.values().data();
    for (std::size_t n = 0; n < N; ++n) {
      std::memcpy(op + n * (Ca + Cb) * P, ap + n * Ca * P, Ca * P * sizeof(T));
      std::memcpy(op + (n * (Ca + Cb) + Ca) * P, bp + n * Cb * P, Cb * P * sizeof(T));
    }
  }
  detail::record(out, "concat_channels", {a, b},
                 [a, b, N, Ca, Cb, P](detail::TensorNode<T>& self) {
    const T* gp = self.grad.data();
    if (detail::wants_grad(*a.node())) {
      std::vector<T>& ga = detail::ensure_grad(*a.node());
      for (std::size_t n = 0; n < N; ++n) {
        const T* src = gp + n * (Ca + Cb) * P;
        T* dst = ga.data() + n * Ca * P;
        for (std::size_t i = 0; i < Ca * P; ++i) dst[i] += src[i];
      }
    }
    if (detail::wants_grad(*b.node())) {
      std::vector<T>& gb = detail::ensure_grad(*b.node());
      for (std::size_t n = 0; n < N; ++n) {
        const T* src = gp + (n * (Ca + Cb) + Ca) * P;
        T* dst = gb.data() + n * Cb * P;
        for (std::size_t i = 0; i < Cb * P; ++i) dst[i] += src[i];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(str("add: shapes differ: ", shape_str(a.shape()), " vs ",
                         shape_str(b.shape())));
  Tensor<T> out(a.shape());
  const std::vector<T>& av = a.values();
  const std::vector<T>& bv = b.values();
  std::vector<T>& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  detail::record(out, "add", {a, b}, [a, b](detail::TensorNode<T>& self) {
    const std::vector<T>& g = self.grad;
    if (detail::wants_grad(*a.node())) {
      std::vector<T>& ga = detail::ensure_grad(*a.node());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (detail::wants_grad(*b.node())) {
      std::vector<T>& gb = detail::ensure_grad(*b.node());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(str("mul: shapes differ: ", shape_str(a.shape()), " vs ",
                         shape_str(b.shape())));
  Tensor<T> out(a.shape());
  const std::vector<T>& av = a.values();
  const std::vector<T>& bv = b.values();
  std::vector<T>& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  detail::record(out, "mul", {a, b}, [a, b](detail::TensorNode<T>& self) {
    const std::vector<T>& g = self.grad;
    if (detail::wants_grad(*a.node())) {
      std::vector<T>& ga = detail::ensure_grad(*a.node());
      const std::vector<T>& bv = b.values();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (detail::wants_grad(*b.node())) {
      std::vector<T>& gb = detail::ensure_grad(*b.node());
      const std::vector<T>& av = a.values();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  Tensor<T> out(Shape{1});
  T acc = T(0);
  for (T v : x.values()) acc += v;
  out.values()[0] = acc;
  detail::record(out, "sum", {x}, [x](detail::TensorNode<T>& self) {
    if (!detail::wants_grad(*x.node())) return;
    std::vector<T>& gi = detail::ensure_grad(*x.node());
    const T g = self.grad[0];
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g;
  });
  return out;
}

/// Scalar view of one element, taped (used to differentiate a single logit).
template <typename T>
Tensor<T> select(const Tensor<T>& x, std::size_t flat_index) {
  if (flat_index >= x.size())
    throw ShapeError(str("select: index ", flat_index, " out of range for ",
                         shape_str(x.shape())));
  Tensor<T> out(Shape{1});
  out.values()[0] = x.values()[flat_index];
  detail::record(out, "select", {x}, [x, flat_index](detail::TensorNode<T>& self) {
    if (!detail::wants_grad(*x.node())) return;
    detail::ensure_grad(*x.node())[flat_index] += self.grad[0];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Classifier head and loss
// ---------------------------------------------------------------------------

/// Affine map: x[N,D] * weights[K,D]^T + bias[K] -> [N,K].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias) {
  if (x.rank() != 2 || weights.rank() != 2)
    throw ShapeError(str("linear: expected x[N,D] and weights[K,D], got ",
                         shape_str(x.shape()), " and ", shape_str(weights.shape())));
  const std::size_t N = x.extent(0), D = x.extent(1), K = weights.extent(0);
  if (weights.extent(1) != D)
    throw ShapeError(str("linear: weights feature axis (axis 1) is ", weights.extent(1),
                         " but x feature axis (axis 1) is ", D));
  if (bias.rank() != 1 || bias.extent(0) != K)
    throw ShapeError(str("linear: bias axis 0 must equal class count ", K));

  Tensor<T> out(Shape{N, K});
  {
    const T* xp = x.values().data();
    const T* wp = weights.values().data();
    const T* bp = bias.values().data();
    T* op = out.values().data();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K; ++k) {
        T acc = bp[k];
        const T* xr = xp + n * D;
        const T* wr = wp + k * D;
        for (std::size_t d = 0; d < D; ++d) acc += xr[d] * wr[d];
        op[n * K + k] = acc;
      }
  }
  detail::record(out, "linear", {x, weights, bias},
                 [x, weights, bias, N, D, K](detail::TensorNode<T>& self) {
    const T* gp = self.grad.data();
    const T* xp = x.values().data();
    const T* wp = weights.values().data();
    if (detail::wants_grad(*bias.node())) {
      std::vector<T>& gb = detail::ensure_grad(*bias.node());
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < K; ++k) gb[k] += gp[n * K + k];
    }
    if (detail::wants_grad(*weights.node())) {
      std::vector<T>& gw = detail::ensure_grad(*weights.node());
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < K; ++k) {
          const T g = gp[n * K + k];
          const T* xr = xp + n * D;
          T* wr = gw.data() + k * D;
          for (std::size_t d = 0; d < D; ++d) wr[d] += g * xr[d];
        }
    }
    if (detail::wants_grad(*x.node())) {
      std::vector<T>& gx = detail::ensure_grad(*x.node());
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < K; ++k) {
          const T g = gp[n * K + k];
          const T* wr = wp + k * D;
          T* xr = gx.data() + n * D;
          for (std::size_t d = 0; d < D; ++d) xr[d] += g * wr[d];
        }
    }
  });
  return out;
}

/// Row softmax with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() != 2)
    throw ShapeError(str("softmax: expected [N,K], got ", shape_str(x.shape())));
  const std::size_t N = x.extent(0), K = x.extent(1);
  Tensor<T> out(x.shape());
  {
    const T* xp = x.values().data();
    T* op = out.values().data();
    for (std::size_t n = 0; n < N; ++n) {
      const T* xr = xp + n * K;
      T* orow = op + n * K;
      T mx = xr[0];
      for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, xr[k]);
      T sum = T(0);
      for (std::size_t k = 0; k < K; ++k) {
        orow[k] = std::exp(xr[k] - mx);
        sum += orow[k];
      }
      for (std::size_t k = 0; k < K; ++k) orow[k] /= sum;
    }
  }
  detail::record(out, "softmax", {x}, [x, N, K](detail::TensorNode<T>& self) {
    if (!detail::wants_grad(*x.node())) return;
    std::vector<T>& gx = detail::ensure_grad(*x.node());
    const T* g = self.grad.data();
    const T* p = self.values.data();
    for (std::size_t n = 0; n < N; ++n) {
      const T* gr = g + n * K;
      const T* pr = p + n * K;
      T dot = T(0);
      for (std::size_t k = 0; k < K; ++k) dot += gr[k] * pr[k];
      T* xr = gx.data() + n * K;
      for (std::size_t k = 0; k < K; ++k) xr[k] += pr[k] * (gr[k] - dot);
    }
  });
  return out;
}

template <typename T>
Tensor<T> dense_softmax(const Tensor<T>& x, const Tensor<T>& weights,
                        const Tensor<T>& bias) {
  if (weights.extent(0) < 2)
    throw ShapeError("dense_softmax: class count must be at least 2");
  return softmax(linear(x, weights, bias));
}

inline constexpr double kCceEpsilon = 1e-7;

/// Mean negative log-likelihood of the true class, probabilities clamped to
/// [kCceEpsilon, 1] before the log.
template <typename T>
Tensor<T> cce_loss(const Tensor<T>& probs, const Tensor<T>& onehot) {
  if (probs.rank() != 2 || probs.shape() != onehot.shape())
    throw ShapeError(str("cce_loss: probs ", shape_str(probs.shape()),
                         " and onehot ", shape_str(onehot.shape()),
                         " must be equal [N,K] shapes"));
  const std::size_t N = probs.extent(0), K = probs.extent(1);
  const T eps = static_cast<T>(kCceEpsilon);

  const T* pp = probs.values().data();
  const T* yp = onehot.values().data();
  std::vector<std::size_t> true_class(N);
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t ones = 0, idx = 0;
    T row_sum = T(0);
    for (std::size_t k = 0; k < K; ++k) {
      const T y = yp[n * K + k];
      if (y == T(1)) {
        ++ones;
        idx = k;
      } else if (y != T(0)) {
        throw ValueError(str("cce_loss: invalid one-hot row ", n,
                             " (entry is neither 0 nor 1)"));
      }
      row_sum += pp[n * K + k];
    }
    if (ones != 1)
      throw ValueError(str("cce_loss: invalid one-hot row ", n, " (", ones, " ones)"));
    if (std::abs(static_cast<double>(row_sum) - 1.0) > 1e-3)
      throw ValueError(str("cce_loss: probs row ", n, " sums to ", row_sum, ", not 1"));
    true_class[n] = idx;
  }

  Tensor<T> out(Shape{1});
  T acc = T(0);
  for (std::size_t n = 0; n < N; ++n) {
    T p = pp[n * K + true_class[n]];
    p = std::min(std::max(p, eps), T(1));
    acc -= std::log(p);
  }
  out.values()[0] = acc / static_cast<T>(N);

  detail::record(out, "cce_loss", {probs, onehot},
                 [probs, true_class, N, K, eps](detail::TensorNode<T>& self) {
    if (!detail::wants_grad(*probs.node())) return;
    std::vector<T>& gp = detail::ensure_grad(*probs.node());
    const T* pp = probs.values().data();
    const T g = self.grad[0];
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t k = true_class[n];
      const T p = pp[n * K + k];
      if (p > eps)  // clamped region carries no gradient
        gp[n * K + k] -= g / (static_cast<T>(N) * p);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Small helpers shared by training and evaluation
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> make_onehot(const std::vector<int>& labels, std::size_t num_classes) {
  Tensor<T> out(Shape{labels.size(), num_classes});
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const int c = labels[n];
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes)
      throw ValueError(str("make_onehot: label ", c, " out of range for ",
                           num_classes, " classes"));
    out.values()[n * num_classes + c] = T(1);
  }
  return out;
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& t) {
  if (t.rank() != 2) throw ShapeError("argmax_rows: expected [N,K]");
  const std::size_t N = t.extent(0), K = t.extent(1);
  std::vector<int> out(N);
  const T* p = t.values().data();
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (p[n * K + k] > p[n * K + best]) best = k;
    out[n] = static_cast<int>(best);
  }
  return out;
}

}  // namespace msad
