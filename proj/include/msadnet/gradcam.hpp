#pragma once

#include "msadnet/image.hpp"
#include "msadnet/model.hpp"

namespace msad {

// ---------------------------------------------------------------------------
// Grad-CAM: channel weights are the spatial mean of d(class logit)/d(tap
// activations); the map is the ReLU of the weighted activation sum, upsampled
// to input resolution and max-normalized.
// ---------------------------------------------------------------------------

struct Heatmap {
  std::size_t size = 0;  // square, input resolution
  std::vector<float> values;  // in [0,1]
  std::string tap;
  int target_class = -1;
};

namespace detail {

/// Bilinear upsample of a single-channel float map (half-pixel centers).
inline std::vector<float> upsample_bilinear(const std::vector<float>& src,
                                            std::size_t sh, std::size_t sw,
                                            std::size_t oh, std::size_t ow) {
  std::vector<float> out(oh * ow);
  const double sy = static_cast<double>(sh) / static_cast<double>(oh);
  const double sx = static_cast<double>(sw) / static_cast<double>(ow);
  for (std::size_t y = 0; y < oh; ++y) {
    const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(std::floor(fy));
    const double ty = fy - static_cast<double>(y0);
    const std::size_t y0c = static_cast<std::size_t>(
        std::clamp<std::ptrdiff_t>(y0, 0, static_cast<std::ptrdiff_t>(sh) - 1));
    const std::size_t y1c = static_cast<std::size_t>(
        std::clamp<std::ptrdiff_t>(y0 + 1, 0, static_cast<std::ptrdiff_t>(sh) - 1));
    for (std::size_t x = 0; x < ow; ++x) {
      const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
      const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(std::floor(fx));
      const double tx = fx - static_cast<double>(x0);
      const std::size_t x0c = static_cast<std::size_t>(
          std::clamp<std::ptrdiff_t>(x0, 0, static_cast<std::ptrdiff_t>(sw) - 1));
      const std::size_t x1c = static_cast<std::size_t>(
          std::clamp<std::ptrdiff_t>(x0 + 1, 0, static_cast<std::ptrdiff_t>(sw) - 1));
      const double top = (1 - tx) * src[y0c * sw + x0c] + tx * src[y0c * sw + x1c];
      const double bot = (1 - tx) * src[y1c * sw + x0c] + tx * src[y1c * sw + x1c];
      out[y * ow + x] = static_cast<float>((1 - ty) * top + ty * bot);
    }
  }
  return out;
}

}  // namespace detail

/// Heatmap for one image (any batch row works, the first is used). The tap
/// must name a 4-d activation; the class logit (pre-softmax) is
/// differentiated.
template <typename T>
Heatmap gradcam(ModelGraph<T>& model, const Tensor<T>& image, int target_class,
                const std::string& tap_name = "block5_out") {
  model.tap_id(tap_name);  // validates, error lists available taps
  if (target_class < 0 ||
      static_cast<std::size_t>(target_class) >= model.config.num_classes)
    throw ValueError(str("gradcam: class index ", target_class, " out of range for ",
                         model.config.num_classes, " classes"));

  auto result = model.forward(image, BnMode::Infer);
  Tensor<T> tap = result.taps.at(tap_name);
  if (tap.rank() != 4)
    throw ValueError(str("gradcam: tap '", tap_name, "' is not a spatial activation"));

  model.zero_grads();
  Tensor<T> logit = select(result.logits, static_cast<std::size_t>(target_class));
  backward(logit);

  const std::size_t C = tap.extent(1), H = tap.extent(2), W = tap.extent(3);
  std::vector<float> map(H * W, 0.0f);
  if (tap.has_grad()) {
    const std::vector<T>& act = tap.values();
    const std::vector<T>& grad = tap.grad();
    for (std::size_t c = 0; c < C; ++c) {
      double wsum = 0;
      for (std::size_t i = 0; i < H * W; ++i)
        wsum += static_cast<double>(grad[c * H * W + i]);
      const double weight = wsum / static_cast<double>(H * W);
      for (std::size_t i = 0; i < H * W; ++i)
        map[i] += static_cast<float>(weight * static_cast<double>(act[c * H * W + i]));
    }
  }
  for (auto& v : map) v = std::max(v, 0.0f);

  Heatmap h;
  h.size = model.config.input_size;
  h.tap = tap_name;
  h.target_class = target_class;
  h.values = detail::upsample_bilinear(map, H, W, h.size, h.size);
  float mx = 0.0f;
  for (float v : h.values) mx = std::max(mx, v);
  if (mx > 0.0f)
    for (auto& v : h.values) v /= mx;
  return h;
}

// ---------------------------------------------------------------------------
// Rendering: fixed 256-entry blue-to-red lookup table, alpha blend over the
// (grayscale) source.
// ---------------------------------------------------------------------------

struct Rgb {
  std::uint8_t r, g, b;
};

inline const std::array<Rgb, 256>& heat_colormap() {
  static const std::array<Rgb, 256> table = [] {
    std::array<Rgb, 256> t{};
    for (int i = 0; i < 256; ++i) {
      const double x = i / 255.0;
      auto seg = [](double v) {
        return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
      };
      double r, g, b;
      if (x < 0.25) {        // blue -> cyan
        r = 0; g = 4 * x; b = 1;
      } else if (x < 0.5) {  // cyan -> green
        r = 0; g = 1; b = 1 - 4 * (x - 0.25);
      } else if (x < 0.75) { // green -> yellow
        r = 4 * (x - 0.5); g = 1; b = 0;
      } else {               // yellow -> red
        r = 1; g = 1 - 4 * (x - 0.75); b = 0;
      }
      t[i] = {seg(r), seg(g), seg(b)};
    }
    return t;
  }();
  return table;
}

/// Color-mapped heatmap alpha-blended over the source image; returns a
/// 3-channel buffer (PPM-ready).
inline ImageBuffer overlay(const ImageBuffer& image, const Heatmap& heat,
                           double alpha = 0.4) {
  if (image.height != heat.size || image.width != heat.size)
    throw ShapeError(str("overlay: image is ", image.width, "x", image.height,
                         " but heatmap is ", heat.size, "x", heat.size));
  if (alpha < 0 || alpha > 1) throw ValueError("overlay: alpha must lie in [0,1]");
  ImageBuffer out;
  out.height = image.height;
  out.width = image.width;
  out.channels = 3;
  out.samples.resize(out.height * out.width * 3);
  const auto& cmap = heat_colormap();
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x) {
      const std::size_t i = y * out.width + x;
      double src[3];
      if (image.channels == 3) {
        src[0] = image.at(y, x, 0);
        src[1] = image.at(y, x, 1);
        src[2] = image.at(y, x, 2);
      } else {
        src[0] = src[1] = src[2] = image.at(y, x, 0);
      }
      const int idx = static_cast<int>(
          std::clamp(std::lround(static_cast<double>(heat.values[i]) * 255.0), 0L, 255L));
      const Rgb c = cmap[static_cast<std::size_t>(idx)];
      const double heat_rgb[3] = {static_cast<double>(c.r), static_cast<double>(c.g),
                                  static_cast<double>(c.b)};
      for (int ch = 0; ch < 3; ++ch)
        out.samples[i * 3 + ch] = static_cast<std::uint8_t>(std::clamp(
            std::lround((1.0 - alpha) * src[ch] + alpha * heat_rgb[ch]), 0L, 255L));
    }
  return out;
}

inline ImageBuffer heatmap_to_image(const Heatmap& h) {
  return from_unit_floats(h.values, h.size, h.size);
}

}  // namespace msad
