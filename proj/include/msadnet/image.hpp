#pragma once

#include <fstream>

#include "msadnet/tensor.hpp"

namespace msad {

// ---------------------------------------------------------------------------
// 8-bit image buffers and a binary PNM (PGM P5 / PPM P6) codec, maxval 255.
// PNM keeps the interchange format implementable bit-exactly anywhere.
// ---------------------------------------------------------------------------

struct ImageBuffer {
  std::size_t height = 0, width = 0, channels = 1;
  std::vector<std::uint8_t> samples;  // row-major, interleaved

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return samples[(y * width + x) * channels + c];
  }
  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c = 0) {
    return samples[(y * width + x) * channels + c];
  }
};

namespace detail {

struct PnmCursor {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos = 0;

  bool eof() const { return pos >= size; }
  std::uint8_t peek() const { return data[pos]; }

  /// Skip whitespace and '#' comment lines between header tokens.
  void skip_separators() {
    while (!eof()) {
      const std::uint8_t c = peek();
      if (c == '#') {
        while (!eof() && peek() != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos;
      } else {
        break;
      }
    }
  }

  std::size_t read_uint(const char* what) {
    skip_separators();
    if (eof() || peek() < '0' || peek() > '9')
      throw ParseError(str("pnm: expected ", what, " at byte ", pos));
    std::size_t v = 0;
    while (!eof() && peek() >= '0' && peek() <= '9') {
      v = v * 10 + (peek() - '0');
      if (v > (1u << 24)) throw ParseError(str("pnm: ", what, " too large at byte ", pos));
      ++pos;
    }
    return v;
  }
};

}  // namespace detail

inline ImageBuffer decode_pnm(const std::uint8_t* data, std::size_t size) {
  detail::PnmCursor cur{data, size};
  if (size < 2 || data[0] != 'P' || (data[1] != '5' && data[1] != '6'))
    throw ParseError("pnm: missing P5/P6 magic at byte 0");
  const std::size_t channels = data[1] == '5' ? 1 : 3;
  cur.pos = 2;
  const std::size_t width = cur.read_uint("width");
  const std::size_t height = cur.read_uint("height");
  const std::size_t maxval_pos = cur.pos;
  const std::size_t maxval = cur.read_uint("maxval");
  if (maxval != 255)
    throw ParseError(str("pnm: maxval must be 255, got ", maxval, " at byte ", maxval_pos));
  if (width == 0 || height == 0) throw ParseError("pnm: zero image dimension");
  if (cur.eof()) throw ParseError(str("pnm: missing payload at byte ", cur.pos));
  ++cur.pos;  // single whitespace byte after maxval

  const std::size_t need = width * height * channels;
  if (size - cur.pos < need)
    throw ParseError(str("pnm: payload truncated at byte ", size, " (need ",
                         cur.pos + need, " bytes)"));
  ImageBuffer img;
  img.width = width;
  img.height = height;
  img.channels = channels;
  img.samples.assign(data + cur.pos, data + cur.pos + need);
  return img;
}

inline std::vector<std::uint8_t> encode_pnm(const ImageBuffer& img) {
  if (img.channels != 1 && img.channels != 3)
    throw ValueError("pnm: only 1- or 3-channel buffers can be encoded");
  if (img.samples.size() != img.width * img.height * img.channels)
    throw ValueError("pnm: sample count does not match dimensions");
  const std::string header = str(img.channels == 1 ? "P5" : "P6", "\n", img.width, " ",
                                 img.height, "\n255\n");
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.samples.begin(), img.samples.end());
  return out;
}

inline ImageBuffer load_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(str("pnm: cannot open '", path, "'"));
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  try {
    return decode_pnm(bytes.data(), bytes.size());
  } catch (const ParseError& e) {
    throw ParseError(str(path, ": ", e.what()));
  }
}

inline void save_pnm(const std::string& path, const ImageBuffer& img) {
  const auto bytes = encode_pnm(img);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(str("pnm: cannot open '", path, "' for writing"));
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError(str("pnm: write to '", path, "' failed"));
}

// ---------------------------------------------------------------------------
// Bilinear resize with half-pixel center alignment.
// ---------------------------------------------------------------------------

inline ImageBuffer resize_bilinear(const ImageBuffer& img, std::size_t out_h,
                                   std::size_t out_w) {
  if (img.height == 0 || img.width == 0)
    throw ValueError("resize_bilinear: empty source image");
  ImageBuffer out;
  out.height = out_h;
  out.width = out_w;
  out.channels = img.channels;
  out.samples.resize(out_h * out_w * img.channels);

  const double sy = static_cast<double>(img.height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(img.width) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(std::floor(fy));
    const double ty = fy - static_cast<double>(y0);
    const std::size_t y0c = static_cast<std::size_t>(
        std::clamp<std::ptrdiff_t>(y0, 0, static_cast<std::ptrdiff_t>(img.height) - 1));
    const std::size_t y1c = static_cast<std::size_t>(
        std::clamp<std::ptrdiff_t>(y0 + 1, 0, static_cast<std::ptrdiff_t>(img.height) - 1));
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
      const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(std::floor(fx));
      const double tx = fx - static_cast<double>(x0);
      const std::size_t x0c = static_cast<std::size_t>(
          std::clamp<std::ptrdiff_t>(x0, 0, static_cast<std::ptrdiff_t>(img.width) - 1));
      const std::size_t x1c = static_cast<std::size_t>(
          std::clamp<std::ptrdiff_t>(x0 + 1, 0, static_cast<std::ptrdiff_t>(img.width) - 1));
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double top = (1.0 - tx) * img.at(y0c, x0c, c) + tx * img.at(y0c, x1c, c);
        const double bot = (1.0 - tx) * img.at(y1c, x0c, c) + tx * img.at(y1c, x1c, c);
        const double v = (1.0 - ty) * top + ty * bot;
        out.at(y, x, c) = static_cast<std::uint8_t>(
            std::clamp<long>(std::lround(v), 0, 255));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Image -> tensor. Samples scale to [0,1]; grayscale replicates to a wider
// model input, color averages down to a single channel.
// ---------------------------------------------------------------------------

template <typename T>
std::vector<T> to_chw(const ImageBuffer& img, std::size_t out_channels) {
  if (out_channels != 1 && out_channels != 3)
    throw ValueError("to_chw: model input channels must be 1 or 3");
  const std::size_t hw = img.height * img.width;
  std::vector<T> out(out_channels * hw);
  const T inv = T(1) / T(255);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const std::size_t i = y * img.width + x;
      if (img.channels == out_channels) {
        for (std::size_t c = 0; c < out_channels; ++c)
          out[c * hw + i] = static_cast<T>(img.at(y, x, c)) * inv;
      } else if (img.channels == 1) {
        for (std::size_t c = 0; c < out_channels; ++c)
          out[c * hw + i] = static_cast<T>(img.at(y, x, 0)) * inv;
      } else {
        T acc = T(0);
        for (std::size_t c = 0; c < img.channels; ++c)
          acc += static_cast<T>(img.at(y, x, c));
        out[i] = acc / static_cast<T>(img.channels) * inv;
      }
    }
  return out;
}

template <typename T>
Tensor<T> to_tensor(const ImageBuffer& img, std::size_t out_channels) {
  return Tensor<T>(Shape{1, out_channels, img.height, img.width},
                   to_chw<T>(img, out_channels));
}

/// Quantize a [0,1] float map back to an 8-bit grayscale buffer.
template <typename T>
ImageBuffer from_unit_floats(const std::vector<T>& values, std::size_t h, std::size_t w) {
  if (values.size() != h * w) throw ValueError("from_unit_floats: size mismatch");
  ImageBuffer img;
  img.height = h;
  img.width = w;
  img.channels = 1;
  img.samples.resize(h * w);
  for (std::size_t i = 0; i < values.size(); ++i)
    img.samples[i] = static_cast<std::uint8_t>(
        std::clamp<long>(std::lround(static_cast<double>(values[i]) * 255.0), 0, 255));
  return img;
}

}  // namespace msad
