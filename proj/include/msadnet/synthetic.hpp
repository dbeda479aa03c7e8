#pragma once

#include <cstdio>

#include "msadnet/dataset.hpp"

namespace msad {

// ---------------------------------------------------------------------------
// Synthetic desk-scale dataset. Each class renders a distinct texture (a few
// large blobs, many small blobs, horizontal streaks, vertical streaks, ...)
// confined to one image quadrant so that attention maps have a known target.
// Images are deterministic per (seed, class, index) and materialize as PGM.
//
// A nearest-centroid self-test over simple pixel statistics guards the spec:
// if the rendered classes are not separable well above chance, generation
// fails rather than producing an unlearnable set.
// ---------------------------------------------------------------------------

struct ClassTexture {
  std::size_t blob_min = 2, blob_max = 3;
  double radius_min = 0.12, radius_max = 0.2;  // fraction of a quadrant
  double contrast = 0.85;
  double aspect = 1.0;     // sigma_y / sigma_x
  double angle_deg = 0.0;  // streak orientation
};

struct SyntheticSpec {
  std::size_t num_classes = 4;
  std::size_t images_per_class = 60;
  std::size_t image_size = 112;
  double noise = 0.03;
  double background = 0.12;
  std::uint64_t seed = 7;
  std::vector<ClassTexture> classes;  // empty: archetypes cycled per class
};

inline ClassTexture texture_archetype(std::size_t i) {
  switch (i % 4) {
    case 0: return {2, 3, 0.14, 0.20, 0.85, 1.0, 0.0};     // few large blobs
    case 1: return {12, 16, 0.03, 0.05, 0.85, 1.0, 0.0};   // many small blobs
    case 2: return {3, 5, 0.16, 0.22, 0.80, 0.22, 0.0};    // horizontal streaks
    default: return {3, 5, 0.16, 0.22, 0.80, 0.22, 90.0};  // vertical streaks
  }
}

inline void validate(const SyntheticSpec& s) {
  if (s.num_classes == 0) throw ConfigError("synthetic: num_classes must be positive");
  if (s.images_per_class == 0)
    throw ConfigError("synthetic: images_per_class must be positive");
  if (s.image_size < 16) throw ConfigError("synthetic: image_size must be at least 16");
  if (s.noise < 0 || s.noise > 0.3)
    throw ConfigError("synthetic: noise must lie in [0, 0.3]");
  if (!s.classes.empty() && s.classes.size() != s.num_classes)
    throw ConfigError("synthetic: classes must be empty or list one texture per class");
}

namespace detail {

inline std::vector<double> render_synthetic(const SyntheticSpec& spec,
                                            const ClassTexture& tex, Rng& rng,
                                            int quadrant) {
  const std::size_t S = spec.image_size;
  std::vector<double> canvas(S * S, spec.background);
  const double half = static_cast<double>(S) / 2.0;
  const double qx0 = (quadrant % 2 == 0) ? 0.0 : half;
  const double qy0 = (quadrant / 2 == 0) ? 0.0 : half;

  const std::size_t blobs = rng.uniform_index(tex.blob_min, tex.blob_max);
  const double theta = tex.angle_deg * 3.14159265358979323846 / 180.0;
  const double ct = std::cos(theta), st = std::sin(theta);
  for (std::size_t bindex = 0; bindex < blobs; ++bindex) {
    const double sx = rng.uniform(tex.radius_min, tex.radius_max) * half;
    const double sy = std::max(0.8, sx * tex.aspect);
    const double margin = 1.6 * std::max(sx, sy);
    const double lo = margin, hi = half - margin;
    double cx, cy;
    if (hi <= lo) {
      cx = qx0 + half / 2.0;
      cy = qy0 + half / 2.0;
    } else {
      cx = qx0 + rng.uniform(lo, hi);
      cy = qy0 + rng.uniform(lo, hi);
    }
    // bounded support; gaussian profile rotated by theta
    const double reach = 3.0 * std::max(sx, sy);
    const std::size_t y_lo = static_cast<std::size_t>(std::max(0.0, cy - reach));
    const std::size_t y_hi = std::min<std::size_t>(S - 1, static_cast<std::size_t>(cy + reach));
    const std::size_t x_lo = static_cast<std::size_t>(std::max(0.0, cx - reach));
    const std::size_t x_hi = std::min<std::size_t>(S - 1, static_cast<std::size_t>(cx + reach));
    for (std::size_t y = y_lo; y <= y_hi; ++y)
      for (std::size_t x = x_lo; x <= x_hi; ++x) {
        const double dx = static_cast<double>(x) - cx;
        const double dy = static_cast<double>(y) - cy;
        const double u = ct * dx + st * dy;
        const double v = -st * dx + ct * dy;
        const double e = (u * u) / (2 * sx * sx) + (v * v) / (2 * sy * sy);
        if (e < 9.0) canvas[y * S + x] += tex.contrast * std::exp(-e);
      }
  }
  for (auto& p : canvas) {
    p += rng.uniform(-spec.noise, spec.noise);
    p = std::clamp(p, 0.0, 1.0);
  }
  return canvas;
}

/// Simple per-image statistics used by the learnability self-test.
inline std::vector<double> pixel_stats(const std::vector<double>& img, std::size_t s) {
  double mean = 0;
  for (double v : img) mean += v;
  mean /= static_cast<double>(img.size());
  double var = 0;
  for (double v : img) var += (v - mean) * (v - mean);
  var /= static_cast<double>(img.size());
  double gx = 0, gy = 0, hi = 0, mid = 0;
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const double v = img[y * s + x];
      if (x + 1 < s) gx += std::abs(img[y * s + x + 1] - v);
      if (y + 1 < s) gy += std::abs(img[(y + 1) * s + x] - v);
      if (v > 0.7) hi += 1;
      if (v > 0.4) mid += 1;
    }
  const double n = static_cast<double>(img.size());
  return {mean, std::sqrt(var), gx / n, gy / n, hi / n, mid / n};
}

inline int nearest_centroid_selftest_errors(
    const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
    std::size_t num_classes, std::size_t* tested) {
  const std::size_t dim = features.front().size();
  // z-score features over the whole set
  std::vector<double> mu(dim, 0), sd(dim, 0);
  for (const auto& f : features)
    for (std::size_t d = 0; d < dim; ++d) mu[d] += f[d];
  for (auto& v : mu) v /= static_cast<double>(features.size());
  for (const auto& f : features)
    for (std::size_t d = 0; d < dim; ++d) sd[d] += (f[d] - mu[d]) * (f[d] - mu[d]);
  for (auto& v : sd) v = std::sqrt(v / static_cast<double>(features.size())) + 1e-12;

  auto norm = [&](const std::vector<double>& f) {
    std::vector<double> out(dim);
    for (std::size_t d = 0; d < dim; ++d) out[d] = (f[d] - mu[d]) / sd[d];
    return out;
  };

  // even indices within each class train the centroids, odd ones are scored
  std::vector<std::vector<double>> centroid(num_classes, std::vector<double>(dim, 0));
  std::vector<std::size_t> counts(num_classes, 0), seen(num_classes, 0);
  std::vector<bool> is_train(features.size(), false);
  for (std::size_t i = 0; i < features.size(); ++i) {
    const int c = labels[i];
    if (seen[c]++ % 2 == 0) {
      is_train[i] = true;
      const auto f = norm(features[i]);
      for (std::size_t d = 0; d < dim; ++d) centroid[c][d] += f[d];
      counts[c]++;
    }
  }
  for (std::size_t c = 0; c < num_classes; ++c)
    if (counts[c])
      for (auto& v : centroid[c]) v /= static_cast<double>(counts[c]);

  int errors = 0;
  *tested = 0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (is_train[i]) continue;
    const auto f = norm(features[i]);
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::max();
    for (std::size_t c = 0; c < num_classes; ++c) {
      double d2 = 0;
      for (std::size_t d = 0; d < dim; ++d)
        d2 += (f[d] - centroid[c][d]) * (f[d] - centroid[c][d]);
      if (d2 < best_d) {
        best_d = d2;
        best = c;
      }
    }
    ++*tested;
    if (static_cast<int>(best) != labels[i]) ++errors;
  }
  return errors;
}

}  // namespace detail

/// Accuracy of the nearest-centroid pixel-statistics baseline over a
/// generated set (even-index images per class train it, odd ones score it).
inline double synthetic_baseline_accuracy(const std::vector<std::vector<double>>& canvases,
                                          const std::vector<int>& labels,
                                          std::size_t image_size,
                                          std::size_t num_classes) {
  std::vector<std::vector<double>> features;
  features.reserve(canvases.size());
  for (const auto& c : canvases) features.push_back(detail::pixel_stats(c, image_size));
  std::size_t tested = 0;
  const int errors = detail::nearest_centroid_selftest_errors(features, labels,
                                                              num_classes, &tested);
  return tested ? 1.0 - static_cast<double>(errors) / static_cast<double>(tested) : 0.0;
}

/// Generate the dataset under out_dir (one subdirectory per class, plus
/// manifest.json). Deterministic per seed.
inline DatasetManifest generate_synthetic(const SyntheticSpec& spec,
                                          const std::string& out_dir) {
  validate(spec);
  const fs::path root(out_dir);
  fs::create_directories(root);

  DatasetManifest m;
  m.source = DatasetSource::Synthetic;
  for (std::size_t c = 0; c < spec.num_classes; ++c)
    m.class_names.push_back(str("class", static_cast<char>('a' + c % 26),
                                c >= 26 ? str(c / 26) : ""));

  std::vector<std::vector<double>> canvases;
  std::vector<int> labels;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    const ClassTexture tex =
        spec.classes.empty() ? texture_archetype(c) : spec.classes[c];
    const fs::path cdir = root / m.class_names[c];
    fs::create_directories(cdir);
    for (std::size_t i = 0; i < spec.images_per_class; ++i) {
      Rng rng(mix_seed(spec.seed, c * 1000003ULL + i));
      const int quadrant = static_cast<int>(rng.uniform_index(4));
      auto canvas = detail::render_synthetic(spec, tex, rng, quadrant);

      char name[32];
      std::snprintf(name, sizeof(name), "img_%04zu.pgm", i);
      const std::string path = (cdir / name).string();
      std::vector<std::uint8_t> bytes(canvas.size());
      for (std::size_t p = 0; p < canvas.size(); ++p)
        bytes[p] = static_cast<std::uint8_t>(std::lround(canvas[p] * 255.0));
      ImageBuffer img;
      img.height = img.width = spec.image_size;
      img.channels = 1;
      img.samples = std::move(bytes);
      save_pnm(path, img);

      m.samples.push_back({path, static_cast<int>(c), Partition::Unassigned, quadrant});
      canvases.push_back(std::move(canvas));
      labels.push_back(static_cast<int>(c));
    }
  }

  const double baseline = synthetic_baseline_accuracy(canvases, labels, spec.image_size,
                                                      spec.num_classes);
  const double chance = 1.0 / static_cast<double>(spec.num_classes);
  if (spec.num_classes > 1 && baseline < 2.0 * chance)
    throw ValueError(str("synthetic: self-test baseline accuracy ", baseline,
                         " is below twice chance (", 2.0 * chance,
                         "); class textures are not separable enough"));

  write_manifest((root / "manifest.json").string(), m);
  return m;
}

}  // namespace msad
