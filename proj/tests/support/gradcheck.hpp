#pragma once

// Central finite-difference gradient oracle. Independent of the autodiff
// path: it perturbs raw tensor values and re-runs a pure forward closure.

#include <functional>

#include "msadnet/tensor.hpp"

namespace gradcheck {

using msad::Rng;
using msad::Shape;
using msad::Tensor;

inline Tensor<double> rand_tensor(Rng& rng, Shape shape, double lo = -1.0,
                                  double hi = 1.0, bool want_grad = true) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  t.set_requires_grad(want_grad);
  return t;
}

/// Keep values away from a kink at zero (ReLU-style ops).
inline void push_from_zero(Tensor<double>& t, double margin = 0.05) {
  for (auto& v : t.values()) v += (v >= 0 ? margin : -margin);
}

struct Checker {
  double h = 1e-5;
  std::size_t max_coords_per_tensor = 48;
  std::uint64_t coord_seed = 17;

  /// Scaled relative error |a - n| / max(1, |a|, |n|), maximized over sampled
  /// coordinates of every listed tensor. Tensors must already hold analytic
  /// gradients (taped run + backward done by the caller); `loss` must be a
  /// pure re-evaluation from the tensors' current values.
  double max_error(const std::function<double()>& loss,
                   std::vector<Tensor<double>> tensors) const {
    msad::NoGradGuard guard;
    Rng rng(coord_seed);
    double worst = 0;
    for (auto& t : tensors) {
      std::vector<double> analytic(t.size(), 0.0);
      if (t.has_grad()) analytic = t.grad();

      std::vector<std::size_t> coords;
      if (max_coords_per_tensor == 0 || t.size() <= max_coords_per_tensor) {
        coords.resize(t.size());
        std::iota(coords.begin(), coords.end(), 0);
      } else {
        for (std::size_t i = 0; i < max_coords_per_tensor; ++i)
          coords.push_back(rng.uniform_index(t.size()));
      }

      std::vector<double>& vals = t.values();
      for (std::size_t i : coords) {
        const double orig = vals[i];
        vals[i] = orig + h;
        const double fp = loss();
        vals[i] = orig - h;
        const double fm = loss();
        vals[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double err = std::abs(analytic[i] - numeric) /
                           std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
        worst = std::max(worst, err);
      }
    }
    return worst;
  }
};

}  // namespace gradcheck
