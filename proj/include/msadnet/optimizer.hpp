#pragma once

#include "msadnet/tensor.hpp"

namespace msad {

// ---------------------------------------------------------------------------
// Adam with bias correction, plus the two learning-rate schedules: fixed, and
// adaptive (flat for the first flat_epochs, then multiplied by decay once per
// epoch).
// ---------------------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  struct Slot {
    std::vector<T> m, v;
  };
  std::vector<Slot> slots;
  std::uint64_t t = 0;

  template <typename Params>
  void init(const Params& params) {
    slots.clear();
    slots.reserve(params.size());
    for (const auto& [name, tensor] : params)
      slots.push_back({std::vector<T>(tensor.size(), T(0)),
                       std::vector<T>(tensor.size(), T(0))});
    t = 0;
  }
};

/// One Adam update over all parameters. Parameters without an accumulated
/// gradient buffer are treated as zero-gradient.
template <typename T>
void adam_step(std::vector<std::pair<std::string, Tensor<T>>>& params,
               AdamState<T>& state, double lr, const AdamConfig& cfg = {}) {
  if (state.slots.size() != params.size())
    throw ValueError("adam_step: state was initialized for a different parameter set");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const T beta1 = static_cast<T>(cfg.beta1);
  const T beta2 = static_cast<T>(cfg.beta2);
  const T one_m_b1 = static_cast<T>(1.0 - cfg.beta1);
  const T one_m_b2 = static_cast<T>(1.0 - cfg.beta2);
  const T eps = static_cast<T>(cfg.eps);
  const T step1 = static_cast<T>(lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, p] = params[i];
    auto& slot = state.slots[i];
    if (slot.m.size() != p.size())
      throw ValueError(str("adam_step: slot/parameter size mismatch for '", name, "'"));
    if (!p.has_grad()) continue;  // no accumulated gradient: leave untouched
    const std::vector<T>& g = p.grad();
    if (!all_finite(g))
      throw TrainingDiverged(str("adam_step: non-finite gradient in '", name, "'"));
    std::vector<T>& val = p.values();
    for (std::size_t j = 0; j < val.size(); ++j) {
      slot.m[j] = beta1 * slot.m[j] + one_m_b1 * g[j];
      slot.v[j] = beta2 * slot.v[j] + one_m_b2 * g[j] * g[j];
      val[j] -= step1 * slot.m[j] / (std::sqrt(slot.v[j]) * inv_sqrt_bc2 + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

enum class SchedulePolicy { Fixed, Adaptive };

struct Schedule {
  SchedulePolicy policy = SchedulePolicy::Fixed;
  double base_lr = 1e-4;
  int flat_epochs = 7;
  double decay = 0.95;
};

/// Learning rate for a 1-based epoch index. The adaptive policy holds base_lr
/// through flat_epochs, then multiplies by decay once per later epoch.
inline double lr_at(const Schedule& s, int epoch) {
  if (epoch < 1) throw ValueError("lr_at: epochs are 1-based");
  if (s.policy == SchedulePolicy::Fixed || epoch <= s.flat_epochs) return s.base_lr;
  double lr = s.base_lr;
  for (int e = s.flat_epochs; e < epoch; ++e) lr *= s.decay;
  return lr;
}

}  // namespace msad
