#pragma once

#include <numeric>

#include "msadnet/common.hpp"

namespace msad {

// ---------------------------------------------------------------------------
// Stratified splitting. Ratios are treated as weights and normalized (the
// configured 60/20/10 proportions sum to 90). Per class, samples are shuffled
// by seed and allocated to partitions by largest remainder, which keeps every
// per-class partition within one sample of its exact share.
// ---------------------------------------------------------------------------

struct SplitPlan {
  std::vector<std::size_t> train, valid, test;
  std::vector<double> weights;  // normalized

  std::size_t total() const { return train.size() + valid.size() + test.size(); }
};

namespace detail {

inline std::vector<double> normalize_weights(std::vector<double> w) {
  double sum = 0;
  for (double v : w) {
    if (v < 0) throw ValueError("split: weights must be non-negative");
    sum += v;
  }
  if (!(sum > 0)) throw ValueError("split: weights must not all be zero");
  for (double& v : w) v /= sum;
  return w;
}

/// Largest-remainder allocation of `count` items over normalized weights.
inline std::vector<std::size_t> apportion(std::size_t count,
                                          const std::vector<double>& weights) {
  const std::size_t P = weights.size();
  std::vector<std::size_t> alloc(P, 0);
  std::vector<std::pair<double, std::size_t>> remainder(P);
  std::size_t used = 0;
  for (std::size_t i = 0; i < P; ++i) {
    const double exact = weights[i] * static_cast<double>(count);
    alloc[i] = static_cast<std::size_t>(std::floor(exact));
    remainder[i] = {exact - std::floor(exact), i};
    used += alloc[i];
  }
  std::sort(remainder.begin(), remainder.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;  // deterministic tie-break: lower partition first
  });
  for (std::size_t i = 0; used < count; ++i, ++used) alloc[remainder[i % P].second]++;
  return alloc;
}

inline std::vector<std::vector<std::size_t>> indices_by_class(
    const std::vector<int>& labels) {
  int num_classes = 0;
  for (int l : labels) {
    if (l < 0) throw ValueError("split: labels must be non-negative");
    num_classes = std::max(num_classes, l + 1);
  }
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i)
    by_class[labels[i]].push_back(i);
  return by_class;
}

}  // namespace detail

/// Generic engine: shuffle each class by seed and deal it into
/// weights.size() partitions by largest remainder.
inline std::vector<std::vector<std::size_t>> stratified_partition(
    const std::vector<int>& labels, const std::vector<std::size_t>& subset,
    std::vector<double> weights, std::uint64_t seed) {
  weights = detail::normalize_weights(std::move(weights));
  const std::size_t P = weights.size();

  int num_classes = 0;
  for (int l : labels) num_classes = std::max(num_classes, l + 1);
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t idx : subset) {
    if (idx >= labels.size()) throw ValueError("split: subset index out of range");
    by_class[labels[idx]].push_back(idx);
  }

  std::vector<std::vector<std::size_t>> parts(P);
  for (int c = 0; c < num_classes; ++c) {
    auto& members = by_class[c];
    if (members.empty()) continue;
    if (members.size() < P)
      throw ValueError(str("split: class ", c, " has only ", members.size(),
                           " samples for ", P, " partitions"));
    Rng rng(mix_seed(seed, 0x5354u + static_cast<std::uint64_t>(c)));
    rng.shuffle(members);
    const auto alloc = detail::apportion(members.size(), weights);
    std::size_t pos = 0;
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t i = 0; i < alloc[p]; ++i) parts[p].push_back(members[pos++]);
  }
  for (auto& part : parts) std::sort(part.begin(), part.end());
  return parts;
}

/// Three-way stratified train/valid/test split over the whole label set.
inline SplitPlan stratified_split(const std::vector<int>& labels,
                                  std::vector<double> weights, std::uint64_t seed) {
  if (weights.size() != 3)
    throw ValueError("stratified_split: exactly 3 weights (train, valid, test)");
  std::vector<std::size_t> all(labels.size());
  std::iota(all.begin(), all.end(), 0);
  auto parts = stratified_partition(labels, all, weights, seed);
  SplitPlan plan;
  plan.train = std::move(parts[0]);
  plan.valid = std::move(parts[1]);
  plan.test = std::move(parts[2]);
  plan.weights = detail::normalize_weights(std::move(weights));
  return plan;
}

/// k disjoint stratified test folds covering the data exactly once; the
/// remainder of each fold is split into train/valid by the first two weights.
inline std::vector<SplitPlan> kfold_plans(const std::vector<int>& labels, int k,
                                          std::uint64_t seed,
                                          std::vector<double> weights = {6, 2, 1}) {
  if (k < 2) throw ValueError("kfold_plans: k must be at least 2");
  auto by_class = detail::indices_by_class(labels);
  std::vector<std::vector<std::size_t>> folds(k);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    if (members.size() < static_cast<std::size_t>(k))
      throw ValueError(str("kfold_plans: class ", c, " has only ", members.size(),
                           " samples for ", k, " folds"));
    Rng rng(mix_seed(seed, 0x4b46u + c));
    rng.shuffle(members);
    for (std::size_t i = 0; i < members.size(); ++i)
      folds[i % k].push_back(members[i]);
  }

  std::vector<SplitPlan> plans;
  plans.reserve(k);
  for (int f = 0; f < k; ++f) {
    const std::vector<double> tv{weights.at(0), weights.at(1)};
    std::vector<char> in_test(labels.size(), 0);
    for (std::size_t idx : folds[f]) in_test[idx] = 1;
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (!in_test[i]) rest.push_back(i);
    auto parts = stratified_partition(labels, rest, tv,
                                      mix_seed(seed, 0xF01Du + static_cast<std::uint64_t>(f)));
    SplitPlan plan;
    plan.train = std::move(parts[0]);
    plan.valid = std::move(parts[1]);
    plan.test = folds[f];
    std::sort(plan.test.begin(), plan.test.end());
    plan.weights = detail::normalize_weights(tv);
    plans.push_back(std::move(plan));
  }
  return plans;
}

}  // namespace msad
