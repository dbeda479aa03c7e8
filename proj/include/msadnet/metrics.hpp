#pragma once

#include <iomanip>
#include <limits>

#include <nlohmann/json.hpp>

#include "msadnet/common.hpp"

namespace msad {

// ---------------------------------------------------------------------------
// Classification metrics: confusion matrix, accuracy, per-class and averaged
// precision/recall/F1, and one-vs-rest AUC by trapezoidal integration over
// score thresholds (macro-averaged across classes).
// ---------------------------------------------------------------------------

struct ClassMetrics {
  double precision = 0, recall = 0, f1 = 0;
  std::size_t support = 0;
};

struct MetricsReport {
  std::vector<std::string> class_names;
  std::vector<std::vector<std::size_t>> confusion;  // [true][pred]
  double accuracy = 0;
  std::vector<ClassMetrics> per_class;
  ClassMetrics macro, weighted;
  std::vector<double> auc_per_class;  // NaN where undefined
  double auc_macro = std::numeric_limits<double>::quiet_NaN();
  double seconds_per_epoch = 0;

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& row : confusion)
      for (std::size_t v : row) n += v;
    return n;
  }
};

/// One-vs-rest ROC AUC for one class, trapezoidal, tied scores grouped.
inline double auc_binary(const std::vector<double>& score,
                         const std::vector<char>& positive) {
  std::size_t pos = 0;
  for (char p : positive) pos += p ? 1 : 0;
  const std::size_t neg = score.size() - pos;
  if (pos == 0 || neg == 0) return std::numeric_limits<double>::quiet_NaN();

  std::vector<std::size_t> order(score.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (score[a] != score[b]) return score[a] > score[b];
    return a < b;
  });

  double auc = 0;
  double tp = 0, fp = 0, prev_tpr = 0, prev_fpr = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double s = score[order[i]];
    while (i < order.size() && score[order[i]] == s) {
      if (positive[order[i]]) tp += 1;
      else fp += 1;
      ++i;
    }
    const double tpr = tp / static_cast<double>(pos);
    const double fpr = fp / static_cast<double>(neg);
    auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
    prev_tpr = tpr;
    prev_fpr = fpr;
  }
  return auc;
}

inline std::vector<std::vector<std::size_t>> confusion_matrix(
    const std::vector<int>& truth, const std::vector<int>& pred, std::size_t k) {
  if (truth.size() != pred.size())
    throw ValueError("confusion_matrix: truth/pred length mismatch");
  std::vector<std::vector<std::size_t>> m(k, std::vector<std::size_t>(k, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || pred[i] < 0 || static_cast<std::size_t>(truth[i]) >= k ||
        static_cast<std::size_t>(pred[i]) >= k)
      throw ValueError(str("confusion_matrix: label out of range at sample ", i));
    m[truth[i]][pred[i]]++;
  }
  return m;
}

/// Metrics from a confusion matrix; zero denominators yield zero rates.
inline MetricsReport metrics_from_confusion(
    const std::vector<std::vector<std::size_t>>& confusion,
    std::vector<std::string> class_names = {}) {
  const std::size_t k = confusion.size();
  MetricsReport r;
  r.confusion = confusion;
  if (class_names.empty())
    for (std::size_t c = 0; c < k; ++c) class_names.push_back(str("class", c));
  r.class_names = std::move(class_names);

  std::size_t total = 0, correct = 0;
  std::vector<std::size_t> row_sum(k, 0), col_sum(k, 0);
  for (std::size_t t = 0; t < k; ++t)
    for (std::size_t p = 0; p < k; ++p) {
      total += confusion[t][p];
      row_sum[t] += confusion[t][p];
      col_sum[p] += confusion[t][p];
      if (t == p) correct += confusion[t][p];
    }
  r.accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0;

  r.per_class.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    const double tp = static_cast<double>(confusion[c][c]);
    ClassMetrics& m = r.per_class[c];
    m.support = row_sum[c];
    m.precision = col_sum[c] ? tp / static_cast<double>(col_sum[c]) : 0;
    m.recall = row_sum[c] ? tp / static_cast<double>(row_sum[c]) : 0;
    m.f1 = (m.precision + m.recall) > 0
               ? 2 * m.precision * m.recall / (m.precision + m.recall)
               : 0;
  }
  for (std::size_t c = 0; c < k; ++c) {
    r.macro.precision += r.per_class[c].precision / static_cast<double>(k);
    r.macro.recall += r.per_class[c].recall / static_cast<double>(k);
    r.macro.f1 += r.per_class[c].f1 / static_cast<double>(k);
    const double w =
        total ? static_cast<double>(r.per_class[c].support) / static_cast<double>(total)
              : 0;
    r.weighted.precision += w * r.per_class[c].precision;
    r.weighted.recall += w * r.per_class[c].recall;
    r.weighted.f1 += w * r.per_class[c].f1;
  }
  r.macro.support = r.weighted.support = total;
  return r;
}

/// Full report from truths, argmax predictions and per-class scores
/// (scores[i][c], typically softmax probabilities; pass {} to skip AUC).
inline MetricsReport compute_metrics(const std::vector<int>& truth,
                                     const std::vector<int>& pred,
                                     const std::vector<std::vector<double>>& scores,
                                     std::size_t k,
                                     std::vector<std::string> class_names = {}) {
  MetricsReport r =
      metrics_from_confusion(confusion_matrix(truth, pred, k), std::move(class_names));
  if (!scores.empty()) {
    if (scores.size() != truth.size())
      throw ValueError("compute_metrics: scores/truth length mismatch");
    r.auc_per_class.assign(k, std::numeric_limits<double>::quiet_NaN());
    double sum = 0;
    std::size_t defined = 0;
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<double> s(truth.size());
      std::vector<char> positive(truth.size());
      for (std::size_t i = 0; i < truth.size(); ++i) {
        s[i] = scores[i][c];
        positive[i] = truth[i] == static_cast<int>(c) ? 1 : 0;
      }
      r.auc_per_class[c] = auc_binary(s, positive);
      if (!std::isnan(r.auc_per_class[c])) {
        sum += r.auc_per_class[c];
        ++defined;
      }
    }
    if (defined) r.auc_macro = sum / static_cast<double>(defined);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

inline std::string metrics_text(const MetricsReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  std::size_t name_w = 12;
  for (const auto& n : r.class_names) name_w = std::max(name_w, n.size());
  const int W = static_cast<int>(name_w + 2);
  os << std::left << std::setw(W) << "class" << std::right << std::setw(11)
     << "precision" << std::setw(9) << "recall" << std::setw(10) << "f1"
     << std::setw(10) << "support";
  if (!r.auc_per_class.empty()) os << std::setw(9) << "auc";
  os << "\n";
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& m = r.per_class[c];
    os << std::left << std::setw(W) << r.class_names[c] << std::right << std::setw(11)
       << m.precision << std::setw(9) << m.recall << std::setw(10) << m.f1
       << std::setw(10) << m.support;
    if (!r.auc_per_class.empty()) os << std::setw(9) << r.auc_per_class[c];
    os << "\n";
  }
  auto avg_row = [&](const char* label, const ClassMetrics& m) {
    os << std::left << std::setw(W) << label << std::right << std::setw(11)
       << m.precision << std::setw(9) << m.recall << std::setw(10) << m.f1
       << std::setw(10) << m.support << "\n";
  };
  avg_row("macro_avg", r.macro);
  avg_row("weighted_avg", r.weighted);
  os << "\naccuracy = " << r.accuracy << "\n";
  if (!std::isnan(r.auc_macro))
    os << "auc (one-vs-rest, macro, trapezoidal) = " << r.auc_macro << "\n";
  if (r.seconds_per_epoch > 0)
    os << "secs/ep = " << std::setprecision(2) << r.seconds_per_epoch << "\n";
  return os.str();
}

inline nlohmann::json metrics_json(const MetricsReport& r) {
  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& m = r.per_class[c];
    nlohmann::json e{{"class", r.class_names[c]},
                     {"precision", m.precision},
                     {"recall", m.recall},
                     {"f1", m.f1},
                     {"support", m.support}};
    if (!r.auc_per_class.empty() && !std::isnan(r.auc_per_class[c]))
      e["auc"] = r.auc_per_class[c];
    per_class.push_back(std::move(e));
  }
  nlohmann::json j{{"accuracy", r.accuracy},
                   {"confusion", r.confusion},
                   {"per_class", per_class},
                   {"macro", {{"precision", r.macro.precision},
                              {"recall", r.macro.recall},
                              {"f1", r.macro.f1}}},
                   {"weighted", {{"precision", r.weighted.precision},
                                 {"recall", r.weighted.recall},
                                 {"f1", r.weighted.f1}}}};
  if (!std::isnan(r.auc_macro)) j["auc_macro"] = r.auc_macro;
  if (r.seconds_per_epoch > 0) j["secs_per_epoch"] = r.seconds_per_epoch;
  return j;
}

inline std::string confusion_csv(const MetricsReport& r) {
  std::ostringstream os;
  os << "true\\pred";
  for (const auto& n : r.class_names) os << "," << n;
  os << "\n";
  for (std::size_t t = 0; t < r.confusion.size(); ++t) {
    os << r.class_names[t];
    for (std::size_t p = 0; p < r.confusion[t].size(); ++p)
      os << "," << r.confusion[t][p];
    os << "\n";
  }
  return os.str();
}

}  // namespace msad
