#pragma once

#include <chrono>

#include "msadnet/dataset.hpp"
#include "msadnet/metrics.hpp"
#include "msadnet/model.hpp"
#include "msadnet/optimizer.hpp"
#include "msadnet/split.hpp"

namespace msad {

// ---------------------------------------------------------------------------
// Training: Adam over mini-batches with the configured learning-rate
// schedule, per-epoch validation, optional early stopping that restores the
// best-validation-loss parameters. Reproducible for a fixed seed.
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t batch_size = 16;
  double base_lr = 1e-4;
  SchedulePolicy schedule = SchedulePolicy::Fixed;
  int flat_epochs = 7;
  double decay = 0.95;
  int epochs = 35;
  bool early_stopping = false;
  int patience = 5;
  AdamConfig adam;
  std::vector<double> split_weights{6, 2, 1};
  std::uint64_t seed = 42;
};

inline void validate(const TrainConfig& c) {
  if (c.batch_size < 1) throw ConfigError("train: batch_size must be at least 1");
  if (!(c.decay > 0 && c.decay <= 1)) throw ConfigError("train: decay must lie in (0,1]");
  if (c.patience < 1) throw ConfigError("train: patience must be at least 1");
  if (c.epochs < 1) throw ConfigError("train: epochs must be at least 1");
  if (c.split_weights.size() != 3)
    throw ConfigError("train: split_weights must list 3 values");
}

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"batch_size", c.batch_size},
           {"base_lr", c.base_lr},
           {"schedule", c.schedule == SchedulePolicy::Fixed ? "fixed" : "adaptive"},
           {"flat_epochs", c.flat_epochs},
           {"decay", c.decay},
           {"epochs", c.epochs},
           {"early_stopping", c.early_stopping},
           {"patience", c.patience},
           {"adam_beta1", c.adam.beta1},
           {"adam_beta2", c.adam.beta2},
           {"adam_eps", c.adam.eps},
           {"split_weights", c.split_weights},
           {"seed", c.seed}};
}

inline void from_json(const json& j, TrainConfig& c) {
  static const TrainConfig defaults;
  c = defaults;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "batch_size") c.batch_size = it.value().get<std::size_t>();
      else if (k == "base_lr") c.base_lr = it.value().get<double>();
      else if (k == "schedule") {
        const std::string s = it.value().get<std::string>();
        if (s == "fixed") c.schedule = SchedulePolicy::Fixed;
        else if (s == "adaptive") c.schedule = SchedulePolicy::Adaptive;
        else throw ConfigError(str("train config: unknown schedule '", s, "'"));
      }
      else if (k == "flat_epochs") c.flat_epochs = it.value().get<int>();
      else if (k == "decay") c.decay = it.value().get<double>();
      else if (k == "epochs") c.epochs = it.value().get<int>();
      else if (k == "early_stopping") c.early_stopping = it.value().get<bool>();
      else if (k == "patience") c.patience = it.value().get<int>();
      else if (k == "adam_beta1") c.adam.beta1 = it.value().get<double>();
      else if (k == "adam_beta2") c.adam.beta2 = it.value().get<double>();
      else if (k == "adam_eps") c.adam.eps = it.value().get<double>();
      else if (k == "split_weights") c.split_weights = it.value().get<std::vector<double>>();
      else if (k == "seed") c.seed = it.value().get<std::uint64_t>();
      else throw ConfigError(str("train config: unknown key '", k, "'"));
    } catch (const json::exception& e) {
      throw ConfigError(str("train config: bad value for '", k, "': ", e.what()));
    }
  }
}

inline Schedule schedule_of(const TrainConfig& c) {
  return Schedule{c.schedule, c.base_lr, c.flat_epochs, c.decay};
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0, train_acc = 0;
  double val_loss = 0, val_acc = 0;
  double lr = 0;
  double seconds = 0;
};

struct FitResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;  // 1-based; epoch whose parameters the model now holds
  bool stopped_early = false;

  double mean_seconds_per_epoch() const {
    if (history.empty()) return 0;
    double s = 0;
    for (const auto& e : history) s += e.seconds;
    return s / static_cast<double>(history.size());
  }
};

namespace detail {

template <typename T>
struct ParamSnapshot {
  std::vector<std::vector<T>> values;

  template <typename Pairs>
  static ParamSnapshot capture(Pairs& pairs) {
    ParamSnapshot s;
    s.values.reserve(pairs.size());
    for (auto& [name, t] : pairs) s.values.push_back(t.values());
    return s;
  }

  template <typename Pairs>
  void restore(Pairs& pairs) const {
    for (std::size_t i = 0; i < values.size(); ++i) pairs[i].second.values() = values[i];
  }
};

/// Mean CCE loss and accuracy over an index set, in inference mode, no tape.
template <typename T>
std::pair<double, double> eval_loss_acc(ModelGraph<T>& model, const LoadedDataset<T>& data,
                                        const std::vector<std::size_t>& indices,
                                        std::size_t batch_size) {
  NoGradGuard guard;
  double loss_sum = 0;
  std::size_t correct = 0, seen = 0;
  for (std::size_t pos = 0; pos < indices.size(); pos += batch_size) {
    std::vector<std::size_t> chunk(
        indices.begin() + pos,
        indices.begin() + std::min(indices.size(), pos + batch_size));
    auto batch = data.batch(chunk);
    auto labels = data.batch_labels(chunk);
    auto result = model.forward(batch, BnMode::Infer);
    auto loss = cce_loss(result.probs, make_onehot<T>(labels, data.num_classes()));
    loss_sum += static_cast<double>(loss.item()) * static_cast<double>(chunk.size());
    auto pred = argmax_rows(result.probs);
    for (std::size_t i = 0; i < chunk.size(); ++i)
      if (pred[i] == labels[i]) ++correct;
    seen += chunk.size();
  }
  if (seen == 0) return {0.0, 0.0};
  return {loss_sum / static_cast<double>(seen),
          static_cast<double>(correct) / static_cast<double>(seen)};
}

}  // namespace detail

/// Called after every epoch (for checkpointing / progress logging).
template <typename T>
using EpochCallback = std::function<void(ModelGraph<T>&, const EpochRecord&)>;

template <typename T>
FitResult fit(ModelGraph<T>& model, const LoadedDataset<T>& data, const SplitPlan& plan,
              const TrainConfig& cfg, const EpochCallback<T>& on_epoch = {}) {
  validate(cfg);
  if (data.num_classes() != model.config.num_classes)
    throw ShapeError(str("fit: dataset has ", data.num_classes(),
                         " classes but the model expects ", model.config.num_classes));
  auto params = model.parameters();
  AdamState<T> opt;
  opt.init(params);
  const Schedule sched = schedule_of(cfg);

  FitResult result;
  double best_val_loss = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  detail::ParamSnapshot<T> best_params;
  auto buffers = model.buffers();
  detail::ParamSnapshot<T> best_buffers;

  std::vector<std::size_t> order(plan.train);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at(sched, epoch);

    Rng shuffle_rng(mix_seed(cfg.seed, 0xE60C000ULL + static_cast<std::uint64_t>(epoch)));
    order = plan.train;
    shuffle_rng.shuffle(order);

    double loss_sum = 0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t pos = 0; pos < order.size(); pos += cfg.batch_size) {
      std::vector<std::size_t> chunk(
          order.begin() + pos, order.begin() + std::min(order.size(), pos + cfg.batch_size));
      auto batch = data.batch(chunk);
      auto labels = data.batch_labels(chunk);
      auto result_fwd = model.forward(batch, BnMode::Train);
      auto loss = cce_loss(result_fwd.probs, make_onehot<T>(labels, data.num_classes()));
      const double loss_v = static_cast<double>(loss.item());
      if (!std::isfinite(loss_v))
        throw TrainingDiverged(str("fit: non-finite loss at epoch ", epoch));
      model.zero_grads();
      backward(loss);
      adam_step(params, opt, lr, cfg.adam);

      loss_sum += loss_v * static_cast<double>(chunk.size());
      auto pred = argmax_rows(result_fwd.probs);
      for (std::size_t i = 0; i < chunk.size(); ++i)
        if (pred[i] == labels[i]) ++correct;
      seen += chunk.size();
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0;
    rec.train_acc = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0;
    std::tie(rec.val_loss, rec.val_acc) =
        detail::eval_loss_acc(model, data, plan.valid, cfg.batch_size);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(rec);

    const double monitored = plan.valid.empty() ? rec.train_loss : rec.val_loss;
    if (monitored < best_val_loss) {
      best_val_loss = monitored;
      best_epoch = epoch;
      if (cfg.early_stopping) {
        best_params = detail::ParamSnapshot<T>::capture(params);
        best_buffers = detail::ParamSnapshot<T>::capture(buffers);
      }
    }
    if (on_epoch) on_epoch(model, rec);
    if (cfg.early_stopping && epoch - best_epoch >= cfg.patience) {
      result.stopped_early = true;
      break;
    }
  }

  if (cfg.early_stopping && best_epoch > 0) {
    best_params.restore(params);
    best_buffers.restore(buffers);
  }
  result.best_epoch = best_epoch;
  return result;
}

/// Argmax evaluation over an index set; scores feed the one-vs-rest AUC.
template <typename T>
MetricsReport evaluate(ModelGraph<T>& model, const LoadedDataset<T>& data,
                       const std::vector<std::size_t>& indices,
                       std::size_t batch_size = 16) {
  NoGradGuard guard;
  std::vector<int> truth, pred;
  std::vector<std::vector<double>> scores;
  for (std::size_t pos = 0; pos < indices.size(); pos += batch_size) {
    std::vector<std::size_t> chunk(
        indices.begin() + pos,
        indices.begin() + std::min(indices.size(), pos + batch_size));
    auto batch = data.batch(chunk);
    auto labels = data.batch_labels(chunk);
    auto result = model.forward(batch, BnMode::Infer);
    auto p = argmax_rows(result.probs);
    const std::size_t K = data.num_classes();
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      truth.push_back(labels[i]);
      pred.push_back(p[i]);
      std::vector<double> row(K);
      for (std::size_t k = 0; k < K; ++k)
        row[k] = static_cast<double>(result.probs.values()[i * K + k]);
      scores.push_back(std::move(row));
    }
  }
  return compute_metrics(truth, pred, scores, data.num_classes(), data.class_names);
}

// ---------------------------------------------------------------------------
// Stratified k-fold cross-validation: one independently initialized and
// trained model per fold, then mean and sample standard deviation per metric.
// ---------------------------------------------------------------------------

struct CrossvalSummary {
  std::vector<double> mean, stdev;  // accuracy, precision, recall, f1, auc
};

struct CrossvalResult {
  std::vector<MetricsReport> folds;
  CrossvalSummary summary;
};

inline CrossvalSummary summarize_folds(const std::vector<MetricsReport>& folds) {
  auto metric_row = [](const MetricsReport& r) {
    return std::vector<double>{r.accuracy, r.weighted.precision, r.weighted.recall,
                               r.weighted.f1, r.auc_macro};
  };
  CrossvalSummary s;
  const std::size_t n = folds.size();
  if (n == 0) return s;
  const std::size_t dims = metric_row(folds[0]).size();
  s.mean.assign(dims, 0);
  s.stdev.assign(dims, 0);
  for (const auto& f : folds) {
    const auto row = metric_row(f);
    for (std::size_t d = 0; d < dims; ++d) s.mean[d] += row[d];
  }
  for (auto& v : s.mean) v /= static_cast<double>(n);
  if (n > 1) {
    for (const auto& f : folds) {
      const auto row = metric_row(f);
      for (std::size_t d = 0; d < dims; ++d)
        s.stdev[d] += (row[d] - s.mean[d]) * (row[d] - s.mean[d]);
    }
    for (auto& v : s.stdev) v = std::sqrt(v / static_cast<double>(n - 1));
  }
  return s;
}

template <typename T>
CrossvalResult crossval(const ModelConfig& model_cfg, const LoadedDataset<T>& data,
                        int k, const TrainConfig& train_cfg,
                        const std::function<void(int, const MetricsReport&)>& on_fold = {}) {
  const auto plans = kfold_plans(data.labels, k, train_cfg.seed, train_cfg.split_weights);
  CrossvalResult result;
  for (int f = 0; f < k; ++f) {
    ModelConfig cfg = model_cfg;
    cfg.seed = mix_seed(model_cfg.seed, 0xF07DULL + static_cast<std::uint64_t>(f));
    auto model = build_msadnet<T>(cfg);
    TrainConfig tc = train_cfg;
    tc.seed = mix_seed(train_cfg.seed, 0x7EA1ULL + static_cast<std::uint64_t>(f));
    auto fit_result = fit(model, data, plans[f], tc);
    auto metrics = evaluate(model, data, plans[f].test, tc.batch_size);
    metrics.seconds_per_epoch = fit_result.mean_seconds_per_epoch();
    if (on_fold) on_fold(f, metrics);
    result.folds.push_back(std::move(metrics));
  }
  result.summary = summarize_folds(result.folds);
  return result;
}

inline std::string crossval_text(const CrossvalResult& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << std::left << std::setw(12) << "fold" << std::right << std::setw(10) << "accuracy"
     << std::setw(11) << "precision" << std::setw(9) << "recall" << std::setw(10) << "f1"
     << std::setw(8) << "auc" << "\n";
  for (std::size_t f = 0; f < r.folds.size(); ++f) {
    const auto& m = r.folds[f];
    os << std::left << std::setw(12) << str("fold", f + 1) << std::right << std::setw(10)
       << m.accuracy << std::setw(11) << m.weighted.precision << std::setw(9)
       << m.weighted.recall << std::setw(10) << m.weighted.f1 << std::setw(8)
       << m.auc_macro << "\n";
  }
  if (!r.summary.mean.empty()) {
    const int widths[5] = {10, 11, 9, 10, 8};
    os << std::left << std::setw(12) << "mean" << std::right;
    for (std::size_t d = 0; d < r.summary.mean.size(); ++d)
      os << std::setw(widths[d]) << r.summary.mean[d];
    os << "\n" << std::left << std::setw(12) << "std" << std::right;
    for (std::size_t d = 0; d < r.summary.stdev.size(); ++d)
      os << std::setw(widths[d]) << r.summary.stdev[d];
    os << "\n";
  }
  return os.str();
}

inline json crossval_json(const CrossvalResult& r) {
  json folds = json::array();
  for (const auto& f : r.folds) folds.push_back(metrics_json(f));
  return json{{"folds", folds},
              {"metric_names", {"accuracy", "precision", "recall", "f1", "auc"}},
              {"mean", r.summary.mean},
              {"std", r.summary.stdev}};
}

// ---------------------------------------------------------------------------
// History files
// ---------------------------------------------------------------------------

inline std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os << "epoch,train_loss,train_acc,val_loss,val_acc,lr,secs\n";
  os << std::setprecision(10);
  for (const auto& e : history)
    os << e.epoch << ',' << e.train_loss << ',' << e.train_acc << ',' << e.val_loss
       << ',' << e.val_acc << ',' << e.lr << ',' << e.seconds << "\n";
  return os.str();
}

inline json history_json(const std::vector<EpochRecord>& history) {
  json arr = json::array();
  for (const auto& e : history)
    arr.push_back({{"epoch", e.epoch},
                   {"train_loss", e.train_loss},
                   {"train_acc", e.train_acc},
                   {"val_loss", e.val_loss},
                   {"val_acc", e.val_acc},
                   {"lr", e.lr},
                   {"secs", e.seconds}});
  return arr;
}

}  // namespace msad
