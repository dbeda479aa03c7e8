#include <catch2/catch_amalgamated.hpp>

#include "msadnet/synthetic.hpp"
#include "msadnet/train.hpp"
#include "support/tmpdir.hpp"

using namespace msad;

TEST_CASE("lr_at: fixed and adaptive schedules") {
  Schedule fixed{SchedulePolicy::Fixed, 1e-4, 7, 0.95};
  for (int e = 1; e <= 35; ++e) REQUIRE(lr_at(fixed, e) == 1e-4);

  Schedule adaptive{SchedulePolicy::Adaptive, 1e-4, 7, 0.95};
  for (int e = 1; e <= 7; ++e) REQUIRE(lr_at(adaptive, e) == 1e-4);
  REQUIRE(lr_at(adaptive, 8) == 1e-4 * 0.95);
  double want = 1e-4;
  for (int i = 0; i < 28; ++i) want *= 0.95;
  REQUIRE(lr_at(adaptive, 35) == want);
  REQUIRE(lr_at(adaptive, 35) ==
          Catch::Approx(1e-4 * std::pow(0.95, 28.0)).epsilon(1e-12));

  // non-increasing over epochs
  double prev = std::numeric_limits<double>::max();
  for (int e = 1; e <= 35; ++e) {
    REQUIRE(lr_at(adaptive, e) <= prev);
    prev = lr_at(adaptive, e);
  }
  REQUIRE_THROWS_AS(lr_at(adaptive, 0), ValueError);
}

TEST_CASE("adam_step: zero gradient, first-step oracle, determinism") {
  auto make_params = [](double init) {
    std::vector<std::pair<std::string, Tensor<double>>> params;
    Tensor<double> p(Shape{1}, init);
    p.set_requires_grad(true);
    params.emplace_back("w", p);
    return params;
  };

  // zero gradient leaves the parameter untouched while t advances
  auto params = make_params(1.5);
  AdamState<double> st;
  st.init(params);
  params[0].second.grad();  // allocate zeros
  adam_step(params, st, 0.1);
  REQUIRE(params[0].second.values()[0] == 1.5);
  REQUIRE(st.t == 1);

  // first step with g=1: bias-corrected ratio is 1, so the step is about -lr
  auto p2 = make_params(0.0);
  AdamState<double> st2;
  st2.init(p2);
  p2[0].second.grad()[0] = 1.0;
  adam_step(p2, st2, 0.01);
  REQUIRE(p2[0].second.values()[0] == Catch::Approx(-0.01).epsilon(1e-6));

  // identical runs, identical trajectories (bitwise)
  auto run = [&make_params]() {
    auto ps = make_params(0.3);
    AdamState<double> s;
    s.init(ps);
    Rng rng(99);
    std::vector<double> trace;
    for (int i = 0; i < 50; ++i) {
      ps[0].second.zero_grad();
      ps[0].second.grad()[0] = rng.uniform(-1, 1);
      adam_step(ps, s, 1e-3);
      trace.push_back(ps[0].second.values()[0]);
    }
    return trace;
  };
  REQUIRE(run() == run());

  // non-finite gradient aborts with diagnostics
  auto p3 = make_params(0.0);
  AdamState<double> st3;
  st3.init(p3);
  p3[0].second.grad()[0] = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(adam_step(p3, st3, 1e-3), TrainingDiverged);
}

TEST_CASE("stratified_split: fixtures and proportion property") {
  // 10 samples, 2 balanced classes, weights (0.6, 0.2, 0.2): 3/1/1 per class
  std::vector<int> labels{0, 0, 0, 0, 0, 1, 1, 1, 1, 1};
  auto plan = stratified_split(labels, {0.6, 0.2, 0.2}, 7);
  auto count_class = [](const std::vector<int>& lab,
                        const std::vector<std::size_t>& part, int c) {
    return std::count_if(part.begin(), part.end(),
                         [&](std::size_t i) { return lab[i] == c; });
  };
  for (int c : {0, 1}) {
    REQUIRE(count_class(labels, plan.train, c) == 3);
    REQUIRE(count_class(labels, plan.valid, c) == 1);
    REQUIRE(count_class(labels, plan.test, c) == 1);
  }

  // weights summing to 90 are normalized before allocation
  std::vector<int> one_class(9, 0);
  auto plan90 = stratified_split(one_class, {60, 20, 10}, 1);
  REQUIRE(plan90.train.size() == 6);
  REQUIRE(plan90.valid.size() == 2);
  REQUIRE(plan90.test.size() == 1);
  REQUIRE(plan90.weights[0] == Catch::Approx(6.0 / 9.0));

  // random 400-sample 4-class set: per-class proportions within one sample
  Rng rng(55);
  std::vector<int> big;
  for (int i = 0; i < 400; ++i) big.push_back(static_cast<int>(rng.uniform_index(4)));
  auto bp = stratified_split(big, {6, 2, 1}, 3);
  std::vector<std::size_t> class_total(4, 0);
  for (int l : big) class_total[l]++;
  const double w[3] = {6.0 / 9.0, 2.0 / 9.0, 1.0 / 9.0};
  const std::vector<std::size_t>* parts[3] = {&bp.train, &bp.valid, &bp.test};
  for (int c = 0; c < 4; ++c)
    for (int p = 0; p < 3; ++p) {
      const double exact = w[p] * static_cast<double>(class_total[c]);
      const double got = static_cast<double>(count_class(big, *parts[p], c));
      REQUIRE(std::abs(got - exact) < 1.0);
    }

  // partitions are disjoint and cover the set
  std::vector<char> seen(big.size(), 0);
  for (const auto* part : parts)
    for (std::size_t i : *part) {
      REQUIRE(!seen[i]);
      seen[i] = 1;
    }
  REQUIRE(std::count(seen.begin(), seen.end(), 1) == static_cast<long>(big.size()));

  // class with too few samples is rejected, naming the class
  std::vector<int> sparse{0, 0, 0, 1};
  REQUIRE_THROWS_WITH(stratified_split(sparse, {6, 2, 1}, 1),
                      Catch::Matchers::ContainsSubstring("class 1"));
}

TEST_CASE("kfold_plans: disjoint exhaustive stratified folds") {
  std::vector<int> labels;
  for (int i = 0; i < 100; ++i) labels.push_back(i % 4);
  auto plans = kfold_plans(labels, 5, 11);
  REQUIRE(plans.size() == 5);

  std::vector<int> covered(labels.size(), 0);
  for (const auto& plan : plans) {
    REQUIRE(plan.test.size() == 20);
    for (std::size_t i : plan.test) covered[i]++;
    // within a fold, train/valid/test are disjoint
    std::vector<char> seen(labels.size(), 0);
    for (const auto* part : {&plan.train, &plan.valid, &plan.test})
      for (std::size_t i : *part) {
        REQUIRE(!seen[i]);
        seen[i] = 1;
      }
  }
  for (int c : covered) REQUIRE(c == 1);  // test folds tile the dataset

  // per-fold class proportions within one of the global proportions
  for (const auto& plan : plans) {
    std::vector<int> cls(4, 0);
    for (std::size_t i : plan.test) cls[labels[i]]++;
    for (int c = 0; c < 4; ++c) REQUIRE(std::abs(cls[c] - 5) <= 1);
  }

  REQUIRE_THROWS_AS(kfold_plans(labels, 1, 3), ValueError);

  // seed change permutes membership but preserves stratification
  auto plans2 = kfold_plans(labels, 5, 12);
  bool differs = false;
  for (int f = 0; f < 5; ++f)
    if (plans2[f].test != plans[f].test) differs = true;
  REQUIRE(differs);
}

TEST_CASE("metrics: hand-computed confusion fixtures") {
  // [[2,0],[1,1]]: class-0 precision 2/3, recall 1, F1 0.8
  auto r = metrics_from_confusion({{2, 0}, {1, 1}});
  REQUIRE(r.per_class[0].precision == Catch::Approx(2.0 / 3.0).margin(1e-9));
  REQUIRE(r.per_class[0].recall == Catch::Approx(1.0).margin(1e-9));
  REQUIRE(r.per_class[0].f1 == Catch::Approx(0.8).margin(1e-9));
  REQUIRE(r.accuracy == Catch::Approx(0.75).margin(1e-9));
  REQUIRE(r.total() == 4);

  // perfect classifier
  std::vector<int> truth{0, 1, 2, 3, 0, 1, 2, 3};
  std::vector<std::vector<double>> scores;
  for (int t : truth) {
    std::vector<double> row(4, 0.0);
    row[t] = 1.0;
    scores.push_back(row);
  }
  auto perfect = compute_metrics(truth, truth, scores, 4);
  REQUIRE(perfect.accuracy == 1.0);
  REQUIRE(perfect.weighted.precision == Catch::Approx(1.0).margin(1e-9));
  REQUIRE(perfect.weighted.f1 == Catch::Approx(1.0).margin(1e-9));
  REQUIRE(perfect.auc_macro == Catch::Approx(1.0).margin(1e-9));

  // constant single-class predictor on a balanced 4-class set
  std::vector<int> constant(truth.size(), 0);
  auto c = compute_metrics(truth, constant, {}, 4);
  REQUIRE(c.accuracy == Catch::Approx(0.25).margin(1e-9));
  REQUIRE(c.per_class[0].f1 == Catch::Approx(0.4).margin(1e-9));
  REQUIRE(c.macro.f1 == Catch::Approx(0.1).margin(1e-9));
}

TEST_CASE("metrics: weighted recall equals accuracy on random confusions") {
  Rng rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t k = 2 + rng.uniform_index(5);
    std::vector<std::vector<std::size_t>> m(k, std::vector<std::size_t>(k, 0));
    for (std::size_t t = 0; t < k; ++t)
      for (std::size_t p = 0; p < k; ++p) m[t][p] = rng.uniform_index(20);
    m[0][0] += 1;  // non-empty
    auto r = metrics_from_confusion(m);
    REQUIRE(r.weighted.recall == Catch::Approx(r.accuracy).margin(1e-12));
  }
}

TEST_CASE("metrics: AUC fixtures with a known inversion") {
  // separable: AUC 1
  REQUIRE(auc_binary({0.9, 0.8, 0.7, 0.3}, {1, 1, 0, 0}) == Catch::Approx(1.0));
  // one of four pairs inverted: AUC 0.75
  REQUIRE(auc_binary({0.9, 0.4, 0.6, 0.2}, {1, 1, 0, 0}) == Catch::Approx(0.75));
  // all tied scores: AUC 0.5
  REQUIRE(auc_binary({0.5, 0.5, 0.5, 0.5}, {1, 1, 0, 0}) == Catch::Approx(0.5));
  // degenerate class: undefined
  REQUIRE(std::isnan(auc_binary({0.5, 0.6}, {1, 1})));
}

namespace {

/// Tiny in-memory blob dataset, learnable in a handful of steps.
LoadedDataset<double> toy_dataset(std::size_t per_class, std::size_t size,
                                  std::uint64_t seed) {
  SyntheticSpec spec;
  spec.num_classes = 4;
  spec.images_per_class = per_class;
  spec.image_size = size;
  spec.seed = seed;
  LoadedDataset<double> d;
  d.channels = 1;
  d.size_px = size;
  d.class_names = {"a", "b", "c", "d"};
  for (std::size_t c = 0; c < 4; ++c) {
    const ClassTexture tex = texture_archetype(c);
    for (std::size_t i = 0; i < per_class; ++i) {
      Rng rng(mix_seed(seed, c * 1000 + i));
      const int quadrant = static_cast<int>(rng.uniform_index(4));
      auto canvas = detail::render_synthetic(spec, tex, rng, quadrant);
      d.images.emplace_back(canvas.begin(), canvas.end());
      d.labels.push_back(static_cast<int>(c));
      d.partitions.push_back(Partition::Unassigned);
      d.quadrants.push_back(quadrant);
    }
  }
  return d;
}

ModelConfig toy_model_config(std::size_t input) {
  ModelConfig cfg;
  cfg.input_size = input;
  cfg.block_filters = {4, 6, 8};
  cfg.dense1_plan = {8, 8, 4, 12, 12, 12};
  cfg.dense2_plan = {12, 12, 6, 16, 16, 16};
  cfg.sam_filters = 8;
  cfg.sam_tap = "block2_out";
  cfg.precision = "float64";
  cfg.bn_momentum = 0.9;
  return cfg;
}

}  // namespace

TEST_CASE("fit: reproducible histories and early stopping behavior") {
  auto data = toy_dataset(6, 64, 5);
  auto plan = stratified_split(data.labels, {6, 2, 1}, 5);

  TrainConfig tc;
  tc.batch_size = 8;
  tc.base_lr = 1e-3;
  tc.epochs = 3;
  tc.seed = 5;

  auto run = [&]() {
    auto cfg = toy_model_config(64);
    cfg.seed = 5;
    auto model = build_msadnet<double>(cfg);
    auto result = fit(model, data, plan, tc);
    std::vector<double> params;
    for (auto& [name, t] : model.parameters())
      params.insert(params.end(), t.values().begin(), t.values().end());
    return std::make_pair(result, params);
  };
  auto [r1, p1] = run();
  auto [r2, p2] = run();
  REQUIRE(p1 == p2);  // bit-identical trajectories in double precision
  REQUIRE(r1.history.size() == r2.history.size());
  for (std::size_t e = 0; e < r1.history.size(); ++e) {
    REQUIRE(r1.history[e].train_loss == r2.history[e].train_loss);
    REQUIRE(r1.history[e].val_loss == r2.history[e].val_loss);
  }

  // early stopping: halts within patience epochs of the best validation loss
  TrainConfig es = tc;
  es.epochs = 40;
  es.early_stopping = true;
  es.patience = 3;
  auto cfg = toy_model_config(64);
  auto model = build_msadnet<double>(cfg);
  auto result = fit(model, data, plan, es);
  int best = 0;
  double best_loss = std::numeric_limits<double>::max();
  for (const auto& e : result.history)
    if (e.val_loss < best_loss) {
      best_loss = e.val_loss;
      best = e.epoch;
    }
  REQUIRE(result.best_epoch == best);
  REQUIRE(static_cast<int>(result.history.size()) - best <= es.patience);

  // restored parameters reproduce the best validation loss
  auto [loss_now, acc_now] =
      detail::eval_loss_acc(model, data, plan.valid, es.batch_size);
  REQUIRE(loss_now == Catch::Approx(best_loss).margin(1e-9));
}

TEST_CASE("fit: history records the schedule and wall-clock seconds") {
  auto data = toy_dataset(3, 64, 6);
  auto plan = stratified_split(data.labels, {6, 2, 1}, 6);
  TrainConfig tc;
  tc.batch_size = 8;
  tc.base_lr = 1e-4;
  tc.schedule = SchedulePolicy::Adaptive;
  tc.epochs = 9;
  tc.seed = 6;
  auto cfg = toy_model_config(64);
  auto model = build_msadnet<double>(cfg);
  auto result = fit(model, data, plan, tc);
  REQUIRE(result.history.size() == 9);
  for (int e = 1; e <= 7; ++e) REQUIRE(result.history[e - 1].lr == 1e-4);
  REQUIRE(result.history[7].lr == 1e-4 * 0.95);
  REQUIRE(result.history[8].lr == 1e-4 * 0.95 * 0.95);
  for (const auto& e : result.history) REQUIRE(e.seconds > 0);
  REQUIRE(result.mean_seconds_per_epoch() > 0);

  const std::string csv = history_csv(result.history);
  REQUIRE(csv.rfind("epoch,train_loss,train_acc,val_loss,val_acc,lr,secs\n", 0) == 0);
  REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 10);
}

TEST_CASE("crossval: per-fold models and mean/std summary") {
  auto data = toy_dataset(6, 64, 9);
  auto cfg = toy_model_config(64);
  TrainConfig tc;
  tc.batch_size = 8;
  tc.base_lr = 1e-3;
  tc.epochs = 2;
  tc.seed = 9;
  auto result = crossval(cfg, data, 3, tc);
  REQUIRE(result.folds.size() == 3);
  REQUIRE(result.summary.mean.size() == 5);

  // spreadsheet oracle for mean and sample std over the fold accuracies
  double mean = 0;
  for (const auto& f : result.folds) mean += f.accuracy;
  mean /= 3.0;
  double var = 0;
  for (const auto& f : result.folds) var += (f.accuracy - mean) * (f.accuracy - mean);
  const double stdev = std::sqrt(var / 2.0);
  REQUIRE(result.summary.mean[0] == Catch::Approx(mean).margin(1e-12));
  REQUIRE(result.summary.stdev[0] == Catch::Approx(stdev).margin(1e-12));

  const std::string text = crossval_text(result);
  REQUIRE(text.find("fold1") != std::string::npos);
  REQUIRE(text.find("fold3") != std::string::npos);
  REQUIRE(text.find("mean") != std::string::npos);
  REQUIRE(text.find("std") != std::string::npos);
}

TEST_CASE("crossval summary: identical metrics give zero std") {
  MetricsReport m = metrics_from_confusion({{3, 0}, {0, 3}});
  m.auc_macro = 1.0;
  auto s = summarize_folds({m, m, m});
  for (double v : s.stdev) REQUIRE(v == 0.0);
}
