#include <catch2/catch_amalgamated.hpp>

#include "msadnet/model.hpp"
#include "msadnet/ops.hpp"

using namespace msad;

namespace {

Tensor<double> filled(Shape shape, std::vector<double> v) {
  return Tensor<double>(std::move(shape), std::move(v));
}

Tensor<double> randu(Rng& rng, Shape shape, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("conv2d: nine ones sum to nine") {
  auto x = Tensor<double>(Shape{1, 1, 3, 3}, 1.0);
  auto k = Tensor<double>(Shape{1, 1, 3, 3}, 1.0);
  auto b = Tensor<double>(Shape{1}, 0.0);
  auto y = conv2d(x, k, b, ConvOpts{1, Padding::Valid, 1});
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  REQUIRE(y.item() == Catch::Approx(9.0));
}

TEST_CASE("conv2d: dilation 2 equals the zero-interleaved 5x5 kernel") {
  Rng rng(11);
  auto x = randu(rng, {2, 3, 9, 9});
  auto k3 = randu(rng, {4, 3, 3, 3});
  auto b = randu(rng, {4});

  // 5x5 kernel whose even rows/columns carry the 3x3 taps, zeros elsewhere
  Tensor<double> k5(Shape{4, 3, 5, 5}, 0.0);
  for (std::size_t f = 0; f < 4; ++f)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
          k5.values()[((f * 3 + c) * 5 + 2 * i) * 5 + 2 * j] =
              k3.values()[((f * 3 + c) * 3 + i) * 3 + j];

  for (auto padding : {Padding::Valid, Padding::Same}) {
    auto dil = conv2d(x, k3, b, ConvOpts{1, padding, 2});
    auto full = conv2d(x, k5, b, ConvOpts{1, padding, 1});
    REQUIRE(dil.shape() == full.shape());
    for (std::size_t i = 0; i < dil.size(); ++i)
      REQUIRE(dil.values()[i] == Catch::Approx(full.values()[i]).margin(1e-6));
  }
}

TEST_CASE("conv2d: effective kernel extent and error paths") {
  auto x = Tensor<double>(Shape{1, 1, 4, 4}, 1.0);
  auto k = Tensor<double>(Shape{1, 1, 3, 3}, 1.0);
  auto b = Tensor<double>(Shape{1}, 0.0);
  // effective extent of 3x3 at dilation 2 is 5 > 4
  REQUIRE_THROWS_AS(conv2d(x, k, b, ConvOpts{1, Padding::Valid, 2}), DimensionError);

  auto bad_k = Tensor<double>(Shape{1, 2, 3, 3}, 1.0);
  REQUIRE_THROWS_WITH(conv2d(x, bad_k, b, ConvOpts{}),
                      Catch::Matchers::ContainsSubstring("axis 1"));
}

TEST_CASE("conv2d: same padding preserves spatial size at stride 1") {
  Rng rng(3);
  auto x = randu(rng, {1, 2, 7, 5});
  auto k = randu(rng, {3, 2, 3, 3});
  auto b = randu(rng, {3});
  for (std::size_t dil : {std::size_t(1), std::size_t(2)}) {
    auto y = conv2d(x, k, b, ConvOpts{1, Padding::Same, dil});
    REQUIRE(y.shape() == Shape{1, 3, 7, 5});
  }
}

TEST_CASE("conv1x1: dot product and delegation to conv2d") {
  auto x = filled({1, 2, 1, 1}, {3, 5});
  auto k = filled({1, 2, 1, 1}, {1, 1});
  auto b = Tensor<double>(Shape{1}, 0.0);
  REQUIRE(conv1x1(x, k, b).item() == Catch::Approx(8.0));

  Rng rng(5);
  auto xr = randu(rng, {2, 5, 6, 4});
  auto kr = randu(rng, {3, 5, 1, 1});
  auto br = randu(rng, {3});
  auto a = conv1x1(xr, kr, br);
  auto c = conv2d(xr, kr, br, ConvOpts{1, Padding::Valid, 1});
  REQUIRE(a.shape() == c.shape());
  for (std::size_t i = 0; i < a.size(); ++i)
    REQUIRE(a.values()[i] == Catch::Approx(c.values()[i]).margin(1e-12));
}

TEST_CASE("conv1x1: 128->64 layer holds 8256 trainable values") {
  Tensor<double> k(Shape{64, 128, 1, 1});
  Tensor<double> b(Shape{64});
  REQUIRE(k.size() + b.size() == 8256);
}

TEST_CASE("depthwise_conv2d: trivial case and composition oracle") {
  auto x = Tensor<double>(Shape{1, 1, 3, 3}, 1.0);
  auto dk = Tensor<double>(Shape{1, 3, 3}, 1.0);
  auto pk = Tensor<double>(Shape{1, 1, 1, 1}, 1.0);
  auto b = Tensor<double>(Shape{1}, 0.0);
  REQUIRE(depthwise_conv2d(x, dk, pk, b, Padding::Valid).item() == Catch::Approx(9.0));

  Rng rng(7);
  const std::size_t C = 4, F = 6, k = 5;
  auto xr = randu(rng, {1, C, 8, 8});
  auto dkr = randu(rng, {C, k, k});
  auto pkr = randu(rng, {F, C, 1, 1});
  auto br = randu(rng, {F});

  auto got = depthwise_conv2d(xr, dkr, pkr, br, Padding::Valid);

  // oracle: one conv2d per channel with that channel's plane, then conv1x1
  const std::size_t oh = 8 - k + 1, ow = 8 - k + 1;
  Tensor<double> stacked(Shape{1, C, oh, ow});
  for (std::size_t c = 0; c < C; ++c) {
    Tensor<double> xc(Shape{1, 1, 8, 8});
    std::copy_n(xr.values().begin() + c * 64, 64, xc.values().begin());
    Tensor<double> kc(Shape{1, 1, k, k});
    std::copy_n(dkr.values().begin() + c * k * k, k * k, kc.values().begin());
    auto yc = conv2d(xc, kc, Tensor<double>(Shape{1}, 0.0), ConvOpts{1, Padding::Valid, 1});
    std::copy_n(yc.values().begin(), oh * ow, stacked.values().begin() + c * oh * ow);
  }
  auto want = conv1x1(stacked, pkr, br);
  REQUIRE(got.shape() == want.shape());
  for (std::size_t i = 0; i < got.size(); ++i)
    REQUIRE(got.values()[i] == Catch::Approx(want.values()[i]).margin(1e-6));
}

TEST_CASE("depthwise_conv2d: channel mismatch is a contract violation") {
  auto x = Tensor<double>(Shape{1, 3, 6, 6}, 1.0);
  auto dk = Tensor<double>(Shape{2, 3, 3}, 1.0);
  auto pk = Tensor<double>(Shape{1, 3, 1, 1}, 1.0);
  auto b = Tensor<double>(Shape{1}, 0.0);
  REQUIRE_THROWS_AS(depthwise_conv2d(x, dk, pk, b, Padding::Same), ShapeError);
}

TEST_CASE("relu: clamps negatives and is idempotent") {
  auto x = filled({3}, {-1, 0, 2});
  auto y = relu(x);
  REQUIRE(y.values() == std::vector<double>{0, 0, 2});
  auto yy = relu(y);
  REQUIRE(yy.values() == y.values());
}

TEST_CASE("max_pool2d: window max, constants, and the 224 -> 7 trace") {
  auto x = filled({1, 1, 2, 2}, {1, 2, 3, 4});
  REQUIRE(max_pool2d(x).item() == 4.0);

  auto c = Tensor<double>(Shape{2, 3, 6, 6}, 2.5);
  auto pc = max_pool2d(c);
  for (double v : pc.values()) REQUIRE(v == 2.5);

  Tensor<double> big(Shape{1, 1, 224, 224}, 1.0);
  Tensor<double> cur = big;
  for (int i = 0; i < 5; ++i) cur = max_pool2d(cur);
  REQUIRE(cur.shape() == Shape{1, 1, 7, 7});

  auto tiny = Tensor<double>(Shape{1, 1, 1, 4}, 0.0);
  REQUIRE_THROWS_AS(max_pool2d(tiny), DimensionError);
}

TEST_CASE("max_pool2d: odd trailing row/column is dropped") {
  Tensor<double> x(Shape{1, 1, 5, 5});
  for (std::size_t i = 0; i < 25; ++i) x.values()[i] = static_cast<double>(i);
  auto y = max_pool2d(x);
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  // last row/column (values 20..24 and the x=4 column) never participate
  REQUIRE(y.values() == std::vector<double>{6, 8, 16, 18});
}

TEST_CASE("global_avg_pool: spatial means") {
  auto c = Tensor<double>(Shape{1, 2, 3, 3}, 1.25);
  auto g = global_avg_pool(c);
  REQUIRE(g.shape() == Shape{1, 2});
  REQUIRE(g.values()[0] == Catch::Approx(1.25));

  Tensor<double> seq(Shape{1, 1, 7, 7});
  for (std::size_t i = 0; i < 49; ++i) seq.values()[i] = static_cast<double>(i + 1);
  REQUIRE(global_avg_pool(seq).item() == Catch::Approx(25.0));

  Tensor<double> wide(Shape{1, 224, 7, 7}, 0.5);
  REQUIRE(global_avg_pool(wide).shape() == Shape{1, 224});
}

TEST_CASE("batch_norm: train-mode statistics and affine transform") {
  Rng rng(9);
  const std::size_t C = 3;
  Tensor<double> x(Shape{4, C, 5, 5});
  for (auto& v : x.values()) v = rng.uniform(-3, 3);
  auto st = make_batch_norm_state<double>(C);

  auto y = batch_norm(x, st, BnMode::Train);
  const std::size_t P = 25, m = 4 * P;
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0, var = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < P; ++i) mean += y.values()[(n * C + c) * P + i];
    mean /= static_cast<double>(m);
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < P; ++i) {
        const double d = y.values()[(n * C + c) * P + i] - mean;
        var += d * d;
      }
    var /= static_cast<double>(m);
    REQUIRE(mean == Catch::Approx(0.0).margin(1e-5));
    // normalization uses 1/sqrt(var + eps), so the output variance sits just
    // under 1 by a factor var/(var+eps)
    REQUIRE(var == Catch::Approx(1.0).margin(2e-3));
  }

  // scale and shift on standardized input
  auto st2 = make_batch_norm_state<double>(C, 1e-10);
  for (auto& v : st2.gamma.values()) v = 2.0;
  for (auto& v : st2.beta.values()) v = 3.0;
  auto y2 = batch_norm(x, st2, BnMode::Train);
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0, var = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < P; ++i) mean += y2.values()[(n * C + c) * P + i];
    mean /= static_cast<double>(m);
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < P; ++i) {
        const double d = y2.values()[(n * C + c) * P + i] - mean;
        var += d * d;
      }
    var /= static_cast<double>(m);
    REQUIRE(mean == Catch::Approx(3.0).margin(1e-6));
    REQUIRE(std::sqrt(var) == Catch::Approx(2.0).margin(1e-6));
  }
}

TEST_CASE("batch_norm: channel mismatch and zero variance") {
  auto st = make_batch_norm_state<double>(2);
  auto x = Tensor<double>(Shape{1, 3, 2, 2}, 1.0);
  REQUIRE_THROWS_AS(batch_norm(x, st, BnMode::Train), ShapeError);

  auto flat = Tensor<double>(Shape{1, 2, 2, 2}, 5.0);  // zero variance per channel
  auto y = batch_norm(flat, st, BnMode::Train);
  for (double v : y.values()) REQUIRE(std::isfinite(v));
}

TEST_CASE("batch_norm: infer mode uses running statistics") {
  auto st = make_batch_norm_state<double>(1);
  st.running_mean.values()[0] = 2.0;
  st.running_var.values()[0] = 4.0;
  auto x = Tensor<double>(Shape{1, 1, 1, 2}, std::vector<double>{2.0, 4.0});
  auto y = batch_norm(x, st, BnMode::Infer);
  const double istd = 1.0 / std::sqrt(4.0 + 1e-3);
  REQUIRE(y.values()[0] == Catch::Approx(0.0).margin(1e-12));
  REQUIRE(y.values()[1] == Catch::Approx(2.0 * istd));
}

TEST_CASE("concat_channels: widths add, empty is identity, slices recover") {
  auto a = Tensor<double>(Shape{1, 224}, 0.5);
  auto b = Tensor<double>(Shape{1, 96}, -0.5);
  auto y = concat_channels(a, b);
  REQUIRE(y.shape() == Shape{1, 320});

  auto empty = Tensor<double>(Shape{1, 0});
  auto same = concat_channels(a, empty);
  REQUIRE(same.shape() == a.shape());
  REQUIRE(same.values() == a.values());

  Rng rng(13);
  auto a4 = randu(rng, {2, 3, 4, 4});
  auto b4 = randu(rng, {2, 2, 4, 4});
  auto y4 = concat_channels(a4, b4);
  REQUIRE(y4.shape() == Shape{2, 5, 4, 4});
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t i = 0; i < 3 * 16; ++i)
      REQUIRE(y4.values()[n * 5 * 16 + i] == a4.values()[n * 3 * 16 + i]);
    for (std::size_t i = 0; i < 2 * 16; ++i)
      REQUIRE(y4.values()[n * 5 * 16 + 3 * 16 + i] == b4.values()[n * 2 * 16 + i]);
  }

  auto bad = Tensor<double>(Shape{2, 2, 5, 4});
  REQUIRE_THROWS_AS(concat_channels(a4, bad), ShapeError);
}

TEST_CASE("add: identity and shape contract") {
  Rng rng(21);
  auto x = randu(rng, {2, 3});
  auto z = Tensor<double>(Shape{2, 3}, 0.0);
  auto y = add(x, z);
  REQUIRE(y.values() == x.values());
  REQUIRE_THROWS_AS(add(x, Tensor<double>(Shape{3, 2}, 0.0)), ShapeError);
}

TEST_CASE("dense_softmax: uniform rows under zero logits, shift invariance") {
  Rng rng(23);
  auto x = randu(rng, {3, 5});
  auto w = Tensor<double>(Shape{4, 5}, 0.0);
  auto b = Tensor<double>(Shape{4}, 0.0);
  auto p = dense_softmax(x, w, b);
  for (double v : p.values()) REQUIRE(v == Catch::Approx(0.25).margin(1e-12));

  auto logits = randu(rng, {4, 6}, -3, 3);
  auto p1 = softmax(logits);
  for (std::size_t n = 0; n < 4; ++n) {
    double s = 0;
    for (std::size_t k = 0; k < 6; ++k) s += p1.values()[n * 6 + k];
    REQUIRE(s == Catch::Approx(1.0).margin(1e-6));
  }
  auto shifted = logits.clone_detached();
  for (auto& v : shifted.values()) v += 123.5;
  auto p2 = softmax(shifted);
  for (std::size_t i = 0; i < p1.size(); ++i)
    REQUIRE(p1.values()[i] == Catch::Approx(p2.values()[i]).margin(1e-6));
}

TEST_CASE("cce_loss: fixtures and contracts") {
  // uniform probabilities over 4 classes
  auto probs = Tensor<double>(Shape{2, 4}, 0.25);
  auto onehot = make_onehot<double>({0, 3}, 4);
  REQUIRE(cce_loss(probs, onehot).item() == Catch::Approx(std::log(4.0)).margin(1e-12));

  // perfect prediction: loss bounded by the clamp
  auto perfect = Tensor<double>(Shape{1, 2}, std::vector<double>{1.0, 0.0});
  auto y = make_onehot<double>({0}, 2);
  const double loss = cce_loss(perfect, y).item();
  REQUIRE(loss >= 0.0);
  REQUIRE(loss <= -std::log(1.0 - kCceEpsilon) + 1e-15);

  auto bad = Tensor<double>(Shape{1, 2}, std::vector<double>{0.5, 0.5});
  auto not_onehot = Tensor<double>(Shape{1, 2}, std::vector<double>{0.5, 0.5});
  REQUIRE_THROWS_AS(cce_loss(bad, not_onehot), ValueError);

  auto bad_sum = Tensor<double>(Shape{1, 2}, std::vector<double>{0.9, 0.9});
  REQUIRE_THROWS_AS(cce_loss(bad_sum, y), ValueError);
}

TEST_CASE("cce_loss: analytic (p - y)/N logit gradient matches autodiff") {
  Rng rng(31);
  const std::size_t N = 3, K = 4;
  Tensor<double> logits(Shape{N, K});
  for (auto& v : logits.values()) v = rng.uniform(-2, 2);
  logits.set_requires_grad(true);
  std::vector<int> labels{1, 3, 0};
  auto onehot = make_onehot<double>(labels, K);

  auto p = softmax(logits);
  auto loss = cce_loss(p, onehot);
  backward(loss);

  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k) {
      const double want =
          (p.values()[n * K + k] - onehot.values()[n * K + k]) / static_cast<double>(N);
      REQUIRE(logits.grad()[n * K + k] == Catch::Approx(want).margin(1e-6));
    }
}

TEST_CASE("backward: sum gradient, diamond fan-out, untaped error") {
  Rng rng(37);
  auto x = randu(rng, {2, 3});
  x.set_requires_grad(true);
  auto loss = sum(x);
  backward(loss);
  for (double g : x.grad()) REQUIRE(g == 1.0);

  // diamond: loss = sum(relu(x) + x.*x); gradients add across the fan-out
  auto x2 = randu(rng, {4}, 0.1, 2.0);
  x2.set_requires_grad(true);
  auto f = relu(x2);
  auto g = mul(x2, x2);
  auto loss2 = sum(add(f, g));
  backward(loss2);
  for (std::size_t i = 0; i < 4; ++i)
    REQUIRE(x2.grad()[i] == Catch::Approx(1.0 + 2.0 * x2.values()[i]).margin(1e-12));

  auto leaf = Tensor<double>(Shape{1}, 1.0);
  REQUIRE_THROWS_AS(backward(leaf), ValueError);
}

TEST_CASE("forward passes are deterministic and infer mode is batch-invariant") {
  ModelConfig cfg;
  cfg.input_size = 64;
  cfg.block_filters = {4, 6, 8};
  cfg.dense1_plan = {8, 8, 4, 12, 12, 12};
  cfg.dense2_plan = {12, 12, 6, 16, 16, 16};
  cfg.sam_filters = 8;
  cfg.sam_tap = "block2_out";
  auto model = build_msadnet<double>(cfg);

  Rng rng(41);
  Tensor<double> img(Shape{1, 1, 64, 64});
  for (auto& v : img.values()) v = rng.uniform(0, 1);
  Tensor<double> batch(Shape{2, 1, 64, 64});
  std::copy(img.values().begin(), img.values().end(), batch.values().begin());
  std::copy(img.values().begin(), img.values().end(), batch.values().begin() + 64 * 64);

  NoGradGuard guard;
  auto r1 = model.forward(batch, BnMode::Infer);
  auto r2 = model.forward(batch, BnMode::Infer);
  REQUIRE(r1.probs.values() == r2.probs.values());  // bit-identical

  // identical rows in, identical probability rows out
  const std::size_t K = cfg.num_classes;
  for (std::size_t k = 0; k < K; ++k)
    REQUIRE(r1.probs.values()[k] == r1.probs.values()[K + k]);
}

TEST_CASE("kernels are bit-identical for any worker-thread count") {
  Rng rng(47);
  auto x = randu(rng, {2, 8, 32, 32});
  auto k = randu(rng, {8, 8, 3, 3});
  auto b = randu(rng, {8});
  x.set_requires_grad(true);
  k.set_requires_grad(true);
  b.set_requires_grad(true);

  auto run = [&](int threads) {
    set_num_threads(threads);
    x.zero_grad();
    k.zero_grad();
    b.zero_grad();
    auto y = conv2d(x, k, b, ConvOpts{1, Padding::Same, 1});
    auto loss = sum(mul(y, y));
    backward(loss);
    set_num_threads(1);
    return std::make_tuple(y.values(), x.grad(), k.grad(), b.grad());
  };
  auto r1 = run(1);
  auto r3 = run(3);
  REQUIRE(std::get<0>(r1) == std::get<0>(r3));
  REQUIRE(std::get<1>(r1) == std::get<1>(r3));
  REQUIRE(std::get<2>(r1) == std::get<2>(r3));
  REQUIRE(std::get<3>(r1) == std::get<3>(r3));
}

TEST_CASE("finite-value debug check") {
  Tensor<double> ok(Shape{3}, 1.0);
  REQUIRE_NOTHROW(ok.assert_finite("ok"));
  Tensor<double> bad(Shape{3}, 1.0);
  bad.values()[1] = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(bad.assert_finite("bad"), ValueError);
  bad.values()[1] = std::numeric_limits<double>::infinity();
  REQUIRE_THROWS_AS(bad.assert_finite("bad"), ValueError);
}

TEST_CASE("full model backward: finite gradients covering every parameter") {
  ModelConfig cfg;  // defaults: 224 input, full widths
  auto model = build_msadnet<float>(cfg);
  Rng rng(43);
  Tensor<float> batch(Shape{2, 1, 224, 224});
  for (auto& v : batch.values()) v = static_cast<float>(rng.uniform(0, 1));

  auto result = model.forward(batch, BnMode::Train);
  auto loss = cce_loss(result.probs, make_onehot<float>({0, 2}, 4));
  backward(loss);

  std::size_t grad_count = 0;
  for (auto& [name, t] : model.parameters()) {
    REQUIRE(t.has_grad());
    REQUIRE(all_finite(t.grad()));
    grad_count += t.grad().size();
  }
  REQUIRE(grad_count == model.trainable_count());
}
