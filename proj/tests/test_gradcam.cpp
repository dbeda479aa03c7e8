#include <catch2/catch_amalgamated.hpp>

#include "msadnet/gradcam.hpp"

using namespace msad;

namespace {

ModelConfig cam_config() {
  ModelConfig cfg;
  cfg.input_size = 112;
  cfg.block_filters = {4, 6, 8};
  cfg.dense1_plan = {8, 8, 4, 12, 12, 12};
  cfg.dense2_plan = {12, 12, 6, 16, 16, 16};
  cfg.sam_filters = 8;
  cfg.precision = "float64";
  return cfg;
}

Tensor<double> random_image(std::uint64_t seed, std::size_t size) {
  Rng rng(seed);
  Tensor<double> t(Shape{1, 1, size, size});
  for (auto& v : t.values()) v = rng.uniform(0, 1);
  return t;
}

}  // namespace

TEST_CASE("gradcam: values lie in [0,1] with max 1 when active") {
  auto model = build_msadnet<double>(cam_config());
  auto img = random_image(3, 112);
  auto heat = gradcam(model, img, 0, "block5_out");
  REQUIRE(heat.size == 112);
  REQUIRE(heat.values.size() == 112 * 112);
  float mx = 0;
  for (float v : heat.values) {
    REQUIRE(v >= 0.0f);
    REQUIRE(v <= 1.0f);
    mx = std::max(mx, v);
  }
  REQUIRE(mx == 1.0f);
}

TEST_CASE("gradcam: zero-gradient target yields the all-zero map") {
  auto model = build_msadnet<double>(cam_config());
  // zero the classifier row for class 1: its logit no longer depends on the tap
  auto& dense = model.node_params[model.layer_named("head/dense").id];
  const std::size_t D = model.layer_named("head/dense").in_channels;
  for (std::size_t d = 0; d < D; ++d) dense.kernel.values()[1 * D + d] = 0.0;
  dense.bias.values()[1] = 0.0;

  auto heat = gradcam(model, random_image(5, 112), 1, "block5_out");
  for (float v : heat.values) REQUIRE(v == 0.0f);
}

TEST_CASE("gradcam: deterministic and invariant to positive logit scaling") {
  auto model = build_msadnet<double>(cam_config());
  auto img = random_image(7, 112);
  auto h1 = gradcam(model, img, 2, "block5_out");
  auto h2 = gradcam(model, img, 2, "block5_out");
  REQUIRE(h1.values == h2.values);

  auto& dense = model.node_params[model.layer_named("head/dense").id];
  for (auto& v : dense.kernel.values()) v *= 3.5;
  for (auto& v : dense.bias.values()) v *= 3.5;
  auto h3 = gradcam(model, img, 2, "block5_out");
  for (std::size_t i = 0; i < h1.values.size(); ++i)
    REQUIRE(h3.values[i] == Catch::Approx(h1.values[i]).margin(1e-5));
}

TEST_CASE("gradcam: tap and class validation") {
  auto model = build_msadnet<double>(cam_config());
  auto img = random_image(9, 112);
  REQUIRE_THROWS_WITH(gradcam(model, img, 0, "nope"),
                      Catch::Matchers::ContainsSubstring("available"));
  REQUIRE_THROWS_AS(gradcam(model, img, 7, "block5_out"), ValueError);
  // rank-2 taps cannot back a spatial map
  REQUIRE_THROWS_AS(gradcam(model, img, 0, "gap_out"), ValueError);
  // alternative spatial taps work
  REQUIRE_NOTHROW(gradcam(model, img, 0, "block4_mid"));
  REQUIRE_NOTHROW(gradcam(model, img, 0, "sam_out"));
}

TEST_CASE("overlay: alpha blend endpoints") {
  ImageBuffer src;
  src.width = src.height = 8;
  src.channels = 1;
  src.samples.assign(64, 100);

  Heatmap heat;
  heat.size = 8;
  heat.values.assign(64, 0.0f);
  heat.values[10] = 1.0f;

  // alpha 0: the (colorized) source unchanged
  auto o0 = overlay(src, heat, 0.0);
  REQUIRE(o0.channels == 3);
  for (std::size_t i = 0; i < 64; ++i)
    for (int c = 0; c < 3; ++c) REQUIRE(o0.samples[i * 3 + c] == 100);

  // alpha 1: pure colormap
  auto o1 = overlay(src, heat, 1.0);
  const auto& cmap = heat_colormap();
  REQUIRE(o1.samples[10 * 3 + 0] == cmap[255].r);
  REQUIRE(o1.samples[10 * 3 + 1] == cmap[255].g);
  REQUIRE(o1.samples[10 * 3 + 2] == cmap[255].b);
  REQUIRE(o1.samples[0] == cmap[0].r);

  // in between: linear blend
  auto oh = overlay(src, heat, 0.5);
  const long want = std::lround(0.5 * 100 + 0.5 * static_cast<double>(cmap[0].r));
  REQUIRE(oh.samples[0] == static_cast<std::uint8_t>(want));

  // all-zero heatmap keeps the source up to the blend with the low end of
  // the colormap
  Heatmap zero;
  zero.size = 8;
  zero.values.assign(64, 0.0f);
  auto oz = overlay(src, zero, 0.0);
  for (std::size_t i = 0; i < 64; ++i) REQUIRE(oz.samples[i * 3] == 100);

  Heatmap wrong;
  wrong.size = 4;
  wrong.values.assign(16, 0.0f);
  REQUIRE_THROWS_AS(overlay(src, wrong, 0.4), ShapeError);
}

TEST_CASE("colormap: 256 entries running blue to red") {
  const auto& cmap = heat_colormap();
  REQUIRE(cmap[0].b == 255);
  REQUIRE(cmap[0].r == 0);
  REQUIRE(cmap[255].r == 255);
  REQUIRE(cmap[255].b == 0);
}
