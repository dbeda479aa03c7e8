#pragma once

#include <array>
#include <map>
#include <optional>

#include <nlohmann/json.hpp>

#include "msadnet/ops.hpp"

namespace msad {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Declarative layer specs and the builder that assembles the MSAD-Net
// topology: three conv/bn/pool blocks (filters 32/64/96), two dense modules
// with a 1x1 bottleneck sandwich, a skip connection from block 3 into block 5,
// and a parallel spatial-attention branch based on dilated convolution.
// ---------------------------------------------------------------------------

enum class LayerKind {
  Input,
  Conv,      // square k, optional dilation 1
  Conv1x1,
  Dwsc,      // depthwise spatial + pointwise mix
  DilConv,   // k=3, dilation >= 2
  BatchNorm,
  Relu,
  MaxPool,   // 2x2 stride 2
  GlobalAvgPool,
  Concat,
  Add,
  Dense,
  Softmax,
};

enum class PathTag { Base, Skip, Sam, Head };

inline const char* path_name(PathTag p) {
  switch (p) {
    case PathTag::Base: return "base";
    case PathTag::Skip: return "skip";
    case PathTag::Sam: return "sam";
    case PathTag::Head: return "head";
  }
  return "?";
}

struct LayerSpec {
  int id = -1;
  std::string name;
  LayerKind kind = LayerKind::Input;
  PathTag path = PathTag::Base;
  std::vector<int> sources;
  std::size_t filters = 0;   // f1 / f_1x1 / B / class count
  std::size_t kernel = 0;
  std::size_t stride = 1;
  Padding padding = Padding::Same;
  std::size_t dilation = 1;
  // inferred at build time; spatial extents are 0 for rank-2 outputs
  std::size_t in_channels = 0;
  std::size_t out_channels = 0, out_h = 0, out_w = 0;
};

inline std::string layer_kind_name(const LayerSpec& s) {
  switch (s.kind) {
    case LayerKind::Input: return "input";
    case LayerKind::Conv: return str("conv", s.kernel, "x", s.kernel);
    case LayerKind::Conv1x1: return "conv1x1";
    case LayerKind::Dwsc: return str("dwsc", s.kernel, "x", s.kernel);
    case LayerKind::DilConv: return "dilconv";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::GlobalAvgPool: return "gap";
    case LayerKind::Concat: return "concat";
    case LayerKind::Add: return "add";
    case LayerKind::Dense: return "dense_softmax";
    case LayerKind::Softmax: return "softmax";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
  std::size_t input_size = 224;
  std::size_t input_channels = 1;
  std::size_t num_classes = 4;
  std::vector<std::size_t> block_filters{32, 64, 96};
  // dense module stage widths, in order: dwsc, conv3x3, conv1x1, conv3x3,
  // dwsc, dwsc
  std::vector<std::size_t> dense1_plan{128, 128, 64, 160, 160, 160};
  std::vector<std::size_t> dense2_plan{192, 192, 96, 224, 224, 224};
  std::size_t sam_filters = 96;
  bool enable_skip1 = true;
  bool enable_sam = true;
  bool sam_plain_conv5x5 = false;  // ablation: 5x5 conv instead of dilconv
  std::string sam_tap = "block4_mid";
  std::uint64_t seed = 42;
  std::string precision = "float32";
  double bn_eps = 1e-3;
  double bn_momentum = 0.99;
};

inline void validate(const ModelConfig& c) {
  if (c.input_size < 8) throw ConfigError("model: input_size must be at least 8");
  if (c.input_channels != 1 && c.input_channels != 3)
    throw ConfigError("model: input_channels must be 1 or 3");
  if (c.num_classes < 2) throw ConfigError("model: num_classes must be at least 2");
  if (c.block_filters.size() != 3)
    throw ConfigError("model: block_filters must list exactly 3 widths");
  auto check_plan = [](const std::vector<std::size_t>& p, const char* which) {
    if (p.size() != 6)
      throw ConfigError(str("model: ", which,
                            " must list exactly 6 stage widths (dwsc, conv, 1x1, "
                            "conv, dwsc, dwsc)"));
    for (std::size_t v : p)
      if (v == 0) throw ConfigError(str("model: ", which, " widths must be positive"));
  };
  check_plan(c.dense1_plan, "dense1_plan");
  check_plan(c.dense2_plan, "dense2_plan");
  for (std::size_t v : c.block_filters)
    if (v == 0) throw ConfigError("model: block_filters must be positive");
  if (c.sam_filters == 0) throw ConfigError("model: sam_filters must be positive");
  if (c.sam_plain_conv5x5 && !c.enable_sam)
    throw ConfigError("model: sam_plain_conv5x5 requires enable_sam=true");
  if (c.precision != "float32" && c.precision != "float64")
    throw ConfigError(str("model: unknown precision '", c.precision, "'"));
  if (!(c.bn_eps > 0)) throw ConfigError("model: bn_eps must be positive");
  if (!(c.bn_momentum >= 0 && c.bn_momentum < 1))
    throw ConfigError("model: bn_momentum must lie in [0,1)");
}

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"input_size", c.input_size},
           {"input_channels", c.input_channels},
           {"num_classes", c.num_classes},
           {"block_filters", c.block_filters},
           {"dense1_plan", c.dense1_plan},
           {"dense2_plan", c.dense2_plan},
           {"sam_filters", c.sam_filters},
           {"enable_skip1", c.enable_skip1},
           {"enable_sam", c.enable_sam},
           {"sam_plain_conv5x5", c.sam_plain_conv5x5},
           {"sam_tap", c.sam_tap},
           {"seed", c.seed},
           {"precision", c.precision},
           {"bn_eps", c.bn_eps},
           {"bn_momentum", c.bn_momentum}};
}

inline void from_json(const json& j, ModelConfig& c) {
  static const ModelConfig defaults;
  c = defaults;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "input_size") c.input_size = it.value().get<std::size_t>();
      else if (k == "input_channels") c.input_channels = it.value().get<std::size_t>();
      else if (k == "num_classes") c.num_classes = it.value().get<std::size_t>();
      else if (k == "block_filters") c.block_filters = it.value().get<std::vector<std::size_t>>();
      else if (k == "dense1_plan") c.dense1_plan = it.value().get<std::vector<std::size_t>>();
      else if (k == "dense2_plan") c.dense2_plan = it.value().get<std::vector<std::size_t>>();
      else if (k == "sam_filters") c.sam_filters = it.value().get<std::size_t>();
      else if (k == "enable_skip1") c.enable_skip1 = it.value().get<bool>();
      else if (k == "enable_sam") c.enable_sam = it.value().get<bool>();
      else if (k == "sam_plain_conv5x5") c.sam_plain_conv5x5 = it.value().get<bool>();
      else if (k == "sam_tap") c.sam_tap = it.value().get<std::string>();
      else if (k == "seed") c.seed = it.value().get<std::uint64_t>();
      else if (k == "precision") c.precision = it.value().get<std::string>();
      else if (k == "bn_eps") c.bn_eps = it.value().get<double>();
      else if (k == "bn_momentum") c.bn_momentum = it.value().get<double>();
      else throw ConfigError(str("model config: unknown key '", k, "'"));
    } catch (const json::exception& e) {
      throw ConfigError(str("model config: bad value for '", k, "': ", e.what()));
    }
  }
}

// ---------------------------------------------------------------------------
// Built graph
// ---------------------------------------------------------------------------

template <typename T>
struct NodeParams {
  Tensor<T> kernel, bias;   // conv / conv1x1 / dilconv / dense
  Tensor<T> depth, point;   // dwsc (bias lives in `bias`)
  std::optional<BatchNormState<T>> bn;
};

template <typename T>
struct ForwardResult {
  Tensor<T> probs;
  Tensor<T> logits;
  std::map<std::string, Tensor<T>> taps;
};

template <typename T>
class ModelGraph {
public:
  ModelConfig config;
  std::vector<LayerSpec> layers;
  std::vector<NodeParams<T>> node_params;
  std::map<std::string, int> taps;
  int output_id = -1;

  const LayerSpec& layer_named(const std::string& name) const {
    for (const auto& l : layers)
      if (l.name == name) return l;
    throw ValueError(str("model: no layer named '", name, "'"));
  }

  std::vector<std::string> tap_names() const {
    std::vector<std::string> names;
    for (const auto& [name, id] : taps) names.push_back(name);
    return names;
  }

  int tap_id(const std::string& name) const {
    auto it = taps.find(name);
    if (it == taps.end()) {
      std::string avail;
      for (const auto& [n, id] : taps) avail += (avail.empty() ? "" : ", ") + n;
      throw ValueError(str("model: unknown tap '", name, "' (available: ", avail, ")"));
    }
    return it->second;
  }

  /// Trainable tensors in a fixed order (optimizer slots, checkpoints).
  std::vector<std::pair<std::string, Tensor<T>>> parameters() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (const auto& l : layers) {
      auto& p = node_params[l.id];
      if (p.kernel.defined()) out.emplace_back(l.name + "/kernel", p.kernel);
      if (p.depth.defined()) out.emplace_back(l.name + "/depth", p.depth);
      if (p.point.defined()) out.emplace_back(l.name + "/point", p.point);
      if (p.bias.defined()) out.emplace_back(l.name + "/bias", p.bias);
      if (p.bn) {
        out.emplace_back(l.name + "/gamma", p.bn->gamma);
        out.emplace_back(l.name + "/beta", p.bn->beta);
      }
    }
    return out;
  }

  /// Non-trainable state (batch-norm running statistics).
  std::vector<std::pair<std::string, Tensor<T>>> buffers() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (const auto& l : layers) {
      auto& p = node_params[l.id];
      if (p.bn) {
        out.emplace_back(l.name + "/running_mean", p.bn->running_mean);
        out.emplace_back(l.name + "/running_var", p.bn->running_var);
      }
    }
    return out;
  }

  std::size_t trainable_count() {
    std::size_t n = 0;
    for (auto& [name, t] : parameters()) n += t.size();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : parameters()) t.zero_grad();
  }

  /// Spatial sizes along the base path: input size followed by each base-path
  /// max-pool output size.
  std::vector<std::size_t> base_pool_trace() const {
    std::vector<std::size_t> trace{config.input_size};
    for (const auto& l : layers)
      if (l.kind == LayerKind::MaxPool && l.path == PathTag::Base)
        trace.push_back(l.out_h);
    return trace;
  }

  ForwardResult<T> forward(const Tensor<T>& batch, BnMode mode) {
    if (batch.rank() != 4 || batch.extent(1) != config.input_channels ||
        batch.extent(2) != config.input_size || batch.extent(3) != config.input_size)
      throw ShapeError(str("forward: expected input [N,", config.input_channels, ",",
                           config.input_size, ",", config.input_size, "], got ",
                           shape_str(batch.shape())));
    std::vector<Tensor<T>> outs(layers.size());
    for (const auto& l : layers) {
      auto& p = node_params[l.id];
      switch (l.kind) {
        case LayerKind::Input:
          outs[l.id] = batch;
          break;
        case LayerKind::Conv:
        case LayerKind::DilConv:
          outs[l.id] = conv2d(outs[l.sources[0]], p.kernel, p.bias,
                              ConvOpts{l.stride, l.padding, l.dilation});
          break;
        case LayerKind::Conv1x1:
          outs[l.id] = conv1x1(outs[l.sources[0]], p.kernel, p.bias);
          break;
        case LayerKind::Dwsc:
          outs[l.id] = depthwise_conv2d(outs[l.sources[0]], p.depth, p.point,
                                        p.bias, l.padding);
          break;
        case LayerKind::BatchNorm:
          outs[l.id] = batch_norm(outs[l.sources[0]], *p.bn, mode);
          break;
        case LayerKind::Relu:
          outs[l.id] = relu(outs[l.sources[0]]);
          break;
        case LayerKind::MaxPool:
          outs[l.id] = max_pool2d(outs[l.sources[0]]);
          break;
        case LayerKind::GlobalAvgPool:
          outs[l.id] = global_avg_pool(outs[l.sources[0]]);
          break;
        case LayerKind::Concat:
          outs[l.id] = concat_channels(outs[l.sources[0]], outs[l.sources[1]]);
          break;
        case LayerKind::Add:
          outs[l.id] = add(outs[l.sources[0]], outs[l.sources[1]]);
          break;
        case LayerKind::Dense:
          outs[l.id] = linear(outs[l.sources[0]], p.kernel, p.bias);
          break;
        case LayerKind::Softmax:
          outs[l.id] = softmax(outs[l.sources[0]]);
          break;
      }
    }
    ForwardResult<T> result;
    result.probs = outs[output_id];
    for (const auto& [name, id] : taps) result.taps[name] = outs[id];
    result.logits = result.taps.at("logits");
    return result;
  }
};

// ---------------------------------------------------------------------------
// Builder
// ---------------------------------------------------------------------------

template <typename T>
class GraphBuilder {
public:
  explicit GraphBuilder(const ModelConfig& cfg)
      : cfg_(cfg), rng_(mix_seed(cfg.seed, 0x6d736164ULL)) {
    validate(cfg);
    LayerSpec input;
    input.id = 0;
    input.name = "input";
    input.kind = LayerKind::Input;
    input.out_channels = cfg.input_channels;
    input.out_h = input.out_w = cfg.input_size;
    graph_.layers.push_back(input);
    graph_.node_params.emplace_back();
    graph_.config = cfg;
    tap("input", 0);
  }

  int add_conv(const std::string& name, int src, std::size_t filters, std::size_t k,
               Padding padding, PathTag path, std::size_t dilation = 1) {
    const LayerSpec& s = spec(src);
    LayerSpec l = base(name, dilation > 1 ? LayerKind::DilConv : LayerKind::Conv,
                       src, path);
    l.filters = filters;
    l.kernel = k;
    l.padding = padding;
    l.dilation = dilation;
    if (l.kind == LayerKind::DilConv && k != 3)
      throw ConfigError("dilconv layers use a 3x3 kernel");
    infer_conv(l, s, k, 1, dilation, padding);
    l.out_channels = filters;
    NodeParams<T> p;
    p.kernel = he_uniform(Shape{filters, s.out_channels, k, k},
                          static_cast<double>(s.out_channels * k * k));
    p.bias = zeros_param(Shape{filters});
    return push(l, std::move(p));
  }

  int add_conv1x1(const std::string& name, int src, std::size_t filters, PathTag path) {
    const LayerSpec& s = spec(src);
    LayerSpec l = base(name, LayerKind::Conv1x1, src, path);
    l.filters = filters;
    l.kernel = 1;
    l.out_channels = filters;
    l.out_h = s.out_h;
    l.out_w = s.out_w;
    l.in_channels = s.out_channels;
    NodeParams<T> p;
    p.kernel = he_uniform(Shape{filters, s.out_channels, 1, 1},
                          static_cast<double>(s.out_channels));
    p.bias = zeros_param(Shape{filters});
    return push(l, std::move(p));
  }

  int add_dwsc(const std::string& name, int src, std::size_t filters, std::size_t k,
               Padding padding, PathTag path) {
    const LayerSpec& s = spec(src);
    LayerSpec l = base(name, LayerKind::Dwsc, src, path);
    l.filters = filters;
    l.kernel = k;
    l.padding = padding;
    infer_conv(l, s, k, 1, 1, padding);
    l.out_channels = filters;
    NodeParams<T> p;
    p.depth = he_uniform(Shape{s.out_channels, k, k}, static_cast<double>(k * k));
    p.point = he_uniform(Shape{filters, s.out_channels, 1, 1},
                         static_cast<double>(s.out_channels));
    p.bias = zeros_param(Shape{filters});
    return push(l, std::move(p));
  }

  int add_batchnorm(const std::string& name, int src, PathTag path) {
    const LayerSpec& s = spec(src);
    LayerSpec l = base(name, LayerKind::BatchNorm, src, path);
    l.out_channels = s.out_channels;
    l.out_h = s.out_h;
    l.out_w = s.out_w;
    l.in_channels = s.out_channels;
    NodeParams<T> p;
    p.bn = make_batch_norm_state<T>(s.out_channels, static_cast<T>(cfg_.bn_eps),
                                    static_cast<T>(cfg_.bn_momentum));
    return push(l, std::move(p));
  }

  int add_relu(const std::string& name, int src, PathTag path) {
    const LayerSpec& s = spec(src);
    LayerSpec l = base(name, LayerKind::Relu, src, path);
    l.out_channels = s.out_channels;
    l.out_h = s.out_h;
    l.out_w = s.out_w;
    return push(l, {});
  }

  int add_maxpool(const std::string& name, int src, PathTag path) {
    const LayerSpec& s = spec(src);
    if (s.out_h < 2 || s.out_w < 2)
      throw DimensionError(str("model: '", name, "' would pool a ", s.out_h, "x",
                               s.out_w, " map (needs at least 2x2)"));
    LayerSpec l = base(name, LayerKind::MaxPool, src, path);
    l.kernel = 2;
    l.stride = 2;
    l.out_channels = s.out_channels;
    l.out_h = s.out_h / 2;
    l.out_w = s.out_w / 2;
    return push(l, {});
  }

  int add_gap(const std::string& name, int src, PathTag path) {
    const LayerSpec& s = spec(src);
    LayerSpec l = base(name, LayerKind::GlobalAvgPool, src, path);
    l.out_channels = s.out_channels;
    l.out_h = l.out_w = 0;
    return push(l, {});
  }

  int add_concat(const std::string& name, int a, int b, PathTag path) {
    const LayerSpec& sa = spec(a);
    const LayerSpec& sb = spec(b);
    LayerSpec l = base(name, LayerKind::Concat, a, path);
    l.sources.push_back(b);
    l.out_channels = sa.out_channels + sb.out_channels;
    l.out_h = sa.out_h;
    l.out_w = sa.out_w;
    return push(l, {});
  }

  int add_add(const std::string& name, int a, int b, PathTag path) {
    const LayerSpec& sa = spec(a);
    const LayerSpec& sb = spec(b);
    if (sa.out_channels != sb.out_channels || sa.out_h != sb.out_h ||
        sa.out_w != sb.out_w)
      throw ConfigError(str("model: '", name, "' merge shapes differ: ",
                            sa.out_channels, "x", sa.out_h, "x", sa.out_w, " vs ",
                            sb.out_channels, "x", sb.out_h, "x", sb.out_w));
    LayerSpec l = base(name, LayerKind::Add, a, path);
    l.sources.push_back(b);
    l.out_channels = sa.out_channels;
    l.out_h = sa.out_h;
    l.out_w = sa.out_w;
    return push(l, {});
  }

  int add_dense(const std::string& name, int src, std::size_t classes) {
    const LayerSpec& s = spec(src);
    LayerSpec l = base(name, LayerKind::Dense, src, PathTag::Head);
    l.filters = classes;
    l.in_channels = s.out_channels;
    l.out_channels = classes;
    NodeParams<T> p;
    const double limit = std::sqrt(6.0 / static_cast<double>(s.out_channels + classes));
    p.kernel = uniform_param(Shape{classes, s.out_channels}, limit);
    p.bias = zeros_param(Shape{classes});
    return push(l, std::move(p));
  }

  int add_softmax(const std::string& name, int src) {
    const LayerSpec& s = spec(src);
    LayerSpec l = base(name, LayerKind::Softmax, src, PathTag::Head);
    l.out_channels = s.out_channels;
    return push(l, {});
  }

  void tap(const std::string& name, int id) { graph_.taps[name] = id; }

  int tap_id(const std::string& name) const {
    auto it = graph_.taps.find(name);
    if (it == graph_.taps.end()) {
      std::string avail;
      for (const auto& [n, id] : graph_.taps) avail += (avail.empty() ? "" : ", ") + n;
      throw ConfigError(str("model: unknown tap '", name, "' (available: ", avail, ")"));
    }
    return it->second;
  }

  const LayerSpec& spec(int id) const { return graph_.layers.at(id); }
  const ModelConfig& config() const { return cfg_; }

  ModelGraph<T> finish(int output_id) {
    graph_.output_id = output_id;
    return std::move(graph_);
  }

private:
  LayerSpec base(const std::string& name, LayerKind kind, int src, PathTag path) {
    LayerSpec l;
    l.id = static_cast<int>(graph_.layers.size());
    l.name = name;
    l.kind = kind;
    l.path = path;
    l.sources = {src};
    l.in_channels = spec(src).out_channels;
    return l;
  }

  void infer_conv(LayerSpec& l, const LayerSpec& s, std::size_t k, std::size_t stride,
                  std::size_t dilation, Padding padding) {
    const auto ph = detail::conv_axis(s.out_h, k, stride, dilation, padding, "height");
    const auto pw = detail::conv_axis(s.out_w, k, stride, dilation, padding, "width");
    l.out_h = ph.out;
    l.out_w = pw.out;
  }

  int push(LayerSpec l, NodeParams<T> p) {
    graph_.layers.push_back(std::move(l));
    graph_.node_params.push_back(std::move(p));
    return graph_.layers.back().id;
  }

  Tensor<T> he_uniform(Shape shape, double fan_in) {
    return uniform_param(std::move(shape), std::sqrt(6.0 / fan_in));
  }

  Tensor<T> uniform_param(Shape shape, double limit) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(rng_.uniform(-limit, limit));
    t.set_requires_grad(true);
    return t;
  }

  Tensor<T> zeros_param(Shape shape) {
    Tensor<T> t(std::move(shape), T(0));
    t.set_requires_grad(true);
    return t;
  }

  ModelConfig cfg_;
  Rng rng_;
  ModelGraph<T> graph_;
};

// ---------------------------------------------------------------------------
// Topology fragments
// ---------------------------------------------------------------------------

/// Blocks 1-3: conv3x3(same) -> batchnorm -> maxpool, widths from
/// config.block_filters. Returns the block-3 output node.
template <typename T>
int build_block123(GraphBuilder<T>& g, int src) {
  const ModelConfig& cfg = g.config();
  int cur = src;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string prefix = str("block", i + 1);
    cur = g.add_conv(prefix + "/conv", cur, cfg.block_filters[i], 3, Padding::Same,
                     PathTag::Base);
    cur = g.add_batchnorm(prefix + "/bn", cur, PathTag::Base);
    cur = g.add_maxpool(prefix + "/pool", cur, PathTag::Base);
    g.tap(str("block", i + 1, "_out"), cur);
  }
  return cur;
}

/// Six-stage dense module: dwsc, conv3x3, conv1x1, conv3x3, dwsc, dwsc, all
/// padding same with ReLU after each stage and no internal pooling. `plan`
/// lists the six output widths. Returns the module output node; `mid_out`
/// (when given) receives the 1x1-bottleneck stage output.
template <typename T>
int build_dense_module(GraphBuilder<T>& g, int src, const std::vector<std::size_t>& plan,
                       const std::string& prefix, int* mid_out = nullptr) {
  if (plan.size() != 6)
    throw ConfigError(str("model: dense module '", prefix,
                          "' plan must have 6 stages, got ", plan.size()));
  struct Stage {
    const char* name;
    bool dwsc;
    std::size_t kernel;
  };
  static constexpr Stage stages[6] = {
      {"dwsc_in", true, 3},   {"conv_pre", false, 3}, {"bottleneck", false, 1},
      {"conv_post", false, 3}, {"dwsc_tail1", true, 3}, {"dwsc_tail2", true, 3}};
  int cur = src;
  for (std::size_t i = 0; i < 6; ++i) {
    const std::string name = prefix + "/" + stages[i].name;
    if (stages[i].dwsc)
      cur = g.add_dwsc(name, cur, plan[i], stages[i].kernel, Padding::Same, PathTag::Base);
    else if (stages[i].kernel == 1)
      cur = g.add_conv1x1(name, cur, plan[i], PathTag::Base);
    else
      cur = g.add_conv(name, cur, plan[i], 3, Padding::Same, PathTag::Base);
    cur = g.add_relu(name + "/relu", cur, PathTag::Base);
    if (i == 2 && mid_out) *mid_out = cur;
  }
  return cur;
}

/// Spatial attention branch: dwsc5x5(valid) -> dilconv(3x3, rate 2, B filters,
/// same) -> bn -> maxpool -> dwsc5x5(valid) -> bn, ReLU inside each conv
/// stage and no sigmoid anywhere. When use_dilated is false the middle stage
/// is a plain 5x5 convolution instead (ablation).
template <typename T>
int build_sam(GraphBuilder<T>& g, int src, std::size_t B, bool use_dilated) {
  if (B < 1) throw ConfigError("model: SAM filter count must be positive");
  const std::size_t in_ch = g.spec(src).out_channels;
  int cur = g.add_dwsc("sam/dwsc_in", src, in_ch, 5, Padding::Valid, PathTag::Sam);
  cur = g.add_relu("sam/dwsc_in/relu", cur, PathTag::Sam);
  if (use_dilated)
    cur = g.add_conv("sam/dilconv", cur, B, 3, Padding::Same, PathTag::Sam, 2);
  else
    cur = g.add_conv("sam/conv5x5", cur, B, 5, Padding::Same, PathTag::Sam);
  cur = g.add_relu(use_dilated ? "sam/dilconv/relu" : "sam/conv5x5/relu", cur,
                   PathTag::Sam);
  cur = g.add_batchnorm("sam/bn_mid", cur, PathTag::Sam);
  cur = g.add_maxpool("sam/pool", cur, PathTag::Sam);
  cur = g.add_dwsc("sam/dwsc_out", cur, B, 5, Padding::Valid, PathTag::Sam);
  cur = g.add_relu("sam/dwsc_out/relu", cur, PathTag::Sam);
  cur = g.add_batchnorm("sam/bn_out", cur, PathTag::Sam);
  g.tap("sam_out", cur);
  return cur;
}

template <typename T>
ModelGraph<T> build_msadnet(const ModelConfig& cfg) {
  GraphBuilder<T> g(cfg);

  int block3 = build_block123(g, 0);

  int block4_mid = -1;
  int cur = build_dense_module(g, block3, cfg.dense1_plan, "block4", &block4_mid);
  g.tap("block4_mid", block4_mid);
  cur = g.add_maxpool("block4/pool", cur, PathTag::Base);
  g.tap("block4_out", cur);

  if (cfg.enable_skip1) {
    // block-3 output is twice the spatial size and a different width than the
    // block-5 input; downsample and project before the residual add
    int skip = g.add_maxpool("skip1/pool", block3, PathTag::Skip);
    skip = g.add_conv1x1("skip1/proj", skip, cfg.dense1_plan.back(), PathTag::Skip);
    cur = g.add_add("block5/in_add", cur, skip, PathTag::Base);
  }

  cur = build_dense_module(g, cur, cfg.dense2_plan, "block5", nullptr);
  g.tap("block5_out", cur);
  cur = g.add_maxpool("block5/pool", cur, PathTag::Base);
  g.tap("block5_pool", cur);

  int gap = g.add_gap("gap", cur, PathTag::Base);
  g.tap("gap_out", gap);

  int features = gap;
  if (cfg.enable_sam) {
    const int sam_src = g.tap_id(cfg.sam_tap);
    int sam = build_sam(g, sam_src, cfg.sam_filters, !cfg.sam_plain_conv5x5);
    int sam_gap = g.add_gap("sam/gap", sam, PathTag::Sam);
    g.tap("sam_gap", sam_gap);
    features = g.add_concat("head/concat", gap, sam_gap, PathTag::Head);
  }
  g.tap("features", features);

  int logits = g.add_dense("head/dense", features, cfg.num_classes);
  g.tap("logits", logits);
  int probs = g.add_softmax("head/softmax", logits);
  g.tap("probs", probs);

  return g.finish(probs);
}

}  // namespace msad
