#pragma once

#include <iomanip>

#include "msadnet/model.hpp"

namespace msad {

// ---------------------------------------------------------------------------
// Closed-form trainable-parameter calculators, cross-checked against the
// element counts of the parameter tensors a built graph actually holds.
//
// Depthwise-separable layers have two counting modes: the simplified
// single-plane 10C figure, and the full depthwise + pointwise count used for
// the real totals. Reports carry both.
// ---------------------------------------------------------------------------

/// (k^2 * f0 + 1) * f1 for a standard convolution.
inline std::uint64_t count_conv(std::uint64_t f0, std::uint64_t f1, std::uint64_t k) {
  return (k * k * f0 + 1) * f1;
}

/// (f0 + 1) * f1x1 for a pointwise convolution.
inline std::uint64_t count_conv1x1(std::uint64_t f0, std::uint64_t f1x1) {
  return (f0 + 1) * f1x1;
}

struct SandwichCounts {
  std::uint64_t with_bottleneck = 0;
  std::uint64_t without_bottleneck = 0;
  std::int64_t savings = 0;
};

/// Parameter cost of conv(f0 -> f1, 3x3) with and without a 1x1 bottleneck of
/// width f1x1 in front of it.
inline SandwichCounts count_sandwich(std::uint64_t f0, std::uint64_t f1x1,
                                     std::uint64_t f1) {
  SandwichCounts c;
  c.with_bottleneck = count_conv(f1x1, f1, 3) + count_conv1x1(f0, f1x1);
  c.without_bottleneck = count_conv(f0, f1, 3);
  c.savings = static_cast<std::int64_t>(c.without_bottleneck) -
              static_cast<std::int64_t>(c.with_bottleneck);
  return c;
}

/// Simplified depthwise count: one 3x3 plane plus bias per channel, 10C.
inline std::uint64_t count_dwsc_paper(std::uint64_t c) {
  if (c < 1) throw ValueError("count_dwsc_paper: channel count must be positive");
  return 10 * c;
}

/// Full depthwise-separable count: k^2 depthwise taps per input channel plus
/// a biased pointwise stage, k^2*C + (C+1)*F.
inline std::uint64_t count_dwsc_full(std::uint64_t c, std::uint64_t f, std::uint64_t k) {
  return k * k * c + (c + 1) * f;
}

inline std::uint64_t count_batchnorm(std::uint64_t c) { return 2 * c; }

// ---------------------------------------------------------------------------
// Audit report
// ---------------------------------------------------------------------------

struct ParamReportEntry {
  std::string layer;
  std::string kind;
  std::string path;
  std::uint64_t closed_form = 0;
  std::uint64_t actual = 0;
};

struct SandwichReport {
  std::string module;
  std::uint64_t f0 = 0, f1x1 = 0, f1 = 0;
  SandwichCounts counts;
};

struct DwscConformance {
  std::string layer;
  std::uint64_t channels = 0;
  std::uint64_t paper_count = 0;  // 10C
  std::uint64_t full_count = 0;
};

struct ParamReport {
  std::vector<ParamReportEntry> entries;
  std::map<std::string, std::uint64_t> path_totals;
  std::uint64_t grand_total = 0;
  std::vector<SandwichReport> sandwiches;
  std::vector<DwscConformance> dwsc_modes;
  std::vector<std::string> mismatched;  // layer names with closed_form != actual

  bool consistent() const { return mismatched.empty(); }
};

/// Throw (naming the first offending layer) unless every closed-form count
/// matched the actual tensor element count.
inline void require_consistent(const ParamReport& r) {
  if (!r.consistent())
    throw ValueError(str("param audit: closed-form count does not match actual "
                         "parameters for layer '", r.mismatched.front(), "'"));
}

template <typename T>
ParamReport audit(ModelGraph<T>& model) {
  ParamReport report;
  for (const auto& l : model.layers) {
    auto& p = model.node_params[l.id];
    std::uint64_t actual = 0;
    if (p.kernel.defined()) actual += p.kernel.size();
    if (p.bias.defined()) actual += p.bias.size();
    if (p.depth.defined()) actual += p.depth.size();
    if (p.point.defined()) actual += p.point.size();
    if (p.bn) actual += p.bn->gamma.size() + p.bn->beta.size();

    std::uint64_t closed = 0;
    switch (l.kind) {
      case LayerKind::Conv:
      case LayerKind::DilConv:
        closed = count_conv(l.in_channels, l.filters, l.kernel);
        break;
      case LayerKind::Conv1x1:
        closed = count_conv1x1(l.in_channels, l.filters);
        break;
      case LayerKind::Dwsc:
        closed = count_dwsc_full(l.in_channels, l.filters, l.kernel);
        report.dwsc_modes.push_back({l.name, l.in_channels,
                                     count_dwsc_paper(l.in_channels), closed});
        break;
      case LayerKind::BatchNorm:
        closed = count_batchnorm(l.in_channels);
        break;
      case LayerKind::Dense:
        closed = count_conv1x1(l.in_channels, l.filters);
        break;
      default:
        break;  // parameter-free layer
    }
    if (closed == 0 && actual == 0) continue;

    ParamReportEntry e{l.name, layer_kind_name(l), path_name(l.path), closed, actual};
    if (closed != actual) report.mismatched.push_back(l.name);
    report.path_totals[e.path] += actual;
    report.grand_total += actual;
    report.entries.push_back(std::move(e));
  }

  auto sandwich_of = [](const std::vector<std::size_t>& plan, const std::string& name) {
    SandwichReport s;
    s.module = name;
    s.f0 = plan[1];
    s.f1x1 = plan[2];
    s.f1 = plan[3];
    s.counts = count_sandwich(s.f0, s.f1x1, s.f1);
    return s;
  };
  report.sandwiches.push_back(sandwich_of(model.config.dense1_plan, "block4"));
  report.sandwiches.push_back(sandwich_of(model.config.dense2_plan, "block5"));
  return report;
}

inline std::string param_report_text(const ParamReport& r) {
  std::ostringstream os;
  std::size_t name_w = 14;
  for (const auto& e : r.entries) name_w = std::max(name_w, e.layer.size());
  os << std::left << std::setw(static_cast<int>(name_w + 2)) << "layer"
     << std::setw(14) << "kind" << std::setw(7) << "path" << std::right
     << std::setw(12) << "closed_form" << std::setw(12) << "actual" << "\n";
  for (const auto& e : r.entries) {
    os << std::left << std::setw(static_cast<int>(name_w + 2)) << e.layer
       << std::setw(14) << e.kind << std::setw(7) << e.path << std::right
       << std::setw(12) << e.closed_form << std::setw(12) << e.actual;
    if (e.closed_form != e.actual) os << "  MISMATCH";
    os << "\n";
  }
  os << "\n";
  for (const auto& [path, total] : r.path_totals)
    os << "total[" << path << "] = " << total << "\n";
  os << "grand total = " << r.grand_total << "\n\n";
  for (const auto& s : r.sandwiches)
    os << s.module << " bottleneck sandwich (" << s.f0 << " -> 1x1 " << s.f1x1
       << " -> " << s.f1 << "): with = " << s.counts.with_bottleneck
       << ", without = " << s.counts.without_bottleneck
       << ", savings = " << s.counts.savings << "\n";
  if (!r.dwsc_modes.empty()) {
    os << "\ndwsc counting modes (simplified 10C vs full depthwise+pointwise):\n";
    for (const auto& d : r.dwsc_modes)
      os << "  " << d.layer << ": C = " << d.channels << ", 10C = " << d.paper_count
         << ", full = " << d.full_count << "\n";
  }
  os << "\naudit " << (r.consistent() ? "PASS" : "FAIL") << "\n";
  return os.str();
}

inline json param_report_json(const ParamReport& r) {
  json layers = json::array();
  for (const auto& e : r.entries)
    layers.push_back({{"layer", e.layer},
                      {"kind", e.kind},
                      {"path", e.path},
                      {"closed_form", e.closed_form},
                      {"actual", e.actual}});
  json sandwiches = json::array();
  for (const auto& s : r.sandwiches)
    sandwiches.push_back({{"module", s.module},
                          {"f0", s.f0},
                          {"f1x1", s.f1x1},
                          {"f1", s.f1},
                          {"with_bottleneck", s.counts.with_bottleneck},
                          {"without_bottleneck", s.counts.without_bottleneck},
                          {"savings", s.counts.savings}});
  json dwsc = json::array();
  for (const auto& d : r.dwsc_modes)
    dwsc.push_back({{"layer", d.layer},
                    {"channels", d.channels},
                    {"simplified_10c", d.paper_count},
                    {"full", d.full_count}});
  return json{{"layers", layers},
              {"path_totals", r.path_totals},
              {"grand_total", r.grand_total},
              {"sandwiches", sandwiches},
              {"dwsc_modes", dwsc},
              {"consistent", r.consistent()}};
}

}  // namespace msad
