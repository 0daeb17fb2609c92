#include "hbias/plots.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

namespace hbias::plots {
namespace {

constexpr double kWidth = 720.0;
constexpr double kHeight = 420.0;
constexpr double kLeft = 70.0;
constexpr double kRight = 20.0;
constexpr double kTop = 50.0;
constexpr double kBottom = 70.0;
constexpr double kGroupGap = 0.25;  // fraction of a group slot left empty

constexpr std::string_view kPalette[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52",
                                         "#8172b3", "#937860", "#da8bc3", "#8c8c8c"};

std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

std::string num(double x) { return fmt::format("{:.2f}", x); }

template <typename F>
std::vector<std::string> distinct(const std::vector<Bar>& bars, F&& key) {
  std::vector<std::string> out;
  for (const auto& b : bars) {
    const std::string& k = key(b);
    if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(k);
  }
  return out;
}

// A "nice" tick step covering span with about five ticks.
double tick_step(double span) {
  if (!(span > 0.0)) return 1.0;
  const double raw = span / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  const double f = raw / mag;
  return (f <= 1.0 ? 1.0 : f <= 2.0 ? 2.0 : f <= 5.0 ? 5.0 : 10.0) * mag;
}

}  // namespace

std::string render_svg(const BarChart& chart) {
  const auto groups = distinct(chart.bars, [](const Bar& b) -> const std::string& { return b.group; });
  const auto hues = distinct(chart.bars, [](const Bar& b) -> const std::string& { return b.hue; });

  double lo = 0.0;
  double hi = 0.0;
  for (const auto& b : chart.bars) {
    lo = std::min(lo, b.value - b.ci_half_width);
    hi = std::max(hi, b.value + b.ci_half_width);
  }
  if (hi - lo <= 0.0) hi = lo + 1.0;
  const double step = tick_step(hi - lo);
  lo = std::floor(lo / step) * step;
  hi = std::ceil(hi / step) * step;

  const double plot_w = kWidth - kLeft - kRight;
  const double plot_h = kHeight - kTop - kBottom;
  auto y_of = [&](double v) { return kTop + (hi - v) / (hi - lo) * plot_h; };

  std::string s;
  s += fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\" "
      "font-family=\"sans-serif\" font-size=\"11\">\n",
      kWidth, kHeight);
  s += fmt::format("<title>{}</title>\n", escape(chart.title));
  s += fmt::format("<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>\n", kWidth, kHeight);
  s += fmt::format("<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
                   num(kWidth / 2), escape(chart.title));

  // Axes and ticks.
  s += "<g class=\"axis\" stroke=\"#333\">\n";
  s += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\"/>\n", num(kLeft), num(kTop),
                   num(kTop + plot_h));
  const int n_ticks = static_cast<int>(std::lround((hi - lo) / step));
  for (int t = 0; t <= n_ticks; ++t) {
    const double v = lo + t * step;
    const double y = y_of(v);
    s += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\"/>\n", num(kLeft - 4), num(y), num(kLeft),
                     num(y));
    s += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"end\" stroke=\"none\">{}</text>\n",
                     num(kLeft - 6), num(y + 4), fmt::format("{:g}", std::abs(v) < step * 1e-9 ? 0.0 : v));
  }
  const double y0 = y_of(0.0);
  s += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\"/>\n", num(kLeft), num(y0),
                   num(kLeft + plot_w), num(y0));
  s += "</g>\n";
  s += fmt::format(
      "<text x=\"16\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {0})\">{1}</text>\n",
      num(kTop + plot_h / 2), escape(chart.y_label));

  // Bars.
  const double slot = plot_w / static_cast<double>(std::max<std::size_t>(groups.size(), 1));
  const double bar_w = slot * (1.0 - kGroupGap) / static_cast<double>(std::max<std::size_t>(hues.size(), 1));
  s += "<g class=\"bars\">\n";
  for (const auto& b : chart.bars) {
    const auto gi = static_cast<double>(std::find(groups.begin(), groups.end(), b.group) - groups.begin());
    const auto hi_idx = static_cast<std::size_t>(std::find(hues.begin(), hues.end(), b.hue) - hues.begin());
    const double x = kLeft + gi * slot + slot * kGroupGap / 2 + static_cast<double>(hi_idx) * bar_w;
    const double top = std::min(y_of(b.value), y0);
    const double h = std::abs(y_of(b.value) - y0);
    const auto colour = kPalette[hi_idx % std::size(kPalette)];
    s += fmt::format(
        "<rect class=\"bar\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\" data-group=\"{}\" "
        "data-hue=\"{}\" data-value=\"{}\" data-ci=\"{}\"/>\n",
        num(x), num(top), num(bar_w), num(h), colour, escape(b.group), escape(b.hue), escape(b.value_text),
        escape(b.ci_text));
    const double label_y = b.value >= 0 ? top - 14 : top + h + 12;
    s += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"9\">{}</text>\n",
                     num(x + bar_w / 2), num(label_y), escape(b.value_text));
    s += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"8\" fill=\"#555\">±{}</text>\n",
                     num(x + bar_w / 2), num(label_y + 9), escape(b.ci_text));
  }
  s += "</g>\n";

  // Group labels.
  for (std::size_t g = 0; g < groups.size(); ++g) {
    s += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
                     num(kLeft + (static_cast<double>(g) + 0.5) * slot), num(kTop + plot_h + 18),
                     escape(groups[g]));
  }
  // Legend when there is more than one series.
  if (hues.size() > 1 || (hues.size() == 1 && !hues[0].empty())) {
    double lx = kLeft;
    const double ly = kHeight - 22;
    for (std::size_t h = 0; h < hues.size(); ++h) {
      s += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n", num(lx), num(ly - 9),
                       kPalette[h % std::size(kPalette)]);
      s += fmt::format("<text x=\"{}\" y=\"{}\">{}</text>\n", num(lx + 14), num(ly), escape(hues[h]));
      lx += 24.0 + 7.0 * static_cast<double>(hues[h].size());
    }
  }
  s += "<text x=\"" + num(kWidth - kRight) + "\" y=\"" + num(kHeight - 6) +
       "\" text-anchor=\"end\" font-size=\"9\" fill=\"#555\">± values are 95% CI half-widths (1.96·sd/√n)</text>\n";
  s += "</svg>\n";
  return s;
}

}  // namespace hbias::plots
