#pragma once

// Deterministic SVG bar charts. Geometry is a pure function of the chart
// contents, and every bar carries its value and CI half-width as text and
// as data- attributes so annotations can be checked against the tables.

#include <string>
#include <vector>

namespace hbias::plots {

struct Bar {
  std::string group;       // x-axis position
  std::string hue;         // series within a group; empty for a single series
  double value = 0.0;
  std::string value_text;  // exactly as written in the tables
  double ci_half_width = 0.0;
  std::string ci_text;
};

struct BarChart {
  std::string title;
  std::string y_label;
  std::vector<Bar> bars;  // drawn in this order; groups and hues keep first appearance
};

std::string render_svg(const BarChart& chart);

}  // namespace hbias::plots
