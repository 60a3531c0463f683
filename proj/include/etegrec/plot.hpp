#pragma once

// Minimal SVG line charts for training logs.

#include <filesystem>
#include <string>
#include <vector>

namespace etegrec::plot {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series);

// Reads a JSONL metrics log; writes loss.svg (per-step combined loss by phase)
// and recall.svg (validation Recall@10 per pass). Returns written files.
std::vector<std::filesystem::path> plot_metrics_log(const std::filesystem::path& log, const std::filesystem::path& out_dir);

}  // namespace etegrec::plot
