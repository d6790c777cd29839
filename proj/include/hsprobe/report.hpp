#pragma once

#include "hsprobe/metrics.hpp"
#include "hsprobe/training.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace hsprobe {

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

struct Axes {
    std::string title;
    std::string x_label;
    std::string y_label;
    double x_min = 0.0, x_max = 1.0;
    double y_min = 0.0, y_max = 1.0;
    bool diagonal = false;  // dashed y = x reference
};

// Static line chart; markers on every point, legend top-right.
std::string line_chart_svg(const Axes& axes, const std::vector<Series>& series);

std::string roc_svg(const std::vector<RocPoint>& curve, double area);
std::string rac_svg(const std::vector<RACPoint>& curve, double area);
std::string layer_sweep_svg(const std::vector<LayerSweepRow>& rows);
std::string truncation_svg(const std::vector<TruncationPoint>& points);

std::string roc_csv(const std::vector<RocPoint>& curve);
std::string rac_csv(const std::vector<RACPoint>& curve);
std::string layer_sweep_csv(const std::vector<LayerSweepRow>& rows);
std::string truncation_csv(const std::vector<TruncationPoint>& points);
std::string ood_csv(const OodMatrix& m);

// Writes text to path, creating parent directories.
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace hsprobe
