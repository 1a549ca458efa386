#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace treedose {

// Self-contained SVG emission for the report figures: fixed canvas, linear
// axes, no external renderer or font dependencies.

struct PointSeries {
    std::vector<double> x, y;
};

// Mean curve with a shaded pointwise band and observed-replicate scatter.
struct BandPlot {
    std::string title, x_label, y_label;
    std::vector<double> x;
    std::vector<double> mean, lower, upper;
    std::vector<PointSeries> points;
};
std::string render_band_plot(const BandPlot& plot);

// Colored cell grid with an attached color scale; optional overlay points
// and tick projections along the left edge.
struct HeatMap {
    std::string title, x_label, y_label;
    std::vector<double> x, y;  // cell centers, ascending
    Eigen::MatrixXd values;    // y.size() rows by x.size() columns
    std::vector<double> mark_x, mark_y;  // paired overlay points
    std::vector<double> rug_y;           // projection ticks on the var axis
};
std::string render_heatmap(const HeatMap& map);

// Paired bars per label with optional error whiskers.
struct BarChart {
    std::string title, y_label;
    std::vector<std::string> labels;
    std::string first_name = "S", second_name = "T";
    std::vector<double> first, second;
    std::vector<double> first_err, second_err;
};
std::string render_bar_chart(const BarChart& chart);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace treedose
