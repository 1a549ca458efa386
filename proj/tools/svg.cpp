#include "svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "treedose/error.hpp"

namespace treedose {

namespace {

constexpr double kWidth = 640.0;
constexpr double kHeight = 420.0;

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

std::string escape_xml(const std::string& text) {
    std::string out;
    for (const char c : text) {
        if (c == '&')
            out += "&amp;";
        else if (c == '<')
            out += "&lt;";
        else if (c == '>')
            out += "&gt;";
        else
            out.push_back(c);
    }
    return out;
}

struct Range {
    double lo = 0.0, hi = 0.0;
    bool seen = false;

    void add(double v) {
        if (!std::isfinite(v)) return;
        if (!seen) {
            lo = hi = v;
            seen = true;
        } else {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    void pad(double frac) {
        if (!seen) {
            lo = 0.0;
            hi = 1.0;
            return;
        }
        if (hi <= lo) {
            const double bump = std::max(0.5, std::abs(lo) * 0.05);
            lo -= bump;
            hi += bump;
        } else {
            const double bump = (hi - lo) * frac;
            lo -= bump;
            hi += bump;
        }
    }
};

// Data-to-pixel mapping inside the plot frame.
struct Frame {
    double left = 64.0, right = 26.0, top = 42.0, bottom = 56.0;
    Range x, y;

    double plot_w() const { return kWidth - left - right; }
    double plot_h() const { return kHeight - top - bottom; }
    double px(double v) const { return left + (v - x.lo) / (x.hi - x.lo) * plot_w(); }
    double py(double v) const {
        return kHeight - bottom - (v - y.lo) / (y.hi - y.lo) * plot_h();
    }
};

void open_svg(std::ostringstream& out) {
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
        << kHeight << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\">\n";
    out << "<rect width=\"" << kWidth << "\" height=\"" << kHeight << "\" fill=\"white\"/>\n";
}

void text_at(std::ostringstream& out, double x, double y, const std::string& s,
             const char* anchor = "middle", int size = 11) {
    out << "<text x=\"" << num(x) << "\" y=\"" << num(y) << "\" font-family=\"sans-serif\""
        << " font-size=\"" << size << "\" text-anchor=\"" << anchor << "\">" << escape_xml(s)
        << "</text>\n";
}

void draw_axes(std::ostringstream& out, const Frame& f, const std::string& title,
               const std::string& x_label, const std::string& y_label) {
    const double x0 = f.left, x1 = kWidth - f.right;
    const double y0 = kHeight - f.bottom, y1 = f.top;
    out << "<line x1=\"" << num(x0) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(x1)
        << "\" y2=\"" << num(y0) << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << num(x0) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(x0)
        << "\" y2=\"" << num(y1) << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double fx = f.x.lo + (f.x.hi - f.x.lo) * i / 4.0;
        const double fy = f.y.lo + (f.y.hi - f.y.lo) * i / 4.0;
        const double px = f.px(fx), py = f.py(fy);
        out << "<line x1=\"" << num(px) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(px)
            << "\" y2=\"" << num(y0 + 4) << "\" stroke=\"black\"/>\n";
        text_at(out, px, y0 + 16, num(fx), "middle", 10);
        out << "<line x1=\"" << num(x0 - 4) << "\" y1=\"" << num(py) << "\" x2=\"" << num(x0)
            << "\" y2=\"" << num(py) << "\" stroke=\"black\"/>\n";
        text_at(out, x0 - 7, py + 3.5, num(fy), "end", 10);
    }
    text_at(out, (x0 + x1) / 2.0, kHeight - 14, x_label, "middle", 12);
    out << "<text x=\"16\" y=\"" << num((y0 + y1) / 2.0)
        << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\""
        << " transform=\"rotate(-90 16 " << num((y0 + y1) / 2.0) << ")\">" << escape_xml(y_label)
        << "</text>\n";
    text_at(out, (x0 + x1) / 2.0, 22, title, "middle", 14);
}

// blue -> pale yellow -> red two-segment ramp
std::string heat_color(double t) {
    t = std::clamp(t, 0.0, 1.0);
    const int a[3] = {44, 123, 182}, m[3] = {255, 255, 191}, b[3] = {215, 25, 28};
    int rgb[3];
    for (int k = 0; k < 3; ++k) {
        rgb[k] = t < 0.5 ? static_cast<int>(a[k] + (m[k] - a[k]) * (t * 2.0))
                         : static_cast<int>(m[k] + (b[k] - m[k]) * (t * 2.0 - 1.0));
    }
    char buf[10];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", rgb[0], rgb[1], rgb[2]);
    return buf;
}

// Cell boundaries from ascending centers: midpoints, with the end cells
// extended by half the neighboring step.
std::vector<double> cell_edges(const std::vector<double>& centers) {
    std::vector<double> edges;
    const std::size_t n = centers.size();
    if (n == 1) {
        edges = {centers[0] - 0.5, centers[0] + 0.5};
        return edges;
    }
    edges.push_back(centers[0] - (centers[1] - centers[0]) / 2.0);
    for (std::size_t i = 0; i + 1 < n; ++i)
        edges.push_back((centers[i] + centers[i + 1]) / 2.0);
    edges.push_back(centers[n - 1] + (centers[n - 1] - centers[n - 2]) / 2.0);
    return edges;
}

}  // namespace

std::string render_band_plot(const BandPlot& plot) {
    if (plot.x.empty() || plot.mean.size() != plot.x.size() ||
        plot.lower.size() != plot.x.size() || plot.upper.size() != plot.x.size())
        throw ValidationError("band plot series have mismatched lengths");

    Frame f;
    for (const double v : plot.x) f.x.add(v);
    for (std::size_t i = 0; i < plot.x.size(); ++i) {
        f.y.add(plot.lower[i]);
        f.y.add(plot.upper[i]);
    }
    for (const PointSeries& series : plot.points)
        for (std::size_t i = 0; i < series.x.size(); ++i) {
            f.x.add(series.x[i]);
            f.y.add(series.y[i]);
        }
    f.x.pad(0.02);
    f.y.pad(0.06);

    std::ostringstream out;
    open_svg(out);
    draw_axes(out, f, plot.title, plot.x_label, plot.y_label);

    out << "<polygon fill=\"#9ecae1\" fill-opacity=\"0.55\" stroke=\"none\" points=\"";
    for (std::size_t i = 0; i < plot.x.size(); ++i)
        out << num(f.px(plot.x[i])) << ',' << num(f.py(plot.upper[i])) << ' ';
    for (std::size_t i = plot.x.size(); i-- > 0;)
        out << num(f.px(plot.x[i])) << ',' << num(f.py(plot.lower[i])) << ' ';
    out << "\"/>\n";

    out << "<polyline fill=\"none\" stroke=\"#08519c\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < plot.x.size(); ++i)
        out << num(f.px(plot.x[i])) << ',' << num(f.py(plot.mean[i])) << ' ';
    out << "\"/>\n";

    for (const PointSeries& series : plot.points)
        for (std::size_t i = 0; i < series.x.size(); ++i)
            out << "<circle cx=\"" << num(f.px(series.x[i])) << "\" cy=\""
                << num(f.py(series.y[i])) << "\" r=\"2.5\" fill=\"#636363\""
                << " fill-opacity=\"0.8\"/>\n";

    out << "</svg>\n";
    return out.str();
}

std::string render_heatmap(const HeatMap& map) {
    if (map.x.empty() || map.y.empty() ||
        map.values.rows() != static_cast<Eigen::Index>(map.y.size()) ||
        map.values.cols() != static_cast<Eigen::Index>(map.x.size()))
        throw ValidationError("heatmap dimensions do not match its grids");
    if (map.mark_x.size() != map.mark_y.size())
        throw ValidationError("heatmap overlay points must be paired");

    const std::vector<double> ex = cell_edges(map.x);
    const std::vector<double> ey = cell_edges(map.y);
    Frame f;
    f.right = 96.0;  // room for the color scale
    f.x.add(ex.front());
    f.x.add(ex.back());
    f.y.add(ey.front());
    f.y.add(ey.back());
    for (std::size_t i = 0; i < map.mark_x.size(); ++i) {
        f.x.add(map.mark_x[i]);
        f.y.add(map.mark_y[i]);
    }
    for (const double v : map.rug_y) f.y.add(v);

    double vlo = map.values.minCoeff(), vhi = map.values.maxCoeff();
    const bool flat = !(vhi > vlo);

    std::ostringstream out;
    open_svg(out);
    draw_axes(out, f, map.title, map.x_label, map.y_label);

    for (std::size_t i = 0; i < map.y.size(); ++i) {
        for (std::size_t j = 0; j < map.x.size(); ++j) {
            const double v = map.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
            const double t = flat ? 0.5 : (v - vlo) / (vhi - vlo);
            const double x0 = f.px(ex[j]), x1 = f.px(ex[j + 1]);
            const double y0 = f.py(ey[i + 1]), y1 = f.py(ey[i]);
            out << "<rect x=\"" << num(x0) << "\" y=\"" << num(y0) << "\" width=\""
                << num(x1 - x0) << "\" height=\"" << num(y1 - y0) << "\" fill=\""
                << heat_color(t) << "\"/>\n";
        }
    }

    for (std::size_t i = 0; i < map.mark_x.size(); ++i)
        out << "<circle cx=\"" << num(f.px(map.mark_x[i])) << "\" cy=\""
            << num(f.py(map.mark_y[i])) << "\" r=\"3\" fill=\"black\" fill-opacity=\"0.75\""
            << " stroke=\"white\" stroke-width=\"0.8\"/>\n";
    for (const double v : map.rug_y)
        out << "<line x1=\"" << num(f.left) << "\" y1=\"" << num(f.py(v)) << "\" x2=\""
            << num(f.left + 8) << "\" y2=\"" << num(f.py(v))
            << "\" stroke=\"black\" stroke-width=\"1.5\"/>\n";

    // color scale
    const double bar_x = kWidth - f.right + 18, bar_w = 14;
    const double bar_top = f.top + 8, bar_h = f.plot_h() - 16;
    const int steps = 24;
    for (int s = 0; s < steps; ++s) {
        const double t0 = static_cast<double>(s) / steps;
        const double y = bar_top + bar_h * (1.0 - static_cast<double>(s + 1) / steps);
        out << "<rect x=\"" << num(bar_x) << "\" y=\"" << num(y) << "\" width=\"" << num(bar_w)
            << "\" height=\"" << num(bar_h / steps + 0.5) << "\" fill=\""
            << heat_color(t0 + 0.5 / steps) << "\"/>\n";
    }
    text_at(out, bar_x + bar_w / 2, bar_top - 4, num(vhi), "middle", 10);
    text_at(out, bar_x + bar_w / 2, bar_top + bar_h + 12, num(vlo), "middle", 10);

    out << "</svg>\n";
    return out.str();
}

std::string render_bar_chart(const BarChart& chart) {
    const std::size_t n = chart.labels.size();
    if (n == 0 || chart.first.size() != n || chart.second.size() != n)
        throw ValidationError("bar chart series have mismatched lengths");
    const bool whiskers = chart.first_err.size() == n && chart.second_err.size() == n;

    Frame f;
    f.y.add(0.0);
    for (std::size_t i = 0; i < n; ++i) {
        f.y.add(chart.first[i] + (whiskers ? chart.first_err[i] : 0.0));
        f.y.add(chart.second[i] + (whiskers ? chart.second_err[i] : 0.0));
    }
    f.y.add(1.0);
    f.y.pad(0.05);
    f.y.lo = std::min(f.y.lo, 0.0);
    f.x.add(0.0);
    f.x.add(static_cast<double>(n));

    std::ostringstream out;
    open_svg(out);

    const double x0 = f.left, y0 = kHeight - f.bottom, y1 = f.top;
    out << "<line x1=\"" << num(x0) << "\" y1=\"" << num(y0) << "\" x2=\""
        << num(kWidth - f.right) << "\" y2=\"" << num(y0) << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << num(x0) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(x0)
        << "\" y2=\"" << num(y1) << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double fy = f.y.lo + (f.y.hi - f.y.lo) * i / 4.0;
        const double py = f.py(fy);
        out << "<line x1=\"" << num(x0 - 4) << "\" y1=\"" << num(py) << "\" x2=\"" << num(x0)
            << "\" y2=\"" << num(py) << "\" stroke=\"black\"/>\n";
        text_at(out, x0 - 7, py + 3.5, num(fy), "end", 10);
    }
    text_at(out, (x0 + kWidth - f.right) / 2.0, 22, chart.title, "middle", 14);
    out << "<text x=\"16\" y=\"" << num((y0 + y1) / 2.0)
        << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\""
        << " transform=\"rotate(-90 16 " << num((y0 + y1) / 2.0) << ")\">"
        << escape_xml(chart.y_label) << "</text>\n";

    const char* color_first = "#2b8cbe";
    const char* color_second = "#e34a33";
    const double group_w = f.plot_w() / static_cast<double>(n);
    const double bar_w = group_w * 0.32;
    const double base = f.py(std::max(0.0, f.y.lo));
    for (std::size_t i = 0; i < n; ++i) {
        const double cx = f.left + group_w * (static_cast<double>(i) + 0.5);
        const struct {
            double center, value, err;
            const char* color;
        } bars[2] = {
            {cx - bar_w * 0.55, chart.first[i], whiskers ? chart.first_err[i] : 0.0, color_first},
            {cx + bar_w * 0.55, chart.second[i], whiskers ? chart.second_err[i] : 0.0,
             color_second},
        };
        for (const auto& bar : bars) {
            const double top = f.py(bar.value);
            out << "<rect x=\"" << num(bar.center - bar_w / 2) << "\" y=\""
                << num(std::min(top, base)) << "\" width=\"" << num(bar_w) << "\" height=\""
                << num(std::abs(base - top)) << "\" fill=\"" << bar.color << "\"/>\n";
            if (whiskers && bar.err > 0.0) {
                const double lo = f.py(bar.value - 2.0 * bar.err);
                const double hi = f.py(bar.value + 2.0 * bar.err);
                out << "<line x1=\"" << num(bar.center) << "\" y1=\"" << num(lo) << "\" x2=\""
                    << num(bar.center) << "\" y2=\"" << num(hi)
                    << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
            }
        }
        text_at(out, cx, y0 + 16, chart.labels[i], "middle", 10);
    }

    const double legend_x = kWidth - f.right - 120;
    out << "<rect x=\"" << num(legend_x) << "\" y=\"30\" width=\"10\" height=\"10\" fill=\""
        << color_first << "\"/>\n";
    text_at(out, legend_x + 16, 39, chart.first_name, "start", 11);
    out << "<rect x=\"" << num(legend_x + 60) << "\" y=\"30\" width=\"10\" height=\"10\" fill=\""
        << color_second << "\"/>\n";
    text_at(out, legend_x + 76, 39, chart.second_name, "start", 11);

    out << "</svg>\n";
    return out.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + path);
    out << content;
    if (!out.good()) throw ValidationError("failed writing " + path);
}

}  // namespace treedose
