#include "hsprobe/report.hpp"

#include "hsprobe/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace hsprobe {

namespace {

constexpr double kWidth = 640.0;
constexpr double kHeight = 480.0;
constexpr double kLeft = 70.0;
constexpr double kRight = 20.0;
constexpr double kTop = 40.0;
constexpr double kBottom = 60.0;

constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string num(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return buf;
}

// Exact decimal for CSV (round-trips through strtod).
std::string exact(double v) {
    if (std::isinf(v)) {
        return v > 0 ? "inf" : "-inf";
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

}  // namespace

std::string line_chart_svg(const Axes& axes, const std::vector<Series>& series) {
    require(axes.x_max > axes.x_min && axes.y_max > axes.y_min, ErrorKind::invalid_argument, "empty plot range");
    const double pw = kWidth - kLeft - kRight;
    const double ph = kHeight - kTop - kBottom;
    auto sx = [&](double x) { return kLeft + (x - axes.x_min) / (axes.x_max - axes.x_min) * pw; };
    auto sy = [&](double y) { return kTop + ph - (y - axes.y_min) / (axes.y_max - axes.y_min) * ph; };

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << escape(axes.title)
      << "</text>\n";

    // grid and ticks
    for (int i = 0; i <= 5; ++i) {
        const double fx = axes.x_min + (axes.x_max - axes.x_min) * i / 5.0;
        const double fy = axes.y_min + (axes.y_max - axes.y_min) * i / 5.0;
        o << "<line x1=\"" << num(sx(fx), 6) << "\" y1=\"" << kTop << "\" x2=\"" << num(sx(fx), 6) << "\" y2=\""
          << kTop + ph << "\" stroke=\"#e0e0e0\"/>\n";
        o << "<line x1=\"" << kLeft << "\" y1=\"" << num(sy(fy), 6) << "\" x2=\"" << kLeft + pw << "\" y2=\""
          << num(sy(fy), 6) << "\" stroke=\"#e0e0e0\"/>\n";
        o << "<text x=\"" << num(sx(fx), 6) << "\" y=\"" << kTop + ph + 18 << "\" text-anchor=\"middle\">" << num(fx, 3)
          << "</text>\n";
        o << "<text x=\"" << kLeft - 8 << "\" y=\"" << num(sy(fy) + 4, 6) << "\" text-anchor=\"end\">" << num(fy, 3)
          << "</text>\n";
    }
    o << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n";
    o << "<text class=\"x-label\" x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 16
      << "\" text-anchor=\"middle\">" << escape(axes.x_label) << "</text>\n";
    o << "<text class=\"y-label\" x=\"18\" y=\"" << kTop + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
      << kTop + ph / 2 << ")\">" << escape(axes.y_label) << "</text>\n";
    if (axes.diagonal) {
        o << "<line x1=\"" << num(sx(axes.x_min), 6) << "\" y1=\"" << num(sy(axes.y_min), 6) << "\" x2=\""
          << num(sx(axes.x_max), 6) << "\" y2=\"" << num(sy(axes.y_max), 6)
          << "\" stroke=\"gray\" stroke-dasharray=\"4 4\"/>\n";
    }

    for (std::size_t s = 0; s < series.size(); ++s) {
        const auto& ser = series[s];
        require(ser.x.size() == ser.y.size(), ErrorKind::shape_mismatch, "series '" + ser.name + "' x/y size differ");
        const char* color = kColors[s % std::size(kColors)];
        o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (std::size_t i = 0; i < ser.x.size(); ++i) {
            o << (i ? " " : "") << num(sx(ser.x[i]), 6) << ',' << num(sy(ser.y[i]), 6);
        }
        o << "\"/>\n";
        if (ser.x.size() <= 60) {
            for (std::size_t i = 0; i < ser.x.size(); ++i) {
                o << "<circle cx=\"" << num(sx(ser.x[i]), 6) << "\" cy=\"" << num(sy(ser.y[i]), 6)
                  << "\" r=\"3\" fill=\"" << color << "\"/>\n";
            }
        }
        const double ly = kTop + 16 + 18.0 * static_cast<double>(s);
        o << "<line x1=\"" << kLeft + pw - 170 << "\" y1=\"" << ly - 4 << "\" x2=\"" << kLeft + pw - 150 << "\" y2=\""
          << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        o << "<text x=\"" << kLeft + pw - 144 << "\" y=\"" << ly << "\">" << escape(ser.name) << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

std::string roc_svg(const std::vector<RocPoint>& curve, double area) {
    Series s{"AUROC = " + num(area), {}, {}};
    for (const auto& p : curve) {
        s.x.push_back(p.fpr);
        s.y.push_back(p.tpr);
    }
    Axes ax{"ROC curve", "False positive rate", "True positive rate"};
    ax.diagonal = true;
    return line_chart_svg(ax, {s});
}

std::string rac_svg(const std::vector<RACPoint>& curve, double area) {
    Series s{"AURAC = " + num(area), {}, {}};
    double lo = 1.0;
    for (const auto& p : curve) {
        s.x.push_back(p.coverage);
        s.y.push_back(p.accuracy);
        lo = std::min(lo, p.accuracy);
    }
    Axes ax{"Rejection-accuracy curve", "Coverage", "Accuracy"};
    ax.y_min = std::max(0.0, std::floor(lo * 10.0) / 10.0 - 0.05);
    if (ax.y_min >= ax.y_max) {
        ax.y_min = 0.0;
    }
    return line_chart_svg(ax, {s});
}

std::string layer_sweep_svg(const std::vector<LayerSweepRow>& rows) {
    require(!rows.empty(), ErrorKind::invalid_argument, "no layer sweep rows to plot");
    Series au{"AUROC", {}, {}};
    Series ar{"AURAC", {}, {}};
    double lo = rows.front().layer, hi = rows.front().layer;
    for (const auto& r : rows) {
        const auto l = static_cast<double>(r.layer);
        au.x.push_back(l);
        au.y.push_back(r.auroc);
        ar.x.push_back(l);
        ar.y.push_back(r.aurac);
        lo = std::min(lo, l);
        hi = std::max(hi, l);
    }
    Axes ax{"Layer sweep", "Layer", "Score"};
    ax.x_min = lo;
    ax.x_max = hi > lo ? hi : lo + 1.0;
    return line_chart_svg(ax, {au, ar});
}

std::string truncation_svg(const std::vector<TruncationPoint>& points) {
    Series au{"AUROC", {}, {}};
    for (const auto& p : points) {
        au.x.push_back(p.fraction);
        au.y.push_back(p.report.auroc);
    }
    Axes ax{"Partial-answer detection", "Fraction of answer tokens", "AUROC"};
    return line_chart_svg(ax, {au});
}

std::string roc_csv(const std::vector<RocPoint>& curve) {
    std::string out = "fpr,tpr,threshold\n";
    for (const auto& p : curve) {
        out += exact(p.fpr) + ',' + exact(p.tpr) + ',' + exact(p.threshold) + '\n';
    }
    return out;
}

std::string rac_csv(const std::vector<RACPoint>& curve) {
    std::string out = "coverage,accuracy,threshold,retained\n";
    for (const auto& p : curve) {
        out += exact(p.coverage) + ',' + exact(p.accuracy) + ',' + exact(p.threshold) + ',' +
               std::to_string(p.retained) + '\n';
    }
    return out;
}

std::string layer_sweep_csv(const std::vector<LayerSweepRow>& rows) {
    std::string out = "layer,auroc,aurac,accuracy,test_count,best_epoch\n";
    for (const auto& r : rows) {
        out += std::to_string(r.layer) + ',' + exact(r.auroc) + ',' + exact(r.aurac) + ',' + exact(r.accuracy) + ',' +
               std::to_string(r.test_count) + ',' + std::to_string(r.best_epoch) + '\n';
    }
    return out;
}

std::string truncation_csv(const std::vector<TruncationPoint>& points) {
    std::string out = "fraction,auroc,aurac,accuracy\n";
    for (const auto& p : points) {
        out += exact(p.fraction) + ',' + exact(p.report.auroc) + ',' + exact(p.report.aurac) + ',' +
               exact(p.report.accuracy) + '\n';
    }
    return out;
}

std::string ood_csv(const OodMatrix& m) {
    std::string out = "target";
    for (const auto& s : m.sources) {
        out += ',' + s;
    }
    out += '\n';
    for (std::size_t t = 0; t < m.targets.size(); ++t) {
        out += m.targets[t];
        for (std::size_t s = 0; s < m.sources.size(); ++s) {
            out += ',' + exact(m.auroc(t, s));
        }
        out += '\n';
    }
    return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream f(path, std::ios::binary);
    require(static_cast<bool>(f), ErrorKind::io, "cannot open " + path.string() + " for writing");
    f << text;
    require(static_cast<bool>(f), ErrorKind::io, "write failed: " + path.string());
}

}  // namespace hsprobe
