#include "ilm/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace ilm::svg {

namespace {

constexpr int kWidth = 640;
constexpr int kHeight = 420;
constexpr int kMarginLeft = 70;
constexpr int kMarginRight = 30;
constexpr int kMarginTop = 44;
constexpr int kMarginBottom = 56;

std::string num(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

void expand_range(double& lo, double& hi) {
    if (!(hi > lo)) {
        hi = lo + 1.0;
        lo -= 1.0;
    }
    const double pad = (hi - lo) * 0.08;
    lo -= pad;
    hi += pad;
}

std::string header(const std::string& title) {
    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(kWidth) +
         "\" height=\"" + std::to_string(kHeight) + "\" font-family=\"sans-serif\">\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s += "<text x=\"" + std::to_string(kWidth / 2) + "\" y=\"24\" text-anchor=\"middle\" "
         "font-size=\"15\">" + title + "</text>\n";
    return s;
}

std::string axes(const std::string& x_label, const std::string& y_label, double x_lo, double x_hi,
                 double y_lo, double y_hi) {
    const int x0 = kMarginLeft, x1 = kWidth - kMarginRight;
    const int y0 = kHeight - kMarginBottom, y1 = kMarginTop;
    std::string s;
    s += "<line x1=\"" + std::to_string(x0) + "\" y1=\"" + std::to_string(y0) + "\" x2=\"" +
         std::to_string(x1) + "\" y2=\"" + std::to_string(y0) + "\" stroke=\"black\"/>\n";
    s += "<line x1=\"" + std::to_string(x0) + "\" y1=\"" + std::to_string(y0) + "\" x2=\"" +
         std::to_string(x0) + "\" y2=\"" + std::to_string(y1) + "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double fx = x_lo + (x_hi - x_lo) * i / 4.0;
        const double px = x0 + (x1 - x0) * i / 4.0;
        s += "<text x=\"" + num(px) + "\" y=\"" + std::to_string(y0 + 18) +
             "\" text-anchor=\"middle\" font-size=\"11\">" + num(fx) + "</text>\n";
        const double fy = y_lo + (y_hi - y_lo) * i / 4.0;
        const double py = y0 - (y0 - y1) * i / 4.0;
        s += "<text x=\"" + std::to_string(x0 - 8) + "\" y=\"" + num(py + 4) +
             "\" text-anchor=\"end\" font-size=\"11\">" + num(fy) + "</text>\n";
    }
    s += "<text x=\"" + std::to_string((x0 + x1) / 2) + "\" y=\"" + std::to_string(kHeight - 14) +
         "\" text-anchor=\"middle\" font-size=\"12\">" + x_label + "</text>\n";
    s += "<text x=\"18\" y=\"" + std::to_string((y0 + y1) / 2) +
         "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 18 " +
         std::to_string((y0 + y1) / 2) + ")\">" + y_label + "</text>\n";
    return s;
}

} // namespace

std::string line_chart(const std::string& title, const std::string& x_label,
                       const std::string& y_label, const std::vector<Series>& series) {
    double x_lo = 0, x_hi = 0, y_lo = 0, y_hi = 0;
    bool first = true;
    for (const Series& s : series) {
        for (const auto& [x, y] : s.points) {
            if (first) {
                x_lo = x_hi = x;
                y_lo = y_hi = y;
                first = false;
            }
            x_lo = std::min(x_lo, x);
            x_hi = std::max(x_hi, x);
            y_lo = std::min(y_lo, y);
            y_hi = std::max(y_hi, y);
        }
    }
    expand_range(x_lo, x_hi);
    expand_range(y_lo, y_hi);
    const double sx = (kWidth - kMarginLeft - kMarginRight) / (x_hi - x_lo);
    const double sy = (kHeight - kMarginTop - kMarginBottom) / (y_hi - y_lo);
    auto px = [&](double x) { return kMarginLeft + (x - x_lo) * sx; };
    auto py = [&](double y) { return kHeight - kMarginBottom - (y - y_lo) * sy; };

    std::string out = header(title) + axes(x_label, y_label, x_lo, x_hi, y_lo, y_hi);
    int legend_y = kMarginTop + 4;
    for (const Series& s : series) {
        std::string pts;
        for (const auto& [x, y] : s.points) {
            pts += num(px(x)) + "," + num(py(y)) + " ";
        }
        out += "<polyline fill=\"none\" stroke=\"" + s.color + "\" stroke-width=\"2\" points=\"" +
               pts + "\"/>\n";
        for (const auto& [x, y] : s.points) {
            out += "<circle cx=\"" + num(px(x)) + "\" cy=\"" + num(py(y)) +
                   "\" r=\"3\" fill=\"" + s.color + "\"/>\n";
        }
        out += "<text x=\"" + std::to_string(kWidth - kMarginRight - 4) + "\" y=\"" +
               std::to_string(legend_y) + "\" text-anchor=\"end\" font-size=\"12\" fill=\"" +
               s.color + "\">" + s.label + "</text>\n";
        legend_y += 16;
    }
    return out + "</svg>\n";
}

std::string bar_chart(const std::string& title, const std::string& y_label,
                      const std::vector<std::string>& labels, const std::vector<double>& values,
                      const std::vector<std::pair<double, double>>& error_bars) {
    double y_lo = 0.0, y_hi = 0.0;
    for (size_t i = 0; i < values.size(); ++i) {
        y_hi = std::max(y_hi, values[i]);
        y_lo = std::min(y_lo, values[i]);
        if (i < error_bars.size()) {
            y_hi = std::max(y_hi, error_bars[i].second);
            y_lo = std::min(y_lo, error_bars[i].first);
        }
    }
    expand_range(y_lo, y_hi);
    const double sy = (kHeight - kMarginTop - kMarginBottom) / (y_hi - y_lo);
    auto py = [&](double y) { return kHeight - kMarginBottom - (y - y_lo) * sy; };
    const int plot_w = kWidth - kMarginLeft - kMarginRight;
    const double slot = plot_w / std::max<double>(1.0, static_cast<double>(values.size()));

    std::string out = header(title) + axes("", y_label, 0, static_cast<double>(values.size()),
                                           y_lo, y_hi);
    for (size_t i = 0; i < values.size(); ++i) {
        const double cx = kMarginLeft + slot * (static_cast<double>(i) + 0.5);
        const double w = slot * 0.5;
        const double top = py(values[i]);
        const double base = py(std::max(0.0, y_lo));
        out += "<rect x=\"" + num(cx - w / 2) + "\" y=\"" + num(std::min(top, base)) +
               "\" width=\"" + num(w) + "\" height=\"" + num(std::abs(base - top)) +
               "\" fill=\"#4878cf\"/>\n";
        if (i < error_bars.size()) {
            out += "<line x1=\"" + num(cx) + "\" y1=\"" + num(py(error_bars[i].first)) +
                   "\" x2=\"" + num(cx) + "\" y2=\"" + num(py(error_bars[i].second)) +
                   "\" stroke=\"black\" stroke-width=\"1.5\"/>\n";
        }
        out += "<text x=\"" + num(cx) + "\" y=\"" + std::to_string(kHeight - kMarginBottom + 18) +
               "\" text-anchor=\"middle\" font-size=\"12\">" + labels[i] + "</text>\n";
    }
    return out + "</svg>\n";
}

} // namespace ilm::svg
