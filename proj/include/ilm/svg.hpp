#pragma once

#include <string>
#include <utility>
#include <vector>

namespace ilm::svg {

struct Series {
    std::string label;
    std::string color;
    std::vector<std::pair<double, double>> points; // (x, y)
};

// Minimal deterministic chart rendering. CSV stays the authoritative
// artifact; these are convenience views.
std::string line_chart(const std::string& title, const std::string& x_label,
                       const std::string& y_label, const std::vector<Series>& series);

std::string bar_chart(const std::string& title, const std::string& y_label,
                      const std::vector<std::string>& labels, const std::vector<double>& values,
                      const std::vector<std::pair<double, double>>& error_bars);

} // namespace ilm::svg
