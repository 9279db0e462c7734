#pragma once

#include <string>
#include <vector>

#include "diffaug/image.hpp"

namespace diffaug {

struct PlotSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

// Small static line chart rendered straight to a PNG.
void write_line_chart(const std::string& path, const std::vector<PlotSeries>& series,
                      const std::string& title, int width = 640, int height = 400);

}  // namespace diffaug
