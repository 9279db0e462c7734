#include "diffaug/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <stdexcept>

namespace diffaug {

namespace {

const float kPalette[6][3] = {{0.12f, 0.47f, 0.71f}, {0.89f, 0.29f, 0.20f},
                              {0.17f, 0.63f, 0.17f}, {0.58f, 0.40f, 0.74f},
                              {0.55f, 0.34f, 0.29f}, {0.90f, 0.67f, 0.01f}};

void draw_line(Image& img, float x0, float y0, float x1, float y1, const float* rgb) {
    int steps = static_cast<int>(std::max(std::abs(x1 - x0), std::abs(y1 - y0))) * 2 + 1;
    for (int i = 0; i <= steps; ++i) {
        float t = static_cast<float>(i) / steps;
        int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
        int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
        if (x < 0 || x >= img.width || y < 0 || y >= img.height) continue;
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[c];
    }
}

// 5x7 bitmap digits and a few glyphs, enough for axis labels
void draw_text(Image& img, int x, int y, const std::string& text, const float* rgb) {
    static const char* glyphs = "0123456789.-eE+";
    static const uint8_t font[15][7] = {
        {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}, {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E},
        {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}, {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E},
        {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}, {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E},
        {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}, {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},
        {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}, {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C},
        {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}, {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00},
        {0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E, 0x00}, {0x1F, 0x10, 0x1C, 0x10, 0x10, 0x1F, 0x00},
        {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}};
    int cx = x;
    for (char ch : text) {
        const char* pos = std::strchr(glyphs, ch);
        if (!pos) {
            cx += 6;
            continue;
        }
        int gi = static_cast<int>(pos - glyphs);
        for (int ry = 0; ry < 7; ++ry)
            for (int rx = 0; rx < 5; ++rx)
                if (font[gi][ry] & (1 << (4 - rx))) {
                    int px = cx + rx, py = y + ry;
                    if (px >= 0 && px < img.width && py >= 0 && py < img.height)
                        for (int c = 0; c < 3; ++c) img.at(py, px, c) = rgb[c];
                }
        cx += 6;
    }
}

std::string format_num(double v) {
    char buf[32];
    if (v != 0.0 && (std::abs(v) < 1e-3 || std::abs(v) >= 1e5))
        std::snprintf(buf, sizeof(buf), "%.1e", v);
    else
        std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

}  // namespace

void write_line_chart(const std::string& path, const std::vector<PlotSeries>& series,
                      const std::string& title, int width, int height) {
    (void)title;  // kept in the signature for callers; no full font on board
    Image img(height, width, 3);
    std::fill(img.data.begin(), img.data.end(), 1.0f);

    const int ml = 64, mr = 16, mt = 20, mb = 36;
    double xmin = std::numeric_limits<double>::max(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    for (const auto& s : series)
        for (size_t i = 0; i < s.x.size(); ++i) {
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    if (!(xmax > xmin)) xmax = xmin + 1.0;
    if (!(ymax > ymin)) ymax = ymin + 1.0;

    float axis_rgb[3] = {0.2f, 0.2f, 0.2f};
    draw_line(img, ml, mt, ml, static_cast<float>(height - mb), axis_rgb);
    draw_line(img, ml, static_cast<float>(height - mb), static_cast<float>(width - mr),
              static_cast<float>(height - mb), axis_rgb);
    draw_text(img, 2, mt - 8, format_num(ymax), axis_rgb);
    draw_text(img, 2, height - mb - 4, format_num(ymin), axis_rgb);
    draw_text(img, ml - 8, height - mb + 8, format_num(xmin), axis_rgb);
    draw_text(img, width - mr - 40, height - mb + 8, format_num(xmax), axis_rgb);

    auto px = [&](double x) {
        return ml + (x - xmin) / (xmax - xmin) * (width - ml - mr);
    };
    auto py = [&](double y) {
        return (height - mb) - (y - ymin) / (ymax - ymin) * (height - mt - mb);
    };
    for (size_t si = 0; si < series.size(); ++si) {
        const float* rgb = kPalette[si % 6];
        const auto& s = series[si];
        for (size_t i = 0; i + 1 < s.x.size(); ++i)
            draw_line(img, static_cast<float>(px(s.x[i])), static_cast<float>(py(s.y[i])),
                      static_cast<float>(px(s.x[i + 1])),
                      static_cast<float>(py(s.y[i + 1])), rgb);
    }
    write_png(path, img);
}

}  // namespace diffaug
