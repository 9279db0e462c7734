#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace diffaug {

// HWC float image with values in [0,1]. Channels is 3 throughout the project.
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> data;  // h * w * c, row major, interleaved channels

    Image() = default;
    Image(int h, int w, int c) : height(h), width(w), channels(c), data(size_t(h) * w * c, 0.0f) {}

    float& at(int y, int x, int c) { return data[(size_t(y) * width + x) * channels + c]; }
    float at(int y, int x, int c) const { return data[(size_t(y) * width + x) * channels + c]; }
    size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }
};

// Axis-aligned pixel box, [x_min, x_max) x [y_min, y_max).
struct Box {
    float x_min = 0, y_min = 0, x_max = 0, y_max = 0;

    float width() const { return x_max - x_min; }
    float height() const { return y_max - y_min; }
    float area() const { return width() * height(); }
    float cx() const { return 0.5f * (x_min + x_max); }
    float cy() const { return 0.5f * (y_min + y_max); }
};

double box_iou(const Box& a, const Box& b);

// Sub-image copy; box is clamped to bounds by the caller.
Image crop_image(const Image& img, int x0, int y0, int x1, int y1);

// Bilinear resample to (out_h, out_w) with pixel-center alignment.
Image resize_bilinear(const Image& img, int out_h, int out_w);

// CHW <-> HWC conversion for feeding the conv stack.
std::vector<float> to_chw(const Image& img);
Image from_chw(const float* data, int h, int w, int c);

// 8-bit RGB PNG io. Images are quantized to 8 bits when written; the project
// renders scenes at 8-bit depth so write/load round trips are exact.
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

uint8_t quantize8(float v);

}  // namespace diffaug
