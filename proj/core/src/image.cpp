#include "diffaug/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

#include "diffaug/common.hpp"

namespace diffaug {

double box_iou(const Box& a, const Box& b) {
    double ix = std::max(0.0f, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    double iy = std::max(0.0f, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    double inter = ix * iy;
    double uni = double(a.area()) + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

Image crop_image(const Image& img, int x0, int y0, int x1, int y1) {
    if (x0 < 0 || y0 < 0 || x1 > img.width || y1 > img.height || x0 >= x1 || y0 >= y1)
        throw std::invalid_argument("crop_image: box out of bounds");
    Image out(y1 - y0, x1 - x0, img.channels);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x)
            for (int c = 0; c < img.channels; ++c)
                out.at(y - y0, x - x0, c) = img.at(y, x, c);
    return out;
}

Image resize_bilinear(const Image& img, int out_h, int out_w) {
    Image out(out_h, out_w, img.channels);
    float sy = static_cast<float>(img.height) / out_h;
    float sx = static_cast<float>(img.width) / out_w;
    for (int y = 0; y < out_h; ++y) {
        float fy = (y + 0.5f) * sy - 0.5f;
        int y0 = static_cast<int>(std::floor(fy));
        float wy = fy - y0;
        int ya = std::clamp(y0, 0, img.height - 1);
        int yb = std::clamp(y0 + 1, 0, img.height - 1);
        for (int x = 0; x < out_w; ++x) {
            float fx = (x + 0.5f) * sx - 0.5f;
            int x0 = static_cast<int>(std::floor(fx));
            float wx = fx - x0;
            int xa = std::clamp(x0, 0, img.width - 1);
            int xb = std::clamp(x0 + 1, 0, img.width - 1);
            for (int c = 0; c < img.channels; ++c) {
                float top = img.at(ya, xa, c) * (1 - wx) + img.at(ya, xb, c) * wx;
                float bot = img.at(yb, xa, c) * (1 - wx) + img.at(yb, xb, c) * wx;
                out.at(y, x, c) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return out;
}

std::vector<float> to_chw(const Image& img) {
    std::vector<float> out(img.size());
    size_t hw = size_t(img.height) * img.width;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                out[c * hw + size_t(y) * img.width + x] = img.at(y, x, c);
    return out;
}

Image from_chw(const float* data, int h, int w, int c) {
    Image out(h, w, c);
    size_t hw = size_t(h) * w;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch)
                out.at(y, x, ch) = data[ch * hw + size_t(y) * w + x];
    return out;
}

uint8_t quantize8(float v) {
    float c = std::clamp(v, 0.0f, 1.0f);
    return static_cast<uint8_t>(std::lround(c * 255.0f));
}

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};

}  // namespace

void write_png(const std::string& path, const Image& img) {
    if (img.channels != 3) throw std::invalid_argument("write_png: expected 3 channels");
    std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw std::runtime_error("write_png: cannot open " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("write_png: init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw std::runtime_error("write_png: info init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("write_png: libpng error on " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<uint8_t> row(size_t(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) row[size_t(x) * 3 + c] = quantize8(img.at(y, x, c));
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png(const std::string& path) {
    std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw MissingArtifactError("read_png: missing file " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("read_png: init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw std::runtime_error("read_png: info init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("read_png: libpng error on " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    Image out(static_cast<int>(h), static_cast<int>(w), 3);
    std::vector<uint8_t> row(size_t(w) * 3);
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                out.at(static_cast<int>(y), static_cast<int>(x), c) =
                    row[size_t(x) * 3 + c] / 255.0f;
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

}  // namespace diffaug
