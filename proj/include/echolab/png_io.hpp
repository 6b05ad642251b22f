#pragma once

#include <png.h>

#include <cstdio>
#include <string>
#include <vector>

#include "echolab/tensor.hpp"

namespace echolab {

// Minimal 8-bit RGB PNG read/write on top of libpng. Fixed settings keep the
// emitted byte stream deterministic for identical pixel data.

inline void write_png_rgb8(const std::string& path, int width, int height,
                           const std::vector<unsigned char>& rgb) {
    check(rgb.size() == static_cast<size_t>(width) * height * 3,
          "write_png: buffer size mismatch");
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw ParamError("write_png: cannot open " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr,
                                              nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw ParamError("write_png: libpng failure for " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, width, height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<size_t>(height));
    for (int y = 0; y < height; y++)
        rows[static_cast<size_t>(y)] =
            const_cast<png_bytep>(rgb.data() + static_cast<size_t>(y) * width * 3);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

inline std::vector<unsigned char> read_png_rgb8(const std::string& path, int* width,
                                                int* height) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw ParamError("read_png: cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr,
                                             nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IntegrityError("read_png: corrupt file " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    *width = static_cast<int>(png_get_image_width(png, info));
    *height = static_cast<int>(png_get_image_height(png, info));
    std::vector<unsigned char> rgb(static_cast<size_t>(*width) * *height * 3);
    std::vector<png_bytep> rows(static_cast<size_t>(*height));
    for (int y = 0; y < *height; y++)
        rows[static_cast<size_t>(y)] = rgb.data() + static_cast<size_t>(y) * *width * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return rgb;
}

// ---- tensor conversions ---------------------------------------------------
// Disk format is 8-bit PNG in [0,1]; the model space is [-1,1].

inline std::vector<unsigned char> unit_to_bytes(const Tensor& img01) {
    int C = img01.dim(0), H = img01.dim(1), W = img01.dim(2);
    check(C == 3, "unit_to_bytes: expected 3 channels");
    std::vector<unsigned char> rgb(static_cast<size_t>(H) * W * 3);
    for (int h = 0; h < H; h++)
        for (int w = 0; w < W; w++)
            for (int c = 0; c < 3; c++) {
                double v = img01[(static_cast<size_t>(c) * H + h) * W + w];
                v = std::min(1.0, std::max(0.0, v));
                rgb[(static_cast<size_t>(h) * W + w) * 3 + c] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }
    return rgb;
}

inline Tensor bytes_to_unit(const std::vector<unsigned char>& rgb, int H, int W) {
    Tensor img({3, H, W});
    for (int h = 0; h < H; h++)
        for (int w = 0; w < W; w++)
            for (int c = 0; c < 3; c++)
                img[(static_cast<size_t>(c) * H + h) * W + w] =
                    rgb[(static_cast<size_t>(h) * W + w) * 3 + c] / 255.0;
    return img;
}

inline Tensor unit_to_model(const Tensor& img01) {
    Tensor out = img01.clone();
    for (size_t i = 0; i < out.size(); i++) out[i] = out[i] * 2.0 - 1.0;
    return out;
}

inline Tensor model_to_unit(const Tensor& img) {
    Tensor out = img.clone();
    for (size_t i = 0; i < out.size(); i++)
        out[i] = std::min(1.0, std::max(0.0, (out[i] + 1.0) * 0.5));
    return out;
}

inline void save_image_png(const std::string& path, const Tensor& img01) {
    write_png_rgb8(path, img01.dim(2), img01.dim(1), unit_to_bytes(img01));
}

inline Tensor load_image_png(const std::string& path) {
    int w = 0, h = 0;
    auto rgb = read_png_rgb8(path, &w, &h);
    return bytes_to_unit(rgb, h, w);
}

// tile a list of [0,1] images into one grid image (row-major)
inline Tensor tile_grid(const std::vector<Tensor>& imgs, int cols) {
    check(!imgs.empty(), "tile_grid: empty image list");
    int H = imgs[0].dim(1), W = imgs[0].dim(2);
    int n = static_cast<int>(imgs.size());
    int rows = (n + cols - 1) / cols;
    Tensor grid({3, rows * H, cols * W});
    for (int i = 0; i < n; i++) {
        int r = i / cols, c = i % cols;
        for (int ch = 0; ch < 3; ch++)
            for (int y = 0; y < H; y++)
                for (int x = 0; x < W; x++)
                    grid[(static_cast<size_t>(ch) * rows * H + r * H + y) * (cols * W) +
                         c * W + x] = imgs[static_cast<size_t>(i)]
                                          [(static_cast<size_t>(ch) * H + y) * W + x];
    }
    return grid;
}

}  // namespace echolab
