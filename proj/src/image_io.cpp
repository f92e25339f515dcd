#include "fec/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "fec/errors.hpp"

namespace fec {
namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

ImageU8 ImageU8::filled(int h, int w, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    ImageU8 img;
    img.h = h;
    img.w = w;
    img.rgb.resize(static_cast<std::size_t>(h) * w * 3);
    for (std::size_t i = 0; i < img.rgb.size(); i += 3) {
        img.rgb[i] = r;
        img.rgb[i + 1] = g;
        img.rgb[i + 2] = b;
    }
    return img;
}

ImageU8 read_png_rgb(const std::string& path) {
    FilePtr file(std::fopen(path.c_str(), "rb"));
    if (!file) throw FormatError("cannot open image: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw FormatError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw FormatError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("not a readable PNG: " + path);
    }

    png_init_io(png, file.get());
    png_read_info(png, info);

    // Normalize every input flavor to 8-bit RGB.
    png_set_expand(png);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (png_get_color_type(png, info) & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    const auto color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    ImageU8 img;
    img.h = static_cast<int>(png_get_image_height(png, info));
    img.w = static_cast<int>(png_get_image_width(png, info));
    img.rgb.resize(static_cast<std::size_t>(img.h) * img.w * 3);

    std::vector<png_bytep> rows(static_cast<std::size_t>(img.h));
    for (int y = 0; y < img.h; ++y) rows[static_cast<std::size_t>(y)] = img.px(y, 0);
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png_rgb(const std::string& path, const ImageU8& img) {
    if (img.h <= 0 || img.w <= 0 ||
        img.rgb.size() != static_cast<std::size_t>(img.h) * img.w * 3)
        throw ArgumentError("write_png_rgb: malformed image buffer");

    FilePtr file(std::fopen(path.c_str(), "wb"));
    if (!file) throw FormatError("cannot open for writing: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw FormatError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw FormatError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw FormatError("PNG write failed: " + path);
    }

    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.h; ++y)
        png_write_row(png, const_cast<png_bytep>(img.px(y, 0)));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

ImageU8 resize_bilinear(const ImageU8& img, int out_h, int out_w) {
    if (img.h <= 0 || img.w <= 0) throw ArgumentError("resize_bilinear: empty source image");
    if (out_h <= 0 || out_w <= 0) throw ArgumentError("resize_bilinear: output size must be positive");
    if (img.h == out_h && img.w == out_w) return img;

    ImageU8 out;
    out.h = out_h;
    out.w = out_w;
    out.rgb.resize(static_cast<std::size_t>(out_h) * out_w * 3);

    // Half-pixel centers keep the mapping symmetric under up/downscaling.
    const double sy = static_cast<double>(img.h) / out_h;
    const double sx = static_cast<double>(img.w) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.h - 1.0);
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, img.h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.w - 1.0);
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, img.w - 1);
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const double top = (1.0 - wx) * img.px(y0, x0)[c] + wx * img.px(y0, x1)[c];
                const double bot = (1.0 - wx) * img.px(y1, x0)[c] + wx * img.px(y1, x1)[c];
                const double v = (1.0 - wy) * top + wy * bot;
                out.px(y, x)[c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> image_to_chw(const ImageU8& img) {
    Tensor<T> t = Tensor<T>::zeros({3, img.h, img.w});
    const std::int64_t plane = static_cast<std::int64_t>(img.h) * img.w;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c)
                t.data[static_cast<std::size_t>(c * plane + y * img.w + x)] =
                    static_cast<T>(img.px(y, x)[c]) / T(255);
    return t;
}

template Tensor<float> image_to_chw<float>(const ImageU8&);
template Tensor<double> image_to_chw<double>(const ImageU8&);

}  // namespace fec
