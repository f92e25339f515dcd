#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fec/tensor.hpp"

namespace fec {

// Interleaved 8-bit RGB, row-major.
struct ImageU8 {
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> rgb;

    static ImageU8 filled(int h, int w, std::uint8_t r, std::uint8_t g, std::uint8_t b);
    std::uint8_t* px(int y, int x) { return rgb.data() + 3 * (static_cast<std::size_t>(y) * w + x); }
    const std::uint8_t* px(int y, int x) const {
        return rgb.data() + 3 * (static_cast<std::size_t>(y) * w + x);
    }
};

// PNG files; any bit depth / palette / gray input is expanded to 8-bit RGB.
ImageU8 read_png_rgb(const std::string& path);
void write_png_rgb(const std::string& path, const ImageU8& img);

ImageU8 resize_bilinear(const ImageU8& img, int out_h, int out_w);

// [3, H, W] with values scaled to [0, 1].
template <typename T>
Tensor<T> image_to_chw(const ImageU8& img);

}  // namespace fec
