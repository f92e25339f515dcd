#include "fec/synth_digits.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "fec/errors.hpp"
#include "fec/rng.hpp"

namespace fec {
namespace {

constexpr int kSide = 28;
constexpr int kGlyphW = 5;
constexpr int kGlyphH = 7;

// Classic 5x7 bitmap font, one row per scanline, LSB = leftmost column.
constexpr std::array<std::array<std::uint8_t, kGlyphH>, 10> kGlyphs = {{
    {0b01110, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b01110},  // 0
    {0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110},  // 1
    {0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111},  // 2
    {0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110},  // 3
    {0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010},  // 4
    {0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110},  // 5
    {0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110},  // 6
    {0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000},  // 7
    {0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110},  // 8
    {0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100},  // 9
}};

double glyph_bit(int digit, int gy, int gx) {
    if (gy < 0 || gy >= kGlyphH || gx < 0 || gx >= kGlyphW) return 0.0;
    return (kGlyphs[static_cast<std::size_t>(digit)][static_cast<std::size_t>(gy)] >>
            (kGlyphW - 1 - gx)) &
                   1
               ? 1.0
               : 0.0;
}

// Bilinear sample of the binary glyph at fractional coordinates.
double glyph_sample(int digit, double gy, double gx) {
    const int y0 = static_cast<int>(std::floor(gy));
    const int x0 = static_cast<int>(std::floor(gx));
    const double wy = gy - y0;
    const double wx = gx - x0;
    return (1 - wy) * ((1 - wx) * glyph_bit(digit, y0, x0) + wx * glyph_bit(digit, y0, x0 + 1)) +
           wy * ((1 - wx) * glyph_bit(digit, y0 + 1, x0) + wx * glyph_bit(digit, y0 + 1, x0 + 1));
}

void render_digit(std::uint8_t* out, int digit, Rng& rng) {
    const double scale = rng.uniform(2.6, 3.3);
    const double theta = rng.uniform(-0.26, 0.26);  // about +/- 15 degrees
    const double shift_y = rng.uniform(-2.5, 2.5);
    const double shift_x = rng.uniform(-2.5, 2.5);
    const double fg = rng.uniform(0.72, 1.0);
    const double cos_t = std::cos(theta);
    const double sin_t = std::sin(theta);
    const double cy = (kSide - 1) / 2.0 + shift_y;
    const double cx = (kSide - 1) / 2.0 + shift_x;

    for (int y = 0; y < kSide; ++y)
        for (int x = 0; x < kSide; ++x) {
            // Inverse mapping: canvas pixel back into glyph space.
            const double dy = y - cy;
            const double dx = x - cx;
            const double gy = (cos_t * dy + sin_t * dx) / scale + (kGlyphH - 1) / 2.0;
            const double gx = (-sin_t * dy + cos_t * dx) / scale + (kGlyphW - 1) / 2.0;
            double v = fg * glyph_sample(digit, gy, gx) + 0.04 * rng.normal();
            v = std::clamp(v, 0.0, 1.0);
            out[y * kSide + x] = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
}

}  // namespace

Dataset make_digit_dataset(std::int64_t count, std::uint64_t seed, const std::string& split) {
    if (count < 1) throw ArgumentError("make_digit_dataset: count must be positive");
    Dataset ds;
    ds.height = kSide;
    ds.width = kSide;
    ds.channels = 1;
    ds.num_classes = 10;
    ds.split = split;
    ds.pixels.resize(static_cast<std::size_t>(count) * kSide * kSide);
    ds.labels.resize(static_cast<std::size_t>(count));
    Rng rng(seed);
    for (std::int64_t i = 0; i < count; ++i) {
        const int digit = static_cast<int>(i % 10);
        ds.labels[static_cast<std::size_t>(i)] = digit;
        render_digit(ds.pixels.data() + i * kSide * kSide, digit, rng);
    }
    return ds;
}

}  // namespace fec
