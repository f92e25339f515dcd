#pragma once

#include <cstdint>
#include <string>

#include "fec/dataset.hpp"

namespace fec {

// Procedurally rendered 28x28 grayscale digits in the ten-class digit-file
// layout: one fixed glyph per class, randomized pose (shift, rotation, scale),
// stroke brightness and pixel noise. Labels cycle 0..9 so every class is
// balanced. Entirely deterministic for a given seed.
Dataset make_digit_dataset(std::int64_t count, std::uint64_t seed, const std::string& split);

}  // namespace fec
