#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "fec/model.hpp"

namespace fec {

// Binary weight file: "FECW" magic, u32 format version, config JSON echo,
// named little-endian tensor table, trailing CRC-32. Bit-exact round trip.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::uint32_t crc32(std::span<const unsigned char> bytes);

template <typename T>
void save_checkpoint(Model<T>& model, const std::string& path);

// Rebuilds the model from the embedded config, then overwrites every
// parameter from the tensor table. Any mismatch is an error, never a reshape.
template <typename T>
Model<T> load_checkpoint(const std::string& path);

}  // namespace fec
