#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fec/tensor.hpp"

namespace fec {

// Labeled images kept in their raw 8-bit form; per-sample tensors are
// materialized on demand so a 60k-image set stays small in memory.
struct Dataset {
    int height = 0;
    int width = 0;
    int channels = 0;  // 1 (grayscale) or 3
    int num_classes = 0;
    std::vector<std::uint8_t> pixels;  // count * channels * height * width
    std::vector<int> labels;
    std::string split;

    std::int64_t count() const { return static_cast<std::int64_t>(labels.size()); }
    std::int64_t sample_bytes() const {
        return static_cast<std::int64_t>(channels) * height * width;
    }
    const std::uint8_t* sample(std::int64_t i) const {
        return pixels.data() + i * sample_bytes();
    }
};

// Classic big-endian idx files: magic 0x803 for image stacks, 0x801 for label
// vectors. Labels must land in [0, num_classes).
Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path,
                         int num_classes, const std::string& split);
void write_idx_files(const Dataset& ds, const std::string& images_path,
                     const std::string& labels_path);

// Directory of class-named subdirectories of same-sized PNG files; classes are
// assigned 0..K-1 in sorted subdirectory-name order.
Dataset load_image_directory(const std::string& root, const std::string& split);

// Per-channel mean/std of the raw pixels scaled to [0, 1]; a zero spread is
// guarded to 1 so constant channels normalize to zero. Returns {mean, std},
// each of shape [3] (grayscale statistics are replicated).
std::pair<Tensor<float>, Tensor<float>> compute_channel_stats(const Dataset& ds);

// Raw bytes -> replicated RGB -> bilinear resize to input_size -> [0,1] ->
// per-channel normalization; optional horizontal flip happens before resizing.
Tensor<float> materialize_image(const Dataset& ds, std::int64_t index, int input_size,
                                const Tensor<float>& mean, const Tensor<float>& stddev,
                                bool hflip = false);

}  // namespace fec
