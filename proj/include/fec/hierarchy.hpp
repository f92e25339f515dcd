#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fec/cluster_ops.hpp"
#include "fec/image_io.hpp"
#include "fec/tensor.hpp"

namespace fec {

// One segment: the base pixels it covers plus its cluster id at this level and
// at every coarser level above it (ancestry[0] is its own id).
struct Segment {
    int cluster_id = 0;
    std::vector<int> ancestry;
    std::vector<int> pixels;  // sorted row-major indices at base resolution
};

struct PyramidLevel {
    int center_count = 0;  // clusters available at this level, including empty ones
    std::vector<Segment> segments;
};

// Levels run fine to coarse; every level partitions the base pixel grid and
// each coarser segment is an exact union of finer ones.
struct SegmentPyramid {
    int base_h = 0;
    int base_w = 0;
    int block = 1;  // pixels per stem cell along each axis
    std::vector<PyramidLevel> levels;

    int level_count() const { return static_cast<int>(levels.size()); }
};

// Links the pooling-layer assignments of one forward pass into a pyramid.
// Non-pool records in `records` are ignored. Each pool's input grid must equal
// the previous pool's center grid.
SegmentPyramid build_pyramid(const std::vector<AssignmentRecord>& records, int base_block);

// Lloyd's algorithm with k-means++ seeding over representative rows.
// Runs at most 300 iterations, stopping once inertia improves by less than a
// relative 1e-4. `inertia_trace`, when given, receives the inertia after every
// assignment step (non-increasing).
std::vector<int> kmeans_reduce(const Tensor<double>& representatives, int k, std::uint64_t seed,
                               std::vector<double>* inertia_trace = nullptr);

struct Segmentation {
    int h = 0;
    int w = 0;
    std::vector<int> labels;  // row-major

    int label_at(int y, int x) const { return labels[static_cast<std::size_t>(y) * w + x]; }
};

// Projects one pyramid level (1-based, matching CLI --level) onto the base
// grid. `kmeans_labels` optionally remaps cluster ids to reduced labels and
// must then have one entry per cluster at that level.
Segmentation render_segmentation(const SegmentPyramid& pyramid, int level,
                                 const std::vector<int>* kmeans_labels = nullptr,
                                 int median_radius = 0);

// Modal label over a square window of side 2*radius+1, clipped at the image
// border; ties pick the smallest label. This is the categorical counterpart of
// a median filter.
Segmentation median_filter_labels(const Segmentation& seg, int radius);

struct RgbColor {
    std::uint8_t r = 0, g = 0, b = 0;
};

// Deterministic palette: hues advance by the golden ratio so nearby labels get
// distant colors.
RgbColor palette_color(int label);

ImageU8 render_label_image(const Segmentation& seg);
ImageU8 overlay_segmentation(const ImageU8& base, const Segmentation& seg, double alpha = 0.5);

// Versioned JSON exports (schema_version 1).
std::string pyramid_to_json(const SegmentPyramid& pyramid);
std::string segmentation_to_json(const Segmentation& seg);
std::string records_to_json(const std::vector<AssignmentRecord>& records);

}  // namespace fec
