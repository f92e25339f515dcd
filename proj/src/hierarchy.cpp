#include "fec/hierarchy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "json.hpp"

#include "fec/errors.hpp"
#include "fec/rng.hpp"

namespace fec {
namespace {

std::vector<const AssignmentRecord*> pool_chain(const std::vector<AssignmentRecord>& records) {
    std::vector<const AssignmentRecord*> pools;
    for (const AssignmentRecord& r : records)
        if (r.is_pool) pools.push_back(&r);
    if (pools.empty()) throw ArgumentError("build_pyramid: no pooling records to link");
    for (std::size_t i = 0; i < pools.size(); ++i) {
        const AssignmentRecord& r = *pools[i];
        if (static_cast<std::int64_t>(r.assignment.size()) != r.input_grid.numel())
            throw ContractError("build_pyramid: record " + std::to_string(r.layer_id) +
                                " assignment length does not match its input grid");
        for (int a : r.assignment)
            if (a < 0 || a >= static_cast<int>(r.center_grid.numel()))
                throw ContractError("build_pyramid: record " + std::to_string(r.layer_id) +
                                    " assignment entry out of range");
        if (i > 0 && !(r.input_grid == pools[i - 1]->center_grid))
            throw ContractError(
                "build_pyramid: non-consecutive grid sizes: pool " + std::to_string(i) +
                " reads " + std::to_string(r.input_grid.h) + "x" + std::to_string(r.input_grid.w) +
                " but the previous pool produced " + std::to_string(pools[i - 1]->center_grid.h) +
                "x" + std::to_string(pools[i - 1]->center_grid.w));
    }
    return pools;
}

}  // namespace

SegmentPyramid build_pyramid(const std::vector<AssignmentRecord>& records, int base_block) {
    if (base_block < 1) throw ArgumentError("build_pyramid: base_block must be positive");
    const auto pools = pool_chain(records);
    const int depth = static_cast<int>(pools.size());
    const GridShape stem = pools[0]->input_grid;
    const int cells = static_cast<int>(stem.numel());

    // Cluster id of every stem cell at every level; level l+1 relabels level l.
    std::vector<std::vector<int>> cell_cluster(static_cast<std::size_t>(depth),
                                               std::vector<int>(static_cast<std::size_t>(cells)));
    for (int n = 0; n < cells; ++n) {
        int cur = pools[0]->assignment[static_cast<std::size_t>(n)];
        cell_cluster[0][static_cast<std::size_t>(n)] = cur;
        for (int l = 1; l < depth; ++l) {
            cur = pools[static_cast<std::size_t>(l)]->assignment[static_cast<std::size_t>(cur)];
            cell_cluster[static_cast<std::size_t>(l)][static_cast<std::size_t>(n)] = cur;
        }
    }

    SegmentPyramid pyr;
    pyr.block = base_block;
    pyr.base_h = stem.h * base_block;
    pyr.base_w = stem.w * base_block;
    pyr.levels.resize(static_cast<std::size_t>(depth));

    for (int l = 0; l < depth; ++l) {
        PyramidLevel& level = pyr.levels[static_cast<std::size_t>(l)];
        level.center_count = static_cast<int>(pools[static_cast<std::size_t>(l)]->center_grid.numel());
        std::vector<std::vector<int>> members(static_cast<std::size_t>(level.center_count));
        for (int n = 0; n < cells; ++n)
            members[static_cast<std::size_t>(cell_cluster[static_cast<std::size_t>(l)]
                                                         [static_cast<std::size_t>(n)])]
                .push_back(n);
        for (int id = 0; id < level.center_count; ++id) {
            if (members[static_cast<std::size_t>(id)].empty()) continue;
            Segment seg;
            seg.cluster_id = id;
            seg.ancestry.push_back(id);
            for (int q = l + 1, cur = id; q < depth; ++q) {
                cur = pools[static_cast<std::size_t>(q)]->assignment[static_cast<std::size_t>(cur)];
                seg.ancestry.push_back(cur);
            }
            for (int n : members[static_cast<std::size_t>(id)]) {
                const int cy = n / stem.w;
                const int cx = n % stem.w;
                for (int dy = 0; dy < base_block; ++dy)
                    for (int dx = 0; dx < base_block; ++dx)
                        seg.pixels.push_back((cy * base_block + dy) * pyr.base_w +
                                             cx * base_block + dx);
            }
            std::sort(seg.pixels.begin(), seg.pixels.end());
            level.segments.push_back(std::move(seg));
        }
    }
    return pyr;
}

std::vector<int> kmeans_reduce(const Tensor<double>& representatives, int k, std::uint64_t seed,
                               std::vector<double>* inertia_trace) {
    if (representatives.rank() != 2)
        throw ArgumentError("kmeans_reduce: representatives must be a 2-d tensor");
    const int n = static_cast<int>(representatives.rows());
    const int dim = static_cast<int>(representatives.cols());
    if (k < 1) throw ArgumentError("kmeans_reduce: k must be at least 1");
    if (k > n)
        throw ArgumentError("kmeans_reduce: k=" + std::to_string(k) + " exceeds the " +
                            std::to_string(n) + " available representatives");

    auto row = [&](int i) { return representatives.data.data() + static_cast<std::size_t>(i) * dim; };
    auto dist2_to = [&](int i, const std::vector<double>& c) {
        double d = 0.0;
        const double* p = row(i);
        for (int j = 0; j < dim; ++j) {
            const double diff = p[j] - c[static_cast<std::size_t>(j)];
            d += diff * diff;
        }
        return d;
    };

    Rng rng(seed);
    std::vector<std::vector<double>> centers;
    centers.reserve(static_cast<std::size_t>(k));
    auto push_center = [&](int i) {
        centers.emplace_back(row(i), row(i) + dim);
    };
    push_center(static_cast<int>(rng.below(n)));

    // k-means++: each next seed is drawn proportional to squared distance from
    // the nearest already-chosen seed.
    std::vector<double> best_d2(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) best_d2[static_cast<std::size_t>(i)] = dist2_to(i, centers[0]);
    while (static_cast<int>(centers.size()) < k) {
        double total = 0.0;
        for (double d : best_d2) total += d;
        int pick;
        if (total <= 0.0) {
            pick = static_cast<int>(rng.below(n));
        } else {
            const double target = rng.next_double() * total;
            double cum = 0.0;
            pick = n - 1;
            for (int i = 0; i < n; ++i) {
                cum += best_d2[static_cast<std::size_t>(i)];
                if (cum >= target) {
                    pick = i;
                    break;
                }
            }
        }
        push_center(pick);
        for (int i = 0; i < n; ++i)
            best_d2[static_cast<std::size_t>(i)] =
                std::min(best_d2[static_cast<std::size_t>(i)], dist2_to(i, centers.back()));
    }

    std::vector<int> labels(static_cast<std::size_t>(n), 0);
    double prev_inertia = std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < 300; ++iter) {
        double inertia = 0.0;
        for (int i = 0; i < n; ++i) {
            int best = 0;
            double best_d = dist2_to(i, centers[0]);
            for (int c = 1; c < k; ++c) {
                const double d = dist2_to(i, centers[static_cast<std::size_t>(c)]);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            labels[static_cast<std::size_t>(i)] = best;
            inertia += best_d;
        }
        if (inertia_trace) inertia_trace->push_back(inertia);
        if (inertia == 0.0 ||
            (std::isfinite(prev_inertia) && prev_inertia - inertia <= 1e-4 * prev_inertia))
            break;
        prev_inertia = inertia;

        std::vector<std::vector<double>> sums(static_cast<std::size_t>(k),
                                              std::vector<double>(static_cast<std::size_t>(dim)));
        std::vector<int> counts(static_cast<std::size_t>(k), 0);
        for (int i = 0; i < n; ++i) {
            const int c = labels[static_cast<std::size_t>(i)];
            ++counts[static_cast<std::size_t>(c)];
            const double* p = row(i);
            for (int j = 0; j < dim; ++j) sums[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)] += p[j];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] == 0) continue;  // keep an orphaned center
            for (int j = 0; j < dim; ++j)
                centers[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)] =
                    sums[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)] /
                    counts[static_cast<std::size_t>(c)];
        }
    }
    return labels;
}

Segmentation render_segmentation(const SegmentPyramid& pyramid, int level,
                                 const std::vector<int>* kmeans_labels, int median_radius) {
    if (level < 1 || level > pyramid.level_count())
        throw ArgumentError("render_segmentation: level " + std::to_string(level) +
                            " does not exist (pyramid has " +
                            std::to_string(pyramid.level_count()) + " levels)");
    if (median_radius < 0)
        throw ArgumentError("render_segmentation: median_radius must be non-negative");
    const PyramidLevel& lv = pyramid.levels[static_cast<std::size_t>(level - 1)];
    if (kmeans_labels && static_cast<int>(kmeans_labels->size()) != lv.center_count)
        throw ArgumentError("render_segmentation: got " + std::to_string(kmeans_labels->size()) +
                            " reduced labels for " + std::to_string(lv.center_count) + " clusters");

    Segmentation seg;
    seg.h = pyramid.base_h;
    seg.w = pyramid.base_w;
    seg.labels.assign(static_cast<std::size_t>(seg.h) * seg.w, 0);
    for (const Segment& s : lv.segments) {
        const int label =
            kmeans_labels ? (*kmeans_labels)[static_cast<std::size_t>(s.cluster_id)] : s.cluster_id;
        for (int px : s.pixels) seg.labels[static_cast<std::size_t>(px)] = label;
    }
    return median_radius > 0 ? median_filter_labels(seg, median_radius) : seg;
}

Segmentation median_filter_labels(const Segmentation& seg, int radius) {
    if (radius < 0) throw ArgumentError("median_filter_labels: radius must be non-negative");
    if (radius == 0) return seg;
    Segmentation out = seg;
    std::vector<int> window;
    window.reserve(static_cast<std::size_t>(2 * radius + 1) * (2 * radius + 1));
    for (int y = 0; y < seg.h; ++y) {
        for (int x = 0; x < seg.w; ++x) {
            window.clear();
            for (int dy = std::max(0, y - radius); dy <= std::min(seg.h - 1, y + radius); ++dy)
                for (int dx = std::max(0, x - radius); dx <= std::min(seg.w - 1, x + radius); ++dx)
                    window.push_back(seg.label_at(dy, dx));
            std::sort(window.begin(), window.end());
            // Longest run wins; scanning sorted values makes ties resolve to
            // the smallest label.
            int best = window[0], best_count = 0;
            for (std::size_t i = 0; i < window.size();) {
                std::size_t j = i;
                while (j < window.size() && window[j] == window[i]) ++j;
                if (static_cast<int>(j - i) > best_count) {
                    best_count = static_cast<int>(j - i);
                    best = window[i];
                }
                i = j;
            }
            out.labels[static_cast<std::size_t>(y) * seg.w + x] = best;
        }
    }
    return out;
}

RgbColor palette_color(int label) {
    if (label < 0) label = -label;
    const double hue = std::fmod(static_cast<double>(label) * 0.6180339887498949, 1.0);
    const double s = 0.65, v = 0.95;
    const double h6 = hue * 6.0;
    const int sector = static_cast<int>(h6) % 6;
    const double f = h6 - std::floor(h6);
    const double p = v * (1.0 - s);
    const double q = v * (1.0 - s * f);
    const double t = v * (1.0 - s * (1.0 - f));
    double r = 0, g = 0, b = 0;
    switch (sector) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
    auto u8 = [](double x) { return static_cast<std::uint8_t>(std::lround(x * 255.0)); };
    return {u8(r), u8(g), u8(b)};
}

ImageU8 render_label_image(const Segmentation& seg) {
    ImageU8 img;
    img.h = seg.h;
    img.w = seg.w;
    img.rgb.resize(static_cast<std::size_t>(seg.h) * seg.w * 3);
    for (int y = 0; y < seg.h; ++y)
        for (int x = 0; x < seg.w; ++x) {
            const RgbColor c = palette_color(seg.label_at(y, x));
            std::uint8_t* px = img.px(y, x);
            px[0] = c.r;
            px[1] = c.g;
            px[2] = c.b;
        }
    return img;
}

ImageU8 overlay_segmentation(const ImageU8& base, const Segmentation& seg, double alpha) {
    if (base.h != seg.h || base.w != seg.w)
        throw ArgumentError("overlay_segmentation: image is " + std::to_string(base.h) + "x" +
                            std::to_string(base.w) + " but labels are " + std::to_string(seg.h) +
                            "x" + std::to_string(seg.w));
    if (alpha < 0.0 || alpha > 1.0)
        throw ArgumentError("overlay_segmentation: alpha must lie in [0, 1]");
    ImageU8 out = base;
    for (int y = 0; y < seg.h; ++y)
        for (int x = 0; x < seg.w; ++x) {
            const RgbColor c = palette_color(seg.label_at(y, x));
            const std::uint8_t tint[3] = {c.r, c.g, c.b};
            std::uint8_t* px = out.px(y, x);
            for (int ch = 0; ch < 3; ++ch)
                px[ch] = static_cast<std::uint8_t>(
                    std::lround((1.0 - alpha) * px[ch] + alpha * tint[ch]));
        }
    return out;
}

std::string pyramid_to_json(const SegmentPyramid& pyramid) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["base_height"] = pyramid.base_h;
    j["base_width"] = pyramid.base_w;
    j["block"] = pyramid.block;
    j["levels"] = nlohmann::json::array();
    for (const PyramidLevel& lv : pyramid.levels) {
        nlohmann::json jl;
        jl["center_count"] = lv.center_count;
        jl["segments"] = nlohmann::json::array();
        for (const Segment& s : lv.segments) {
            nlohmann::json js;
            js["cluster_id"] = s.cluster_id;
            js["ancestry"] = s.ancestry;
            js["pixel_count"] = s.pixels.size();
            js["pixels"] = s.pixels;
            jl["segments"].push_back(std::move(js));
        }
        j["levels"].push_back(std::move(jl));
    }
    return j.dump();
}

std::string segmentation_to_json(const Segmentation& seg) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["height"] = seg.h;
    j["width"] = seg.w;
    j["labels"] = seg.labels;
    return j.dump();
}

std::string records_to_json(const std::vector<AssignmentRecord>& records) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["records"] = nlohmann::json::array();
    for (const AssignmentRecord& r : records) {
        nlohmann::json jr;
        jr["layer_id"] = r.layer_id;
        jr["is_pool"] = r.is_pool;
        jr["input_grid"] = {r.input_grid.h, r.input_grid.w};
        jr["center_grid"] = {r.center_grid.h, r.center_grid.w};
        jr["assignment"] = r.assignment;
        j["records"].push_back(std::move(jr));
    }
    return j.dump();
}

}  // namespace fec
