#include "fec/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "fec/errors.hpp"
#include "fec/image_io.hpp"

namespace fec {
namespace {

std::uint32_t read_u32_be(std::istream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw FormatError("unexpected end of file in " + path);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
}

void write_u32_be(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path,
                         int num_classes, const std::string& split) {
    if (num_classes < 2) throw ArgumentError("load_idx_dataset: need at least two classes");

    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw FormatError("cannot open " + images_path);
    if (read_u32_be(imgs, images_path) != 0x803u)
        throw FormatError(images_path + ": bad magic, expected an idx image stack (0x00000803)");
    const std::uint32_t count = read_u32_be(imgs, images_path);
    const std::uint32_t rows = read_u32_be(imgs, images_path);
    const std::uint32_t cols = read_u32_be(imgs, images_path);
    if (rows == 0 || cols == 0 || rows > 4096 || cols > 4096)
        throw FormatError(images_path + ": implausible image dimensions");

    Dataset ds;
    ds.split = split;
    ds.num_classes = num_classes;
    ds.height = static_cast<int>(rows);
    ds.width = static_cast<int>(cols);
    ds.channels = 1;
    ds.pixels.resize(static_cast<std::size_t>(count) * rows * cols);
    imgs.read(reinterpret_cast<char*>(ds.pixels.data()),
              static_cast<std::streamsize>(ds.pixels.size()));
    if (static_cast<std::size_t>(imgs.gcount()) != ds.pixels.size())
        throw FormatError(images_path + ": file shorter than its header promises");

    std::ifstream labs(labels_path, std::ios::binary);
    if (!labs) throw FormatError("cannot open " + labels_path);
    if (read_u32_be(labs, labels_path) != 0x801u)
        throw FormatError(labels_path + ": bad magic, expected an idx label vector (0x00000801)");
    const std::uint32_t label_count = read_u32_be(labs, labels_path);
    if (label_count != count)
        throw FormatError(labels_path + ": holds " + std::to_string(label_count) +
                          " labels for " + std::to_string(count) + " images");
    std::vector<std::uint8_t> raw(label_count);
    labs.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(labs.gcount()) != raw.size())
        throw FormatError(labels_path + ": file shorter than its header promises");

    ds.labels.reserve(label_count);
    for (std::uint8_t v : raw) {
        if (v >= num_classes)
            throw FormatError(labels_path + ": label " + std::to_string(int(v)) +
                              " outside [0, " + std::to_string(num_classes) + ")");
        ds.labels.push_back(static_cast<int>(v));
    }
    return ds;
}

void write_idx_files(const Dataset& ds, const std::string& images_path,
                     const std::string& labels_path) {
    if (ds.channels != 1)
        throw ArgumentError("write_idx_files: idx image stacks are single-channel");
    std::ofstream imgs(images_path, std::ios::binary | std::ios::trunc);
    if (!imgs) throw FormatError("cannot open " + images_path + " for writing");
    write_u32_be(imgs, 0x803u);
    write_u32_be(imgs, static_cast<std::uint32_t>(ds.count()));
    write_u32_be(imgs, static_cast<std::uint32_t>(ds.height));
    write_u32_be(imgs, static_cast<std::uint32_t>(ds.width));
    imgs.write(reinterpret_cast<const char*>(ds.pixels.data()),
               static_cast<std::streamsize>(ds.pixels.size()));

    std::ofstream labs(labels_path, std::ios::binary | std::ios::trunc);
    if (!labs) throw FormatError("cannot open " + labels_path + " for writing");
    write_u32_be(labs, 0x801u);
    write_u32_be(labs, static_cast<std::uint32_t>(ds.count()));
    for (int v : ds.labels) labs.put(static_cast<char>(v));
    if (!imgs.flush() || !labs.flush()) throw FormatError("short write while saving idx files");
}

Dataset load_image_directory(const std::string& root, const std::string& split) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw FormatError(root + " is not a directory");

    std::vector<std::string> class_dirs;
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory()) class_dirs.push_back(entry.path().filename().string());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.size() < 2)
        throw FormatError(root + ": need at least two class subdirectories");

    Dataset ds;
    ds.split = split;
    ds.num_classes = static_cast<int>(class_dirs.size());
    ds.channels = 3;
    for (int cls = 0; cls < ds.num_classes; ++cls) {
        std::vector<std::string> files;
        for (const auto& entry :
             fs::directory_iterator(fs::path(root) / class_dirs[static_cast<std::size_t>(cls)]))
            if (entry.is_regular_file() && entry.path().extension() == ".png")
                files.push_back(entry.path().string());
        std::sort(files.begin(), files.end());
        for (const std::string& file : files) {
            const ImageU8 img = read_png_rgb(file);
            if (ds.height == 0) {
                ds.height = img.h;
                ds.width = img.w;
            } else if (img.h != ds.height || img.w != ds.width) {
                throw FormatError(file + ": images must share one resolution (" +
                                  std::to_string(ds.height) + "x" + std::to_string(ds.width) +
                                  " expected)");
            }
            // Interleaved RGB -> planar, matching the idx sample layout.
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < img.h; ++y)
                    for (int x = 0; x < img.w; ++x) ds.pixels.push_back(img.px(y, x)[c]);
            ds.labels.push_back(cls);
        }
    }
    if (ds.labels.empty()) throw FormatError(root + ": no PNG files found");
    return ds;
}

std::pair<Tensor<float>, Tensor<float>> compute_channel_stats(const Dataset& ds) {
    if (ds.count() == 0) throw ArgumentError("compute_channel_stats: empty dataset");
    const int ch = ds.channels;
    std::vector<double> sum(static_cast<std::size_t>(ch), 0.0);
    std::vector<double> sum_sq(static_cast<std::size_t>(ch), 0.0);
    const std::int64_t plane = static_cast<std::int64_t>(ds.height) * ds.width;
    for (std::int64_t i = 0; i < ds.count(); ++i) {
        const std::uint8_t* px = ds.sample(i);
        for (int c = 0; c < ch; ++c)
            for (std::int64_t p = 0; p < plane; ++p) {
                const double v = px[c * plane + p] / 255.0;
                sum[static_cast<std::size_t>(c)] += v;
                sum_sq[static_cast<std::size_t>(c)] += v * v;
            }
    }
    const double n = static_cast<double>(ds.count() * plane);
    Tensor<float> mean = Tensor<float>::zeros({3});
    Tensor<float> stddev = Tensor<float>::zeros({3});
    for (int c = 0; c < 3; ++c) {
        const int src = ch == 1 ? 0 : c;
        const double m = sum[static_cast<std::size_t>(src)] / n;
        const double var = std::max(0.0, sum_sq[static_cast<std::size_t>(src)] / n - m * m);
        double s = std::sqrt(var);
        if (s < 1e-6) s = 1.0;  // constant channel: normalize to exactly zero
        mean.data[static_cast<std::size_t>(c)] = static_cast<float>(m);
        stddev.data[static_cast<std::size_t>(c)] = static_cast<float>(s);
    }
    return {mean, stddev};
}

Tensor<float> materialize_image(const Dataset& ds, std::int64_t index, int input_size,
                                const Tensor<float>& mean, const Tensor<float>& stddev,
                                bool hflip) {
    if (index < 0 || index >= ds.count())
        throw ArgumentError("materialize_image: index out of range");
    const std::int64_t plane = static_cast<std::int64_t>(ds.height) * ds.width;
    const std::uint8_t* px = ds.sample(index);

    ImageU8 img;
    img.h = ds.height;
    img.w = ds.width;
    img.rgb.resize(static_cast<std::size_t>(plane) * 3);
    for (int y = 0; y < ds.height; ++y)
        for (int x = 0; x < ds.width; ++x) {
            const int sx = hflip ? ds.width - 1 - x : x;
            for (int c = 0; c < 3; ++c) {
                const int src = ds.channels == 1 ? 0 : c;
                img.px(y, x)[c] = px[src * plane + y * ds.width + sx];
            }
        }

    const ImageU8 sized = resize_bilinear(img, input_size, input_size);
    Tensor<float> t = image_to_chw<float>(sized);
    const std::int64_t out_plane = static_cast<std::int64_t>(input_size) * input_size;
    for (int c = 0; c < 3; ++c) {
        const float m = mean.data[static_cast<std::size_t>(c)];
        const float s = stddev.data[static_cast<std::size_t>(c)];
        for (std::int64_t p = 0; p < out_plane; ++p) {
            auto& v = t.data[static_cast<std::size_t>(c * out_plane + p)];
            v = (v - m) / s;
        }
    }
    return t;
}

}  // namespace fec
