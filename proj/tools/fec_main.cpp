#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "fec/checkpoint.hpp"
#include "fec/errors.hpp"
#include "fec/gradcheck.hpp"
#include "fec/hierarchy.hpp"
#include "fec/image_io.hpp"
#include "fec/run_config.hpp"
#include "fec/train.hpp"

#ifndef FEC_BUILD_ID
#define FEC_BUILD_ID "unknown"
#endif

namespace {

namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

struct SharedFlags {
    std::string config_path;
    std::string out_dir;
    std::optional<std::int64_t> seed;
    std::optional<std::string> dispatch;
    std::optional<std::string> similarity;
};

void apply_overrides(fec::RunConfig& cfg, const SharedFlags& flags) {
    if (flags.seed) {
        cfg.model.seed = static_cast<std::uint64_t>(*flags.seed);
        cfg.train.seed = static_cast<std::uint64_t>(*flags.seed);
    }
    if (flags.dispatch) cfg.model.dispatch = fec::dispatch_from_token(*flags.dispatch);
    if (flags.similarity) cfg.model.similarity = fec::similarity_from_token(*flags.similarity);
    cfg.finalize();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw fec::ArgumentError("cannot write " + path);
    out << content;
}

int cmd_train(const SharedFlags& flags) {
    fec::RunConfig cfg = fec::RunConfig::from_file(flags.config_path);
    apply_overrides(cfg, flags);
    fs::create_directories(flags.out_dir);

    const std::string resolved = cfg.resolved_text();
    std::cout << "build " << FEC_BUILD_ID << "\n" << resolved;
    write_file(flags.out_dir + "/config.resolved", "# build " FEC_BUILD_ID "\n" + resolved);

    const fec::Dataset train_set = cfg.load_train();
    const fec::Dataset val_set = cfg.load_val();
    fec::Model<float> model = fec::Model<float>::build(cfg.model);

    std::ofstream metrics(flags.out_dir + "/metrics.log", std::ios::trunc);
    if (!metrics) throw fec::ArgumentError("cannot write " + flags.out_dir + "/metrics.log");
    const fec::TrainResult result =
        fec::train_model(model, train_set, val_set, cfg.train, &metrics, &std::cout);
    if (result.nan_abort) {
        std::cerr << "numerical abort: " << result.nan_diagnostic << "\n";
        return kExitNumeric;
    }
    fec::save_checkpoint(model, flags.out_dir + "/checkpoint.fecw");
    std::cout << "checkpoint " << flags.out_dir << "/checkpoint.fecw\n";
    return kExitOk;
}

fec::Dataset load_eval_data(const fec::Model<float>& model, const std::vector<std::string>& args) {
    if (args.size() == 1) {
        fec::Dataset ds = fec::load_image_directory(args[0], "eval");
        if (ds.num_classes != model.cfg.num_classes)
            throw fec::ConfigError("dataset has " + std::to_string(ds.num_classes) +
                                   " classes but the checkpoint expects " +
                                   std::to_string(model.cfg.num_classes));
        return ds;
    }
    return fec::load_idx_dataset(args[0], args[1], model.cfg.num_classes, "eval");
}

int cmd_eval(const std::string& checkpoint, const std::vector<std::string>& data_args) {
    fec::Model<float> model = fec::load_checkpoint<float>(checkpoint);
    const fec::Dataset ds = load_eval_data(model, data_args);
    const fec::EvalResult ev = fec::evaluate(model, ds);
    std::cout << std::setprecision(10) << "top1 " << ev.top1 << " loss " << ev.mean_loss
              << "\n";
    return kExitOk;
}

int cmd_segment(const std::string& checkpoint, const std::string& image_path,
                const std::string& out_dir, int level, int k, int median_radius,
                std::optional<std::int64_t> seed) {
    fec::Model<float> model = fec::load_checkpoint<float>(checkpoint);
    fs::create_directories(out_dir);

    const fec::ImageU8 raw = fec::read_png_rgb(image_path);
    const fec::ImageU8 sized = fec::resize_bilinear(raw, model.cfg.input_size, model.cfg.input_size);
    fec::Tensor<float> img = fec::image_to_chw<float>(sized);
    const std::int64_t plane =
        static_cast<std::int64_t>(model.cfg.input_size) * model.cfg.input_size;
    for (int c = 0; c < 3; ++c)
        for (std::int64_t p = 0; p < plane; ++p) {
            auto& v = img.data[static_cast<std::size_t>(c * plane + p)];
            v = (v - model.norm_mean.data[static_cast<std::size_t>(c)]) /
                model.norm_std.data[static_cast<std::size_t>(c)];
        }

    std::vector<fec::AssignmentRecord> records;
    fec::Tape<float> tape;
    model.forward_image(tape, img, &records);
    const fec::SegmentPyramid pyramid = fec::build_pyramid(records, model.cfg.stem_kernel);

    if (level == 0) level = pyramid.level_count();  // default: coarsest level
    if (level < 1 || level > pyramid.level_count())
        throw fec::ArgumentError("--level " + std::to_string(level) +
                                 " is out of range (pyramid has " +
                                 std::to_string(pyramid.level_count()) + " levels)");

    std::optional<std::vector<int>> reduced;
    if (k > 0) {
        // The level's own pool record carries the representatives to reduce.
        int pool_seen = 0;
        for (const fec::AssignmentRecord& r : records) {
            if (!r.is_pool) continue;
            if (++pool_seen == level) {
                reduced = fec::kmeans_reduce(r.representatives, k,
                                             seed ? static_cast<std::uint64_t>(*seed) : 42u);
                break;
            }
        }
    }

    const fec::Segmentation seg =
        fec::render_segmentation(pyramid, level, reduced ? &*reduced : nullptr, median_radius);

    const std::string tag = "level" + std::to_string(level);
    write_file(out_dir + "/records.json", fec::records_to_json(records));
    write_file(out_dir + "/pyramid.json", fec::pyramid_to_json(pyramid));
    write_file(out_dir + "/" + tag + ".json", fec::segmentation_to_json(seg));
    fec::write_png_rgb(out_dir + "/" + tag + "_overlay.png",
                       fec::overlay_segmentation(sized, seg, 0.5));
    fec::write_png_rgb(out_dir + "/" + tag + "_labels.png", fec::render_label_image(seg));
    std::cout << "wrote " << out_dir << "/" << tag << ".json and overlays\n";
    return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, bool corrupt) {
    const fec::GradCheckReport report = fec::run_gradcheck(seed, 1e-4, corrupt);
    std::cout << fec::format_report(report);
    return report.passed() ? kExitOk : kExitCheckFailed;
}

int cmd_inspect(const std::string& checkpoint) {
    fec::Model<float> model = fec::load_checkpoint<float>(checkpoint);
    std::cout << "build " << FEC_BUILD_ID << "\n";
    std::cout << "config " << model.cfg.to_json() << "\n";
    std::cout << "normalization mean [" << model.norm_mean.data[0] << ", "
              << model.norm_mean.data[1] << ", " << model.norm_mean.data[2] << "] std ["
              << model.norm_std.data[0] << ", " << model.norm_std.data[1] << ", "
              << model.norm_std.data[2] << "]\n";
    std::int64_t total = 0;
    for (const fec::Param<float>* p : model.params()) {
        std::cout << p->name << " " << p->value.shape_str() << " " << p->value.numel()
                  << (p->weight_decay ? " decay" : "") << "\n";
        total += p->value.numel();
    }
    std::cout << "total parameters " << total << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FEC clustering backbone: train, evaluate and inspect models, "
                 "export segment pyramids"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);

    SharedFlags flags;
    std::string checkpoint, image_path;
    std::vector<std::string> data_args;
    int level = 0, k = 0, median_radius = 1;
    std::int64_t gradcheck_seed = 42;
    bool corrupt = false;

    CLI::App* train = app.add_subcommand("train", "Train a model from a config file");
    train->add_option("--config", flags.config_path, "key=value run configuration")->required();
    train->add_option("--out", flags.out_dir, "output directory")->required();
    train->add_option("--seed", flags.seed, "override model and train seeds");
    train->add_option("--dispatch", flags.dispatch, "dispatch variant")
        ->check(CLI::IsMember({"eq7", "s1_dense"}));
    train->add_option("--similarity", flags.similarity, "similarity measure")
        ->check(CLI::IsMember({"cosine", "dot", "euclidean"}));

    CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    eval->add_option("checkpoint", checkpoint, "weight file")->required();
    eval->add_option("data", data_args,
                     "dataset: IMAGES_IDX LABELS_IDX, or one class-directory root")
        ->expected(1, 2)
        ->required();

    CLI::App* segment = app.add_subcommand("segment", "Export the segment pyramid of one image");
    segment->add_option("checkpoint", checkpoint, "weight file")->required();
    segment->add_option("image", image_path, "input PNG")->required();
    segment->add_option("--out", flags.out_dir, "output directory")->required();
    segment->add_option("--level", level, "pyramid level, 1-based (default: coarsest)");
    segment->add_option("--k", k, "reduce clusters with k-means (0 = off)");
    segment->add_option("--median-radius", median_radius, "label smoothing radius (default 1)");
    segment->add_option("--seed", flags.seed, "k-means seed");

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient audit");
    gradcheck->add_option("--seed", gradcheck_seed, "case seed");
    gradcheck->add_flag("--corrupt", corrupt,
                        "negative control: corrupt one gradient on purpose");

    CLI::App* inspect = app.add_subcommand("inspect", "Describe a checkpoint");
    inspect->add_option("checkpoint", checkpoint, "weight file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (train->parsed()) return cmd_train(flags);
        if (eval->parsed()) return cmd_eval(checkpoint, data_args);
        if (segment->parsed())
            return cmd_segment(checkpoint, image_path, flags.out_dir, level, k, median_radius,
                               flags.seed);
        if (gradcheck->parsed())
            return cmd_gradcheck(static_cast<std::uint64_t>(gradcheck_seed), corrupt);
        if (inspect->parsed()) return cmd_inspect(checkpoint);
    } catch (const fec::NumericError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const fec::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const fec::ArgumentError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const fec::FormatError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const fec::CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const fec::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitCheckFailed;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitCheckFailed;
    }
    return kExitUsage;
}
