#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "fec/dataset.hpp"
#include "fec/errors.hpp"
#include "fec/synth_digits.hpp"

// Writes a synthetic ten-class digit dataset as standard idx files, ready for
// `fec train` with data.format = idx_ubyte or for external tooling.
int main(int argc, char** argv) {
    CLI::App app{"Generate synthetic digit data in idx format"};
    std::string out_dir;
    std::int64_t train_count = 60000;
    std::int64_t test_count = 10000;
    std::uint64_t seed = 7;
    app.add_option("--out", out_dir, "output directory")->required();
    app.add_option("--train", train_count, "training image count");
    app.add_option("--test", test_count, "test image count");
    app.add_option("--seed", seed, "generator seed");
    CLI11_PARSE(app, argc, argv);

    try {
        std::filesystem::create_directories(out_dir);
        const fec::Dataset train = fec::make_digit_dataset(train_count, seed, "train");
        fec::write_idx_files(train, out_dir + "/train-images.idx", out_dir + "/train-labels.idx");
        const fec::Dataset test = fec::make_digit_dataset(test_count, seed + 1, "test");
        fec::write_idx_files(test, out_dir + "/test-images.idx", out_dir + "/test-labels.idx");
        std::cout << "wrote " << train.count() << " train and " << test.count()
                  << " test images to " << out_dir << "\n";
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
