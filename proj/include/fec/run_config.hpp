#pragma once

#include <string>

#include "fec/dataset.hpp"
#include "fec/model.hpp"
#include "fec/optim.hpp"

namespace fec {

// Everything a run needs, parsed from a UTF-8 key=value file ('#' comments).
// Unknown and duplicate keys are errors; command-line flags may override
// single keys afterwards via apply(). `model.preset` (micro|small) is applied
// before any other model key regardless of file position.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;

    std::string data_format = "synthetic";  // synthetic | idx_ubyte | image_directory
    std::string train_images, train_labels, val_images, val_labels;  // idx_ubyte
    std::string train_dir, val_dir;                                  // image_directory
    std::int64_t synth_train_count = 2000;
    std::int64_t synth_val_count = 512;
    std::uint64_t synth_seed = 7;

    static RunConfig from_file(const std::string& path);
    static RunConfig from_text(const std::string& text, const std::string& origin);

    // Sets one documented key; throws ConfigError for unknown keys or bad
    // values.
    void apply(const std::string& key, const std::string& value);

    // Validates cross-field consistency (also called by the parsers).
    void finalize() const;

    // Full key=value dump of the resolved state, one key per line, sorted.
    std::string resolved_text() const;

    Dataset load_train() const;
    Dataset load_val() const;
};

}  // namespace fec
