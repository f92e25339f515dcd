#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "fec/dataset.hpp"
#include "fec/model.hpp"
#include "fec/optim.hpp"

namespace fec {

struct EvalResult {
    double top1 = 0.0;
    double mean_loss = 0.0;
};

// Forward-only pass over the whole dataset; argmax ties go to the lowest
// class index.
EvalResult evaluate(Model<float>& model, const Dataset& ds);

struct EpochStats {
    int epoch = 0;  // 1-based
    double lr = 0.0;
    double train_loss = 0.0;
    double val_top1 = 0.0;
};

struct TrainResult {
    std::vector<EpochStats> epochs;
    bool nan_abort = false;
    std::string nan_diagnostic;  // names the first NaN tensor when nan_abort

    const EpochStats& last() const { return epochs.back(); }
};

// Full training run: freezes train-split channel statistics into the model,
// then runs AdamW with warm-up + cosine decay over shuffled per-image
// gradients. Per-epoch metrics are appended to `metrics` when given, one
// "epoch lr train_loss val_top1" line per epoch. Worker count comes from the
// FEC_THREADS environment variable (default 1); loss curves are deterministic
// for a fixed (seed, worker count).
// On a non-finite loss the offending sample is replayed with NaN tracing to
// name the first bad tensor, and the run stops with nan_abort set.
TrainResult train_model(Model<float>& model, const Dataset& train_set, const Dataset& val_set,
                        const TrainConfig& cfg, std::ostream* metrics = nullptr,
                        std::ostream* log = nullptr);

// Positive worker count from FEC_THREADS, clamped to [1, 64]; 1 when unset.
int worker_count_from_env();

}  // namespace fec
