#include "fec/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <numeric>
#include <thread>
#include <unordered_map>

#include "fec/errors.hpp"
#include "fec/rng.hpp"
#include "fec/tape.hpp"

namespace fec {
namespace {

// Cross-entropy of one logit row without touching the tape; done in double so
// the reported loss is stable across worker counts.
double row_cross_entropy(const Tensor<float>& logits, int label) {
    double maxv = logits.data[0];
    for (float v : logits.data) maxv = std::max(maxv, static_cast<double>(v));
    double sum = 0.0;
    for (float v : logits.data) sum += std::exp(static_cast<double>(v) - maxv);
    return maxv + std::log(sum) - static_cast<double>(logits.data[static_cast<std::size_t>(label)]);
}

int row_argmax(const Tensor<float>& logits) {
    int best = 0;
    for (int k = 1; k < static_cast<int>(logits.numel()); ++k)
        if (logits.data[static_cast<std::size_t>(k)] > logits.data[static_cast<std::size_t>(best)])
            best = k;
    return best;
}

// Runs fn(worker_id, lo, hi) over a static partition of [0, n); exceptions
// from workers are re-thrown on the calling thread.
template <typename F>
void parallel_chunks(std::int64_t n, int workers, F fn) {
    if (n <= 0) return;
    workers = static_cast<int>(std::min<std::int64_t>(workers, n));
    if (workers <= 1) {
        fn(0, std::int64_t{0}, n);
        return;
    }
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        const std::int64_t lo = n * w / workers;
        const std::int64_t hi = n * (w + 1) / workers;
        threads.emplace_back([&, w, lo, hi] {
            try {
                fn(w, lo, hi);
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace

int worker_count_from_env() {
    const char* env = std::getenv("FEC_THREADS");
    if (!env || *env == '\0') return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1 || v > 64)
        throw ConfigError("FEC_THREADS must be an integer in [1, 64]");
    return static_cast<int>(v);
}

EvalResult evaluate(Model<float>& model, const Dataset& ds) {
    if (ds.count() == 0) throw ArgumentError("evaluate: empty dataset");
    const std::int64_t n = ds.count();
    std::vector<double> losses(static_cast<std::size_t>(n));
    std::vector<char> correct(static_cast<std::size_t>(n));
    const int workers = worker_count_from_env();

    parallel_chunks(n, workers, [&](int, std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            const Tensor<float> img = materialize_image(ds, i, model.cfg.input_size,
                                                        model.norm_mean, model.norm_std);
            Tape<float> tape;
            const Tensor<float> logits = tape.value(model.forward_image(tape, img));
            losses[static_cast<std::size_t>(i)] =
                row_cross_entropy(logits, ds.labels[static_cast<std::size_t>(i)]);
            correct[static_cast<std::size_t>(i)] =
                row_argmax(logits) == ds.labels[static_cast<std::size_t>(i)] ? 1 : 0;
        }
    });

    EvalResult out;
    std::int64_t hits = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        out.mean_loss += losses[static_cast<std::size_t>(i)];
        hits += correct[static_cast<std::size_t>(i)];
    }
    out.mean_loss /= static_cast<double>(n);
    out.top1 = static_cast<double>(hits) / static_cast<double>(n);
    return out;
}

TrainResult train_model(Model<float>& model, const Dataset& train_set, const Dataset& val_set,
                        const TrainConfig& cfg, std::ostream* metrics, std::ostream* log) {
    cfg.validate();
    if (train_set.count() == 0) throw ArgumentError("train_model: empty training set");
    if (val_set.count() == 0) throw ArgumentError("train_model: empty validation set");
    if (train_set.num_classes != model.cfg.num_classes)
        throw ConfigError("train_model: dataset has " + std::to_string(train_set.num_classes) +
                          " classes but the model expects " +
                          std::to_string(model.cfg.num_classes));

    // Freeze train-split statistics into the model so eval and later
    // checkpoint consumers normalize identically.
    auto [mean, stddev] = compute_channel_stats(train_set);
    model.norm_mean = mean;
    model.norm_std = stddev;

    const std::vector<Param<float>*> params = model.params();
    std::unordered_map<const Param<float>*, std::size_t> param_slot;
    for (std::size_t i = 0; i < params.size(); ++i) param_slot[params[i]] = i;

    AdamW<float> opt(params, cfg);
    const std::int64_t n = train_set.count();
    const std::int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
    std::int64_t warmup_steps =
        static_cast<std::int64_t>(std::llround(cfg.warmup_epochs * static_cast<double>(steps_per_epoch)));
    warmup_steps = std::min(warmup_steps, total_steps - 1);
    const LrSchedule schedule(cfg.base_lr, warmup_steps, total_steps);

    const int workers = worker_count_from_env();
    Rng rng(cfg.seed);
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    TrainResult result;
    std::int64_t global_step = 0;

    std::vector<std::vector<Tensor<float>>> worker_grads(static_cast<std::size_t>(workers));
    for (auto& buf : worker_grads) {
        buf.reserve(params.size());
        for (const Param<float>* p : params) buf.push_back(Tensor<float>::zeros(p->value.shape));
    }

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        double epoch_loss = 0.0;
        std::int64_t seen = 0;
        double last_lr = 0.0;

        for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
            const std::int64_t batch = std::min<std::int64_t>(cfg.batch_size, n - start);
            // Flip decisions come off the main RNG stream up front so worker
            // count cannot change them.
            std::vector<char> flips(static_cast<std::size_t>(batch), 0);
            if (cfg.augment_hflip)
                for (auto& f : flips) f = rng.next_double() < 0.5 ? 1 : 0;

            const double lr = schedule.at(global_step);
            last_lr = lr;
            std::vector<double> losses(static_cast<std::size_t>(batch));
            for (auto& buf : worker_grads)
                for (auto& g : buf) g.fill(0.0f);

            parallel_chunks(batch, workers, [&](int w, std::int64_t lo, std::int64_t hi) {
                auto& grads = worker_grads[static_cast<std::size_t>(w)];
                for (std::int64_t j = lo; j < hi; ++j) {
                    const std::int64_t idx = order[static_cast<std::size_t>(start + j)];
                    const Tensor<float> img =
                        materialize_image(train_set, idx, model.cfg.input_size, model.norm_mean,
                                          model.norm_std, flips[static_cast<std::size_t>(j)] != 0);
                    Tape<float> tape;
                    const auto logits = model.forward_image(tape, img);
                    const int label[] = {train_set.labels[static_cast<std::size_t>(idx)]};
                    const auto loss = tape.softmax_cross_entropy(logits, label);
                    losses[static_cast<std::size_t>(j)] =
                        static_cast<double>(tape.value(loss).scalar_value());
                    if (!std::isfinite(losses[static_cast<std::size_t>(j)])) continue;
                    tape.backward(loss);
                    tape.harvest_param_grads([&](Param<float>& p, const Tensor<float>& g) {
                        Tensor<float>& acc = grads[param_slot.at(&p)];
                        for (std::size_t e = 0; e < g.data.size(); ++e) acc.data[e] += g.data[e];
                    });
                }
            });

            for (std::int64_t j = 0; j < batch; ++j) {
                if (std::isfinite(losses[static_cast<std::size_t>(j)])) continue;
                // Replay the offending sample with tracing to name the tensor.
                const std::int64_t idx = order[static_cast<std::size_t>(start + j)];
                const Tensor<float> img =
                    materialize_image(train_set, idx, model.cfg.input_size, model.norm_mean,
                                      model.norm_std, flips[static_cast<std::size_t>(j)] != 0);
                result.nan_abort = true;
                result.nan_diagnostic = "loss is not finite";
                try {
                    Tape<float> trace;
                    trace.set_nan_trace(true);
                    const auto logits = model.forward_image(trace, img);
                    const int label[] = {train_set.labels[static_cast<std::size_t>(idx)]};
                    trace.softmax_cross_entropy(logits, label);
                } catch (const NumericError& e) {
                    result.nan_diagnostic = e.what();
                }
                if (log)
                    *log << "abort: non-finite loss at epoch " << epoch << " step " << global_step
                         << ": " << result.nan_diagnostic << "\n";
                return result;
            }

            // Fixed-order reduction keeps float sums deterministic for a
            // given worker count.
            opt.zero_grad();
            const float scale = 1.0f / static_cast<float>(batch);
            for (std::size_t i = 0; i < params.size(); ++i) {
                Tensor<float>& acc = params[i]->grad;
                for (const auto& buf : worker_grads) {
                    const Tensor<float>& g = buf[i];
                    for (std::size_t e = 0; e < g.data.size(); ++e) acc.data[e] += g.data[e];
                }
                for (auto& v : acc.data) v *= scale;
            }
            if (cfg.grad_clip > 0.0) clip_gradients(params, cfg.grad_clip);
            opt.step(lr);
            ++global_step;
            for (double l : losses) epoch_loss += l;
            seen += batch;
        }

        const EvalResult ev = evaluate(model, val_set);
        EpochStats stats;
        stats.epoch = epoch;
        stats.lr = last_lr;
        stats.train_loss = epoch_loss / static_cast<double>(seen);
        stats.val_top1 = ev.top1;
        result.epochs.push_back(stats);
        if (metrics) {
            *metrics << stats.epoch << ' ' << std::setprecision(10) << stats.lr << ' '
                     << stats.train_loss << ' ' << stats.val_top1 << '\n';
            metrics->flush();
        }
        if (log) {
            *log << "epoch " << stats.epoch << "/" << cfg.epochs << "  lr " << std::setprecision(6)
                 << stats.lr << "  train_loss " << stats.train_loss << "  val_top1 "
                 << stats.val_top1 << "\n";
            log->flush();
        }
    }
    return result;
}

}  // namespace fec
