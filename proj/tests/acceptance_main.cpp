// Release gate: every shipping requirement checked end to end, one PASS/FAIL
// line per criterion. Exits 0 only when all eight hold. Tolerances and
// runtime budgets are pinned here on purpose; do not relax them to make a
// regression green.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fec/cluster_ops.hpp"
#include "fec/gradcheck.hpp"
#include "fec/hierarchy.hpp"
#include "fec/image_io.hpp"
#include "fec/model.hpp"
#include "fec/synth_digits.hpp"
#include "fec/train.hpp"
#include "s1_reference.hpp"

namespace {

using fec::AssignmentRecord;
using fec::ClusterLayerOptions;
using fec::ClusterLayerParams;
using fec::GridShape;
using fec::ModelConfig;
using fec::Rng;
using fec::SimilarityKind;
using fec::Tensor;

struct Timer {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v) {
    std::ostringstream s;
    s.precision(3);
    s << v;
    return s.str();
}

std::string fmt_sci(double v) {
    std::ostringstream s;
    s << std::scientific;
    s.precision(2);
    s << v;
    return s.str();
}

s1::Mat to_mat(const Tensor<double>& t) {
    s1::Mat m(static_cast<std::size_t>(t.rows()));
    for (std::int64_t i = 0; i < t.rows(); ++i)
        m[i].assign(t.data.begin() + i * t.cols(), t.data.begin() + (i + 1) * t.cols());
    return m;
}

s1::LayerWeights to_s1(const ClusterLayerParams<double>& p) {
    s1::LayerWeights w;
    w.key_w = to_mat(p.key_w.value);
    w.value_w = to_mat(p.value_w.value);
    w.alpha = p.alpha.value.scalar_value();
    w.beta = p.beta.value.scalar_value();
    if (p.opt.is_pool) {
        w.pool_w = to_mat(p.pool_w.value);
    } else {
        w.mlp_w = to_mat(p.mlp_w.value);
        w.mlp_b = p.mlp_b.value.data;
    }
    return w;
}

double max_abs_diff(const Tensor<double>& got, const s1::Mat& want) {
    double worst = 0.0;
    for (std::int64_t i = 0; i < got.rows(); ++i)
        for (std::int64_t j = 0; j < got.cols(); ++j)
            worst = std::max(worst, std::abs(got.at(i, j) - want[i][j]));
    return worst;
}

Tensor<double> random_tensor(std::vector<std::int64_t> shape, Rng& rng, double lo, double hi) {
    Tensor<double> t = Tensor<double>::zeros(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// --- 1. encode/pool outputs equal the straight-line reference --------------

Outcome criterion_oracle_equivalence() {
    constexpr int kTrials = 1000;
    constexpr double kTol = 1e-6;
    constexpr double kBudgetSeconds = 60.0;
    const std::pair<SimilarityKind, s1::Similarity> kinds[] = {
        {SimilarityKind::cosine, s1::Similarity::cosine},
        {SimilarityKind::dot_product, s1::Similarity::dot},
        {SimilarityKind::euclidean_negated, s1::Similarity::euclidean},
    };

    Timer timer;
    Rng rng(20'24);
    double worst = 0.0;
    for (int trial = 0; trial < kTrials; ++trial) {
        const int h = 2 * (1 + static_cast<int>(rng.below(4)));  // {2,4,6,8}
        const int w = 2 * (1 + static_cast<int>(rng.below(4)));
        const int n = h * w;  // <= 64
        const int c = 2 + static_cast<int>(rng.below(7));   // [2,8]
        const int cp = 1 + static_cast<int>(rng.below(8));  // C' <= 8
        auto [kind, ref] = kinds[trial % 3];
        const bool dense = (trial / 3) % 2 == 0;

        ClusterLayerOptions opt;
        opt.in_channels = c;
        opt.proj_dim = cp;
        opt.use_norm = false;
        opt.similarity = kind;
        opt.dispatch = dense ? fec::DispatchMode::dense_sum : fec::DispatchMode::single_cluster;
        auto enc = ClusterLayerParams<double>::make("enc", opt, rng);
        const auto feat = random_tensor({n, c}, rng, -1.0, 1.0);

        int oh = 1, ow = 1;
        do {
            oh = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(h)));
            ow = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(w)));
        } while (oh * ow > 16 || oh * ow >= n);

        fec::Tape<double> tape;
        auto out = fec::encode(tape, tape.leaf(feat), {h, w}, enc, {oh, ow});
        worst = std::max(worst, max_abs_diff(tape.value(out),
                                             s1::encode(to_mat(feat), h, w, oh, ow, to_s1(enc),
                                                        ref, dense)));

        opt.is_pool = true;
        opt.proj_dim = cp;
        auto pl = ClusterLayerParams<double>::make("pool", opt, rng);
        fec::Tape<double> tape2;
        AssignmentRecord rec;
        auto pooled = fec::pool(tape2, tape2.leaf(feat), {h, w}, pl, &rec);
        std::vector<int> want_assign;
        const s1::Mat want = s1::pool(to_mat(feat), h, w, to_s1(pl), ref, &want_assign);
        worst = std::max(worst, max_abs_diff(tape2.value(pooled), want));
        if (rec.assignment != want_assign)
            return {false, "pool assignment diverged from the reference on trial " +
                               std::to_string(trial)};
    }
    const double elapsed = timer.seconds();
    std::ostringstream detail;
    detail << "max |diff| " << fmt_sci(worst) << " over " << kTrials
           << " encode+pool instances (tol " << fmt_sci(kTol) << ", " << fmt(elapsed) << "s)";
    return {worst < kTol && elapsed < kBudgetSeconds, detail.str()};
}

// --- 2. analytic gradients vs central finite differences -------------------

Outcome criterion_gradient_suite() {
    constexpr double kTol = 1e-4;  // also baked into GradCheckReport
    constexpr double kBudgetSeconds = 120.0;
    Timer timer;
    const fec::GradCheckReport rep = fec::run_gradcheck(42, 1e-4);
    const double elapsed = timer.seconds();

    double worst = std::max(rep.input_encode_rel, rep.input_pool_rel);
    for (const auto& g : rep.encode_groups) worst = std::max(worst, g.max_rel);
    for (const auto& g : rep.pool_groups) worst = std::max(worst, g.max_rel);

    std::ostringstream detail;
    detail << "max rel err " << fmt_sci(worst) << " across "
           << rep.encode_groups.size() + rep.pool_groups.size() + 2
           << " groups, argmax barrier leak " << fmt_sci(rep.barrier_leak) << " (tol "
           << fmt_sci(kTol) << ", " << fmt(elapsed) << "s)";
    if (!rep.passed() || rep.barrier_leak != 0.0)
        for (const auto& name : rep.failing()) detail << " offender=" << name;
    return {rep.passed() && rep.barrier_leak == 0.0 && worst < kTol &&
                elapsed < kBudgetSeconds,
            detail.str()};
}

// --- 3. segment pyramids partition the canvas at every level ----------------

// Levels must tile the base grid exactly, and every parent segment must be
// the exact union of its children.
bool pyramid_is_sound(const fec::SegmentPyramid& py, std::string* why) {
    const int n = py.base_h * py.base_w;
    for (std::size_t lv = 0; lv < py.levels.size(); ++lv) {
        std::vector<char> seen(static_cast<std::size_t>(n), 0);
        int covered = 0;
        for (const auto& seg : py.levels[lv].segments) {
            if (seg.pixels.empty()) {
                *why = "empty segment at level " + std::to_string(lv + 1);
                return false;
            }
            for (int px : seg.pixels) {
                if (px < 0 || px >= n || seen[static_cast<std::size_t>(px)]) {
                    *why = "pixel " + std::to_string(px) + " out of range or repeated at level " +
                           std::to_string(lv + 1);
                    return false;
                }
                seen[static_cast<std::size_t>(px)] = 1;
                ++covered;
            }
        }
        if (covered != n) {
            *why = "level " + std::to_string(lv + 1) + " covers " + std::to_string(covered) +
                   " of " + std::to_string(n) + " pixels";
            return false;
        }
        if (lv == 0) continue;
        std::map<int, std::set<int>> child_union;
        for (const auto& child : py.levels[lv - 1].segments) {
            if (child.ancestry.size() < 2) {
                *why = "child segment without a parent at level " + std::to_string(lv);
                return false;
            }
            child_union[child.ancestry[1]].insert(child.pixels.begin(), child.pixels.end());
        }
        for (const auto& seg : py.levels[lv].segments) {
            const std::set<int> own(seg.pixels.begin(), seg.pixels.end());
            if (child_union[seg.cluster_id] != own) {
                *why = "segment " + std::to_string(seg.cluster_id) + " at level " +
                       std::to_string(lv + 1) + " is not the union of its children";
                return false;
            }
        }
    }
    return true;
}

Outcome criterion_pyramid_invariants() {
    constexpr int kTrials = 200;
    constexpr double kBudgetSeconds = 60.0;
    Timer timer;
    Rng rng(77);
    int levels_checked = 0;
    for (int trial = 0; trial < kTrials; ++trial) {
        ModelConfig mc = ModelConfig::micro();
        const bool big = rng.below(2) == 0;
        mc.input_size = big ? 64 : 32;
        mc.stem_kernel = big ? 4 : 2;
        for (int s = 0; s < 4; ++s) {
            mc.stage_depths[s] = 1 + static_cast<int>(rng.below(2));
            mc.stage_channels[s] = 4 * (1 + static_cast<int>(rng.below(4)));
            mc.encode_dims[s] = 2 * (1 + static_cast<int>(rng.below(3)));
        }
        mc.similarity = static_cast<SimilarityKind>(trial % 3);
        mc.dispatch = trial % 2 ? fec::DispatchMode::dense_sum
                                : fec::DispatchMode::single_cluster;
        mc.use_norm = trial % 2 == 0;
        mc.mlp_hidden = trial % 5 == 0 ? 5 : 0;
        mc.seed = 1000 + static_cast<std::uint64_t>(trial);

        auto model = fec::Model<float>::build(mc);
        Tensor<float> img = Tensor<float>::zeros({3, mc.input_size, mc.input_size});
        for (auto& v : img.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));

        fec::Tape<float> tape;
        std::vector<AssignmentRecord> records;
        model.forward_image(tape, img, &records);
        const auto py = fec::build_pyramid(records, mc.stem_kernel);
        std::string why;
        if (!pyramid_is_sound(py, &why))
            return {false, "trial " + std::to_string(trial) + ": " + why};
        levels_checked += static_cast<int>(py.levels.size());
    }
    const double elapsed = timer.seconds();
    std::ostringstream detail;
    detail << kTrials << " random model/input pairs, " << levels_checked
           << " levels partition-and-union exact (" << fmt(elapsed) << "s)";
    return {elapsed < kBudgetSeconds, detail.str()};
}

// --- 4. reference configuration shape/parameter contract -------------------

Outcome criterion_reference_config() {
    constexpr std::int64_t kLow = 4'675'000;   // 5.5M - 15%
    constexpr std::int64_t kHigh = 6'325'000;  // 5.5M + 15%
    const ModelConfig cfg = ModelConfig::small();
    const int want[4] = {56, 28, 14, 7};
    for (int s = 0; s < 4; ++s) {
        const GridShape g = cfg.stage_grid(s);
        if (g.h != want[s] || g.w != want[s])
            return {false, "stage " + std::to_string(s + 1) + " grid " + std::to_string(g.h) +
                               "x" + std::to_string(g.w) + ", expected " +
                               std::to_string(want[s]) + "²"};
    }
    auto model = fec::Model<float>::build(cfg);
    const std::int64_t count = model.param_count();
    std::ostringstream detail;
    detail << "stage grids 56²/28²/14²/7², " << count << " parameters in [" << kLow << ", "
           << kHigh << "]";
    return {count >= kLow && count <= kHigh, detail.str()};
}

// --- 5. full training run on digit data ------------------------------------

struct TrainingArtifacts {
    fec::Model<float> model;
    std::vector<fec::EpochStats> epochs;
};

Outcome criterion_training(std::optional<TrainingArtifacts>& artifacts) {
    constexpr double kTop1Target = 0.95;
    constexpr int kMinDecreasingTransitions = 4;
    constexpr double kBudgetSeconds = 1800.0;

    Timer timer;
    const fec::Dataset train_set = fec::make_digit_dataset(60'000, 7, "train");
    const fec::Dataset val_set = fec::make_digit_dataset(10'000, 8, "val");

    auto model = fec::Model<float>::build(ModelConfig::micro());
    fec::TrainConfig tc;  // 5 epochs, batch 128, lr 1e-3, 1 warm-up epoch
    std::ostringstream metrics;
    const fec::TrainResult result = fec::train_model(model, train_set, val_set, tc, &metrics);
    const double elapsed = timer.seconds();

    if (result.nan_abort)
        return {false, "training aborted on a non-finite loss: " + result.nan_diagnostic};

    int decreasing = 0;
    for (std::size_t e = 1; e < result.epochs.size(); ++e)
        if (result.epochs[e].train_loss < result.epochs[e - 1].train_loss) ++decreasing;
    const double top1 = result.last().val_top1;

    std::ostringstream detail;
    detail << "60k/10k digits, 5 epochs: val top-1 " << fmt(100.0 * top1) << "% (target "
           << fmt(100.0 * kTop1Target) << "%), train loss fell in " << decreasing << "/"
           << result.epochs.size() - 1 << " transitions, " << fmt(elapsed / 60.0) << " min";
    const bool pass = top1 >= kTop1Target && decreasing >= kMinDecreasingTransitions &&
                      elapsed <= kBudgetSeconds;
    if (pass) artifacts.emplace(TrainingArtifacts{std::move(model), result.epochs});
    else detail << "\n" << metrics.str();
    return {pass, detail.str()};
}

// --- 6. trained segments separate a two-color image -------------------------

Outcome criterion_segmentation(std::optional<TrainingArtifacts>& artifacts) {
    constexpr double kAgreementTarget = 0.90;
    if (!artifacts) return {false, "skipped: no trained model from the training criterion"};
    fec::Model<float>& model = artifacts->model;

    const int side = model.cfg.input_size;
    fec::ImageU8 halves = fec::ImageU8::filled(side, side, 40, 60, 220);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side / 2; ++x) {
            halves.px(y, x)[0] = 220;
            halves.px(y, x)[1] = 40;
            halves.px(y, x)[2] = 40;
        }

    Tensor<float> img = fec::image_to_chw<float>(halves);
    for (int ch = 0; ch < 3; ++ch) {
        const float m = model.norm_mean.data[static_cast<std::size_t>(ch)];
        const float s = model.norm_std.data[static_cast<std::size_t>(ch)];
        float* plane = img.data.data() + static_cast<std::size_t>(ch) * side * side;
        for (int i = 0; i < side * side; ++i) plane[i] = (plane[i] - m) / s;
    }

    fec::Tape<float> tape;
    std::vector<AssignmentRecord> records;
    model.forward_image(tape, img, &records);
    const auto pyramid = fec::build_pyramid(records, model.cfg.stem_kernel);
    const auto seg = fec::render_segmentation(pyramid, pyramid.level_count());

    // Majority color per segment, then pixel agreement against the mask. The
    // mask boundary falls on a token boundary, so grid resolution is exact.
    std::map<int, std::pair<int, int>> votes;  // label -> (left, right)
    for (int y = 0; y < seg.h; ++y)
        for (int x = 0; x < seg.w; ++x)
            (x < seg.w / 2 ? votes[seg.label_at(y, x)].first
                           : votes[seg.label_at(y, x)].second)++;
    int agree = 0;
    for (auto& [label, v] : votes) agree += std::max(v.first, v.second);
    const double agreement = static_cast<double>(agree) / (seg.h * seg.w);

    std::ostringstream detail;
    detail << "top-level segments vs half-color mask: " << fmt(100.0 * agreement)
           << "% pixel agreement across " << votes.size() << " segments (target "
           << fmt(100.0 * kAgreementTarget) << "%)";
    return {agreement >= kAgreementTarget, detail.str()};
}

// --- 7. every similarity/dispatch combination trains ------------------------

Outcome criterion_ablation_grid() {
    constexpr int kSteps = 100;  // 5 epochs x 20 steps
    const fec::Dataset train_set = fec::make_digit_dataset(320, 7, "train");
    const fec::Dataset val_set = fec::make_digit_dataset(64, 8, "val");

    fec::TrainConfig tc;
    tc.epochs = 5;
    tc.batch_size = 16;

    const auto run_curve = [&](SimilarityKind kind, fec::DispatchMode mode) {
        ModelConfig mc = ModelConfig::micro();
        mc.similarity = kind;
        mc.dispatch = mode;
        auto model = fec::Model<float>::build(mc);
        const fec::TrainResult r = fec::train_model(model, train_set, val_set, tc);
        std::vector<double> curve;
        for (const auto& e : r.epochs) curve.push_back(e.train_loss);
        return std::pair{r, curve};
    };

    std::vector<std::vector<double>> curves;
    std::vector<std::string> names;
    for (SimilarityKind kind : {SimilarityKind::cosine, SimilarityKind::dot_product,
                                SimilarityKind::euclidean_negated})
        for (fec::DispatchMode mode :
             {fec::DispatchMode::single_cluster, fec::DispatchMode::dense_sum}) {
            const auto [result, curve] = run_curve(kind, mode);
            const std::string name = std::string(fec::to_string(kind)) + "/" +
                                     fec::to_string(mode);
            if (result.nan_abort)
                return {false, name + " aborted: " + result.nan_diagnostic};
            for (double v : curve)
                if (!std::isfinite(v)) return {false, name + " produced a non-finite loss"};
            curves.push_back(curve);
            names.push_back(name);
        }

    for (std::size_t a = 0; a < curves.size(); ++a)
        for (std::size_t b = a + 1; b < curves.size(); ++b)
            if (curves[a] == curves[b])
                return {false, names[a] + " and " + names[b] + " gave identical loss curves"};

    const auto rerun = run_curve(SimilarityKind::cosine, fec::DispatchMode::single_cluster);
    if (rerun.second != curves[0])
        return {false, "rerun of " + names[0] + " was not bit-identical"};

    return {true, std::to_string(curves.size()) + " similarity/dispatch variants x " +
                      std::to_string(kSteps) +
                      " steps: all finite, pairwise distinct, rerun bit-identical"};
}

// --- 8. k-means reducer is exactly optimal on two blobs ---------------------

Outcome criterion_kmeans() {
    constexpr int kPerBlob = 6;
    constexpr double kTol = 1e-9;
    Rng rng(99);
    const int n = 2 * kPerBlob;
    Tensor<double> pts = Tensor<double>::zeros({n, 3});
    for (int i = 0; i < n; ++i) {
        const double cx = i < kPerBlob ? -2.0 : 2.0;
        for (int d = 0; d < 3; ++d) pts.at(i, d) = cx + 0.3 * rng.normal();
    }

    // Exhaustive minimum over every 2-way split.
    double best = std::numeric_limits<double>::infinity();
    std::vector<int> best_labels;
    for (int mask = 1; mask < (1 << n) - 1; ++mask) {
        double mean[2][3] = {};
        int cnt[2] = {};
        for (int i = 0; i < n; ++i) {
            const int g = (mask >> i) & 1;
            ++cnt[g];
            for (int d = 0; d < 3; ++d) mean[g][d] += pts.at(i, d);
        }
        for (int g = 0; g < 2; ++g)
            for (int d = 0; d < 3; ++d) mean[g][d] /= cnt[g];
        double inertia = 0.0;
        for (int i = 0; i < n; ++i) {
            const int g = (mask >> i) & 1;
            for (int d = 0; d < 3; ++d) {
                const double diff = pts.at(i, d) - mean[g][d];
                inertia += diff * diff;
            }
        }
        if (inertia < best) {
            best = inertia;
            best_labels.assign(static_cast<std::size_t>(n), 0);
            for (int i = 0; i < n; ++i) best_labels[static_cast<std::size_t>(i)] = (mask >> i) & 1;
        }
    }

    std::vector<double> trace;
    const std::vector<int> labels = fec::kmeans_reduce(pts, 2, 5, &trace);
    for (std::size_t i = 1; i < trace.size(); ++i)
        if (trace[i] > trace[i - 1] + 1e-12)
            return {false, "inertia rose between Lloyd iterations " + std::to_string(i - 1) +
                               " and " + std::to_string(i)};
    const double inertia = trace.back();

    bool same = true, flipped = true;
    for (int i = 0; i < n; ++i) {
        same = same && labels[static_cast<std::size_t>(i)] == best_labels[static_cast<std::size_t>(i)];
        flipped = flipped &&
                  labels[static_cast<std::size_t>(i)] == 1 - best_labels[static_cast<std::size_t>(i)];
    }

    std::ostringstream detail;
    detail << "two blobs: inertia " << fmt_sci(inertia) << " equals exhaustive minimum "
           << fmt_sci(best) << ", labels match blob membership, trace monotone";
    return {std::abs(inertia - best) <= kTol * std::max(1.0, best) && (same || flipped),
            detail.str()};
}

}  // namespace

int main() {
    std::optional<TrainingArtifacts> trained;
    int failures = 0;
    const auto report = [&](int number, const std::string& name, Outcome o) {
        std::cout << (o.pass ? "[PASS]" : "[FAIL]") << " criterion " << number << " (" << name
                  << "): " << o.detail << "\n"
                  << std::flush;
        if (!o.pass) ++failures;
    };

    report(1, "oracle equivalence", criterion_oracle_equivalence());
    report(2, "gradient suite", criterion_gradient_suite());
    report(3, "pyramid invariants", criterion_pyramid_invariants());
    report(4, "reference configuration", criterion_reference_config());
    report(5, "desk-scale training", criterion_training(trained));
    report(6, "emergent segmentation", criterion_segmentation(trained));
    report(7, "ablation plumbing", criterion_ablation_grid());
    report(8, "k-means reducer", criterion_kmeans());

    std::cout << (failures == 0 ? "acceptance: all 8 criteria passed"
                                : "acceptance: " + std::to_string(failures) + " criteria FAILED")
              << "\n";
    return failures == 0 ? 0 : 1;
}
