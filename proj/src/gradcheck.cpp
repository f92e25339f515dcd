#include "fec/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "fec/cluster_ops.hpp"
#include "fec/rng.hpp"
#include "fec/tape.hpp"

namespace fec {

namespace {

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

struct LayerCase {
    ClusterLayerParams<double> params;
    Tensor<double> feat;
    GridShape grid;
    GridShape centers;
    bool is_pool = false;
};

LayerCase make_case(bool is_pool, std::uint64_t seed) {
    Rng rng(seed);
    ClusterLayerOptions opt;
    opt.in_channels = 4;
    opt.proj_dim = 3;
    opt.is_pool = is_pool;
    opt.use_norm = false;  // keeps the audited parameter list to the bare layer
    LayerCase lc;
    lc.grid = {2, 2};
    lc.centers = is_pool ? GridShape{1, 1} : GridShape{1, 2};
    lc.params = ClusterLayerParams<double>::make(is_pool ? "pool" : "encode", opt, rng);
    lc.feat = Tensor<double>::zeros({lc.grid.numel(), opt.in_channels});
    fill_uniform(lc.feat, rng, -1.0, 1.0);
    lc.is_pool = is_pool;
    return lc;
}

double eval_loss(LayerCase& lc, bool feat_grad, std::map<std::string, Tensor<double>>* grads,
                 Tensor<double>* feat_grad_out) {
    Tape<double> tape;
    auto f = tape.leaf(lc.feat, feat_grad);
    auto out = lc.is_pool ? pool(tape, f, lc.grid, lc.params, nullptr)
                          : encode(tape, f, lc.grid, lc.params, lc.centers, nullptr);
    auto loss = tape.mean_all(tape.mul(out, out));
    if (grads) {
        tape.backward(loss);
        tape.harvest_param_grads(
            [&](Param<double>& p, const Tensor<double>& g) { (*grads)[p.name] = g; });
        if (feat_grad_out) *feat_grad_out = tape.grad(f);
    }
    return tape.value(loss).scalar_value();
}

// Central difference over every element of `t`, comparing against `analytic`.
double fd_max_rel(LayerCase& lc, Tensor<double>& t, const Tensor<double>& analytic, double h) {
    double worst = 0.0;
    for (std::size_t i = 0; i < t.data.size(); ++i) {
        const double keep = t.data[i];
        t.data[i] = keep + h;
        const double lp = eval_loss(lc, false, nullptr, nullptr);
        t.data[i] = keep - h;
        const double lm = eval_loss(lc, false, nullptr, nullptr);
        t.data[i] = keep;
        worst = std::max(worst, rel_err(analytic.data[i], (lp - lm) / (2.0 * h)));
    }
    return worst;
}

struct GroupSpec {
    const char* label;
    Param<double> ClusterLayerParams<double>::* member;
};

constexpr GroupSpec kEncodeGroups[] = {
    {"key_proj", &ClusterLayerParams<double>::key_w},
    {"value_proj", &ClusterLayerParams<double>::value_w},
    {"alpha", &ClusterLayerParams<double>::alpha},
    {"beta", &ClusterLayerParams<double>::beta},
    {"mlp_weight", &ClusterLayerParams<double>::mlp_w},
    {"mlp_bias", &ClusterLayerParams<double>::mlp_b},
};

constexpr GroupSpec kPoolGroups[] = {
    {"key_proj", &ClusterLayerParams<double>::key_w},
    {"value_proj", &ClusterLayerParams<double>::value_w},
    {"alpha", &ClusterLayerParams<double>::alpha},
    {"beta", &ClusterLayerParams<double>::beta},
    {"pool_residual", &ClusterLayerParams<double>::pool_w},
};

template <std::size_t N>
void check_layer(LayerCase lc, const GroupSpec (&specs)[N], double h, bool corrupt,
                 std::vector<GradCheckGroup>& out, double& input_rel) {
    std::map<std::string, Tensor<double>> analytic;
    Tensor<double> feat_grad;
    eval_loss(lc, true, &analytic, &feat_grad);
    if (corrupt) {
        // Negative control: break one analytic gradient on purpose.
        analytic[lc.params.mlp_w.name].data[0] += 0.5;
    }
    for (const auto& spec : specs) {
        Param<double>& p = lc.params.*spec.member;
        // Parameters outside the layer's loss path (pool alpha/beta) have no
        // harvested gradient; their analytic gradient is identically zero.
        auto it = analytic.find(p.name);
        const Tensor<double> zero = Tensor<double>::zeros(p.value.shape);
        GradCheckGroup g;
        g.name = spec.label;
        g.max_rel = fd_max_rel(lc, p.value, it != analytic.end() ? it->second : zero, h);
        out.push_back(g);
    }
    input_rel = fd_max_rel(lc, lc.feat, feat_grad, h);
}

// A loss reachable only through assignment indices: keys depend on w, the
// gathered table does not. Any nonzero gradient on w means the argmax leaked.
double barrier_leak(std::uint64_t seed) {
    Rng rng(seed + 101);
    Tape<double> tape;
    Param<double> w("w", Tensor<double>::zeros({3, 2}));
    fill_uniform(w.value, rng, -1.0, 1.0);
    Tensor<double> feat = Tensor<double>::zeros({4, 3});
    Tensor<double> table = Tensor<double>::zeros({2, 2});
    fill_uniform(feat, rng, -1.0, 1.0);
    fill_uniform(table, rng, -1.0, 1.0);
    auto keys = tape.matmul(tape.leaf(feat), tape.leaf(w));
    auto centers = tape.adaptive_avg_pool(keys, {2, 2}, {1, 2});
    auto m = similarity_matrix(tape, keys, centers, SimilarityKind::cosine);
    auto a = assign(tape.value(m));
    auto picked = tape.gather_rows(tape.leaf(table), a);
    tape.backward(tape.mean_all(picked));
    double leak = 0.0;
    tape.harvest_param_grads([&](Param<double>&, const Tensor<double>& g) {
        for (double v : g.data) leak = std::max(leak, std::abs(v));
    });
    return leak;
}

}  // namespace

bool GradCheckReport::passed() const { return failing().empty(); }

std::vector<std::string> GradCheckReport::failing() const {
    std::vector<std::string> bad;
    for (const auto& g : encode_groups)
        if (!(g.max_rel < tol)) bad.push_back("encode." + g.name);
    for (const auto& g : pool_groups)
        if (!(g.max_rel < tol)) bad.push_back("pool." + g.name);
    if (!(input_encode_rel < tol)) bad.push_back("input.encode");
    if (!(input_pool_rel < tol)) bad.push_back("input.pool");
    if (barrier_leak != 0.0) bad.push_back("barrier.assignment");
    return bad;
}

GradCheckReport run_gradcheck(std::uint64_t seed, double h, bool corrupt) {
    GradCheckReport rep;
    check_layer(make_case(false, seed), kEncodeGroups, h, corrupt, rep.encode_groups,
                rep.input_encode_rel);
    check_layer(make_case(true, seed), kPoolGroups, h, false, rep.pool_groups,
                rep.input_pool_rel);
    rep.barrier_leak = barrier_leak(seed);
    return rep;
}

std::string format_report(const GradCheckReport& r) {
    std::ostringstream os;
    os.setf(std::ios::scientific);
    os.precision(3);
    for (const auto& g : r.encode_groups) os << "encode." << g.name << " max_rel " << g.max_rel << "\n";
    for (const auto& g : r.pool_groups) os << "pool." << g.name << " max_rel " << g.max_rel << "\n";
    os << "input.encode max_rel " << r.input_encode_rel << "\n";
    os << "input.pool max_rel " << r.input_pool_rel << "\n";
    os << "barrier.assignment leak " << r.barrier_leak << "\n";
    const auto bad = r.failing();
    if (bad.empty()) {
        os << "gradcheck ok (tol " << r.tol << ")\n";
    } else {
        os << "gradcheck FAILED:";
        for (const auto& b : bad) os << " " << b;
        os << "\n";
    }
    return os.str();
}

}  // namespace fec
