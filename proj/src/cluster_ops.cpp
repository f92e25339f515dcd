#include "fec/cluster_ops.hpp"

#include <array>
#include <cmath>

#include "fec/errors.hpp"

namespace fec {

std::string to_string(SimilarityKind k) {
    switch (k) {
        case SimilarityKind::cosine: return "cosine";
        case SimilarityKind::dot_product: return "dot_product";
        case SimilarityKind::euclidean_negated: return "euclidean_negated";
    }
    return "?";
}

std::string to_string(DispatchMode m) {
    return m == DispatchMode::single_cluster ? "single_cluster" : "dense_sum";
}

SimilarityKind similarity_from_token(const std::string& s) {
    if (s == "cosine") return SimilarityKind::cosine;
    if (s == "dot") return SimilarityKind::dot_product;
    if (s == "euclidean") return SimilarityKind::euclidean_negated;
    throw ConfigError("unknown similarity '" + s + "' (expected cosine|dot|euclidean)");
}

DispatchMode dispatch_from_token(const std::string& s) {
    if (s == "eq7") return DispatchMode::single_cluster;
    if (s == "s1_dense") return DispatchMode::dense_sum;
    throw ConfigError("unknown dispatch variant '" + s + "' (expected eq7|s1_dense)");
}

std::string similarity_token(SimilarityKind k) {
    switch (k) {
        case SimilarityKind::cosine: return "cosine";
        case SimilarityKind::dot_product: return "dot";
        case SimilarityKind::euclidean_negated: return "euclidean";
    }
    return "?";
}

std::string dispatch_token(DispatchMode m) {
    return m == DispatchMode::single_cluster ? "eq7" : "s1_dense";
}

template <typename T>
ClusterLayerParams<T> ClusterLayerParams<T>::make(const std::string& prefix,
                                                 ClusterLayerOptions opt, Rng& rng) {
    const std::int64_t c = opt.in_channels, cp = opt.proj_dim;
    if (c <= 0 || cp <= 0) {
        throw ConfigError("cluster layer '" + prefix + "': channel dims must be positive");
    }
    ClusterLayerParams p;
    p.opt = opt;
    auto kaiming = [&rng](std::vector<std::int64_t> shape, std::int64_t fan_in) {
        Tensor<T> t = Tensor<T>::zeros(std::move(shape));
        fill_kaiming(t, rng, fan_in);
        return t;
    };
    if (opt.use_norm) {
        p.norm_gamma = Param<T>(prefix + ".norm_gamma", Tensor<T>::full({1, c}, T(1)));
        p.norm_beta = Param<T>(prefix + ".norm_beta", Tensor<T>::zeros({1, c}));
    }
    p.key_w = Param<T>(prefix + ".key_proj", kaiming({c, cp}, c), true);
    p.value_w = Param<T>(prefix + ".value_proj", kaiming({c, cp}, c), true);
    p.alpha = Param<T>(prefix + ".alpha", Tensor<T>::scalar(T(1)));
    p.beta = Param<T>(prefix + ".beta", Tensor<T>::scalar(T(0)));
    if (opt.is_pool) {
        p.pool_w = Param<T>(prefix + ".pool_residual", kaiming({c, cp}, c), true);
    } else if (opt.mlp_hidden > 0) {
        const std::int64_t h = opt.mlp_hidden;
        p.mlp_hidden_w = Param<T>(prefix + ".mlp_hidden_w", kaiming({cp, h}, cp), true);
        p.mlp_hidden_b = Param<T>(prefix + ".mlp_hidden_b", Tensor<T>::zeros({1, h}));
        p.mlp_w = Param<T>(prefix + ".mlp_w", kaiming({h, c}, h), true);
        p.mlp_b = Param<T>(prefix + ".mlp_b", Tensor<T>::zeros({1, c}));
    } else {
        p.mlp_w = Param<T>(prefix + ".mlp_w", kaiming({cp, c}, cp), true);
        p.mlp_b = Param<T>(prefix + ".mlp_b", Tensor<T>::zeros({1, c}));
    }
    return p;
}

template <typename T>
void ClusterLayerParams<T>::collect(std::vector<Param<T>*>& out) {
    if (opt.use_norm) {
        out.push_back(&norm_gamma);
        out.push_back(&norm_beta);
    }
    out.push_back(&key_w);
    out.push_back(&value_w);
    out.push_back(&alpha);
    out.push_back(&beta);
    if (opt.is_pool) {
        out.push_back(&pool_w);
    } else {
        if (opt.mlp_hidden > 0) {
            out.push_back(&mlp_hidden_w);
            out.push_back(&mlp_hidden_b);
        }
        out.push_back(&mlp_w);
        out.push_back(&mlp_b);
    }
}

template <typename T>
CenterInit<T> init_centers(Tape<T>& tape, typename Tape<T>::Var feat, GridShape grid,
                           typename Tape<T>::Var key_w, typename Tape<T>::Var value_w,
                           GridShape centers) {
    if (tape.value(feat).rows() != grid.numel()) {
        throw ShapeError("init_centers: grid " + std::to_string(grid.h) + "x" +
                         std::to_string(grid.w) + " does not match features " +
                         tape.value(feat).shape_str());
    }
    if (centers.numel() > grid.numel()) {
        throw ConfigError("init_centers: " + std::to_string(centers.numel()) +
                          " centers exceed " + std::to_string(grid.numel()) + " pixels");
    }
    CenterInit<T> out;
    out.keys = tape.matmul(feat, key_w);
    out.values = tape.matmul(feat, value_w);
    out.center_keys = tape.adaptive_avg_pool(out.keys, grid, centers);
    out.center_values = tape.adaptive_avg_pool(out.values, grid, centers);
    return out;
}

namespace {

constexpr double kCosineEps = 1e-8;

template <typename T>
typename Tape<T>::Var cosine_similarity(Tape<T>& tape, typename Tape<T>::Var vk,
                                        typename Tape<T>::Var vc) {
    const Tensor<T>& k = tape.value(vk);
    const Tensor<T>& c = tape.value(vc);
    const std::int64_t n = k.rows(), o = c.rows(), d = k.cols();
    std::vector<T> knorm(n), cnorm(o);
    for (std::int64_t i = 0; i < n; ++i) {
        T s = T(0);
        for (std::int64_t j = 0; j < d; ++j) s += k.at(i, j) * k.at(i, j);
        knorm[i] = std::sqrt(s);
    }
    for (std::int64_t i = 0; i < o; ++i) {
        T s = T(0);
        for (std::int64_t j = 0; j < d; ++j) s += c.at(i, j) * c.at(i, j);
        cnorm[i] = std::sqrt(s);
    }
    Tensor<T> m = Tensor<T>::zeros({n, o});
    for (std::int64_t i = 0; i < n; ++i) {
        const T* krow = &k.data[i * d];
        T* mrow = &m.data[i * o];
        for (std::int64_t j = 0; j < o; ++j) {
            const T* crow = &c.data[j * d];
            T dot = T(0);
            for (std::int64_t t = 0; t < d; ++t) dot += krow[t] * crow[t];
            mrow[j] = dot / (knorm[i] * cnorm[j] + T(kCosineEps));
        }
    }
    const std::array<typename Tape<T>::Var, 2> parents{vk, vc};
    return tape.custom(
        parents, std::move(m),
        [&tape, vk, vc, n, o, d, knorm = std::move(knorm), cnorm = std::move(cnorm),
         mid = tape.size()](const Tensor<T>& up) {
            const Tensor<T>& k = tape.value(vk);
            const Tensor<T>& c = tape.value(vc);
            const Tensor<T>& m = tape.value({static_cast<std::int32_t>(mid)});
            const bool need_k = tape.requires_grad(vk);
            const bool need_c = tape.requires_grad(vc);
            Tensor<T>* dk = need_k ? &tape.grad_acc(vk) : nullptr;
            Tensor<T>* dc = need_c ? &tape.grad_acc(vc) : nullptr;
            std::vector<T> khat(d);
            for (std::int64_t i = 0; i < n; ++i) {
                const T* krow = &k.data[i * d];
                const T kn = knorm[i];
                for (std::int64_t t = 0; t < d; ++t) khat[t] = kn > T(0) ? krow[t] / kn : T(0);
                for (std::int64_t j = 0; j < o; ++j) {
                    const T u = up.at(i, j);
                    if (u == T(0)) continue;
                    const T* crow = &c.data[j * d];
                    const T cn = cnorm[j];
                    const T denom = kn * cn + T(kCosineEps);
                    const T w = u / denom;
                    const T mij = m.at(i, j);
                    if (dk) {
                        T* drow = &dk->data[i * d];
                        for (std::int64_t t = 0; t < d; ++t)
                            drow[t] += w * (crow[t] - mij * cn * khat[t]);
                    }
                    if (dc) {
                        T* drow = &dc->data[j * d];
                        const T cinv = cn > T(0) ? T(1) / cn : T(0);
                        for (std::int64_t t = 0; t < d; ++t)
                            drow[t] += w * (krow[t] - mij * kn * crow[t] * cinv);
                    }
                }
            }
        });
}

template <typename T>
typename Tape<T>::Var euclidean_similarity(Tape<T>& tape, typename Tape<T>::Var vk,
                                           typename Tape<T>::Var vc) {
    const Tensor<T>& k = tape.value(vk);
    const Tensor<T>& c = tape.value(vc);
    const std::int64_t n = k.rows(), o = c.rows(), d = k.cols();
    Tensor<T> m = Tensor<T>::zeros({n, o});
    for (std::int64_t i = 0; i < n; ++i) {
        const T* krow = &k.data[i * d];
        for (std::int64_t j = 0; j < o; ++j) {
            const T* crow = &c.data[j * d];
            T s = T(0);
            for (std::int64_t t = 0; t < d; ++t) {
                const T diff = krow[t] - crow[t];
                s += diff * diff;
            }
            m.at(i, j) = -std::sqrt(s);
        }
    }
    const std::array<typename Tape<T>::Var, 2> parents{vk, vc};
    return tape.custom(
        parents, std::move(m),
        [&tape, vk, vc, n, o, d, mid = tape.size()](const Tensor<T>& up) {
            const Tensor<T>& k = tape.value(vk);
            const Tensor<T>& c = tape.value(vc);
            const Tensor<T>& m = tape.value({static_cast<std::int32_t>(mid)});
            const bool need_k = tape.requires_grad(vk);
            const bool need_c = tape.requires_grad(vc);
            Tensor<T>* dk = need_k ? &tape.grad_acc(vk) : nullptr;
            Tensor<T>* dc = need_c ? &tape.grad_acc(vc) : nullptr;
            for (std::int64_t i = 0; i < n; ++i) {
                const T* krow = &k.data[i * d];
                for (std::int64_t j = 0; j < o; ++j) {
                    const T dist = -m.at(i, j);
                    if (dist == T(0)) continue;  // subgradient 0 at the kink
                    const T w = up.at(i, j) / dist;
                    const T* crow = &c.data[j * d];
                    for (std::int64_t t = 0; t < d; ++t) {
                        const T g = -w * (krow[t] - crow[t]);
                        if (dk) dk->data[i * d + t] += g;
                        if (dc) dc->data[j * d + t] -= g;
                    }
                }
            }
        });
}

}  // namespace

template <typename T>
typename Tape<T>::Var similarity_matrix(Tape<T>& tape, typename Tape<T>::Var keys,
                                        typename Tape<T>::Var center_keys, SimilarityKind kind) {
    if (tape.value(keys).cols() != tape.value(center_keys).cols()) {
        throw ShapeError("similarity_matrix: key width " + tape.value(keys).shape_str() +
                         " vs center width " + tape.value(center_keys).shape_str());
    }
    switch (kind) {
        case SimilarityKind::cosine: return cosine_similarity(tape, keys, center_keys);
        case SimilarityKind::dot_product:
            return tape.matmul(keys, tape.transpose(center_keys));
        case SimilarityKind::euclidean_negated:
            return euclidean_similarity(tape, keys, center_keys);
    }
    throw ArgumentError("similarity_matrix: bad kind");
}

template <typename T>
std::vector<int> assign(const Tensor<T>& similarity) {
    return argmax_rows(similarity);
}

template <typename T>
typename Tape<T>::Var aggregate_representatives(Tape<T>& tape, typename Tape<T>::Var values,
                                                typename Tape<T>::Var center_values,
                                                std::span<const int> assignment) {
    const Tensor<T>& v = tape.value(values);
    const Tensor<T>& cv = tape.value(center_values);
    const std::int64_t n = v.rows(), o = cv.rows(), d = v.cols();
    if (static_cast<std::int64_t>(assignment.size()) != n) {
        throw ShapeError("aggregate_representatives: " + std::to_string(assignment.size()) +
                         " assignments for " + v.shape_str());
    }
    std::vector<int> counts(static_cast<std::size_t>(o), 0);
    for (int a : assignment) {
        if (a < 0 || a >= o) {
            throw ArgumentError("aggregate_representatives: assignment " + std::to_string(a) +
                                " outside [0," + std::to_string(o) + ")");
        }
        ++counts[static_cast<std::size_t>(a)];
    }
    Tensor<T> r = cv;
    for (std::int64_t i = 0; i < n; ++i) {
        const int a = assignment[i];
        const T* vrow = &v.data[i * d];
        T* rrow = &r.data[static_cast<std::int64_t>(a) * d];
        for (std::int64_t t = 0; t < d; ++t) rrow[t] += vrow[t];
    }
    for (std::int64_t j = 0; j < o; ++j) {
        const T inv = T(1) / static_cast<T>(1 + counts[static_cast<std::size_t>(j)]);
        T* rrow = &r.data[j * d];
        for (std::int64_t t = 0; t < d; ++t) rrow[t] *= inv;
    }
    std::vector<int> own(assignment.begin(), assignment.end());
    const std::array<typename Tape<T>::Var, 2> parents{values, center_values};
    return tape.custom(parents, std::move(r),
                       [&tape, values, center_values, own = std::move(own),
                        counts = std::move(counts), d](const Tensor<T>& up) {
                           if (tape.requires_grad(center_values)) {
                               Tensor<T>& dcv = tape.grad_acc(center_values);
                               for (std::size_t j = 0; j < counts.size(); ++j) {
                                   const T inv = T(1) / static_cast<T>(1 + counts[j]);
                                   for (std::int64_t t = 0; t < d; ++t)
                                       dcv.data[j * d + t] += up.data[j * d + t] * inv;
                               }
                           }
                           if (tape.requires_grad(values)) {
                               Tensor<T>& dv = tape.grad_acc(values);
                               for (std::size_t i = 0; i < own.size(); ++i) {
                                   const std::size_t a = static_cast<std::size_t>(own[i]);
                                   const T inv = T(1) / static_cast<T>(1 + counts[a]);
                                   for (std::int64_t t = 0; t < d; ++t)
                                       dv.data[i * d + t] += up.data[a * d + t] * inv;
                               }
                           }
                       });
}

template <typename T>
ClusterResult<T> cluster_features(Tape<T>& tape, typename Tape<T>::Var feat, GridShape grid,
                                  ClusterLayerParams<T>& p, GridShape centers) {
    auto kw = tape.leaf(p.key_w);
    auto vw = tape.leaf(p.value_w);
    CenterInit<T> ci = init_centers(tape, feat, grid, kw, vw, centers);
    ClusterResult<T> res;
    res.keys = ci.keys;
    res.values = ci.values;
    res.center_keys = ci.center_keys;
    res.center_values = ci.center_values;
    res.similarity = similarity_matrix(tape, ci.keys, ci.center_keys, p.opt.similarity);
    res.assignment = assign(tape.value(res.similarity));
    res.representatives =
        aggregate_representatives(tape, ci.values, ci.center_values, res.assignment);
    return res;
}

template <typename T>
typename Tape<T>::Var dispatch(Tape<T>& tape, typename Tape<T>::Var feat,
                               const ClusterResult<T>& res, ClusterLayerParams<T>& p) {
    auto alpha = tape.leaf(p.alpha);
    auto beta = tape.leaf(p.beta);
    typename Tape<T>::Var h;
    if (p.opt.dispatch == DispatchMode::single_cluster) {
        auto msel = tape.select_per_row(res.similarity, res.assignment);
        auto gate = tape.sigmoid(tape.scale_shift(msel, alpha, beta));
        auto rsel = tape.gather_rows(res.representatives, res.assignment);
        h = tape.mul(rsel, gate);
    } else {
        auto gates = tape.sigmoid(tape.scale_shift(res.similarity, alpha, beta));
        h = tape.matmul(gates, res.representatives);
    }
    if (p.opt.mlp_hidden > 0) {
        h = tape.gelu(tape.add(tape.matmul(h, tape.leaf(p.mlp_hidden_w)), tape.leaf(p.mlp_hidden_b)));
    }
    auto y = tape.add(tape.matmul(h, tape.leaf(p.mlp_w)), tape.leaf(p.mlp_b));
    return tape.add(feat, y);
}

namespace {

template <typename T>
Tensor<double> snapshot(const Tensor<T>& t) {
    Tensor<double> out = Tensor<double>::zeros(t.shape);
    for (std::size_t i = 0; i < t.data.size(); ++i) out.data[i] = static_cast<double>(t.data[i]);
    return out;
}

template <typename T>
typename Tape<T>::Var maybe_norm(Tape<T>& tape, typename Tape<T>::Var feat,
                                 ClusterLayerParams<T>& p) {
    if (!p.opt.use_norm) return feat;
    return tape.layer_norm(feat, tape.leaf(p.norm_gamma), tape.leaf(p.norm_beta));
}

}  // namespace

template <typename T>
typename Tape<T>::Var encode(Tape<T>& tape, typename Tape<T>::Var feat, GridShape grid,
                             ClusterLayerParams<T>& p, GridShape centers, AssignmentRecord* rec,
                             ClusterResult<T>* res_out) {
    if (centers.numel() >= grid.numel()) {
        throw ConfigError("encode: center count " + std::to_string(centers.numel()) +
                          " must be below pixel count " + std::to_string(grid.numel()));
    }
    auto x = maybe_norm(tape, feat, p);
    ClusterResult<T> res = cluster_features(tape, x, grid, p, centers);
    auto out = dispatch(tape, feat, res, p);
    if (rec) {
        rec->is_pool = false;
        rec->input_grid = grid;
        rec->center_grid = centers;
        rec->assignment = res.assignment;
        rec->representatives = snapshot(tape.value(res.representatives));
    }
    if (res_out) *res_out = res;
    return out;
}

template <typename T>
typename Tape<T>::Var pool(Tape<T>& tape, typename Tape<T>::Var feat, GridShape grid,
                           ClusterLayerParams<T>& p, AssignmentRecord* rec) {
    if (grid.h % 2 != 0 || grid.w % 2 != 0) {
        throw ConfigError("pool: grid " + std::to_string(grid.h) + "x" + std::to_string(grid.w) +
                          " must have even sides");
    }
    const GridShape centers{grid.h / 2, grid.w / 2};
    auto x = maybe_norm(tape, feat, p);
    ClusterResult<T> res = cluster_features(tape, x, grid, p, centers);
    auto avg = tape.adaptive_avg_pool(feat, grid, centers);
    auto out = tape.add(tape.matmul(avg, tape.leaf(p.pool_w)), res.representatives);
    if (rec) {
        rec->is_pool = true;
        rec->input_grid = grid;
        rec->center_grid = centers;
        rec->assignment = res.assignment;
        rec->representatives = snapshot(tape.value(res.representatives));
    }
    return out;
}

template struct ClusterLayerParams<float>;
template struct ClusterLayerParams<double>;
template CenterInit<float> init_centers(Tape<float>&, Var32, GridShape, Var32, Var32, GridShape);
template CenterInit<double> init_centers(Tape<double>&, Var64, GridShape, Var64, Var64, GridShape);
template Var32 similarity_matrix(Tape<float>&, Var32, Var32, SimilarityKind);
template Var64 similarity_matrix(Tape<double>&, Var64, Var64, SimilarityKind);
template std::vector<int> assign(const Tensor<float>&);
template std::vector<int> assign(const Tensor<double>&);
template Var32 aggregate_representatives(Tape<float>&, Var32, Var32, std::span<const int>);
template Var64 aggregate_representatives(Tape<double>&, Var64, Var64, std::span<const int>);
template ClusterResult<float> cluster_features(Tape<float>&, Var32, GridShape,
                                               ClusterLayerParams<float>&, GridShape);
template ClusterResult<double> cluster_features(Tape<double>&, Var64, GridShape,
                                                ClusterLayerParams<double>&, GridShape);
template Var32 dispatch(Tape<float>&, Var32, const ClusterResult<float>&,
                        ClusterLayerParams<float>&);
template Var64 dispatch(Tape<double>&, Var64, const ClusterResult<double>&,
                        ClusterLayerParams<double>&);
template Var32 encode(Tape<float>&, Var32, GridShape, ClusterLayerParams<float>&, GridShape,
                      AssignmentRecord*, ClusterResult<float>*);
template Var64 encode(Tape<double>&, Var64, GridShape, ClusterLayerParams<double>&, GridShape,
                      AssignmentRecord*, ClusterResult<double>*);
template Var32 pool(Tape<float>&, Var32, GridShape, ClusterLayerParams<float>&, AssignmentRecord*);
template Var64 pool(Tape<double>&, Var64, GridShape, ClusterLayerParams<double>&,
                    AssignmentRecord*);

}  // namespace fec
