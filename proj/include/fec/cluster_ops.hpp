#pragma once

#include <span>
#include <string>
#include <vector>

#include "fec/rng.hpp"
#include "fec/tape.hpp"
#include "fec/tensor.hpp"

namespace fec {

enum class SimilarityKind { cosine, dot_product, euclidean_negated };

// How a representative is sent back to pixels: gate only the assigned
// cluster's entry, or sum gated contributions from every cluster.
enum class DispatchMode { single_cluster, dense_sum };

std::string to_string(SimilarityKind k);
std::string to_string(DispatchMode m);
SimilarityKind similarity_from_token(const std::string& s);  // cosine|dot|euclidean
DispatchMode dispatch_from_token(const std::string& s);      // eq7|s1_dense
std::string similarity_token(SimilarityKind k);
std::string dispatch_token(DispatchMode m);

// Hard pixel-to-center assignment captured during a forward pass.
struct AssignmentRecord {
    int layer_id = 0;
    bool is_pool = false;
    GridShape input_grid;
    GridShape center_grid;
    std::vector<int> assignment;     // length input_grid.numel(), entries in [0, O)
    Tensor<double> representatives;  // [O x C'] snapshot
};

struct ClusterLayerOptions {
    int in_channels = 0;
    int proj_dim = 0;  // C'; for pool layers this is the output channel count
    bool is_pool = false;
    int mlp_hidden = 0;  // 0 = single linear dispatch MLP
    bool use_norm = true;
    SimilarityKind similarity = SimilarityKind::cosine;
    DispatchMode dispatch = DispatchMode::single_cluster;
};

// Learned weights of one clustering layer. Encode layers own the dispatch
// MLP; pool layers own the pooled-residual projection instead.
template <typename T>
struct ClusterLayerParams {
    ClusterLayerOptions opt;
    Param<T> norm_gamma, norm_beta;        // [1 x C], when use_norm
    Param<T> key_w, value_w;               // [C x C']
    Param<T> alpha, beta;                  // scalars
    Param<T> mlp_hidden_w, mlp_hidden_b;   // [C' x H], [1 x H], when mlp_hidden > 0
    Param<T> mlp_w, mlp_b;                 // [C' x C] (or [H x C]), [1 x C]
    Param<T> pool_w;                       // [C x C'], pool layers only

    static ClusterLayerParams make(const std::string& prefix, ClusterLayerOptions opt, Rng& rng);
    void collect(std::vector<Param<T>*>& out);  // registry order, stable
};

template <typename T>
struct ClusterResult {
    using Var = typename Tape<T>::Var;
    Var keys, values;                  // [N x C']
    Var center_keys, center_values;    // [O x C']
    Var similarity;                    // [N x O]
    Var representatives;               // [O x C']
    std::vector<int> assignment;       // length N
};

template <typename T>
struct CenterInit {
    using Var = typename Tape<T>::Var;
    Var keys, values, center_keys, center_values;
};

// Projects features to key/value space and seeds centers by adaptive average
// pooling of the projections onto the center grid.
template <typename T>
CenterInit<T> init_centers(Tape<T>& tape, typename Tape<T>::Var feat, GridShape grid,
                           typename Tape<T>::Var key_w, typename Tape<T>::Var value_w,
                           GridShape centers);

template <typename T>
typename Tape<T>::Var similarity_matrix(Tape<T>& tape, typename Tape<T>::Var keys,
                                        typename Tape<T>::Var center_keys, SimilarityKind kind);

// Row-wise argmax over the similarity matrix; ties go to the lowest center.
template <typename T>
std::vector<int> assign(const Tensor<T>& similarity);

// R_o = (Cv_o + sum of member values) / (1 + member count); empty clusters
// fall back to their center value.
template <typename T>
typename Tape<T>::Var aggregate_representatives(Tape<T>& tape, typename Tape<T>::Var values,
                                                typename Tape<T>::Var center_values,
                                                std::span<const int> assignment);

// Full clustering pass over (optionally normalized) features.
template <typename T>
ClusterResult<T> cluster_features(Tape<T>& tape, typename Tape<T>::Var feat, GridShape grid,
                                  ClusterLayerParams<T>& p, GridShape centers);

// F'_n = F_n + MLP(gate * representative), gate = sigmoid(alpha*M + beta).
template <typename T>
typename Tape<T>::Var dispatch(Tape<T>& tape, typename Tape<T>::Var feat,
                               const ClusterResult<T>& res, ClusterLayerParams<T>& p);

// Resolution-preserving encode layer: cluster, then dispatch back to pixels.
// `res_out` exposes the clustering (the head averages the last layer's R).
template <typename T>
typename Tape<T>::Var encode(Tape<T>& tape, typename Tape<T>::Var feat, GridShape grid,
                             ClusterLayerParams<T>& p, GridShape centers,
                             AssignmentRecord* rec = nullptr, ClusterResult<T>* res_out = nullptr);

// Halving pool layer: out_o = pool_residual(2x2 mean of cell o) + R_o.
template <typename T>
typename Tape<T>::Var pool(Tape<T>& tape, typename Tape<T>::Var feat, GridShape grid,
                           ClusterLayerParams<T>& p, AssignmentRecord* rec = nullptr);

}  // namespace fec
