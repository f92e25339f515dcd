#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fec/cluster_ops.hpp"
#include "fec/tape.hpp"
#include "fec/tensor.hpp"

namespace fec {

struct ModelConfig {
    int input_size = 64;  // square input, pixels per side
    int stem_kernel = 4;  // kernel == stride: non-overlapping patch embedding
    std::array<int, 4> stage_depths{1, 1, 1, 1};
    std::array<int, 4> stage_channels{16, 32, 64, 128};
    std::array<int, 4> encode_dims{16, 16, 32, 32};  // per-stage C'
    int num_classes = 10;
    SimilarityKind similarity = SimilarityKind::cosine;
    DispatchMode dispatch = DispatchMode::single_cluster;
    std::uint64_t seed = 42;
    bool use_norm = true;
    int mlp_hidden = 0;

    static ModelConfig micro();  // 64x64 desk-scale preset
    static ModelConfig small();  // 224x224 preset at the reference scale

    void validate() const;  // throws ConfigError naming the offending stage

    // Token grid entering stage i (0-based): input/stem, halved per pool.
    GridShape stage_grid(int stage) const;
    // Center grid used by encode layers of stage i (half the stage grid).
    GridShape encode_centers(int stage) const;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
    bool operator==(const ModelConfig&) const = default;
};

// The four-stage clustering backbone: patch-embedding stem, encode layers at
// each resolution, halving pool layers between stages, mean-representative
// head. Layer list order equals forward order.
template <typename T>
struct Model {
    using Var = typename Tape<T>::Var;

    ModelConfig cfg;
    Param<T> stem_w, stem_b;
    std::vector<ClusterLayerParams<T>> layers;  // forward order
    Param<T> head_w, head_b;
    // Dataset normalization constants baked into the checkpoint ([3] each).
    Tensor<T> norm_mean = Tensor<T>::zeros({3});
    Tensor<T> norm_std = Tensor<T>::full({3}, T(1));

    static Model build(const ModelConfig& cfg);

    // Trainable parameters in a stable forward order. Pointers alias this
    // object; rebuilt on every call, so take it after the model stops moving.
    std::vector<Param<T>*> params();
    std::int64_t param_count();
    void zero_grads();

    // One image [3,H,W] -> logits Var [1,num_classes] on the caller's tape.
    Var forward_image(Tape<T>& tape, const Tensor<T>& img,
                      std::vector<AssignmentRecord>* records = nullptr);

    // Value-only batch forward; batch entries are [3,H,W].
    Tensor<T> forward_batch(const std::vector<Tensor<T>>& batch,
                            std::vector<std::vector<AssignmentRecord>>* records = nullptr);

    // Encodes plus pools: records per forward = sum(depths) + 3.
    int layers_per_forward() const;
};

}  // namespace fec
