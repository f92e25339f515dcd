#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "fec/errors.hpp"
#include "fec/tensor.hpp"

namespace fec {

// Spatial extent of a token grid; tokens are stored row-major as [h*w x C].
struct GridShape {
    int h = 0;
    int w = 0;
    int numel() const { return h * w; }
    bool operator==(const GridShape&) const = default;
};

// Reverse-mode autodiff tape. One tape records one forward pass; ops append
// nodes in topological order, so backward() is a single reverse sweep.
//
// Gradient lifetime: leaf/param gradients persist across backward() calls
// (repeated backward accumulates); interior gradients are cleared at the start
// of each backward pass.
template <typename T>
class Tape {
  public:
    struct Var {
        std::int32_t id = -1;
        bool valid() const { return id >= 0; }
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor<T> value, bool requires_grad = false);
    Var leaf(Param<T>& p);

    Var matmul(Var a, Var b);
    Var transpose(Var a);
    // Elementwise; b broadcasts into a's shape (each extent equal or 1).
    Var add(Var a, Var b);
    Var mul(Var a, Var b);
    Var sigmoid(Var x);
    Var gelu(Var x);
    Var scale_shift(Var x, Var alpha, Var beta);  // alpha*x + beta, scalars
    Var scale_const(Var x, T c);
    Var sum(Var x, int axis);
    Var mean(Var x, int axis);
    Var sum_all(Var x);
    Var mean_all(Var x);
    // Row/column argmax as a value tensor; acts as a gradient barrier.
    Var max_index(Var x, int axis);
    Var gather_rows(Var src, std::span<const int> idx);
    Var select_per_row(Var m, std::span<const int> idx);
    Var adaptive_avg_pool(Var x, GridShape in, GridShape out);
    Var patchify(Var img, int patch);  // [C,H,W] -> [(H/p)*(W/p) x C*p*p]
    Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5));
    Var softmax_cross_entropy(Var logits, std::span<const int> labels);

    using BackwardFn = std::function<void(const Tensor<T>& upstream)>;
    // Escape hatch for ops with hand-written backward rules.
    Var custom(std::span<const Var> parents, Tensor<T> value, BackwardFn backward);

    const Tensor<T>& value(Var v) const { return nodes_[v.id].value; }
    bool requires_grad(Var v) const { return nodes_[v.id].needs_grad; }
    std::size_t size() const { return nodes_.size(); }

    // Gradient buffer for v, materialized as zeros on first touch.
    Tensor<T>& grad_acc(Var v);
    const Tensor<T>& grad(Var v) { return grad_acc(v); }

    void backward(Var root);

    // Fold tape gradients into their Params (p.grad += scale * g).
    void accumulate_param_grads(T scale = T(1));
    void harvest_param_grads(const std::function<void(Param<T>&, const Tensor<T>&)>& fn);

    // When enabled, any op producing a NaN throws NumericError naming the op.
    void set_nan_trace(bool on) { nan_trace_ = on; }

  private:
    struct Node {
        Tensor<T> value;
        bool needs_grad = false;
        bool persistent_grad = false;
        BackwardFn backward;
        Param<T>* param = nullptr;
        const char* label = "";
    };

    Var push(Node n);
    Var make_op(std::initializer_list<Var> parents, Tensor<T> value, const char* label,
                BackwardFn backward);
    void check_rank2(Var v, const char* who) const;

    std::vector<Node> nodes_;
    std::vector<Tensor<T>> grads_;
    bool nan_trace_ = false;
};

// Row-wise argmax over a rank-2 tensor; ties break to the lowest index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& m);

using Var32 = Tape<float>::Var;
using Var64 = Tape<double>::Var;

}  // namespace fec
