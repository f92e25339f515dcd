#include "fec/tape.hpp"

#include <algorithm>
#include <cmath>

namespace fec {

namespace {

template <typename T>
T sigmoid_scalar(T x) {
    if (x >= T(0)) {
        const T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

// Per-dim broadcast check: b may have extent 1 where a does not.
bool broadcast_ok(const std::vector<std::int64_t>& a, const std::vector<std::int64_t>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t d = 0; d < a.size(); ++d) {
        if (b[d] != a[d] && b[d] != 1) return false;
    }
    return true;
}

}  // namespace

template <typename T>
typename Tape<T>::Var Tape<T>::push(Node n) {
    if (nan_trace_ && n.value.has_nan()) {
        throw NumericError(std::string("NaN produced by op '") + n.label + "'");
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <typename T>
typename Tape<T>::Var Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = requires_grad;
    n.persistent_grad = requires_grad;
    n.label = "leaf";
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::Var Tape<T>::leaf(Param<T>& p) {
    Node n;
    n.value = p.value;  // copy; parameters stay immutable during the pass
    n.needs_grad = p.trainable;
    n.persistent_grad = p.trainable;
    n.param = &p;
    n.label = "param";
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::Var Tape<T>::make_op(std::initializer_list<Var> parents, Tensor<T> value,
                                       const char* label, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    n.label = label;
    for (Var p : parents) {
        if (nodes_[p.id].needs_grad) n.needs_grad = true;
    }
    if (n.needs_grad) n.backward = std::move(backward);
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::Var Tape<T>::custom(std::span<const Var> parents, Tensor<T> value,
                                      BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    n.label = "custom";
    for (Var p : parents) {
        if (nodes_[p.id].needs_grad) n.needs_grad = true;
    }
    if (n.needs_grad) n.backward = std::move(backward);
    return push(std::move(n));
}

template <typename T>
void Tape<T>::check_rank2(Var v, const char* who) const {
    if (nodes_[v.id].value.rank() != 2) {
        throw ShapeError(std::string(who) + ": expected rank-2 tensor, got " +
                         nodes_[v.id].value.shape_str());
    }
}

template <typename T>
Tensor<T>& Tape<T>::grad_acc(Var v) {
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    Tensor<T>& g = grads_[v.id];
    if (g.data.empty()) g = Tensor<T>::zeros(nodes_[v.id].value.shape);
    return g;
}

// ---------------------------------------------------------------------------
// matmul

template <typename T>
typename Tape<T>::Var Tape<T>::matmul(Var va, Var vb) {
    check_rank2(va, "matmul");
    check_rank2(vb, "matmul");
    const Tensor<T>& a = value(va);
    const Tensor<T>& b = value(vb);
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions disagree: " + a.shape_str() + " vs " +
                         b.shape_str());
    }
    const std::int64_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor<T> c = Tensor<T>::zeros({m, n});
    for (std::int64_t i = 0; i < m; ++i) {
        const T* arow = &a.data[i * k];
        T* crow = &c.data[i * n];
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const T av = arow[kk];
            const T* brow = &b.data[kk * n];
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return make_op({va, vb}, std::move(c), "matmul", [this, va, vb, m, k, n](const Tensor<T>& up) {
        const Tensor<T>& a = value(va);
        const Tensor<T>& b = value(vb);
        if (requires_grad(va)) {
            Tensor<T>& da = grad_acc(va);  // dA = up * B^T
            for (std::int64_t i = 0; i < m; ++i) {
                const T* urow = &up.data[i * n];
                T* drow = &da.data[i * k];
                for (std::int64_t kk = 0; kk < k; ++kk) {
                    const T* brow = &b.data[kk * n];
                    T s = T(0);
                    for (std::int64_t j = 0; j < n; ++j) s += urow[j] * brow[j];
                    drow[kk] += s;
                }
            }
        }
        if (requires_grad(vb)) {
            Tensor<T>& db = grad_acc(vb);  // dB = A^T * up
            for (std::int64_t i = 0; i < m; ++i) {
                const T* arow = &a.data[i * k];
                const T* urow = &up.data[i * n];
                for (std::int64_t kk = 0; kk < k; ++kk) {
                    const T av = arow[kk];
                    T* drow = &db.data[kk * n];
                    for (std::int64_t j = 0; j < n; ++j) drow[j] += av * urow[j];
                }
            }
        }
    });
}

template <typename T>
typename Tape<T>::Var Tape<T>::transpose(Var va) {
    check_rank2(va, "transpose");
    const Tensor<T>& a = value(va);
    const std::int64_t m = a.rows(), n = a.cols();
    Tensor<T> c = Tensor<T>::zeros({n, m});
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) c.at(j, i) = a.at(i, j);
    return make_op({va}, std::move(c), "transpose", [this, va, m, n](const Tensor<T>& up) {
        Tensor<T>& da = grad_acc(va);
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) da.at(i, j) += up.at(j, i);
    });
}

// ---------------------------------------------------------------------------
// elementwise with limited broadcast (b's extents equal a's or 1)

template <typename T>
typename Tape<T>::Var Tape<T>::add(Var va, Var vb) {
    const Tensor<T>& a = value(va);
    const Tensor<T>& b = value(vb);
    const bool scalar_b = b.is_scalar();
    if (!scalar_b && !broadcast_ok(a.shape, b.shape)) {
        throw ShapeError("add: incompatible shapes " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor<T> c = a;
    if (scalar_b) {
        const T s = b.scalar_value();
        for (auto& v : c.data) v += s;
    } else {
        const std::int64_t m = a.rows(), n = a.cols();
        const std::int64_t br = b.rows() == 1 ? 0 : 1, bc = b.cols() == 1 ? 0 : 1;
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) c.at(i, j) += b.at(i * br, j * bc);
    }
    return make_op({va, vb}, std::move(c), "add", [this, va, vb, scalar_b](const Tensor<T>& up) {
        if (requires_grad(va)) {
            Tensor<T>& da = grad_acc(va);
            for (std::size_t i = 0; i < up.data.size(); ++i) da.data[i] += up.data[i];
        }
        if (requires_grad(vb)) {
            Tensor<T>& db = grad_acc(vb);
            if (scalar_b) {
                T s = T(0);
                for (T u : up.data) s += u;
                db.data[0] += s;
            } else {
                const Tensor<T>& b = value(vb);
                const std::int64_t m = up.rows(), n = up.cols();
                const std::int64_t br = b.rows() == 1 ? 0 : 1, bc = b.cols() == 1 ? 0 : 1;
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j) db.at(i * br, j * bc) += up.at(i, j);
            }
        }
    });
}

template <typename T>
typename Tape<T>::Var Tape<T>::mul(Var va, Var vb) {
    const Tensor<T>& a = value(va);
    const Tensor<T>& b = value(vb);
    const bool scalar_b = b.is_scalar();
    if (!scalar_b && !broadcast_ok(a.shape, b.shape)) {
        throw ShapeError("mul: incompatible shapes " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor<T> c = a;
    if (scalar_b) {
        const T s = b.scalar_value();
        for (auto& v : c.data) v *= s;
    } else {
        const std::int64_t m = a.rows(), n = a.cols();
        const std::int64_t br = b.rows() == 1 ? 0 : 1, bc = b.cols() == 1 ? 0 : 1;
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) c.at(i, j) *= b.at(i * br, j * bc);
    }
    return make_op({va, vb}, std::move(c), "mul", [this, va, vb, scalar_b](const Tensor<T>& up) {
        const Tensor<T>& a = value(va);
        const Tensor<T>& b = value(vb);
        if (scalar_b) {
            const T s = b.scalar_value();
            if (requires_grad(va)) {
                Tensor<T>& da = grad_acc(va);
                for (std::size_t i = 0; i < up.data.size(); ++i) da.data[i] += up.data[i] * s;
            }
            if (requires_grad(vb)) {
                T acc = T(0);
                for (std::size_t i = 0; i < up.data.size(); ++i) acc += up.data[i] * a.data[i];
                grad_acc(vb).data[0] += acc;
            }
            return;
        }
        const std::int64_t m = a.rows(), n = a.cols();
        const std::int64_t br = b.rows() == 1 ? 0 : 1, bc = b.cols() == 1 ? 0 : 1;
        if (requires_grad(va)) {
            Tensor<T>& da = grad_acc(va);
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j) da.at(i, j) += up.at(i, j) * b.at(i * br, j * bc);
        }
        if (requires_grad(vb)) {
            Tensor<T>& db = grad_acc(vb);
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j) db.at(i * br, j * bc) += up.at(i, j) * a.at(i, j);
        }
    });
}

template <typename T>
typename Tape<T>::Var Tape<T>::sigmoid(Var vx) {
    Tensor<T> y = value(vx);
    for (auto& v : y.data) v = sigmoid_scalar(v);
    return make_op({vx}, std::move(y), "sigmoid", [this, vx, me = size()](const Tensor<T>& up) {
        const Tensor<T>& y = nodes_[me].value;
        Tensor<T>& dx = grad_acc(vx);
        for (std::size_t i = 0; i < up.data.size(); ++i) {
            const T s = y.data[i];
            dx.data[i] += up.data[i] * s * (T(1) - s);
        }
    });
}

template <typename T>
typename Tape<T>::Var Tape<T>::gelu(Var vx) {
    Tensor<T> y = value(vx);
    for (auto& v : y.data) {
        const double x = static_cast<double>(v);
        v = static_cast<T>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
    }
    return make_op({vx}, std::move(y), "gelu", [this, vx](const Tensor<T>& up) {
        const Tensor<T>& x = value(vx);
        Tensor<T>& dx = grad_acc(vx);
        for (std::size_t i = 0; i < up.data.size(); ++i) {
            const double z = static_cast<double>(x.data[i]);
            const double cdf = 0.5 * (1.0 + std::erf(z * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * z * z);
            dx.data[i] += up.data[i] * static_cast<T>(cdf + z * pdf);
        }
    });
}

template <typename T>
typename Tape<T>::Var Tape<T>::scale_shift(Var vx, Var valpha, Var vbeta) {
    const Tensor<T>& x = value(vx);
    const Tensor<T>& al = value(valpha);
    const Tensor<T>& be = value(vbeta);
    if (!al.is_scalar() || !be.is_scalar()) {
        throw ShapeError("scale_shift: alpha/beta must be scalars, got " + al.shape_str() + " / " +
                         be.shape_str());
    }
    Tensor<T> y = x;
    const T a = al.scalar_value(), b = be.scalar_value();
    for (auto& v : y.data) v = a * v + b;
    return make_op({vx, valpha, vbeta}, std::move(y), "scale_shift",
                   [this, vx, valpha, vbeta](const Tensor<T>& up) {
                       const Tensor<T>& x = value(vx);
                       const T a = value(valpha).scalar_value();
                       if (requires_grad(vx)) {
                           Tensor<T>& dx = grad_acc(vx);
                           for (std::size_t i = 0; i < up.data.size(); ++i)
                               dx.data[i] += up.data[i] * a;
                       }
                       if (requires_grad(valpha)) {
                           T s = T(0);
                           for (std::size_t i = 0; i < up.data.size(); ++i)
                               s += up.data[i] * x.data[i];
                           grad_acc(valpha).data[0] += s;
                       }
                       if (requires_grad(vbeta)) {
                           T s = T(0);
                           for (T u : up.data) s += u;
                           grad_acc(vbeta).data[0] += s;
                       }
                   });
}

template <typename T>
typename Tape<T>::Var Tape<T>::scale_const(Var vx, T c) {
    Tensor<T> y = value(vx);
    for (auto& v : y.data) v *= c;
    return make_op({vx}, std::move(y), "scale_const", [this, vx, c](const Tensor<T>& up) {
        Tensor<T>& dx = grad_acc(vx);
        for (std::size_t i = 0; i < up.data.size(); ++i) dx.data[i] += up.data[i] * c;
    });
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
typename Tape<T>::Var Tape<T>::sum(Var vx, int axis) {
    check_rank2(vx, "sum");
    const Tensor<T>& x = value(vx);
    if (axis < 0 || axis >= x.rank()) throw DomainError("sum: axis out of range");
    if (x.shape[axis] == 0) throw DomainError("sum: empty axis extent");
    const std::int64_t m = x.rows(), n = x.cols();
    Tensor<T> y = axis == 0 ? Tensor<T>::zeros({1, n}) : Tensor<T>::zeros({m, 1});
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
            if (axis == 0)
                y.at(0, j) += x.at(i, j);
            else
                y.at(i, 0) += x.at(i, j);
        }
    return make_op({vx}, std::move(y), "sum", [this, vx, axis, m, n](const Tensor<T>& up) {
        Tensor<T>& dx = grad_acc(vx);
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j)
                dx.at(i, j) += axis == 0 ? up.at(0, j) : up.at(i, 0);
    });
}

template <typename T>
typename Tape<T>::Var Tape<T>::mean(Var vx, int axis) {
    Var s = sum(vx, axis);
    const T inv = T(1) / static_cast<T>(value(vx).shape[axis]);
    return scale_const(s, inv);
}

template <typename T>
typename Tape<T>::Var Tape<T>::sum_all(Var vx) {
    const Tensor<T>& x = value(vx);
    T acc = T(0);
    for (T v : x.data) acc += v;
    return make_op({vx}, Tensor<T>::scalar(acc), "sum_all", [this, vx](const Tensor<T>& up) {
        const T u = up.scalar_value();
        Tensor<T>& dx = grad_acc(vx);
        for (auto& v : dx.data) v += u;
    });
}

template <typename T>
typename Tape<T>::Var Tape<T>::mean_all(Var vx) {
    const std::int64_t n = value(vx).numel();
    if (n == 0) throw DomainError("mean_all: empty tensor");
    return scale_const(sum_all(vx), T(1) / static_cast<T>(n));
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& m) {
    const std::int64_t rows = m.rows(), cols = m.cols();
    std::vector<int> out(static_cast<std::size_t>(rows));
    for (std::int64_t i = 0; i < rows; ++i) {
        std::int64_t best = 0;
        T bv = m.at(i, 0);
        for (std::int64_t j = 1; j < cols; ++j) {
            if (m.at(i, j) > bv) {  // strict: ties keep the lowest index
                bv = m.at(i, j);
                best = j;
            }
        }
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::max_index(Var vx, int axis) {
    check_rank2(vx, "max_index");
    const Tensor<T>& x = value(vx);
    if (axis < 0 || axis >= x.rank()) throw DomainError("max_index: axis out of range");
    if (x.shape[axis] == 0) throw DomainError("max_index: empty axis extent");
    const std::int64_t m = x.rows(), n = x.cols();
    Tensor<T> y;
    if (axis == 1) {
        y = Tensor<T>::zeros({m, 1});
        auto idx = argmax_rows(x);
        for (std::int64_t i = 0; i < m; ++i) y.at(i, 0) = static_cast<T>(idx[i]);
    } else {
        y = Tensor<T>::zeros({1, n});
        for (std::int64_t j = 0; j < n; ++j) {
            std::int64_t best = 0;
            T bv = x.at(0, j);
            for (std::int64_t i = 1; i < m; ++i) {
                if (x.at(i, j) > bv) {
                    bv = x.at(i, j);
                    best = i;
                }
            }
            y.at(0, j) = static_cast<T>(best);
        }
    }
    // Gradient barrier: the result is an index tensor, nothing flows back.
    Node node;
    node.value = std::move(y);
    node.needs_grad = false;
    node.label = "max_index";
    return push(std::move(node));
}

// ---------------------------------------------------------------------------
// gather / structural ops

template <typename T>
typename Tape<T>::Var Tape<T>::gather_rows(Var vsrc, std::span<const int> idx) {
    check_rank2(vsrc, "gather_rows");
    const Tensor<T>& src = value(vsrc);
    const std::int64_t c = src.cols();
    Tensor<T> y = Tensor<T>::zeros({static_cast<std::int64_t>(idx.size()), c});
    for (std::size_t n = 0; n < idx.size(); ++n) {
        const T* row = &src.data[static_cast<std::int64_t>(idx[n]) * c];
        std::copy(row, row + c, &y.data[static_cast<std::int64_t>(n) * c]);
    }
    std::vector<int> own(idx.begin(), idx.end());
    return make_op({vsrc}, std::move(y), "gather_rows",
                   [this, vsrc, own = std::move(own), c](const Tensor<T>& up) {
                       Tensor<T>& d = grad_acc(vsrc);
                       for (std::size_t n = 0; n < own.size(); ++n) {
                           T* drow = &d.data[static_cast<std::int64_t>(own[n]) * c];
                           const T* urow = &up.data[static_cast<std::int64_t>(n) * c];
                           for (std::int64_t j = 0; j < c; ++j) drow[j] += urow[j];
                       }
                   });
}

template <typename T>
typename Tape<T>::Var Tape<T>::select_per_row(Var vm, std::span<const int> idx) {
    check_rank2(vm, "select_per_row");
    const Tensor<T>& m = value(vm);
    if (static_cast<std::int64_t>(idx.size()) != m.rows()) {
        throw ShapeError("select_per_row: index count " + std::to_string(idx.size()) +
                         " does not match " + m.shape_str());
    }
    Tensor<T> y = Tensor<T>::zeros({m.rows(), 1});
    for (std::int64_t i = 0; i < m.rows(); ++i) y.at(i, 0) = m.at(i, idx[i]);
    std::vector<int> own(idx.begin(), idx.end());
    return make_op({vm}, std::move(y), "select_per_row",
                   [this, vm, own = std::move(own)](const Tensor<T>& up) {
                       Tensor<T>& d = grad_acc(vm);
                       for (std::size_t i = 0; i < own.size(); ++i)
                           d.at(static_cast<std::int64_t>(i), own[i]) +=
                               up.at(static_cast<std::int64_t>(i), 0);
                   });
}

template <typename T>
typename Tape<T>::Var Tape<T>::adaptive_avg_pool(Var vx, GridShape in, GridShape out) {
    check_rank2(vx, "adaptive_avg_pool");
    const Tensor<T>& x = value(vx);
    if (x.rows() != in.numel()) {
        throw ShapeError("adaptive_avg_pool: grid " + std::to_string(in.h) + "x" +
                         std::to_string(in.w) + " does not match " + x.shape_str());
    }
    if (out.h < 1 || out.w < 1 || out.h > in.h || out.w > in.w) {
        throw ShapeError("adaptive_avg_pool: output grid " + std::to_string(out.h) + "x" +
                         std::to_string(out.w) + " exceeds input grid " + std::to_string(in.h) +
                         "x" + std::to_string(in.w));
    }
    const std::int64_t c = x.cols();
    Tensor<T> y = Tensor<T>::zeros({static_cast<std::int64_t>(out.numel()), c});
    // Window for output cell (i,j): rows [floor(i*h/oh), ceil((i+1)*h/oh)).
    auto lo = [](int i, int n, int o) { return (i * n) / o; };
    auto hi = [](int i, int n, int o) { return ((i + 1) * n + o - 1) / o; };
    for (int oi = 0; oi < out.h; ++oi) {
        for (int oj = 0; oj < out.w; ++oj) {
            const int r0 = lo(oi, in.h, out.h), r1 = hi(oi, in.h, out.h);
            const int c0 = lo(oj, in.w, out.w), c1 = hi(oj, in.w, out.w);
            const T inv = T(1) / static_cast<T>((r1 - r0) * (c1 - c0));
            T* yrow = &y.data[(static_cast<std::int64_t>(oi) * out.w + oj) * c];
            for (int r = r0; r < r1; ++r)
                for (int cc = c0; cc < c1; ++cc) {
                    const T* xrow = &x.data[(static_cast<std::int64_t>(r) * in.w + cc) * c];
                    for (std::int64_t ch = 0; ch < c; ++ch) yrow[ch] += xrow[ch] * inv;
                }
        }
    }
    return make_op({vx}, std::move(y), "adaptive_avg_pool",
                   [this, vx, in, out, c, lo, hi](const Tensor<T>& up) {
                       Tensor<T>& dx = grad_acc(vx);
                       for (int oi = 0; oi < out.h; ++oi)
                           for (int oj = 0; oj < out.w; ++oj) {
                               const int r0 = lo(oi, in.h, out.h), r1 = hi(oi, in.h, out.h);
                               const int c0 = lo(oj, in.w, out.w), c1 = hi(oj, in.w, out.w);
                               const T inv = T(1) / static_cast<T>((r1 - r0) * (c1 - c0));
                               const T* urow =
                                   &up.data[(static_cast<std::int64_t>(oi) * out.w + oj) * c];
                               for (int r = r0; r < r1; ++r)
                                   for (int cc = c0; cc < c1; ++cc) {
                                       T* drow =
                                           &dx.data[(static_cast<std::int64_t>(r) * in.w + cc) * c];
                                       for (std::int64_t ch = 0; ch < c; ++ch)
                                           drow[ch] += urow[ch] * inv;
                                   }
                           }
                   });
}

template <typename T>
typename Tape<T>::Var Tape<T>::patchify(Var vimg, int patch) {
    const Tensor<T>& img = value(vimg);
    if (img.rank() != 3) {
        throw ShapeError("patchify: expected [C,H,W], got " + img.shape_str());
    }
    const std::int64_t c = img.shape[0], h = img.shape[1], w = img.shape[2];
    if (patch <= 0 || h % patch != 0 || w % patch != 0) {
        throw ConfigError("patchify: image " + img.shape_str() + " not divisible by patch " +
                          std::to_string(patch));
    }
    const std::int64_t hb = h / patch, wb = w / patch;
    const std::int64_t cols = c * patch * patch;
    Tensor<T> y = Tensor<T>::zeros({hb * wb, cols});
    for (std::int64_t bi = 0; bi < hb; ++bi)
        for (std::int64_t bj = 0; bj < wb; ++bj) {
            T* row = &y.data[(bi * wb + bj) * cols];
            std::int64_t k = 0;
            for (std::int64_t ch = 0; ch < c; ++ch)
                for (std::int64_t di = 0; di < patch; ++di)
                    for (std::int64_t dj = 0; dj < patch; ++dj)
                        row[k++] = img.data[(ch * h + bi * patch + di) * w + bj * patch + dj];
        }
    return make_op({vimg}, std::move(y), "patchify",
                   [this, vimg, c, h, w, patch, hb, wb, cols](const Tensor<T>& up) {
                       Tensor<T>& d = grad_acc(vimg);
                       for (std::int64_t bi = 0; bi < hb; ++bi)
                           for (std::int64_t bj = 0; bj < wb; ++bj) {
                               const T* row = &up.data[(bi * wb + bj) * cols];
                               std::int64_t k = 0;
                               for (std::int64_t ch = 0; ch < c; ++ch)
                                   for (std::int64_t di = 0; di < patch; ++di)
                                       for (std::int64_t dj = 0; dj < patch; ++dj)
                                           d.data[(ch * h + bi * patch + di) * w + bj * patch +
                                                  dj] += row[k++];
                           }
                   });
}

template <typename T>
typename Tape<T>::Var Tape<T>::layer_norm(Var vx, Var vgamma, Var vbeta, T eps) {
    check_rank2(vx, "layer_norm");
    const Tensor<T>& x = value(vx);
    const Tensor<T>& gamma = value(vgamma);
    const Tensor<T>& beta = value(vbeta);
    const std::int64_t m = x.rows(), n = x.cols();
    if (gamma.numel() != n || beta.numel() != n) {
        throw ShapeError("layer_norm: affine shape " + gamma.shape_str() + " does not match " +
                         x.shape_str());
    }
    Tensor<T> y = Tensor<T>::zeros({m, n});
    std::vector<T> mean(m), inv_std(m);
    for (std::int64_t i = 0; i < m; ++i) {
        const T* row = &x.data[i * n];
        T mu = T(0);
        for (std::int64_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<T>(n);
        T var = T(0);
        for (std::int64_t j = 0; j < n; ++j) {
            const T d = row[j] - mu;
            var += d * d;
        }
        var /= static_cast<T>(n);
        const T is = T(1) / std::sqrt(var + eps);
        mean[i] = mu;
        inv_std[i] = is;
        T* yrow = &y.data[i * n];
        for (std::int64_t j = 0; j < n; ++j)
            yrow[j] = gamma.data[j] * (row[j] - mu) * is + beta.data[j];
    }
    return make_op(
        {vx, vgamma, vbeta}, std::move(y), "layer_norm",
        [this, vx, vgamma, vbeta, m, n, mean = std::move(mean),
         inv_std = std::move(inv_std)](const Tensor<T>& up) {
            const Tensor<T>& x = value(vx);
            const Tensor<T>& gamma = value(vgamma);
            const bool need_x = requires_grad(vx);
            const bool need_g = requires_grad(vgamma);
            const bool need_b = requires_grad(vbeta);
            std::vector<T> xhat(n);
            for (std::int64_t i = 0; i < m; ++i) {
                const T* xrow = &x.data[i * n];
                const T* urow = &up.data[i * n];
                for (std::int64_t j = 0; j < n; ++j) xhat[j] = (xrow[j] - mean[i]) * inv_std[i];
                if (need_g) {
                    Tensor<T>& dg = grad_acc(vgamma);
                    for (std::int64_t j = 0; j < n; ++j) dg.data[j] += urow[j] * xhat[j];
                }
                if (need_b) {
                    Tensor<T>& db = grad_acc(vbeta);
                    for (std::int64_t j = 0; j < n; ++j) db.data[j] += urow[j];
                }
                if (need_x) {
                    Tensor<T>& dx = grad_acc(vx);
                    T sum_g = T(0), sum_gx = T(0);
                    for (std::int64_t j = 0; j < n; ++j) {
                        const T g = urow[j] * gamma.data[j];
                        sum_g += g;
                        sum_gx += g * xhat[j];
                    }
                    const T inv_n = T(1) / static_cast<T>(n);
                    T* drow = &dx.data[i * n];
                    for (std::int64_t j = 0; j < n; ++j) {
                        const T g = urow[j] * gamma.data[j];
                        drow[j] += inv_std[i] * (g - sum_g * inv_n - xhat[j] * sum_gx * inv_n);
                    }
                }
            }
        });
}

template <typename T>
typename Tape<T>::Var Tape<T>::softmax_cross_entropy(Var vlogits, std::span<const int> labels) {
    check_rank2(vlogits, "softmax_cross_entropy");
    const Tensor<T>& z = value(vlogits);
    const std::int64_t b = z.rows(), k = z.cols();
    if (static_cast<std::int64_t>(labels.size()) != b) {
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for logits " + z.shape_str());
    }
    Tensor<T> probs = Tensor<T>::zeros({b, k});
    T loss = T(0);
    for (std::int64_t i = 0; i < b; ++i) {
        const int y = labels[i];
        if (y < 0 || y >= k) {
            throw ArgumentError("softmax_cross_entropy: label " + std::to_string(y) +
                                " outside [0," + std::to_string(k) + ")");
        }
        const T* row = &z.data[i * k];
        T mx = row[0];
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        T denom = T(0);
        T* prow = &probs.data[i * k];
        for (std::int64_t j = 0; j < k; ++j) {
            prow[j] = std::exp(row[j] - mx);
            denom += prow[j];
        }
        for (std::int64_t j = 0; j < k; ++j) prow[j] /= denom;
        loss += std::log(denom) + mx - row[y];
    }
    loss /= static_cast<T>(b);
    std::vector<int> own(labels.begin(), labels.end());
    return make_op({vlogits}, Tensor<T>::scalar(loss), "softmax_cross_entropy",
                   [this, vlogits, b, k, probs = std::move(probs),
                    own = std::move(own)](const Tensor<T>& up) {
                       const T u = up.scalar_value() / static_cast<T>(b);
                       Tensor<T>& d = grad_acc(vlogits);
                       for (std::int64_t i = 0; i < b; ++i) {
                           const T* prow = &probs.data[i * k];
                           T* drow = &d.data[i * k];
                           for (std::int64_t j = 0; j < k; ++j) drow[j] += u * prow[j];
                           drow[own[i]] -= u;
                       }
                   });
}

// ---------------------------------------------------------------------------
// backward

template <typename T>
void Tape<T>::backward(Var root) {
    if (!root.valid() || static_cast<std::size_t>(root.id) >= nodes_.size()) {
        throw ContractError("backward: root is not on this tape");
    }
    if (!value(root).is_scalar()) {
        throw ContractError("backward: root must be scalar, got " + value(root).shape_str());
    }
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    // Interior gradients are pass-local; leaf gradients accumulate across calls.
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (!nodes_[i].persistent_grad && !grads_[i].data.empty()) {
            grads_[i] = Tensor<T>();
        }
    }
    grad_acc(root).data[0] += T(1);
    for (std::int32_t id = root.id; id >= 0; --id) {
        const Node& n = nodes_[id];
        if (!n.needs_grad || !n.backward) continue;
        if (grads_[id].data.empty()) continue;
        n.backward(grads_[id]);
    }
}

template <typename T>
void Tape<T>::accumulate_param_grads(T scale) {
    harvest_param_grads([scale](Param<T>& p, const Tensor<T>& g) {
        for (std::size_t i = 0; i < g.data.size(); ++i) p.grad.data[i] += scale * g.data[i];
    });
}

template <typename T>
void Tape<T>::harvest_param_grads(const std::function<void(Param<T>&, const Tensor<T>&)>& fn) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].param == nullptr) continue;
        if (i >= grads_.size() || grads_[i].data.empty()) continue;
        fn(*nodes_[i].param, grads_[i]);
    }
}

template class Tape<float>;
template class Tape<double>;
template std::vector<int> argmax_rows<float>(const Tensor<float>&);
template std::vector<int> argmax_rows<double>(const Tensor<double>&);

}  // namespace fec
